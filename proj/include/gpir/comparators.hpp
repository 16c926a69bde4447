
#include <cmath>
#include <random>
#include <string>

#include <Eigen/Core>
#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "gpir/draws.hpp"
#include "gpir/error.hpp"
#include "gpir/kernels.hpp"
#include "gpir/sphere_geom.hpp"


#ifndef _GPIR_COMPARATORS_
#define _GPIR_COMPARATORS_


namespace gpir {

  namespace detail {

    inline posterior_draws empty_draws( const int s, const int p,
                                        const int m,
                                        const std::string& variant ) {
      posterior_draws d;
      d.p = p;
      d.m = m;
      d.variant = variant;
      d.beta.resize( s, static_cast<Eigen::Index>(p) * m );
      d.chain_ends = { s };
      return d;
    };

    template< typename URNG >
    Eigen::MatrixXd standard_normal( const Eigen::Index r,
                                     const Eigen::Index c, URNG& rng ) {
      std::normal_distribution<double> normal(0, 1);
      Eigen::MatrixXd z( r, c );
      for ( Eigen::Index j = 0; j < c; j++ )
        for ( Eigen::Index i = 0; i < r; i++ ) z(i, j) = normal(rng);
      return z;
    };

  }  // namespace detail


  /*! Vertex-wise regression under p(beta, sigma2) ~ 1 / sigma2
   *
   * Exact draws: sigma2 ~ Inv-Gamma((N - P)/2, RSS/2), then
   * beta | sigma2 ~ N(beta_ls, sigma2 (X'X)^-1). images: M x N.
   */
  template< typename URNG >
  posterior_draws fit_glm( const Eigen::MatrixXd& x,
                           const Eigen::MatrixXd& images,
                           const int draws,
                           URNG& rng,
                           const std::string& variant = "glm" ) {
    const int n = static_cast<int>( x.rows() );
    const int p = static_cast<int>( x.cols() );
    const int m = static_cast<int>( images.rows() );
    if ( images.cols() != n )
      throw argument_error("fit_glm: images must be M x N");
    if ( n <= p ) throw data_error("fit_glm: need N > P");
    const Eigen::MatrixXd xtx = x.transpose() * x;
    Eigen::LLT<Eigen::MatrixXd> llt( xtx );
    if ( llt.info() != Eigen::Success )
      throw data_error("fit_glm: X'X is singular");
    const Eigen::MatrixXd bhat =
      llt.solve( x.transpose() * images.transpose() ).transpose();  /* M x P */
    const Eigen::VectorXd rss =
      (images - bhat * x.transpose()).rowwise().squaredNorm();
    /* beta = bhat + sigma * L^-T z with X'X = L L' */
    const Eigen::MatrixXd linv_t = llt.matrixU().solve(
      Eigen::MatrixXd::Identity(p, p) );
    posterior_draws d = detail::empty_draws( draws, p, m, variant );
    d.sigma2.resize( draws, m );
    const double shape = 0.5 * (n - p);
    for ( int s = 0; s < draws; s++ ) {
      for ( int v = 0; v < m; v++ ) {
        std::gamma_distribution<double> g( shape, 1 / (0.5 * rss[v]) );
        d.sigma2(s, v) = rss[v] > 0 ? 1 / g(rng) : 0;
      }
      const Eigen::MatrixXd z = detail::standard_normal( p, m, rng );
      const Eigen::MatrixXd b = bhat +
        ( (linv_t * z).array().rowwise() *
          d.sigma2.row(s).array().sqrt() ).matrix().transpose();
      d.beta.row(s) = Eigen::Map<const Eigen::RowVectorXd>( b.data(),
                                                            b.size() );
    }
    return d;
  };


  /*! Row-normalized kernel smoother W with W_ij = C(d_ij) / sum_k C(d_ik) */
  inline Eigen::MatrixXd smoothing_matrix( const spherical_mesh& mesh,
                                           const correlation_model& kernel ) {
    Eigen::MatrixXd w = dense_correlation( mesh, kernel, false );
    const Eigen::VectorXd rs = w.rowwise().sum();
    return rs.cwiseInverse().asDiagonal() * w;
  };


  /*! Smooth each image, then fit_glm */
  template< typename URNG >
  posterior_draws fit_glm_ps( const Eigen::MatrixXd& x,
                              const Eigen::MatrixXd& images,
                              const spherical_mesh& mesh,
                              const int draws,
                              URNG& rng,
                              const correlation_model& smoother =
                                correlation_from_fwhm(6, 1) ) {
    const Eigen::MatrixXd ys = smoothing_matrix( mesh, smoother ) * images;
    return fit_glm( x, ys, draws, rng, "glm_ps" );
  };




  /*! Known covariance structure for the oracle and low-rank fits
   *
   * beta_j ~ GP(0, beta_var[j] C_beta); errors have covariance
   * H = tau2 C_omega + sigma2 I.
   */
  struct known_covariance {
    correlation_model beta_kernel;
    Eigen::VectorXd beta_var;   /* P */
    correlation_model omega_kernel;
    double tau2 = 0;
    double sigma2 = 1;
  };

  constexpr int dense_oracle_limit = 8000;


  namespace detail {

    /* X'X (x) H^-1 as a dense MP x MP matrix (coefficient-major) and
     * the right-hand side vec(H^-1 Y X) */
    inline void gaussian_system( const Eigen::MatrixXd& x,
                                 const Eigen::MatrixXd& images,
                                 const Eigen::MatrixXd& h_inv,
                                 Eigen::MatrixXd& a,
                                 Eigen::VectorXd& rhs ) {
      const int p = static_cast<int>( x.cols() );
      const int m = static_cast<int>( h_inv.rows() );
      const Eigen::MatrixXd xtx = x.transpose() * x;
      a.resize( static_cast<Eigen::Index>(p) * m, static_cast<Eigen::Index>(p) * m );
      for ( int j = 0; j < p; j++ )
        for ( int k = 0; k < p; k++ )
          a.block( j * m, k * m, m, m ) = xtx(j, k) * h_inv;
      const Eigen::MatrixXd r = h_inv * images * x;   /* M x P */
      rhs = Eigen::Map<const Eigen::VectorXd>( r.data(), r.size() );
    };

    inline Eigen::MatrixXd error_precision( const spherical_mesh& mesh,
                                            const known_covariance& kc ) {
      Eigen::MatrixXd h = kc.tau2 > 0 ?
        Eigen::MatrixXd( kc.tau2 * dense_correlation(mesh, kc.omega_kernel,
                                                     false) ) :
        Eigen::MatrixXd::Zero( mesh.size(), mesh.size() );
      h.diagonal().array() += kc.sigma2;
      Eigen::LLT<Eigen::MatrixXd> llt( h );
      if ( llt.info() != Eigen::Success )
        throw numerical_error("oracle: error covariance not positive "
                              "definite");
      return llt.solve( Eigen::MatrixXd::Identity(h.rows(), h.cols()) );
    };

  }  // namespace detail


  /*! Exact Gaussian posterior of beta with all covariances known
   *
   * precision = X'X (x) H^-1 + Z^-1 (x) C_beta^-1,
   * mean = precision^-1 vec(H^-1 Y X).
   */
  template< typename URNG >
  posterior_draws fit_oracle( const Eigen::MatrixXd& x,
                              const Eigen::MatrixXd& images,
                              const spherical_mesh& mesh,
                              const known_covariance& kc,
                              const int draws,
                              URNG& rng,
                              Eigen::MatrixXd* mean_out = nullptr ) {
    const int p = static_cast<int>( x.cols() );
    const int m = mesh.size();
    if ( static_cast<long long>(p) * m > dense_oracle_limit )
      throw argument_error("fit_oracle: M P = " + std::to_string(p * m) +
                           " exceeds the dense limit " +
                           std::to_string(dense_oracle_limit) +
                           "; use a smaller disc");
    if ( kc.beta_var.size() != p || images.rows() != m ||
         images.cols() != x.rows() )
      throw argument_error("fit_oracle: dimension mismatch");
    const Eigen::MatrixXd h_inv = detail::error_precision( mesh, kc );
    Eigen::MatrixXd q;
    Eigen::VectorXd rhs;
    detail::gaussian_system( x, images, h_inv, q, rhs );
    const Eigen::MatrixXd cb = dense_correlation( mesh, kc.beta_kernel, false );
    Eigen::LLT<Eigen::MatrixXd> cllt( cb );
    if ( cllt.info() != Eigen::Success )
      throw numerical_error("fit_oracle: prior correlation not positive "
                            "definite");
    const Eigen::MatrixXd cb_inv =
      cllt.solve( Eigen::MatrixXd::Identity(m, m) );
    for ( int j = 0; j < p; j++ )
      q.block( j * m, j * m, m, m ) += cb_inv / kc.beta_var[j];
    Eigen::LLT<Eigen::MatrixXd> llt( q );
    if ( llt.info() != Eigen::Success )
      throw numerical_error("fit_oracle: posterior precision not positive "
                            "definite");
    const Eigen::VectorXd mu = llt.solve( rhs );
    if ( mean_out )
      *mean_out = Eigen::Map<const Eigen::MatrixXd>( mu.data(), m, p );
    posterior_draws d = detail::empty_draws( draws, p, m, "oracle" );
    const Eigen::MatrixXd z =
      detail::standard_normal( static_cast<Eigen::Index>(p) * m, draws, rng );
    const Eigen::MatrixXd dev = llt.matrixU().solve( z );
    d.beta = ( dev.colwise() + mu ).transpose();
    return d;
  };


  /*! Posterior in the leading eigenbasis of the prior
   *
   * Keeps, per coefficient, the fewest eigenvectors of C_beta whose
   * eigenvalues reach `fraction` of the trace. With Phi the kept
   * vectors and Lambda their prior variances, the reduced posterior
   * covariance is  S (I + S Phi' A Phi S)^-1 S,  S = Lambda^1/2.
   */
  template< typename URNG >
  posterior_draws fit_low_rank( const Eigen::MatrixXd& x,
                                const Eigen::MatrixXd& images,
                                const spherical_mesh& mesh,
                                const known_covariance& kc,
                                const double fraction,
                                const int draws,
                                URNG& rng,
                                int* kept = nullptr,
                                Eigen::MatrixXd* mean_out = nullptr ) {
    if ( !(fraction > 0 && fraction <= 1) )
      throw argument_error("fit_low_rank: fraction must be in (0, 1]");
    const int p = static_cast<int>( x.cols() );
    const int m = mesh.size();
    if ( static_cast<long long>(p) * m > dense_oracle_limit )
      throw argument_error("fit_low_rank: M P exceeds the dense limit; use "
                           "a smaller disc");
    if ( kc.beta_var.size() != p || images.rows() != m ||
         images.cols() != x.rows() )
      throw argument_error("fit_low_rank: dimension mismatch");
    const Eigen::MatrixXd cb = dense_correlation( mesh, kc.beta_kernel, false );
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es( cb );
    const Eigen::VectorXd lam = es.eigenvalues().reverse().cwiseMax(0);
    const Eigen::MatrixXd phi_all = es.eigenvectors().rowwise().reverse();
    const double total = lam.sum();
    int k = 0;
    double acc = 0;
    while ( k < m && (acc < fraction * total * (1 - 1e-12) || fraction >= 1) ) {
      acc += lam[k++];
      if ( fraction >= 1 && k == m ) break;
    }
    if ( fraction >= 1 ) k = m;
    if ( kept ) *kept = k * p;
    const Eigen::MatrixXd phi = phi_all.leftCols(k);

    const Eigen::MatrixXd h_inv = detail::error_precision( mesh, kc );
    const Eigen::MatrixXd xtx = x.transpose() * x;
    const Eigen::MatrixXd g = phi.transpose() * h_inv * phi;   /* k x k */
    const int dim = p * k;
    Eigen::VectorXd sdiag( dim );
    for ( int j = 0; j < p; j++ )
      sdiag.segment( j * k, k ) =
        (kc.beta_var[j] * lam.head(k)).cwiseMax(0).cwiseSqrt();
    Eigen::MatrixXd inner = Eigen::MatrixXd::Identity( dim, dim );
    for ( int a = 0; a < p; a++ )
      for ( int b = 0; b < p; b++ )
        inner.block( a * k, b * k, k, k ) +=
          xtx(a, b) * sdiag.segment(a * k, k).asDiagonal() * g *
          sdiag.segment(b * k, k).asDiagonal();
    Eigen::LLT<Eigen::MatrixXd> llt( inner );
    if ( llt.info() != Eigen::Success )
      throw numerical_error("fit_low_rank: reduced system not positive "
                            "definite");
    const Eigen::MatrixXd r = phi.transpose() * (h_inv * images * x);  /* k x P */
    const Eigen::VectorXd rv = Eigen::Map<const Eigen::VectorXd>( r.data(),
                                                                  r.size() );
    /* alpha mean = S (I + S A S)^-1 S r */
    const Eigen::VectorXd amean =
      sdiag.asDiagonal() * llt.solve( sdiag.asDiagonal() * rv );
    if ( mean_out )
      *mean_out = phi * Eigen::Map<const Eigen::MatrixXd>( amean.data(), k, p );
    const Eigen::MatrixXd z = detail::standard_normal( dim, draws, rng );
    const Eigen::MatrixXd adev =
      sdiag.asDiagonal() * Eigen::MatrixXd( llt.matrixU().solve(z) );
    posterior_draws d = detail::empty_draws( draws, p, m, "low_rank" );
    for ( int s = 0; s < draws; s++ ) {
      const Eigen::VectorXd a = amean + adev.col(s);
      const Eigen::MatrixXd am = Eigen::Map<const Eigen::MatrixXd>(
        a.data(), k, p );
      const Eigen::MatrixXd b = phi * am;   /* M x P */
      d.beta.row(s) = Eigen::Map<const Eigen::RowVectorXd>( b.data(),
                                                            b.size() );
    }
    return d;
  };

}  // namespace gpir

#endif  // _GPIR_COMPARATORS_
