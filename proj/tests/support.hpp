#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include "gpir/kernels.hpp"
#include "gpir/model_core.hpp"
#include "gpir/samplers.hpp"
#include "gpir/sphere_geom.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_TEST_SUPPORT_
#define _GPIR_TEST_SUPPORT_


namespace gpir::testing {

  /* The m vertices of a Fibonacci sphere closest to one of its points */
  inline spherical_mesh disc( const int m, const int sphere_points = 4000 ) {
    const spherical_mesh full = fibonacci_sphere( sphere_points, 100 );
    const int c = sphere_points / 2;
    std::vector<int> ids( full.size() );
    std::iota( ids.begin(), ids.end(), 0 );
    std::stable_sort( ids.begin(), ids.end(), [&]( int a, int b ) {
      return full.distance(c, a) < full.distance(c, b); } );
    ids.resize( m );
    return full.subset( ids );
  }

  template< typename URNG >
  Eigen::MatrixXd gaussian( const int r, const int c, URNG& rng ) {
    std::normal_distribution<double> z(0, 1);
    Eigen::MatrixXd a( r, c );
    for ( int j = 0; j < c; j++ )
      for ( int i = 0; i < r; i++ ) a(i, j) = z(rng);
    return a;
  }

  inline sufficient_stats stats_of( const design_factor& d,
                                    const Eigen::MatrixXd& y ) {
    matrix_image_source src( y );
    return stream_sufficient_stats( d, src );
  }


  /* Small simulated regression problem on a disc with GP coefficients */
  struct problem {
    spherical_mesh mesh;
    correlation_model kernel;
    neighbor_index nbrs;
    neighbor_index mass_nbrs;
    vecchia_precision prior;
    vecchia_precision mass;
    Eigen::MatrixXd x;       /* N x P */
    Eigen::MatrixXd beta;    /* M x P */
    Eigen::MatrixXd y;       /* M x N */
    design_factor design;
    sufficient_stats stats;

    problem( const int m, const int n, const int p, const unsigned seed,
             const double noise_sd = 0.5, const double fwhm = 6,
             const double prior_radius = 8, const double mass_radius = 3 ) :
      mesh( disc(m) ),
      kernel( correlation_from_fwhm(fwhm, 1) ),
      nbrs( build_neighbor_index(mesh, prior_radius) ),
      mass_nbrs( build_neighbor_index(mesh, mass_radius) ),
      prior( build_vecchia(mesh, nbrs, kernel) ),
      mass( build_vecchia(mesh, mass_nbrs, kernel) ) {
      std::mt19937_64 rng( seed );
      x = gaussian( n, p, rng );
      x.col(0).setOnes();
      beta.resize( m, p );
      for ( int j = 0; j < p; j++ ) beta.col(j) = prior.sample( 1.0, rng );
      y = beta * x.transpose() + noise_sd * gaussian( m, n, rng );
      design = factorize_design( x );
      stats = stats_of( design, y );
    }

    spatial_prior spatial() const { return { &prior, &mass }; }
  };


  /* Gaussian posterior of vec(B) (index j*M + s) given the variances,
   * written directly in coefficient space from the model:
   *   precision = X'X (x) Sigma^-1 + diag(1/(zeta2_j tau2)) (x) C~^-1
   *   shift     = vec(Sigma^-1 Y X)
   */
  struct gaussian_posterior {
    Eigen::MatrixXd mean;   /* M x P */
    Eigen::MatrixXd cov;    /* MP x MP */
  };

  inline gaussian_posterior closed_form_posterior(
    const Eigen::MatrixXd& x,
    const Eigen::MatrixXd& y,
    const Eigen::MatrixXd& prior_precision,
    const Eigen::VectorXd& sigma2,
    const Eigen::VectorXd& zeta2,
    const double tau2
  ) {
    const int m = static_cast<int>( y.rows() );
    const int p = static_cast<int>( x.cols() );
    const Eigen::MatrixXd xtx = x.transpose() * x;
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero( m * p, m * p );
    for ( int j = 0; j < p; j++ )
      for ( int k = 0; k < p; k++ )
        for ( int s = 0; s < m; s++ ) {
          q(j * m + s, k * m + s) += xtx(j, k) / sigma2[s];
          if ( j == k )
            for ( int t = 0; t < m; t++ )
              q(j * m + s, k * m + t) +=
                prior_precision(s, t) / (zeta2[j] * tau2);
        }
    const Eigen::MatrixXd syx =
      sigma2.cwiseInverse().asDiagonal() * y * x;
    const Eigen::VectorXd b =
      Eigen::Map<const Eigen::VectorXd>( syx.data(), m * p );
    Eigen::LDLT<Eigen::MatrixXd> ldlt( q );
    gaussian_posterior out;
    const Eigen::VectorXd mu = ldlt.solve( b );
    out.mean = Eigen::Map<const Eigen::MatrixXd>( mu.data(), m, p );
    out.cov = ldlt.solve( Eigen::MatrixXd::Identity(m * p, m * p) );
    return out;
  }


  /* Monte Carlo standard error of a series mean by non-overlapping
   * batch means */
  inline double batch_means_se( const Eigen::VectorXd& v,
                                const int batches = 50 ) {
    const int len = static_cast<int>( v.size() ) / batches;
    Eigen::VectorXd mu( batches );
    for ( int b = 0; b < batches; b++ )
      mu[b] = v.segment( b * len, len ).mean();
    const double c = mu.mean();
    return std::sqrt( (mu.array() - c).square().sum() /
                      (batches - 1.0) / batches );
  }

}  // namespace gpir::testing

#endif  // _GPIR_TEST_SUPPORT_
