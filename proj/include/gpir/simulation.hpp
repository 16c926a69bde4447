
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include "gpir/error.hpp"
#include "gpir/kernels.hpp"
#include "gpir/sphere_geom.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_SIMULATION_
#define _GPIR_SIMULATION_


namespace gpir {

  enum class snr_setting { low, high };

  inline std::string to_string( const snr_setting s ) {
    return s == snr_setting::low ? "low" : "high";
  };

  inline snr_setting parse_snr( const std::string& s ) {
    if ( s == "low" ) return snr_setting::low;
    if ( s == "high" ) return snr_setting::high;
    throw argument_error("snr must be 'low' or 'high', got '" + s + "'");
  };


  /*! (tau2, sigma2) of the named signal-to-noise setting */
  inline std::pair<double, double> snr_variances( const snr_setting s ) {
    return s == snr_setting::low ? std::make_pair(1.75, 1.25) :
      std::make_pair(0.23, 0.07);
  };


  struct sim_config {
    int disc_vertices = 2000;
    /*! Points on the full sphere the disc is cut from; 31416 gives
     *  about 2 mm spacing at R = 100 mm */
    int sphere_points = 31416;
    double radius = 100;
    double truth_fwhm = 6;
    double truth_nu = 1;
    double beta_variance = 0.04;
    double threshold = 0.08;
    int p = 3;
    double covariate_corr = 0.5;
    snr_setting snr = snr_setting::high;
    int n = 100;
    int replicates = 50;
    unsigned long long seed = 1;

    double tau2() const { return snr_variances(snr).first; }
    double sigma2() const { return snr_variances(snr).second; }
    correlation_model truth_kernel() const {
      return correlation_from_fwhm( truth_fwhm, truth_nu );
    }

    void validate() const {
      if ( disc_vertices < 1 || sphere_points < disc_vertices )
        throw argument_error("sim_config: need 1 <= disc_vertices <= "
                             "sphere_points");
      if ( !(beta_variance > 0) || !(threshold >= 0) || !(radius > 0) )
        throw argument_error("sim_config: invalid variance, threshold or "
                             "radius");
      if ( p < 1 || n < 1 || replicates < 1 )
        throw argument_error("sim_config: p, n, replicates must be >= 1");
      if ( !(std::abs(covariate_corr) < 1) )
        throw argument_error("sim_config: |covariate_corr| must be < 1");
    }
  };


  /*! Variance of x' beta under the prior: one unit-variance term
   *  (intercept or covariate) per coefficient */
  inline double signal_variance( const sim_config& c ) {
    return c.p * c.beta_variance;
  };

  inline double spatial_snr( const sim_config& c ) {
    return signal_variance(c) / (c.tau2() + c.sigma2());
  };

  inline double r_squared( const sim_config& c ) {
    return signal_variance(c) / (signal_variance(c) + c.tau2() + c.sigma2());
  };

  /*! P(|Z| <= T / sd): expected fraction of thresholded-out vertices */
  inline double expected_zero_fraction( const sim_config& c ) {
    return std::erf( c.threshold / std::sqrt(c.beta_variance) /
                     std::sqrt(2.0) );
  };


  /*! Disc of the disc_vertices closest vertices to an equatorial
   *  vertex of a fibonacci sphere */
  inline spherical_mesh make_sim_mesh( const sim_config& c ) {
    c.validate();
    const spherical_mesh full = fibonacci_sphere( c.sphere_points, c.radius );
    const int center = c.sphere_points / 2;
    std::vector<double> d( full.size() );
    for ( int i = 0; i < full.size(); i++ ) d[i] = full.distance(center, i);
    std::vector<int> ids( full.size() );
    std::iota( ids.begin(), ids.end(), 0 );
    std::stable_sort( ids.begin(), ids.end(),
                      [&d]( int a, int b ) { return d[a] < d[b]; } );
    ids.resize( c.disc_vertices );
    return full.subset( ids );
  };




  /*! Draws from N(0, C) on a fixed mesh: exact Cholesky when
   *  M <= exact_limit, otherwise a 16 mm Vecchia approximation */
  class gp_sampler {
  public:
    gp_sampler( const spherical_mesh& mesh, const correlation_model& kernel,
                const int exact_limit = 2500 ) {
      if ( mesh.size() <= exact_limit ) {
        const Eigen::MatrixXd c = dense_correlation( mesh, kernel, false );
        Eigen::LLT<Eigen::MatrixXd> llt( c );
        if ( llt.info() != Eigen::Success )
          throw numerical_error("gp_sampler: correlation matrix is not "
                                "positive definite");
        l_ = llt.matrixL();
      }
      else {
        const neighbor_index nb = build_neighbor_index( mesh, 16 );
        vp_ = std::make_shared<vecchia_precision>(
          build_vecchia(mesh, nb, kernel) );
      }
      m_ = mesh.size();
    }

    bool exact() const { return !vp_; }

    /*! M x k matrix of independent draws */
    template< typename URNG >
    Eigen::MatrixXd draw( const int k, URNG& rng ) const {
      std::normal_distribution<double> normal(0, 1);
      Eigen::MatrixXd z( m_, k );
      for ( int j = 0; j < k; j++ )
        for ( int i = 0; i < m_; i++ ) z(i, j) = normal(rng);
      if ( vp_ ) return vp_->covariance_root( z );
      return l_.triangularView<Eigen::Lower>() * z;
    }

  private:
    int m_ = 0;
    Eigen::MatrixXd l_;
    std::shared_ptr<vecchia_precision> vp_;
  };


  struct sim_dataset {
    Eigen::MatrixXd truth;    /* M x P, thresholded */
    Eigen::MatrixXd x;        /* N x P, first column intercept */
    Eigen::MatrixXd images;   /* M x N */
  };


  /*! Independent rng substream for (replicate, stream) */
  inline std::mt19937_64 substream( const unsigned long long seed,
                                    const int replicate,
                                    const int stream ) {
    std::seed_seq seq{ static_cast<std::uint32_t>(seed),
                       static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(replicate),
                       static_cast<std::uint32_t>(stream),
                       0x51u };
    return std::mt19937_64( seq );
  };

  enum sim_stream : int { stream_truth = 0, stream_covariates = 1,
                          stream_omega = 2, stream_noise = 3,
                          stream_fit = 16 };


  /*! One replicate: thresholded GP coefficients, correlated
   *  covariates with intercept, GP subject effects and white noise */
  inline sim_dataset simulate_dataset( const sim_config& c,
                                       const gp_sampler& gp,
                                       const int replicate ) {
    c.validate();
    sim_dataset d;
    auto rt = substream( c.seed, replicate, stream_truth );
    d.truth = std::sqrt(c.beta_variance) * gp.draw( c.p, rt );
    d.truth = d.truth.unaryExpr( [&c]( double b ) {
      return std::abs(b) > c.threshold ? b : 0.0; } );

    auto rx = substream( c.seed, replicate, stream_covariates );
    std::normal_distribution<double> normal(0, 1);
    d.x.resize( c.n, c.p );
    const double rho = c.covariate_corr;
    for ( int i = 0; i < c.n; i++ ) {
      d.x(i, 0) = 1;
      const double z1 = normal(rx);
      for ( int j = 1; j < c.p; j++ ) {
        /* Equicorrelated: shared factor plus idiosyncratic part */
        d.x(i, j) = std::sqrt(rho) * z1 + std::sqrt(1 - rho) * normal(rx);
      }
    }
    auto ro = substream( c.seed, replicate, stream_omega );
    auto re = substream( c.seed, replicate, stream_noise );
    d.images = d.truth * d.x.transpose() +
      std::sqrt(c.tau2()) * gp.draw( c.n, ro );
    const double se = std::sqrt( c.sigma2() );
    for ( int i = 0; i < c.n; i++ )
      for ( int v = 0; v < d.images.rows(); v++ )
        d.images(v, i) += se * normal(re);
    return d;
  };

}  // namespace gpir

#endif  // _GPIR_SIMULATION_
