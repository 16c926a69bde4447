
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Core>

#include "gpir/error.hpp"
#include "gpir/model_core.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_GIBBS_
#define _GPIR_GIBBS_


namespace gpir {

  /*! Gamma(shape, rate) */
  struct gamma_params {
    double shape;
    double rate;
    double mean() const { return shape / rate; }
    double mode() const { return shape > 1 ? (shape - 1) / rate : 0; }
  };


  /*! Full conditionals of the precision parameters (shape-rate) */
  namespace conditional {

    inline gamma_params sigma_precision( const int n, const double xi,
                                         const double rss ) {
      return { 0.5 + 0.5 * n, xi + 0.5 * rss };
    };

    inline gamma_params xi( const int m, const double sum_sigma_precision ) {
      return { 0.5 + 0.5 * m, 1 + sum_sigma_precision };
    };

    inline gamma_params zeta_precision( const int m, const double q,
                                        const double tau2 ) {
      return { 1 + 0.5 * m, 0.5 + 0.5 * q / tau2 };
    };

    inline gamma_params tau_precision( const int m,
                                       const Eigen::VectorXd& q,
                                       const Eigen::VectorXd& zeta2 ) {
      return { 1 + 0.5 * m * q.size(),
               0.5 + 0.5 * (q.array() / zeta2.array()).sum() };
    };

  }  // namespace conditional


  /*! Which variance blocks a Gibbs sweep refreshes */
  struct gibbs_flags {
    bool sigma2 = true;
    bool xi = true;
    bool zeta2 = true;
    bool tau2 = true;
  };


  /*! Q_j = beta_j' C~^-1 beta_j with B = gamma V' */
  inline Eigen::VectorXd coefficient_quad_forms(
    const design_factor& design,
    const Eigen::MatrixXd& gamma,
    const vecchia_precision& prior
  ) {
    const Eigen::MatrixXd e = prior.whiten( rotate_to_beta(design, gamma) );
    return e.colwise().squaredNorm().transpose();
  };


  template< typename URNG >
  double draw_gamma( const gamma_params& g, URNG& rng ) {
    if ( !(g.shape > 0) || !(g.rate > 0) || !std::isfinite(g.rate) )
      throw numerical_error("draw_gamma: invalid Gamma parameters");
    std::gamma_distribution<double> dist( g.shape, 1 / g.rate );
    double x = dist(rng);
    /* Guard the (astronomically rare) zero draw */
    if ( !(x > 0) ) x = std::numeric_limits<double>::min();
    return x;
  };


  /*! One sweep over sigma^-2(s), xi, zeta_j^-2, tau^-2 in that order */
  template< typename URNG >
  void gibbs_update_variances(
    chain_state& state,
    const design_factor& design,
    const sufficient_stats& stats,
    const vecchia_precision& prior,
    URNG& rng,
    const gibbs_flags& flags = gibbs_flags{}
  ) {
    const int m = stats.m();
    if ( flags.sigma2 ) {
      const Eigen::VectorXd rss =
        residual_ss_per_vertex( stats, design.d, state.gamma );
      for ( int s = 0; s < m; s++ ) {
        const gamma_params g =
          conditional::sigma_precision( stats.n_images, state.xi, rss[s] );
        state.sigma2[s] = 1 / draw_gamma( g, rng );
      }
    }
    if ( flags.xi ) {
      const double sp = state.sigma2.cwiseInverse().sum();
      state.xi = draw_gamma( conditional::xi(m, sp), rng );
    }
    if ( flags.zeta2 || flags.tau2 ) {
      const Eigen::VectorXd q =
        coefficient_quad_forms( design, state.gamma, prior );
      if ( flags.zeta2 ) {
        for ( int j = 0; j < q.size(); j++ )
          state.zeta2[j] = 1 / draw_gamma(
            conditional::zeta_precision(m, q[j], state.tau2), rng );
      }
      if ( flags.tau2 ) {
        state.tau2 = 1 / draw_gamma(
          conditional::tau_precision(m, q, state.zeta2), rng );
      }
    }
  };

}  // namespace gpir

#endif  // _GPIR_GIBBS_
