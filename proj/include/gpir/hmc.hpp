
#include <cmath>
#include <limits>
#include <random>
#include <utility>

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include "gpir/error.hpp"
#include "gpir/model_core.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_HMC_
#define _GPIR_HMC_


namespace gpir {

  struct hmc_config {
    int leapfrog_steps = 35;
    double target_accept = 0.65;
    /* Dual averaging constants */
    double gamma0 = 0.05;
    double t0 = 10;
    double kappa = 0.75;
    /* Starting step size; <= 0 selects the doubling/halving heuristic */
    double initial_step = 0;
    double min_step = 1e-12;
    /* Each transition uses eps * U(1 - step_jitter, 1 + step_jitter) */
    double step_jitter = 0.2;
    int warmup = 5000;
    int samples = 2000;
    int thin = 10;
    int chains = 8;
    int threads = 1;
    unsigned long long seed = 1;

    void validate() const {
      if ( leapfrog_steps < 1 )
        throw argument_error("hmc_config: leapfrog_steps must be >= 1");
      if ( !(target_accept > 0 && target_accept < 1) )
        throw argument_error("hmc_config: target_accept must be in (0, 1)");
      if ( !(gamma0 > 0) || !(t0 >= 0) || !(kappa > 0.5 && kappa <= 1) )
        throw argument_error("hmc_config: invalid dual averaging constants");
      if ( warmup < 0 || samples < 1 || thin < 1 )
        throw argument_error("hmc_config: need warmup >= 0, samples >= 1, "
                             "thin >= 1");
      if ( chains < 1 || threads < 1 )
        throw argument_error("hmc_config: chains and threads must be >= 1");
      if ( !(step_jitter >= 0 && step_jitter < 1) )
        throw argument_error("hmc_config: step_jitter must be in [0, 1)");
    }
  };




  /* ****************************************************************/
  /*! Noise precision for the correlated-error (marginal) variant
   *
   * Holds H~ and the cached product H~^-1 yu. When absent, the
   * diagonal Sigma^-1 = diag(1 / sigma2) of the chain state is used.
   */
  struct noise_model {
    const vecchia_precision* h = nullptr;
    Eigen::MatrixXd h_inv_yu;
  };

  inline noise_model make_correlated_noise( const vecchia_precision& h,
                                            const sufficient_stats& stats ) {
    noise_model nm;
    nm.h = &h;
    nm.h_inv_yu = h.apply_precision( stats.yu );
    return nm;
  };


  /*! V' Z^-1 V with Z = diag(zeta2) */
  inline Eigen::MatrixXd rotated_prior_scale( const design_factor& design,
                                              const Eigen::VectorXd& zeta2 ) {
    if ( zeta2.size() != design.p() )
      throw argument_error("rotated_prior_scale: zeta2 must have length P");
    return design.v.transpose() * zeta2.cwiseInverse().asDiagonal() *
      design.v;
  };




  /*! Potential energy U(gamma) and its gradient (M x rank)
   *
   * U = -working_loglik - log prior (up to constants), with prior
   * term 1/2 gamma' (V'Z^-1V (x) tau^-2 C~^-1) gamma. With a
   * correlated noise model the data term is
   * 1/2 tr(D G' H~^-1 G D) - tr(D G' H~^-1 YU).
   */
  inline std::pair<double, Eigen::MatrixXd> potential_and_gradient(
    const design_factor& design,
    const sufficient_stats& stats,
    const chain_state& state,
    const vecchia_precision& prior,
    const noise_model* noise = nullptr,
    const Eigen::MatrixXd* prior_scale = nullptr
  ) {
    const Eigen::MatrixXd& g = state.gamma;
    if ( g.rows() != stats.m() || g.cols() != design.rank() ||
         stats.rank() != design.rank() || prior.size() != stats.m() )
      throw argument_error("potential_and_gradient: dimension mismatch");
    const Eigen::MatrixXd k = prior_scale ? *prior_scale :
      rotated_prior_scale( design, state.zeta2 );
    const Eigen::MatrixXd gd = g * design.d.asDiagonal();

    double u = 0;
    Eigen::MatrixXd grad;
    if ( noise && noise->h ) {
      const Eigen::MatrixXd w = noise->h->apply_precision( gd );
      u = 0.5 * (gd.array() * w.array()).sum() -
        (gd.array() * noise->h_inv_yu.array()).sum();
      grad = (w - noise->h_inv_yu) * design.d.asDiagonal();
    }
    else {
      u = -working_loglik( stats, design.d, g, state.sigma2 );
      grad = ( (gd - stats.yu) * design.d.asDiagonal() ).array().colwise() /
        state.sigma2.array();
    }
    const Eigen::MatrixXd pg =
      prior.apply_precision( g ) * (k / state.tau2);
    u += 0.5 * (g.array() * pg.array()).sum();
    grad += pg;
    return { u, grad };
  };




  /* ****************************************************************/
  /*! Kronecker mass matrix  V'Z^-1V (x) tau^-2 C~_M^-1
   *
   * Acts on momenta stored as M x rank matrices P:
   *   Mass vec(P)   = vec( tau^-2 C~_M^-1 P K ),   K = V'Z^-1V
   *   Mass^-1 vec(P) = vec( tau^2 C~_M P K^-1 )
   */
  class mass_matrix {
  public:
    mass_matrix( const vecchia_precision& vm, const design_factor& design ) :
      vm_(&vm), v_(design.v) {
      refresh( Eigen::VectorXd::Ones(design.p()), 1 );
    }

    void refresh( const Eigen::VectorXd& zeta2, const double tau2 );

    int rank() const { return static_cast<int>( k_.rows() ); }
    const Eigen::MatrixXd& prior_scale() const { return k_; }
    double tau2() const { return tau2_; }

    Eigen::MatrixXd apply( const Eigen::MatrixXd& p ) const {
      return vm_->apply_precision( p ) * (k_ / tau2_);
    }
    Eigen::MatrixXd apply_inverse( const Eigen::MatrixXd& p ) const {
      return vm_->apply_covariance( p ) * (k_inv_ * tau2_);
    }
    /*! 1/2 vec(P)' Mass^-1 vec(P) */
    double kinetic( const Eigen::MatrixXd& p ) const {
      return 0.5 * (p.array() * apply_inverse(p).array()).sum();
    }

    /*! p = (V'Z^-1/2 (x) tau^-1 (I - A_M)' D_M^-1/2) eps ~ N(0, Mass) */
    template< typename URNG >
    Eigen::MatrixXd draw_momentum( URNG& rng ) const;

  private:
    const vecchia_precision* vm_;
    Eigen::MatrixXd v_;
    Eigen::MatrixXd k_;
    Eigen::MatrixXd k_inv_;
    Eigen::MatrixXd root_;   /* Z^-1/2 V  (P x rank) */
    double tau2_ = 1;
  };
  // class mass_matrix
  /* ****************************************************************/




  /*! Dual averaging of log step size toward a target acceptance */
  class dual_averaging {
  public:
    dual_averaging( const double eps0, const hmc_config& cfg ) :
      mu_(std::log(10 * eps0)), target_(cfg.target_accept),
      gamma_(cfg.gamma0), t0_(cfg.t0), kappa_(cfg.kappa),
      log_eps_(std::log(eps0)) { ; }

    /*! Record one acceptance probability; returns the next step size */
    double update( double accept_prob ) {
      if ( !std::isfinite(accept_prob) ) accept_prob = 0;
      m_++;
      const double w = 1 / (m_ + t0_);
      h_bar_ = (1 - w) * h_bar_ + w * (target_ - accept_prob);
      log_eps_ = mu_ - std::sqrt(static_cast<double>(m_)) / gamma_ * h_bar_;
      const double eta = std::pow( static_cast<double>(m_), -kappa_ );
      log_eps_bar_ = eta * log_eps_ + (1 - eta) * log_eps_bar_;
      return std::exp( log_eps_ );
    }

    double current() const { return std::exp(log_eps_); }
    /*! Averaged step size, used once warmup ends */
    double final_step() const {
      return m_ > 0 ? std::exp(log_eps_bar_) : std::exp(log_eps_);
    }

  private:
    double mu_, target_, gamma_, t0_, kappa_;
    double h_bar_ = 0;
    double log_eps_;
    double log_eps_bar_ = 0;
    long m_ = 0;
  };




  /*! Everything the Hamiltonian flow needs, bundled */
  struct hmc_target {
    const design_factor* design;
    const sufficient_stats* stats;
    const vecchia_precision* prior;
    const noise_model* noise = nullptr;
  };


  struct hmc_result {
    bool accepted = false;
    double accept_prob = 0;
    double delta_h = 0;      /* H(proposal) - H(current) */
    bool divergent = false;  /* non-finite Hamiltonian */
  };


  /*! L leapfrog steps of size eps, in place on (gamma, p)
   *
   * Returns the potential at the end point; `grad` must hold the
   * gradient at the start and holds the end-point gradient on exit.
   */
  inline double leapfrog(
    const hmc_target& tgt,
    chain_state& state,
    Eigen::MatrixXd& p,
    Eigen::MatrixXd& grad,
    const mass_matrix& mass,
    const double eps,
    const int steps
  ) {
    const Eigen::MatrixXd& k = mass.prior_scale();
    double u = std::numeric_limits<double>::quiet_NaN();
    p -= 0.5 * eps * grad;
    for ( int l = 0; l < steps; l++ ) {
      state.gamma += eps * mass.apply_inverse( p );
      auto [ul, gl] = potential_and_gradient(
        *tgt.design, *tgt.stats, state, *tgt.prior, tgt.noise, &k );
      u = ul;
      grad = std::move(gl);
      if ( !std::isfinite(u) ) return u;
      p -= ( l + 1 < steps ? eps : 0.5 * eps ) * grad;
    }
    return u;
  };


  /*! One HMC transition for gamma at step size state.step_size
   *
   * The mass matrix must already be refreshed for the current zeta2,
   * tau2. On rejection the state is left unchanged.
   */
  template< typename URNG >
  hmc_result hmc_step(
    const hmc_target& tgt,
    chain_state& state,
    const mass_matrix& mass,
    const hmc_config& cfg,
    URNG& rng
  ) {
    hmc_result res;
    const Eigen::MatrixXd& k = mass.prior_scale();
    auto [u0, g0] = potential_and_gradient(
      *tgt.design, *tgt.stats, state, *tgt.prior, tgt.noise, &k );
    if ( !std::isfinite(u0) )
      throw numerical_error("hmc_step: potential at current state is not "
                            "finite");
    Eigen::MatrixXd p = mass.draw_momentum( rng );
    const double h0 = u0 + mass.kinetic( p );

    std::uniform_real_distribution<double> unif(0, 1);
    double eps = state.step_size;
    if ( cfg.step_jitter > 0 )
      eps *= 1 + cfg.step_jitter * (2 * unif(rng) - 1);

    const Eigen::MatrixXd gamma0 = state.gamma;
    Eigen::MatrixXd grad = std::move(g0);
    const double u1 = leapfrog( tgt, state, p, grad, mass, eps,
                                cfg.leapfrog_steps );
    const double h1 = std::isfinite(u1) ? u1 + mass.kinetic(p) : u1;
    res.delta_h = h1 - h0;
    if ( !std::isfinite(res.delta_h) || !state.gamma.allFinite() ) {
      res.divergent = true;
      res.accept_prob = 0;
      state.gamma = gamma0;
      return res;
    }
    res.accept_prob = std::min( 1.0, std::exp(-res.delta_h) );
    if ( unif(rng) < res.accept_prob ) res.accepted = true;
    else state.gamma = gamma0;
    return res;
  };


  /*! Doubling/halving search for a step size with one-step acceptance
   *  near 1/2; the state is not modified
   */
  template< typename URNG >
  double find_reasonable_step(
    const hmc_target& tgt,
    const chain_state& state,
    const mass_matrix& mass,
    double eps,
    URNG& rng
  ) {
    const Eigen::MatrixXd& k = mass.prior_scale();
    auto [u0, g0] = potential_and_gradient(
      *tgt.design, *tgt.stats, state, *tgt.prior, tgt.noise, &k );
    const Eigen::MatrixXd p0 = mass.draw_momentum( rng );
    const double h0 = u0 + mass.kinetic( p0 );
    auto log_accept = [&]( double e ) {
      chain_state s = state;
      Eigen::MatrixXd p = p0, g = g0;
      const double u1 = leapfrog( tgt, s, p, g, mass, e, 1 );
      const double dh = u1 + mass.kinetic(p) - h0;
      return std::isfinite(dh) ? -dh : -std::numeric_limits<double>::infinity();
    };
    double la = log_accept( eps );
    const double dir = la > std::log(0.5) ? 1 : -1;
    for ( int it = 0; it < 60; it++ ) {
      if ( dir * la <= dir * std::log(0.5) ) break;
      eps *= std::pow( 2.0, dir );
      la = log_accept( eps );
    }
    return eps;
  };

}  // namespace gpir




inline void gpir::mass_matrix::refresh(
  const Eigen::VectorXd& zeta2,
  const double tau2
) {
  if ( zeta2.size() != v_.rows() || !(zeta2.array() > 0).all() )
    throw numerical_error("mass_matrix: zeta2 must be positive, length P");
  if ( !(tau2 > 0) )
    throw numerical_error("mass_matrix: tau2 must be positive");
  tau2_ = tau2;
  root_ = zeta2.cwiseSqrt().cwiseInverse().asDiagonal() * v_;
  k_ = root_.transpose() * root_;
  Eigen::LLT<Eigen::MatrixXd> llt( k_ );
  if ( llt.info() != Eigen::Success )
    throw numerical_error("mass_matrix: V'Z^-1V is not positive definite");
  k_inv_ = llt.solve( Eigen::MatrixXd::Identity(k_.rows(), k_.cols()) );
};


template< typename URNG >
Eigen::MatrixXd gpir::mass_matrix::draw_momentum( URNG& rng ) const {
  std::normal_distribution<double> normal(0, 1);
  Eigen::MatrixXd e( vm_->size(), root_.rows() );
  for ( Eigen::Index j = 0; j < e.cols(); j++ )
    for ( Eigen::Index i = 0; i < e.rows(); i++ )
      e(i, j) = normal(rng);
  return vm_->precision_root_transpose( e ) * root_ /
    std::sqrt( tau2_ );
};


#endif  // _GPIR_HMC_
