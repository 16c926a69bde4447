
#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "gpir/draws.hpp"
#include "gpir/error.hpp"
#include "gpir/gibbs.hpp"
#include "gpir/hmc.hpp"
#include "gpir/hyperparam.hpp"
#include "gpir/model_core.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_SAMPLERS_
#define _GPIR_SAMPLERS_


namespace gpir {

  /*! Sparse precisions shared by every variant */
  struct spatial_prior {
    const vecchia_precision* prior;   /*!< C~^-1 at the prior radius */
    const vecchia_precision* mass;    /*!< C~_M^-1 at the mass radius */
  };


  /*! Diagonal of C~^-1 = (I - A)' D^-1 (I - A) */
  inline Eigen::VectorXd precision_diagonal( const vecchia_precision& vp ) {
    const Eigen::VectorXd& cv = vp.cond_var();
    Eigen::VectorXd diag = cv.cwiseInverse();
    for ( int i = 0; i < vp.size(); i++ )
      for ( const auto& [j, a] : vp.row(i) )
        diag[j] += a * a / cv[i];
    return diag;
  };




  struct cg_result {
    Eigen::MatrixXd x;
    int iterations = 0;
    double relative_residual = 0;
    bool converged = false;
  };

  /*! Preconditioned conjugate gradients on an SPD operator acting on
   *  matrices (Frobenius inner product); stops when
   *  ||b - A x|| <= tol ||b||
   */
  template< typename ApplyOp >
  cg_result conjugate_gradient(
    const ApplyOp& apply,
    const Eigen::MatrixXd& precond_diag,
    const Eigen::MatrixXd& b,
    Eigen::MatrixXd x0,
    const double tol,
    const int max_iter
  ) {
    cg_result res;
    const double bn = b.norm();
    if ( bn == 0 ) {
      res.x = Eigen::MatrixXd::Zero( b.rows(), b.cols() );
      res.converged = true;
      return res;
    }
    if ( x0.rows() != b.rows() || x0.cols() != b.cols() )
      x0 = Eigen::MatrixXd::Zero( b.rows(), b.cols() );
    Eigen::MatrixXd x = std::move(x0);
    Eigen::MatrixXd r = b - apply(x);
    Eigen::MatrixXd z = r.cwiseQuotient( precond_diag );
    Eigen::MatrixXd p = z;
    double rz = (r.array() * z.array()).sum();
    double rn = r.norm();
    int it = 0;
    while ( rn > tol * bn && it < max_iter ) {
      const Eigen::MatrixXd ap = apply(p);
      const double pap = (p.array() * ap.array()).sum();
      if ( !(pap > 0) ) break;
      const double alpha = rz / pap;
      x += alpha * p;
      r -= alpha * ap;
      z = r.cwiseQuotient( precond_diag );
      const double rz_new = (r.array() * z.array()).sum();
      p = z + (rz_new / rz) * p;
      rz = rz_new;
      rn = r.norm();
      it++;
    }
    /* Guard against drift of the recursive residual */
    rn = (b - apply(x)).norm();
    res.x = std::move(x);
    res.iterations = it;
    res.relative_residual = rn / bn;
    res.converged = rn <= std::max(tol, 1e-14) * bn * 10;
    return res;
  };




  /* ****************************************************************/
  /*! Working-model HMC-within-Gibbs */
  struct working_options {
    gibbs_flags gibbs;
    /*! Starting state for every chain; default is a jittered
     *  least-squares start */
    std::optional<chain_state> init;
    /*! Correlated noise (marginal variant); diagonal sigma2 if null */
    const noise_model* noise = nullptr;
    bool store_sigma2 = true;
    std::string variant = "working";
    std::string config_hash;
  };


  /*! Least-squares start with chain-specific jitter */
  template< typename URNG >
  chain_state initial_state(
    const design_factor& design,
    const sufficient_stats& stats,
    URNG& rng,
    const double jitter = 0.1
  ) {
    const int m = stats.m();
    const int n = stats.n_images;
    const int rank = design.rank();
    chain_state s;
    s.gamma = Eigen::MatrixXd::Zero( m, rank );
    if ( n > rank )
      s.gamma = stats.yu * design.d.cwiseInverse().asDiagonal();
    s.sigma2 = Eigen::VectorXd::Ones( m );
    if ( n > 0 ) {
      const Eigen::VectorXd rss =
        residual_ss_per_vertex( stats, design.d, s.gamma );
      const double dof = std::max( n - rank, 1 );
      for ( int i = 0; i < m; i++ ) {
        const double floor = std::max( 1e-6 * stats.sumsq[i] / n, 1e-12 );
        s.sigma2[i] = std::max( rss[i] / dof, floor );
      }
    }
    std::normal_distribution<double> normal(0, 1);
    for ( int j = 0; j < rank; j++ ) {
      const double sd = std::sqrt( s.gamma.col(j).squaredNorm() /
                                   std::max(m, 1) );
      for ( int i = 0; i < m; i++ )
        s.gamma(i, j) += jitter * (sd + 1e-3) * normal(rng);
    }
    const Eigen::MatrixXd b = rotate_to_beta( design, s.gamma );
    s.zeta2.resize( design.p() );
    for ( int j = 0; j < design.p(); j++ )
      s.zeta2[j] = std::max( b.col(j).squaredNorm() / m, 1e-8 );
    s.tau2 = 1;
    s.xi = 1 / s.sigma2.mean();
    return s;
  };


  inline std::mt19937_64 chain_rng( const unsigned long long seed,
                                    const int chain ) {
    std::seed_seq seq{ static_cast<std::uint32_t>(seed),
                       static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(chain),
                       0x9e3779b9u };
    return std::mt19937_64( seq );
  };


  /*! One chain: dual-averaging warmup, then thinned sampling */
  inline posterior_draws run_working_chain(
    const design_factor& design,
    const sufficient_stats& stats,
    const spatial_prior& sp,
    const hmc_config& cfg,
    const working_options& opts,
    const int chain
  ) {
    std::mt19937_64 rng = chain_rng( cfg.seed, chain );
    chain_state state = opts.init ? *opts.init :
      initial_state( design, stats, rng );
    state.validate();
    const hmc_target tgt{ &design, &stats, sp.prior, opts.noise };
    mass_matrix mass( *sp.mass, design );
    mass.refresh( state.zeta2, state.tau2 );

    double eps = cfg.initial_step > 0 ? cfg.initial_step :
      find_reasonable_step( tgt, state, mass, 0.1, rng );
    state.step_size = eps;
    dual_averaging da( eps, cfg );
    for ( int it = 0; it < cfg.warmup; it++ ) {
      mass.refresh( state.zeta2, state.tau2 );
      const hmc_result hr = hmc_step( tgt, state, mass, cfg, rng );
      state.step_size = da.update( hr.accept_prob );
      if ( !(state.step_size > cfg.min_step) )
        throw numerical_error("fit: step size underflow during warmup "
                              "(chain " + std::to_string(chain) + ")");
      gibbs_update_variances( state, design, stats, *sp.prior, rng,
                              opts.gibbs );
    }
    if ( cfg.warmup > 0 ) state.step_size = da.final_step();

    const int keep = cfg.samples / cfg.thin;
    const int m = stats.m();
    const int p = design.p();
    posterior_draws out;
    out.p = p;
    out.m = m;
    out.variant = opts.variant;
    out.seed = cfg.seed;
    out.config_hash = opts.config_hash;
    out.beta.resize( keep, static_cast<Eigen::Index>(p) * m );
    if ( opts.store_sigma2 ) out.sigma2.resize( keep, m );
    out.tau2.resize( keep );
    out.xi.resize( keep );
    out.zeta2.resize( keep, p );
    int accepted = 0;
    int row = 0;
    for ( int it = 0; it < cfg.samples; it++ ) {
      mass.refresh( state.zeta2, state.tau2 );
      const hmc_result hr = hmc_step( tgt, state, mass, cfg, rng );
      accepted += hr.accepted ? 1 : 0;
      gibbs_update_variances( state, design, stats, *sp.prior, rng,
                              opts.gibbs );
      if ( (it + 1) % cfg.thin == 0 && row < keep ) {
        const Eigen::MatrixXd b = rotate_to_beta( design, state.gamma );
        out.beta.row(row) =
          Eigen::Map<const Eigen::RowVectorXd>( b.data(), b.size() );
        if ( opts.store_sigma2 ) out.sigma2.row(row) = state.sigma2;
        out.tau2[row] = state.tau2;
        out.xi[row] = state.xi;
        out.zeta2.row(row) = state.zeta2;
        row++;
      }
    }
    out.chain_ends = { keep };
    out.accept_rate = { static_cast<double>(accepted) / cfg.samples };
    out.step_size = { state.step_size };
    return out;
  };


  /*! Runs cfg.chains chains on up to cfg.threads threads; each chain
   *  has its own rng stream derived from (seed, chain index)
   */
  inline posterior_draws fit_working(
    const design_factor& design,
    const sufficient_stats& stats,
    const spatial_prior& sp,
    const hmc_config& cfg,
    const working_options& opts = working_options{}
  ) {
    cfg.validate();
    if ( stats.rank() != design.rank() || sp.prior->size() != stats.m() ||
         sp.mass->size() != stats.m() )
      throw argument_error("fit_working: dimension mismatch");
    if ( cfg.samples / cfg.thin < 1 )
      throw argument_error("fit_working: samples / thin must be >= 1");
    std::vector<posterior_draws> parts( cfg.chains );
    std::vector<std::exception_ptr> errors( cfg.chains );
    auto work = [&]( int c ) {
      try {
        parts[c] = run_working_chain( design, stats, sp, cfg, opts, c );
      }
      catch ( ... ) {
        errors[c] = std::current_exception();
      }
    };
    for ( int c0 = 0; c0 < cfg.chains; c0 += cfg.threads ) {
      const int c1 = std::min( cfg.chains, c0 + cfg.threads );
      if ( c1 - c0 == 1 ) { work(c0); continue; }
      std::vector<std::thread> pool;
      for ( int c = c0; c < c1; c++ ) pool.emplace_back( work, c );
      for ( auto& t : pool ) t.join();
    }
    for ( const auto& e : errors )
      if ( e ) std::rethrow_exception(e);
    return concatenate_chains( parts );
  };




  /* ****************************************************************/
  /*! Posterior mode of the working model */
  struct map_options {
    /*! Hold sigma2, xi, tau2, zeta2 at init (gamma-only quadratic) */
    bool fix_variances = false;
    std::optional<chain_state> init;
    double tol = 1e-8;
    int max_outer = 500;
    double cg_tol = 1e-10;
  };

  struct map_result {
    chain_state state;
    std::vector<double> objective;   /* after each outer iteration */
    int iterations = 0;
    bool converged = false;
    bool monotone = true;
  };


  /*! Log joint density in the precision parameterization
   *
   * working_loglik + log N(gamma; 0, (V'Z^-1V (x) tau^-2 C~^-1)^-1)
   * + log Gamma(sigma^-2 | 1/2, xi) + log Gamma(xi | 1/2, 1)
   * + log Gamma(zeta_j^-2 | 1, 1/2) + log Gamma(tau^-2 | 1, 1/2),
   * with the sigma^-2 prior counted once per vertex. Constants in
   * the Gaussian terms are omitted.
   */
  inline double working_log_posterior(
    const design_factor& design,
    const sufficient_stats& stats,
    const vecchia_precision& prior,
    const chain_state& s
  ) {
    auto log_gamma_pdf = []( double x, double a, double b ) {
      return a * std::log(b) - std::lgamma(a) + (a - 1) * std::log(x) - b * x;
    };
    const int m = stats.m();
    const int rank = design.rank();
    const Eigen::MatrixXd k = rotated_prior_scale( design, s.zeta2 );
    const Eigen::MatrixXd e = prior.whiten( s.gamma );
    const double quad = ( (e.transpose() * e) * k ).trace() / s.tau2;
    double lp = working_loglik( stats, design.d, s.gamma, s.sigma2 );
    lp += 0.5 * m * std::log( k.determinant() ) -
      0.5 * m * rank * std::log( s.tau2 ) - 0.5 * rank * prior.log_det() -
      0.5 * quad;
    for ( int i = 0; i < m; i++ )
      lp += log_gamma_pdf( 1 / s.sigma2[i], 0.5, s.xi );
    lp += log_gamma_pdf( s.xi, 0.5, 1 );
    for ( int j = 0; j < s.zeta2.size(); j++ )
      lp += log_gamma_pdf( 1 / s.zeta2[j], 1, 0.5 );
    lp += log_gamma_pdf( 1 / s.tau2, 1, 0.5 );
    return lp;
  };


  /*! Conditional maximizer of gamma given the variances
   *
   * Solves  Sigma^-1 (G D^2) + tau^-2 C~^-1 G K = Sigma^-1 (YU D)
   * by diagonally preconditioned CG.
   */
  inline Eigen::MatrixXd conditional_gamma_mode(
    const design_factor& design,
    const sufficient_stats& stats,
    const vecchia_precision& prior,
    const chain_state& s,
    const Eigen::VectorXd& prior_diag,
    const double tol
  ) {
    const Eigen::MatrixXd k = rotated_prior_scale( design, s.zeta2 ) /
      s.tau2;
    const Eigen::VectorXd d2 = design.d.array().square();
    const Eigen::ArrayXd w = s.sigma2.cwiseInverse().array();
    auto apply = [&]( const Eigen::MatrixXd& g ) -> Eigen::MatrixXd {
      Eigen::MatrixXd out = ( (g * d2.asDiagonal()).array().colwise() * w )
        .matrix();
      out.noalias() += prior.apply_precision( g ) * k;
      return out;
    };
    Eigen::MatrixXd pre( stats.m(), design.rank() );
    for ( int j = 0; j < design.rank(); j++ )
      pre.col(j) = (w * d2[j] + prior_diag.array() * k(j, j)).matrix();
    const Eigen::MatrixXd rhs =
      ( (stats.yu * design.d.asDiagonal()).array().colwise() * w ).matrix();
    const int max_iter = 10 * stats.m() * design.rank() + 100;
    const cg_result cg =
      conjugate_gradient( apply, pre, rhs, s.gamma, tol, max_iter );
    if ( !cg.x.allFinite() )
      throw numerical_error("map_optimize_working: gamma solve diverged");
    return cg.x;
  };


  /*! Alternating conditional maximization: exact gamma solve, then
   *  closed-form modes of sigma^-2, xi, zeta^-2, tau^-2
   */
  inline map_result map_optimize_working(
    const design_factor& design,
    const sufficient_stats& stats,
    const vecchia_precision& prior,
    const bool homoscedastic,
    const map_options& opts = map_options{}
  ) {
    const int m = stats.m();
    const int n = stats.n_images;
    const int p = design.p();
    map_result res;
    chain_state& s = res.state;
    if ( opts.init ) s = *opts.init;
    else {
      std::mt19937_64 rng(0);
      s = initial_state( design, stats, rng, 0 );
      s.gamma.setZero();
      if ( n > 0 ) s.sigma2.setConstant( std::max(stats.sumsq.sum() /
                                         (double(n) * m), 1e-12) );
      if ( homoscedastic ) s.sigma2.setConstant( s.sigma2.mean() );
      s.xi = 1 / s.sigma2.mean();
      s.zeta2.setConstant( 1 );
      s.tau2 = 1;
    }
    s.validate();
    const Eigen::VectorXd prior_diag = precision_diagonal( prior );
    const double big = 1e200;
    double prev = working_log_posterior( design, stats, prior, s );
    if ( !std::isfinite(prev) )
      throw numerical_error("map_optimize_working: initial objective is "
                            "not finite");
    for ( int it = 0; it < opts.max_outer; it++ ) {
      s.gamma = conditional_gamma_mode( design, stats, prior, s,
                                        prior_diag, opts.cg_tol );
      if ( !opts.fix_variances ) {
        const Eigen::VectorXd rss =
          residual_ss_per_vertex( stats, design.d, s.gamma );
        /* sigma^-2: Gamma((N+1)/2, xi + RSS/2) per vertex, or the pooled
         * form when homoscedastic */
        const double a_minus_1 = std::max( 0.5 * (n - 1), 0.5 );
        if ( n < 2 ) res.monotone = false;
        if ( homoscedastic ) {
          const double prec = std::min(
            a_minus_1 / (s.xi + 0.5 * rss.sum() / m), big );
          s.sigma2.setConstant( 1 / prec );
        }
        else {
          for ( int i = 0; i < m; i++ )
            s.sigma2[i] = 1 / std::min(
              a_minus_1 / (s.xi + 0.5 * rss[i]), big );
        }
        const double sp = s.sigma2.cwiseInverse().sum();
        s.xi = std::max( (0.5 * m - 0.5) / (1 + sp), 1e-200 );
        if ( m < 2 ) s.xi = std::max( s.xi, 1e-12 );
        const Eigen::VectorXd q =
          coefficient_quad_forms( design, s.gamma, prior );
        if ( design.rank() < p ) res.monotone = false;
        for ( int j = 0; j < p; j++ )
          s.zeta2[j] = (0.5 + 0.5 * q[j] / s.tau2) / (0.5 * m);
        s.tau2 = (0.5 + 0.5 * (q.array() / s.zeta2.array()).sum()) /
          (0.5 * m * p);
      }
      const double obj = working_log_posterior( design, stats, prior, s );
      if ( !std::isfinite(obj) )
        throw numerical_error("map_optimize_working: objective became "
                              "non-finite");
      res.objective.push_back( obj );
      res.iterations = it + 1;
      if ( obj < prev - 1e-9 * std::abs(prev) ) res.monotone = false;
      if ( std::abs(obj - prev) < opts.tol * std::max(std::abs(obj), 1.0) ) {
        res.converged = true;
        break;
      }
      if ( opts.fix_variances ) { res.converged = true; break; }
      prev = obj;
    }
    return res;
  };




  /* ****************************************************************/
  /*! Conditional variant */
  struct conditional_options {
    /*! tau2 and sigma2 used for the omega step; the MAP values are
     *  used when absent */
    std::optional<double> omega_tau2;
    std::optional<double> omega_sigma2;
    int max_rounds = 20;
    double tol = 1e-6;
    double cg_tol = 1e-8;
    working_options working;
  };

  struct conditional_fit {
    posterior_draws draws;
    Eigen::MatrixXd beta_hat;     /* M x P from the final round */
    Eigen::MatrixXd omega_hat;    /* M x N */
    sufficient_stats residual_stats;
    int rounds = 0;
  };


  /*! omega_i = (tau^-2 C~^-1 + sigma^-2 I)^-1 sigma^-2 r_i for all
   *  residual images r (M x N) at once
   */
  inline Eigen::MatrixXd solve_omega(
    const vecchia_precision& prior,
    const Eigen::MatrixXd& residuals,
    const double tau2,
    const double sigma2,
    const double tol,
    const Eigen::MatrixXd& warm = Eigen::MatrixXd()
  ) {
    if ( !(tau2 > 0) || !(sigma2 > 0) )
      throw argument_error("solve_omega: variances must be positive");
    const int m = prior.size();
    auto apply = [&]( const Eigen::MatrixXd& v ) -> Eigen::MatrixXd {
      return prior.apply_precision(v) / tau2 + v / sigma2;
    };
    const Eigen::VectorXd d = precision_diagonal(prior) / tau2 +
      Eigen::VectorXd::Constant( m, 1 / sigma2 );
    const Eigen::MatrixXd pre = d.replicate( 1, residuals.cols() );
    const cg_result cg = conjugate_gradient(
      apply, pre, residuals / sigma2, warm, tol, 10 * m );
    if ( !cg.converged )
      throw numerical_error("fit_conditional: CG did not converge in " +
                            std::to_string(10 * m) + " iterations");
    return cg.x;
  };


  inline conditional_fit fit_conditional(
    const design_factor& design,
    image_source& images,
    const spatial_prior& sp,
    const hmc_config& cfg,
    const conditional_options& opts = conditional_options{}
  ) {
    const int m = images.m();
    const int n = images.n();
    Eigen::MatrixXd y( m, n );
    {
      images.rewind();
      Eigen::VectorXd yi;
      int i = 0;
      while ( images.next(yi) ) {
        if ( i >= n || yi.size() != m )
          throw data_error("fit_conditional: inconsistent image " +
                           std::to_string(i));
        y.col(i++) = yi;
      }
      if ( i != n ) throw data_error("fit_conditional: image count");
    }
    conditional_fit out;
    matrix_image_source src( y );
    sufficient_stats st = stream_sufficient_stats( design, src );
    map_result mr = map_optimize_working( design, st, *sp.prior, true );
    Eigen::MatrixXd beta = rotate_to_beta( design, mr.state.gamma );
    Eigen::MatrixXd omega = Eigen::MatrixXd::Zero( m, n );
    for ( int round = 0; round < opts.max_rounds; round++ ) {
      const double t2 = opts.omega_tau2.value_or( mr.state.tau2 );
      const double s2 = opts.omega_sigma2.value_or( mr.state.sigma2[0] );
      const Eigen::MatrixXd r = y - beta * design.x.transpose();
      omega = solve_omega( *sp.prior, r, t2, s2, opts.cg_tol, omega );
      matrix_image_source rs( y - omega );
      st = stream_sufficient_stats( design, rs );
      map_options mo;
      mo.init = mr.state;
      mr = map_optimize_working( design, st, *sp.prior, true, mo );
      const Eigen::MatrixXd beta_new = rotate_to_beta( design,
                                                       mr.state.gamma );
      const double change = (beta_new - beta).norm() /
        std::max( beta_new.norm(), 1e-300 );
      beta = beta_new;
      out.rounds = round + 1;
      if ( change < opts.tol ) break;
    }
    working_options wo = opts.working;
    if ( wo.variant == "working" ) wo.variant = "conditional";
    out.draws = fit_working( design, st, sp, cfg, wo );
    out.beta_hat = beta;
    out.omega_hat = std::move(omega);
    out.residual_stats = std::move(st);
    return out;
  };




  /* ****************************************************************/
  /*! Marginal variant */
  struct marginal_fit {
    posterior_draws draws;
    Eigen::VectorXd sill;
    Eigen::VectorXd sigma2;
    vecchia_precision h;
  };


  /*! Per-vertex sill RSS / (N - 1) and sigma2 = max(sill - tau2,
   *  1e-6 sill)
   */
  inline std::pair<Eigen::VectorXd, Eigen::VectorXd> sill_variances(
    const Eigen::VectorXd& rss,
    const int n,
    const double tau2
  ) {
    if ( n < 2 ) throw data_error("fit_marginal: need N >= 2");
    const Eigen::VectorXd sill = rss / (n - 1.0);
    Eigen::VectorXd s2( sill.size() );
    for ( int i = 0; i < sill.size(); i++ )
      s2[i] = std::max( { sill[i] - tau2, 1e-6 * sill[i], 1e-300 } );
    return { sill, s2 };
  };


  inline marginal_fit fit_marginal(
    const design_factor& design,
    const sufficient_stats& stats,
    const spherical_mesh& mesh,
    const neighbor_index& nbrs,
    const spatial_prior& sp,
    const hyper_params& hyper,
    const hmc_config& cfg,
    working_options wo = working_options{},
    const vecchia_options& vopts = vecchia_options{}
  ) {
    const map_result mr = map_optimize_working( design, stats, *sp.prior,
                                                false );
    const Eigen::VectorXd rss =
      residual_ss_per_vertex( stats, design.d, mr.state.gamma );
    marginal_fit out;
    std::tie( out.sill, out.sigma2 ) =
      sill_variances( rss, stats.n_images, hyper.tau2 );
    out.h = build_vecchia_covariance( mesh, nbrs, hyper.kernel(),
                                      hyper.tau2, out.sigma2, vopts );
    const noise_model noise = make_correlated_noise( out.h, stats );

    chain_state init = mr.state;
    init.sigma2 = out.sigma2;
    init.tau2 = hyper.tau2 > 0 ? hyper.tau2 : mr.state.tau2;
    init.zeta2 = (mr.state.zeta2 * mr.state.tau2 / init.tau2)
      .cwiseMax(1e-12);
    wo.init = init;
    wo.noise = &noise;
    wo.gibbs = gibbs_flags{ false, false, true, false };
    wo.store_sigma2 = false;
    if ( wo.variant == "working" ) wo.variant = "marginal";
    out.draws = fit_working( design, stats, sp, cfg, wo );
    return out;
  };

}  // namespace gpir

#endif  // _GPIR_SAMPLERS_
