
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "gpir/comparators.hpp"
#include "gpir/draws.hpp"
#include "gpir/error.hpp"
#include "gpir/hmc.hpp"
#include "gpir/hyperparam.hpp"
#include "gpir/inference.hpp"
#include "gpir/model_core.hpp"
#include "gpir/samplers.hpp"
#include "gpir/simulation.hpp"
#include "gpir/sphere_geom.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_STUDY_
#define _GPIR_STUDY_


namespace gpir {

  inline const std::vector<std::string>& study_methods() {
    static const std::vector<std::string> all{
      "working", "marginal", "conditional", "oracle", "low_rank", "glm",
      "glm_ps" };
    return all;
  };

  inline int method_index( const std::string& name ) {
    const auto& all = study_methods();
    const auto it = std::find( all.begin(), all.end(), name );
    if ( it == all.end() )
      throw argument_error("unknown method '" + name + "'");
    return static_cast<int>( it - all.begin() );
  };


  struct study_setting {
    snr_setting snr = snr_setting::high;
    int n = 100;
  };

  struct study_options {
    sim_config sim;                    /* snr and n are overridden per setting */
    std::vector<study_setting> grid{ {snr_setting::high, 100} };
    std::vector<std::string> methods = study_methods();
    hmc_config mcmc;
    double nbr_radius = 8;             /* mm; prior and surrogate */
    double mass_radius = 3;            /* mm */
    double low_rank_fraction = 0.8;
    int comparator_draws = 1000;
    double ci_level = 0.95;
    double band_level = 0.8;
    int threads = 1;                   /* replicates in parallel */
    std::function<void(const std::string&)> log;
  };


  /*! Scores of one method on one replicate */
  struct replicate_score {
    std::string method;
    snr_setting snr = snr_setting::high;
    int n = 0;
    int replicate = 0;
    bool failed = false;
    std::string error;
    double mrse = std::numeric_limits<double>::quiet_NaN();
    double ci_coverage = std::numeric_limits<double>::quiet_NaN();
    /*! Fraction of (vertex, coefficient) pairs inside the band */
    double band_coverage = std::numeric_limits<double>::quiet_NaN();
    /*! Fraction of coefficients whose band covers truth everywhere */
    double band_joint_coverage = std::numeric_limits<double>::quiet_NaN();
    double mcc = std::numeric_limits<double>::quiet_NaN();
    /*! Band nonzero decisions not matched by a pointwise decision at
     *  the band level */
    int band_violations = 0;
    double seconds = 0;
  };


  struct metric_summary {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
  };

  struct study_cell {
    std::string method;
    snr_setting snr = snr_setting::high;
    int n = 0;
    int completed = 0;
    int failed = 0;
    metric_summary mrse, ci_coverage, band_coverage, band_joint_coverage,
      mcc;
    int band_violations = 0;
  };

  struct study_result {
    std::vector<replicate_score> scores;
    std::vector<study_cell> cells;
  };


  /*! Mean and standard error over finite entries */
  inline metric_summary summarize( const std::vector<double>& x ) {
    metric_summary s;
    std::vector<double> v;
    for ( double a : x ) if ( std::isfinite(a) ) v.push_back(a);
    if ( v.empty() ) return s;
    double mu = 0;
    for ( double a : v ) mu += a;
    mu /= v.size();
    s.mean = mu;
    if ( v.size() > 1 ) {
      double ss = 0;
      for ( double a : v ) ss += (a - mu) * (a - mu);
      s.se = std::sqrt( ss / (v.size() - 1) / v.size() );
    }
    else s.se = 0;
    return s;
  };


  /*! Method-agnostic scoring of a set of draws against the truth */
  inline replicate_score score_draws( const posterior_draws& draws,
                                      const Eigen::MatrixXd& truth,
                                      const double ci_level,
                                      const double band_level ) {
    replicate_score sc;
    const int p = draws.p;
    sc.mrse = mrse( draws.mean_field(), truth );
    sc.ci_coverage = pointwise_coverage( pointwise_intervals(draws, ci_level),
                                         truth );
    const interval_set at_band = pointwise_intervals( draws, band_level );
    std::vector<bool> decision, active;
    double covered = 0, vcov = 0;
    for ( int j = 0; j < p; j++ ) {
      const credible_band b = simultaneous_band( draws.coefficient(j),
                                                 band_level );
      const Eigen::VectorXd t = truth.col(j);
      covered += band_covers( b, t ) ? 1 : 0;
      vcov += band_vertex_coverage( b, t );
      const std::vector<bool> db = decide_nonzero( b );
      const std::vector<bool> dp = decide_nonzero( at_band, j );
      for ( std::size_t v = 0; v < db.size(); v++ ) {
        decision.push_back( db[v] );
        active.push_back( t[v] != 0 );
        if ( db[v] && !dp[v] ) sc.band_violations++;
      }
    }
    sc.band_joint_coverage = covered / p;
    sc.band_coverage = vcov / p;
    sc.mcc = mcc( decision, active );
    return sc;
  };




  /*! Shared per-setting geometry: mesh, neighbor sets, prior
   *  approximations and the truth sampler */
  struct study_geometry {
    spherical_mesh mesh;
    neighbor_index nbrs;
    neighbor_index mass_nbrs;
    vecchia_precision prior;
    vecchia_precision mass;
    std::shared_ptr<gp_sampler> truth;

    study_geometry( const sim_config& sim, const double nbr_radius,
                    const double mass_radius )
      : mesh( make_sim_mesh(sim) ),
        nbrs( build_neighbor_index(mesh, nbr_radius) ),
        mass_nbrs( build_neighbor_index(mesh, mass_radius) ),
        prior( build_vecchia(mesh, nbrs, sim.truth_kernel()) ),
        mass( build_vecchia(mesh, mass_nbrs, sim.truth_kernel()) ),
        truth( std::make_shared<gp_sampler>(mesh, sim.truth_kernel()) ) { }

    spatial_prior spatial() const { return spatial_prior{ &prior, &mass }; }
  };


  /*! Covariance-structure estimate shared by the marginal and
   *  conditional fits: (tau2, sigma2_0) of the surrogate model on
   *  working-MAP residual images with the kernel held at `kernel` */
  inline hyper_estimate study_hyper( const sim_dataset& data,
                                     const design_factor& design,
                                     const sufficient_stats& stats,
                                     const study_geometry& geo,
                                     const correlation_model& kernel ) {
    const map_result mr = map_optimize_working( design, stats, geo.prior,
                                                false );
    const Eigen::MatrixXd beta = rotate_to_beta( design, mr.state.gamma );
    const Eigen::MatrixXd resid = data.images - beta * data.x.transpose();
    hyper_params start = default_hyper_start( resid );
    start.psi = kernel.psi;
    start.nu = kernel.nu;
    hyper_options ho;
    ho.fix_kernel = true;
    return estimate_hyper( resid, geo.mesh, geo.nbrs, start, ho );
  };


  /*! Fit one method on one replicate; throws on failure */
  inline posterior_draws study_fit( const std::string& method,
                                    const sim_dataset& data,
                                    const sim_config& sim,
                                    const study_geometry& geo,
                                    const study_options& opts,
                                    const int replicate,
                                    const design_factor& design,
                                    const sufficient_stats& stats,
                                    const hyper_estimate* hyper ) {
    const int k = method_index( method );
    auto rng = substream( sim.seed, replicate, stream_fit + k );
    hmc_config cfg = opts.mcmc;
    cfg.seed = rng();

    known_covariance kc;
    kc.beta_kernel = sim.truth_kernel();
    kc.beta_var = Eigen::VectorXd::Constant( sim.p, sim.beta_variance );
    kc.omega_kernel = sim.truth_kernel();
    kc.tau2 = sim.tau2();
    kc.sigma2 = sim.sigma2();

    if ( method == "working" )
      return fit_working( design, stats, geo.spatial(), cfg );
    if ( method == "marginal" ) {
      if ( !hyper ) throw argument_error("study: marginal needs hyper");
      return fit_marginal( design, stats, geo.mesh, geo.nbrs, geo.spatial(),
                           *hyper, cfg ).draws;
    }
    if ( method == "conditional" ) {
      if ( !hyper ) throw argument_error("study: conditional needs hyper");
      conditional_options co;
      co.omega_tau2 = hyper->tau2;
      co.omega_sigma2 = hyper->sigma2_0;
      matrix_image_source src( data.images );
      return fit_conditional( design, src, geo.spatial(), cfg, co ).draws;
    }
    if ( method == "oracle" )
      return fit_oracle( data.x, data.images, geo.mesh, kc,
                         opts.comparator_draws, rng );
    if ( method == "low_rank" )
      return fit_low_rank( data.x, data.images, geo.mesh, kc,
                           opts.low_rank_fraction, opts.comparator_draws,
                           rng );
    if ( method == "glm" )
      return fit_glm( data.x, data.images, opts.comparator_draws, rng );
    if ( method == "glm_ps" )
      return fit_glm_ps( data.x, data.images, geo.mesh,
                         opts.comparator_draws, rng );
    throw argument_error("unknown method '" + method + "'");
  };


  /*! Every method on every replicate of every setting
   *
   * Failures are recorded per (method, replicate) and never abort the
   * study. Results are ordered by (setting, replicate, method) and do
   * not depend on the thread count.
   */
  inline study_result run_study( const study_options& opts ) {
    opts.mcmc.validate();
    for ( const auto& m : opts.methods ) method_index( m );
    if ( opts.threads < 1 ) throw argument_error("study: threads >= 1");
    const bool need_hyper = std::any_of(
      opts.methods.begin(), opts.methods.end(), []( const std::string& m ) {
        return m == "marginal" || m == "conditional"; } );

    study_result res;
    std::mutex log_mu;
    auto say = [&]( const std::string& s ) {
      if ( !opts.log ) return;
      std::lock_guard<std::mutex> lk( log_mu );
      opts.log( s );
    };

    for ( const auto& setting : opts.grid ) {
      sim_config sim = opts.sim;
      sim.snr = setting.snr;
      sim.n = setting.n;
      sim.validate();
      const study_geometry geo( sim, opts.nbr_radius, opts.mass_radius );
      const int nm = static_cast<int>( opts.methods.size() );
      std::vector<replicate_score> block( sim.replicates * nm );

      auto one_replicate = [&]( const int r ) {
        const sim_dataset data = simulate_dataset( sim, *geo.truth, r );
        const design_factor design = factorize_design( data.x );
        matrix_image_source src( data.images );
        const sufficient_stats stats = stream_sufficient_stats( design, src );
        std::optional<hyper_estimate> hyper;
        std::string hyper_error;
        if ( need_hyper ) {
          try {
            hyper = study_hyper( data, design, stats, geo, sim.truth_kernel() );
          }
          catch ( const std::exception& e ) { hyper_error = e.what(); }
        }
        for ( int k = 0; k < nm; k++ ) {
          const std::string& method = opts.methods[k];
          replicate_score sc;
          const auto t0 = std::chrono::steady_clock::now();
          try {
            const bool uses_hyper = method == "marginal" ||
              method == "conditional";
            if ( uses_hyper && !hyper )
              throw numerical_error("hyperparameter estimation failed: " +
                                    hyper_error);
            const posterior_draws d = study_fit(
              method, data, sim, geo, opts, r, design, stats,
              hyper ? &*hyper : nullptr );
            sc = score_draws( d, data.truth, opts.ci_level,
                              opts.band_level );
          }
          catch ( const std::exception& e ) {
            sc = replicate_score{};
            sc.failed = true;
            sc.error = e.what();
          }
          sc.seconds = std::chrono::duration<double>(
            std::chrono::steady_clock::now() - t0 ).count();
          sc.method = method;
          sc.snr = sim.snr;
          sc.n = sim.n;
          sc.replicate = r;
          std::ostringstream msg;
          msg << to_string(sim.snr) << " N=" << sim.n << " rep " << r << " "
              << method;
          if ( sc.failed ) msg << " FAILED: " << sc.error;
          else msg << std::setprecision(4) << " mrse=" << sc.mrse
                   << " ci=" << sc.ci_coverage << " band="
                   << sc.band_coverage << " mcc=" << sc.mcc << " ("
                   << sc.seconds << " s)";
          say( msg.str() );
          block[r * nm + k] = sc;
        }
      };

      std::atomic<int> next{0};
      auto worker = [&]() {
        for ( int r = next++; r < sim.replicates; r = next++ )
          one_replicate( r );
      };
      const int nt = std::min( opts.threads, sim.replicates );
      if ( nt <= 1 ) worker();
      else {
        std::vector<std::thread> pool;
        for ( int t = 0; t < nt; t++ ) pool.emplace_back( worker );
        for ( auto& t : pool ) t.join();
      }

      for ( int k = 0; k < nm; k++ ) {
        study_cell c;
        c.method = opts.methods[k];
        c.snr = sim.snr;
        c.n = sim.n;
        std::vector<double> a, b, bc, bv, mc;
        for ( int r = 0; r < sim.replicates; r++ ) {
          const replicate_score& sc = block[r * nm + k];
          if ( sc.failed ) { c.failed++; continue; }
          c.completed++;
          a.push_back( sc.mrse );
          b.push_back( sc.ci_coverage );
          bc.push_back( sc.band_coverage );
          bv.push_back( sc.band_joint_coverage );
          mc.push_back( sc.mcc );
          c.band_violations += sc.band_violations;
        }
        c.mrse = summarize( a );
        c.ci_coverage = summarize( b );
        c.band_coverage = summarize( bc );
        c.band_joint_coverage = summarize( bv );
        c.mcc = summarize( mc );
        res.cells.push_back( c );
      }
      res.scores.insert( res.scores.end(), block.begin(), block.end() );
    }
    return res;
  };


  inline void write_study_csv( std::ostream& os, const study_result& res ) {
    os << "snr,n,method,completed,failed,mrse,mrse_se,ci95_coverage,"
       << "ci95_coverage_se,cb80_coverage,cb80_coverage_se,"
       << "cb80_joint_coverage,cb80_joint_coverage_se,mcc,mcc_se,"
       << "band_violations\n";
    os << std::setprecision(6);
    auto put = [&os]( const metric_summary& s ) {
      os << "," << s.mean << "," << s.se;
    };
    for ( const auto& c : res.cells ) {
      os << to_string(c.snr) << "," << c.n << "," << c.method << ","
         << c.completed << "," << c.failed;
      put( c.mrse );
      put( c.ci_coverage );
      put( c.band_coverage );
      put( c.band_joint_coverage );
      put( c.mcc );
      os << "," << c.band_violations << "\n";
    }
  };

  inline void write_replicates_csv( std::ostream& os,
                                    const study_result& res ) {
    os << "snr,n,replicate,method,failed,mrse,ci95_coverage,cb80_coverage,"
       << "cb80_joint_coverage,mcc,band_violations,seconds,error\n";
    os << std::setprecision(8);
    for ( const auto& s : res.scores ) {
      std::string err = s.error;
      std::replace( err.begin(), err.end(), ',', ';' );
      std::replace( err.begin(), err.end(), '\n', ' ' );
      os << to_string(s.snr) << "," << s.n << "," << s.replicate << ","
         << s.method << "," << (s.failed ? 1 : 0) << "," << s.mrse << ","
         << s.ci_coverage << "," << s.band_coverage << ","
         << s.band_joint_coverage << "," << s.mcc << ","
         << s.band_violations << "," << s.seconds << "," << err << "\n";
    }
  };

}  // namespace gpir

#endif  // _GPIR_STUDY_
