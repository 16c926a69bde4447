
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gpir/gpir.hpp"


namespace {

  struct global_options {
    unsigned long long seed = 1;
    int threads = 1;
    std::string config;
    double sphere_radius = 100;
    double nbr_radius = 8;
    double mass_radius = 3;
  };

  gpir::key_value_config load_config( const global_options& g ) {
    return g.config.empty() ? gpir::key_value_config() :
      gpir::key_value_config::read( g.config );
  };

  std::ofstream open_out( const std::string& path ) {
    std::ofstream os( path );
    if ( !os ) throw gpir::data_error("cannot write " + path);
    return os;
  };

  std::vector<std::string> split_list( const std::string& s ) {
    std::vector<std::string> out;
    std::stringstream ss( s );
    std::string t;
    while ( std::getline(ss, t, ',') )
      if ( !gpir::detail::trim(t).empty() )
        out.push_back( gpir::detail::trim(t) );
    return out;
  };

  void warn_all( const gpir::design_factor& d ) {
    for ( const auto& w : d.warnings ) std::cerr << "warning: " << w << "\n";
  };


  void write_matrix_csv( const std::string& path, const Eigen::MatrixXd& a,
                         const std::string& header ) {
    std::ofstream os = open_out( path );
    os << header << "\n" << std::setprecision(17);
    for ( Eigen::Index i = 0; i < a.rows(); i++ ) {
      os << i;
      for ( Eigen::Index j = 0; j < a.cols(); j++ ) os << "," << a(i, j);
      os << "\n";
    }
  };




  /* ****************************************************************/
  struct simulate_options {
    std::string out_dir = ".";
    int disc_vertices = 2000;
    int sphere_points = 31416;
    int n = 100;
    int p = 3;
    double covariate_corr = 0.5;
    std::string snr = "high";
    int replicate = 0;
  };

  int run_simulate( const global_options& g, const simulate_options& o ) {
    gpir::sim_config c;
    c.disc_vertices = o.disc_vertices;
    c.sphere_points = o.sphere_points;
    c.radius = g.sphere_radius;
    c.n = o.n;
    c.p = o.p;
    c.covariate_corr = o.covariate_corr;
    c.snr = gpir::parse_snr( o.snr );
    c.seed = g.seed;
    c.validate();
    const gpir::spherical_mesh mesh = gpir::make_sim_mesh( c );
    const gpir::gp_sampler gp( mesh, c.truth_kernel() );
    const gpir::sim_dataset d = gpir::simulate_dataset( c, gp, o.replicate );

    gpir::write_mesh_csv( o.out_dir + "/mesh.csv", mesh );
    gpir::covariate_table cov;
    cov.x = d.x;
    cov.names.push_back( "intercept" );
    for ( int j = 1; j < c.p; j++ ) cov.names.push_back( "x" + std::to_string(j) );
    for ( int i = 0; i < c.n; i++ ) cov.ids.push_back( "s" + std::to_string(i) );
    gpir::write_covariates_csv( o.out_dir + "/covariates.csv", cov );
    gpir::write_outcomes_binary( o.out_dir + "/outcomes.gpis", d.images );
    std::string header = "vertex";
    for ( const auto& nm : cov.names ) header += "," + nm;
    write_matrix_csv( o.out_dir + "/truth.csv", d.truth, header );
    std::cout << "simulated M=" << mesh.size() << " N=" << c.n << " P=" << c.p
              << " snr=" << o.snr << " (spatial SNR "
              << gpir::spatial_snr(c) << ", R^2 " << gpir::r_squared(c)
              << ") into " << o.out_dir << "\n";
    return 0;
  };




  /* ****************************************************************/
  struct estimate_options {
    std::string mesh, outcomes, covariates, out = "hyper.txt";
    bool fix_kernel = false;
    double max_evaluations = 2000;
  };

  int run_estimate( const global_options& g, const estimate_options& o ) {
    const gpir::key_value_config cfg = load_config( g );
    const gpir::spherical_mesh mesh =
      gpir::read_mesh_csv( o.mesh, g.sphere_radius );
    Eigen::MatrixXd y = gpir::read_outcomes( o.outcomes );
    if ( y.rows() != mesh.size() )
      throw gpir::data_error("outcomes have " + std::to_string(y.rows()) +
                             " vertices, mesh has " +
                             std::to_string(mesh.size()));
    if ( !o.covariates.empty() ) {
      /* Surrogate fit on least-squares residuals */
      const gpir::covariate_table cov = gpir::read_covariates_csv( o.covariates );
      if ( cov.x.rows() != y.cols() )
        throw gpir::data_error("covariates and outcomes disagree on N");
      const Eigen::MatrixXd b = cov.x.colPivHouseholderQr().solve(
        y.transpose() );
      y -= (cov.x * b).transpose();
    }
    const gpir::neighbor_index nbrs =
      gpir::build_neighbor_index( mesh, g.nbr_radius );
    gpir::hyper_params start = gpir::default_hyper_start( y );
    if ( cfg.contains("kernel.psi") || cfg.contains("kernel.fwhm_mm") ||
         cfg.contains("kernel.nu") ) {
      const gpir::correlation_model k = gpir::correlation_from_config( cfg );
      start.psi = k.psi;
      start.nu = k.nu;
    }
    gpir::hyper_options ho;
    ho.fix_kernel = o.fix_kernel;
    ho.optimizer.max_evaluations = static_cast<int>( o.max_evaluations );
    const gpir::hyper_estimate h =
      gpir::estimate_hyper( y, mesh, nbrs, start, ho );
    std::ofstream os = open_out( o.out );
    gpir::write_hyper( os, h );
    std::cout << std::setprecision(6) << "psi=" << h.psi << " nu=" << h.nu
              << " (fwhm " << gpir::psi_to_fwhm(h.psi, h.nu) << " mm) tau2="
              << h.tau2 << " sigma2_0=" << h.sigma2_0 << " loglik="
              << h.objective << " evaluations=" << h.evaluations
              << (h.converged ? "" : " (not converged)") << "\n";
    return 0;
  };




  /* ****************************************************************/
  struct fit_options {
    std::string mesh, outcomes, covariates, hyper;
    std::string variant = "working";
    std::string out = "draws.gpdr";
    std::string summary;
    gpir::hmc_config mcmc;
  };

  int run_fit( const global_options& g, fit_options o ) {
    const gpir::key_value_config cfg = load_config( g );
    const gpir::spherical_mesh mesh =
      gpir::read_mesh_csv( o.mesh, g.sphere_radius );
    const gpir::covariate_table cov = gpir::read_covariates_csv( o.covariates );
    const gpir::design_factor design = gpir::factorize_design( cov.x );
    warn_all( design );

    std::optional<gpir::hyper_estimate> hyper;
    if ( !o.hyper.empty() ) {
      std::ifstream is( o.hyper );
      if ( !is ) throw gpir::data_error("cannot open " + o.hyper);
      hyper = gpir::read_hyper( is );
    }
    if ( (o.variant == "marginal" || o.variant == "conditional") && !hyper )
      throw gpir::argument_error("--variant " + o.variant +
                                 " requires --hyper (see estimate-hyper)");
    const gpir::correlation_model kernel = hyper ? hyper->kernel() :
      gpir::correlation_from_config( cfg );

    const gpir::neighbor_index nbrs =
      gpir::build_neighbor_index( mesh, g.nbr_radius );
    const gpir::neighbor_index mass_nbrs =
      gpir::build_neighbor_index( mesh, g.mass_radius );
    const gpir::vecchia_precision prior =
      gpir::build_vecchia( mesh, nbrs, kernel );
    const gpir::vecchia_precision mass =
      gpir::build_vecchia( mesh, mass_nbrs, kernel );
    const gpir::spatial_prior sp{ &prior, &mass };

    o.mcmc.seed = g.seed;
    o.mcmc.threads = g.threads;
    gpir::working_options wo;
    {
      std::ostringstream h;
      h << std::hex << mesh.hash();
      wo.config_hash = h.str();
    }

    gpir::posterior_draws draws;
    if ( o.variant == "working" ) {
      gpir::file_image_source src( o.outcomes );
      if ( src.m() != mesh.size() || src.n() != design.n() )
        throw gpir::data_error("outcomes dimensions do not match mesh and "
                               "covariates");
      const gpir::sufficient_stats st =
        gpir::stream_sufficient_stats( design, src );
      draws = gpir::fit_working( design, st, sp, o.mcmc, wo );
    }
    else if ( o.variant == "marginal" ) {
      gpir::file_image_source src( o.outcomes );
      if ( src.m() != mesh.size() || src.n() != design.n() )
        throw gpir::data_error("outcomes dimensions do not match mesh and "
                               "covariates");
      const gpir::sufficient_stats st =
        gpir::stream_sufficient_stats( design, src );
      draws = gpir::fit_marginal( design, st, mesh, nbrs, sp, *hyper, o.mcmc,
                                  wo ).draws;
    }
    else if ( o.variant == "conditional" ) {
      const Eigen::MatrixXd y = gpir::read_outcomes( o.outcomes );
      if ( y.rows() != mesh.size() || y.cols() != design.n() )
        throw gpir::data_error("outcomes dimensions do not match mesh and "
                               "covariates");
      gpir::matrix_image_source src( y );
      gpir::conditional_options co;
      co.omega_tau2 = hyper->tau2;
      co.omega_sigma2 = hyper->sigma2_0;
      co.working = wo;
      draws = gpir::fit_conditional( design, src, sp, o.mcmc, co ).draws;
    }
    else throw gpir::argument_error("unknown variant '" + o.variant + "'");

    gpir::write_draws_binary( o.out, draws );
    if ( !o.summary.empty() ) {
      std::ofstream os = open_out( o.summary );
      gpir::write_summary_csv( os, draws );
    }
    std::cout << o.variant << ": " << draws.size() << " draws from "
              << draws.chains() << " chain(s); acceptance";
    for ( double a : draws.accept_rate ) std::cout << " " << a;
    std::cout << "; step";
    for ( double e : draws.step_size ) std::cout << " " << e;
    std::cout << "\n";
    return 0;
  };




  /* ****************************************************************/
  struct infer_options {
    std::string draws, out = "summary.csv";
    double band_level = 0.8;
    double threshold = 0;
  };

  int run_infer( const infer_options& o ) {
    const gpir::posterior_draws d = gpir::read_draws_binary( o.draws );
    std::ofstream os = open_out( o.out );
    gpir::write_summary_csv( os, d, o.band_level, o.threshold );
    for ( int j = 0; j < d.p; j++ ) {
      const auto labels = gpir::activation_map( d.coefficient(j),
                                                o.threshold, o.band_level );
      int core = 0;
      for ( auto a : labels )
        core += a == gpir::activation_label::positive_core ||
          a == gpir::activation_label::negative_core;
      std::cout << "coefficient " << j << ": " << core << " of "
                << labels.size() << " vertices exceed |" << o.threshold
                << "| at band level " << o.band_level << "\n";
    }
    return 0;
  };




  /* ****************************************************************/
  struct gof_options {
    std::string draws, mesh, covariates, outcomes, out = "gof.csv";
    int replicates = 200;
  };

  int run_gof( const global_options& g, const gof_options& o ) {
    const gpir::posterior_draws d = gpir::read_draws_binary( o.draws );
    const gpir::spherical_mesh mesh =
      gpir::read_mesh_csv( o.mesh, g.sphere_radius );
    if ( !mesh.has_regions() )
      throw gpir::data_error("gof: mesh file needs a region column");
    const gpir::covariate_table cov = gpir::read_covariates_csv( o.covariates );
    const Eigen::MatrixXd y = gpir::read_outcomes( o.outcomes );
    std::optional<Eigen::VectorXd> s2;
    if ( d.sigma2.rows() == 0 ) {
      /* Traces absent (marginal variant): plug in residual variances */
      const Eigen::MatrixXd r = y - d.mean_field() * cov.x.transpose();
      s2 = r.rowwise().squaredNorm() /
        std::max<double>( 1.0, double(y.cols() - cov.x.cols()) );
    }
    auto rng = gpir::chain_rng( g.seed, 0 );
    const gpir::gof_report rep = gpir::posterior_predictive_gof(
      d, cov.x, y, mesh.region_labels(), o.replicates, rng,
      s2 ? &*s2 : nullptr );
    std::ofstream os = open_out( o.out );
    os << "region,vertices,statistic,observed,predictive_mean,predictive_sd,"
          "discrepancy,tail_fraction,ks\n" << std::setprecision(10);
    for ( const auto& r : rep.regions )
      for ( int t = 0; t < gpir::gof_stat_count; t++ )
        os << r.label << "," << r.vertices << "," << gpir::gof_stat_names[t]
           << "," << r.observed[t] << "," << r.predictive_mean[t] << ","
           << r.predictive_sd[t] << "," << r.discrepancy[t] << ","
           << r.tail_fraction[t] << "," << r.ks << "\n";
    std::cout << "regions by residual KS distance: best " << rep.best
              << ", median " << rep.median << ", worst " << rep.worst << "\n";
    return 0;
  };




  /* ****************************************************************/
  struct diagnose_options {
    std::string draws, out = "rhat.csv";
  };

  int run_diagnose( const diagnose_options& o ) {
    const gpir::posterior_draws d = gpir::read_draws_binary( o.draws );
    if ( d.chains() < 2 )
      std::cerr << "warning: split R-hat from a single chain only compares "
                   "its halves\n";
    const Eigen::MatrixXd r = gpir::rhat_map( d, false );
    const Eigen::MatrixXd rf = gpir::rhat_map( d, true );
    std::ofstream os = open_out( o.out );
    os << "vertex,coefficient,rhat,rhat_folded\n" << std::setprecision(8);
    for ( int j = 0; j < d.p; j++ )
      for ( int v = 0; v < d.m; v++ )
        os << v << "," << j << "," << r(v, j) << "," << rf(v, j) << "\n";
    for ( int j = 0; j < d.p; j++ ) {
      Eigen::Index v1, v2;
      const double m1 = r.col(j).maxCoeff( &v1 );
      const double m2 = rf.col(j).maxCoeff( &v2 );
      std::cout << std::setprecision(5) << "coefficient " << j
                << ": max R-hat " << m1 << " (vertex " << v1
                << "), max folded R-hat " << m2 << " (vertex " << v2 << ")"
                << ((std::max(m1, m2) >= 1.01) ? "  [above 1.01]" : "")
                << "\n";
    }
    return 0;
  };




  /* ****************************************************************/
  struct study_cli_options {
    int disc_vertices = 500;
    int sphere_points = 31416;
    int replicates = 10;
    std::string n_list = "100";
    std::string snr_list = "high";
    std::string methods = "working,marginal,conditional,oracle,low_rank,glm,glm_ps";
    std::string out = "study.csv";
    std::string replicates_out;
    gpir::hmc_config mcmc;
  };

  int run_study_cmd( const global_options& g, study_cli_options o ) {
    gpir::study_options so;
    so.sim.disc_vertices = o.disc_vertices;
    so.sim.sphere_points = o.sphere_points;
    so.sim.radius = g.sphere_radius;
    so.sim.replicates = o.replicates;
    so.sim.seed = g.seed;
    so.grid.clear();
    for ( const auto& s : split_list(o.snr_list) )
      for ( const auto& n : split_list(o.n_list) )
        so.grid.push_back( { gpir::parse_snr(s), std::stoi(n) } );
    so.methods = split_list( o.methods );
    o.mcmc.threads = 1;
    so.mcmc = o.mcmc;
    so.nbr_radius = g.nbr_radius;
    so.mass_radius = g.mass_radius;
    so.threads = g.threads;
    so.log = []( const std::string& s ) { std::cerr << s << std::endl; };
    const gpir::study_result res = gpir::run_study( so );
    {
      std::ofstream os = open_out( o.out );
      gpir::write_study_csv( os, res );
    }
    if ( !o.replicates_out.empty() ) {
      std::ofstream os = open_out( o.replicates_out );
      gpir::write_replicates_csv( os, res );
    }
    gpir::write_study_csv( std::cout, res );
    return 0;
  };


  void add_mcmc_flags( CLI::App* cmd, gpir::hmc_config& m ) {
    cmd->add_option("--chains", m.chains, "Independent chains");
    cmd->add_option("--warmup", m.warmup, "Warmup iterations per chain");
    cmd->add_option("--samples", m.samples,
                    "Post-warmup iterations per chain");
    cmd->add_option("--thin", m.thin, "Keep every k-th sample");
    cmd->add_option("--leapfrog", m.leapfrog_steps, "Leapfrog steps");
    cmd->add_option("--step-jitter", m.step_jitter,
                    "Relative half-width of the per-iteration step size draw");
    cmd->add_option("--target-accept", m.target_accept,
                    "Dual-averaging acceptance target");
  };

}  // namespace




int main( int argc, char** argv ) {
  CLI::App app{ "Bayesian image-on-scalar regression on spherical meshes" };
  app.require_subcommand( 1 );
  global_options g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads")
    ->check( CLI::PositiveNumber );
  app.add_option("--config", g.config, "key=value configuration file");
  app.add_option("--sphere-radius-mm", g.sphere_radius, "Sphere radius");
  app.add_option("--nbr-radius-mm", g.nbr_radius,
                 "Prior neighborhood radius");
  app.add_option("--mass-radius-mm", g.mass_radius,
                 "Mass-matrix neighborhood radius");

  simulate_options so;
  auto* sim = app.add_subcommand("simulate", "Generate a disc dataset");
  sim->add_option("--out-dir", so.out_dir)->check( CLI::ExistingDirectory );
  sim->add_option("--disc-vertices", so.disc_vertices);
  sim->add_option("--sphere-points", so.sphere_points);
  sim->add_option("--n", so.n, "Images");
  sim->add_option("--p", so.p, "Coefficients including intercept");
  sim->add_option("--covariate-corr", so.covariate_corr);
  sim->add_option("--snr", so.snr)->check( CLI::IsMember({"low", "high"}) );
  sim->add_option("--replicate", so.replicate);

  estimate_options eo;
  auto* est = app.add_subcommand("estimate-hyper",
                                 "Surrogate-model covariance estimates");
  est->add_option("--mesh", eo.mesh)->required();
  est->add_option("--outcomes", eo.outcomes)->required();
  est->add_option("--covariates", eo.covariates,
                  "Residualize images on these covariates first");
  est->add_option("--out", eo.out);
  est->add_flag("--fix-kernel", eo.fix_kernel,
                "Hold psi and nu at the configured kernel");
  est->add_option("--max-evaluations", eo.max_evaluations);

  fit_options fo;
  auto* fit = app.add_subcommand("fit", "Posterior sampling");
  fit->add_option("--mesh", fo.mesh)->required();
  fit->add_option("--outcomes", fo.outcomes)->required();
  fit->add_option("--covariates", fo.covariates)->required();
  fit->add_option("--hyper", fo.hyper, "estimate-hyper output");
  fit->add_option("--variant", fo.variant)
    ->check( CLI::IsMember({"working", "marginal", "conditional"}) );
  fit->add_option("--out", fo.out, "Draws (binary)");
  fit->add_option("--summary", fo.summary, "Per-vertex summary CSV");
  add_mcmc_flags( fit, fo.mcmc );

  infer_options io;
  auto* inf = app.add_subcommand("infer", "Intervals, bands, activation");
  inf->add_option("--draws", io.draws)->required();
  inf->add_option("--out", io.out);
  inf->add_option("--band-level", io.band_level);
  inf->add_option("--threshold", io.threshold);

  gof_options go;
  auto* gof = app.add_subcommand("gof", "Posterior predictive checks");
  gof->add_option("--draws", go.draws)->required();
  gof->add_option("--mesh", go.mesh)->required();
  gof->add_option("--covariates", go.covariates)->required();
  gof->add_option("--outcomes", go.outcomes)->required();
  gof->add_option("--replicates", go.replicates);
  gof->add_option("--out", go.out);

  diagnose_options dopt;
  auto* dia = app.add_subcommand("diagnose", "Split R-hat maps");
  dia->add_option("--draws", dopt.draws)->required();
  dia->add_option("--out", dopt.out);

  study_cli_options sto;
  sto.mcmc.chains = 2;
  sto.mcmc.warmup = 1000;
  sto.mcmc.samples = 2000;
  sto.mcmc.thin = 5;
  auto* stu = app.add_subcommand("study", "Simulation benchmark");
  stu->add_option("--disc-vertices", sto.disc_vertices);
  stu->add_option("--sphere-points", sto.sphere_points);
  stu->add_option("--replicates", sto.replicates);
  stu->add_option("--n", sto.n_list, "Comma-separated image counts");
  stu->add_option("--snr", sto.snr_list, "Comma-separated: low, high");
  stu->add_option("--methods", sto.methods);
  stu->add_option("--out", sto.out);
  stu->add_option("--replicates-out", sto.replicates_out);
  add_mcmc_flags( stu, sto.mcmc );

  try {
    app.parse( argc, argv );
  }
  catch ( const CLI::ParseError& e ) {
    return app.exit( e );
  }

  try {
    if ( !g.config.empty() ) {
      /* Config supplies defaults for flags left unset */
      const gpir::key_value_config cfg = load_config( g );
      if ( app.count("--seed") == 0 && cfg.contains("seed") )
        g.seed = static_cast<unsigned long long>( *cfg.get_int("seed") );
      if ( app.count("--sphere-radius-mm") == 0 )
        g.sphere_radius = cfg.get_double("sphere_radius_mm")
          .value_or( g.sphere_radius );
      if ( app.count("--nbr-radius-mm") == 0 )
        g.nbr_radius = cfg.get_double("nbr_radius_mm").value_or( g.nbr_radius );
      if ( app.count("--mass-radius-mm") == 0 )
        g.mass_radius = cfg.get_double("mass_radius_mm")
          .value_or( g.mass_radius );
    }
    if ( *sim ) return run_simulate( g, so );
    if ( *est ) return run_estimate( g, eo );
    if ( *fit ) return run_fit( g, fo );
    if ( *inf ) return run_infer( io );
    if ( *gof ) return run_gof( g, go );
    if ( *dia ) return run_diagnose( dopt );
    if ( *stu ) return run_study_cmd( g, sto );
  }
  catch ( const gpir::data_error& e ) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  catch ( const gpir::numerical_error& e ) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  catch ( const gpir::argument_error& e ) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  catch ( const std::exception& e ) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
