#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <boost/math/distributions/normal.hpp>

#include "gpir/comparators.hpp"
#include "gpir/simulation.hpp"
#include "gpir/study.hpp"
#include "support.hpp"

using namespace gpir;
using namespace gpir::testing;


namespace {

  sim_config small_sim( const int m, const int n,
                        const snr_setting snr = snr_setting::high ) {
    sim_config c;
    c.disc_vertices = m;
    c.sphere_points = 8000;
    c.n = n;
    c.snr = snr;
    return c;
  }

  known_covariance truth_covariance( const sim_config& c ) {
    known_covariance kc;
    kc.beta_kernel = c.truth_kernel();
    kc.beta_var = Eigen::VectorXd::Constant( c.p, c.beta_variance );
    kc.omega_kernel = c.truth_kernel();
    kc.tau2 = c.tau2();
    kc.sigma2 = c.sigma2();
    return kc;
  }

  Eigen::MatrixXd least_squares( const Eigen::MatrixXd& x,
                                 const Eigen::MatrixXd& y ) {
    return x.colPivHouseholderQr().solve( y.transpose() ).transpose();
  }

  hmc_config quick_mcmc() {
    hmc_config h;
    h.warmup = 60;
    h.samples = 100;
    h.thin = 2;
    h.chains = 2;
    h.leapfrog_steps = 10;
    return h;
  }

}


TEST(Simulation, ExpectedZeroFractionMatchesNormalCdf) {
  sim_config c;
  const boost::math::normal z;
  const double oracle = 2 * boost::math::cdf( z, 0.4 ) - 1;
  EXPECT_NEAR( expected_zero_fraction(c), oracle, 1e-12 );
  EXPECT_NEAR( oracle, 0.311, 5e-4 );
}

TEST(Simulation, TruthSparsityNearExpectedFraction) {
  sim_config c;
  c.n = 5;
  const spherical_mesh mesh = make_sim_mesh( c );
  ASSERT_EQ( mesh.size(), 2000 );
  const gp_sampler gp( mesh, c.truth_kernel() );
  for ( int r = 0; r < 3; r++ ) {
    const sim_dataset d = simulate_dataset( c, gp, r );
    for ( int j = 0; j < c.p; j++ ) {
      const double zero = (d.truth.col(j).array() == 0).cast<double>().mean();
      EXPECT_NEAR( zero, 0.311, 0.04 ) << "replicate " << r << " coef " << j;
    }
  }
}

TEST(Simulation, SnrIdentities) {
  sim_config c;
  c.snr = snr_setting::low;
  EXPECT_DOUBLE_EQ( c.tau2(), 1.75 );
  EXPECT_DOUBLE_EQ( c.sigma2(), 1.25 );
  EXPECT_NEAR( signal_variance(c), 0.12, 1e-15 );
  EXPECT_NEAR( spatial_snr(c), 0.04, 1e-12 );
  EXPECT_NEAR( r_squared(c), 0.12 / 3.12, 1e-12 );
  EXPECT_NEAR( r_squared(c), 0.038, 5e-4 );
  c.snr = snr_setting::high;
  EXPECT_DOUBLE_EQ( c.tau2(), 0.23 );
  EXPECT_DOUBLE_EQ( c.sigma2(), 0.07 );
  EXPECT_NEAR( spatial_snr(c), 0.40, 1e-12 );
  EXPECT_NEAR( r_squared(c), 0.286, 5e-4 );
}

TEST(Simulation, CovariateCorrelation) {
  sim_config c = small_sim( 50, 2000 );
  const spherical_mesh mesh = make_sim_mesh( c );
  const gp_sampler gp( mesh, c.truth_kernel() );
  const sim_dataset d = simulate_dataset( c, gp, 0 );
  EXPECT_TRUE( (d.x.col(0).array() == 1).all() );
  const Eigen::VectorXd a = d.x.col(1).array() - d.x.col(1).mean();
  const Eigen::VectorXd b = d.x.col(2).array() - d.x.col(2).mean();
  const double corr = a.dot(b) / std::sqrt( a.squaredNorm() * b.squaredNorm() );
  EXPECT_NEAR( corr, 0.5, 0.05 );
  EXPECT_NEAR( a.squaredNorm() / (c.n - 1), 1, 0.1 );
  EXPECT_NEAR( b.squaredNorm() / (c.n - 1), 1, 0.1 );
}

TEST(Simulation, ImagesMatchTheGenerativeDecomposition) {
  /* Residual variance after removing the true signal is tau2 + sigma2 */
  sim_config c = small_sim( 300, 200, snr_setting::low );
  const spherical_mesh mesh = make_sim_mesh( c );
  const gp_sampler gp( mesh, c.truth_kernel() );
  const sim_dataset d = simulate_dataset( c, gp, 4 );
  const Eigen::MatrixXd e = d.images - d.truth * d.x.transpose();
  const double v = e.array().square().mean();
  EXPECT_NEAR( v, c.tau2() + c.sigma2(), 0.1 * (c.tau2() + c.sigma2()) );
}

TEST(Simulation, DeterministicPerReplicate) {
  sim_config c = small_sim( 100, 20 );
  const spherical_mesh mesh = make_sim_mesh( c );
  const gp_sampler gp( mesh, c.truth_kernel() );
  const sim_dataset a = simulate_dataset( c, gp, 3 );
  const sim_dataset b = simulate_dataset( c, gp, 3 );
  const sim_dataset other = simulate_dataset( c, gp, 4 );
  EXPECT_EQ( a.images, b.images );
  EXPECT_EQ( a.truth, b.truth );
  EXPECT_NE( a.images, other.images );
}

TEST(Simulation, InvalidConfigThrows) {
  sim_config c;
  c.beta_variance = 0;
  EXPECT_THROW( c.validate(), argument_error );
  c = sim_config{};
  c.covariate_corr = 1;
  EXPECT_THROW( c.validate(), argument_error );
  c = sim_config{};
  c.disc_vertices = c.sphere_points + 1;
  EXPECT_THROW( make_sim_mesh(c), argument_error );
}


TEST(Glm, PosteriorMeanIsLeastSquares) {
  std::mt19937_64 rng( 11 );
  const int n = 30, m = 20;
  Eigen::MatrixXd x = gaussian( n, 3, rng );
  x.col(0).setOnes();
  const Eigen::MatrixXd y = gaussian( m, n, rng );
  const int s = 40000;
  const posterior_draws d = fit_glm( x, y, s, rng );
  ASSERT_NO_THROW( d.validate() );
  const Eigen::MatrixXd ls = least_squares( x, y );
  const Eigen::MatrixXd mean = d.mean_field();
  for ( int j = 0; j < 3; j++ ) {
    const Eigen::MatrixXd c = d.coefficient(j);
    for ( int v = 0; v < m; v++ ) {
      const double sd = std::sqrt( (c.col(v).array() - mean(v, j)).square()
                                   .sum() / (s - 1) );
      EXPECT_LT( std::abs(mean(v, j) - ls(v, j)), 4.5 * sd / std::sqrt(s) );
    }
  }
  /* E[sigma2] = RSS / (N - P - 2) under the inverse gamma */
  const Eigen::VectorXd rss =
    (y - ls * x.transpose()).rowwise().squaredNorm();
  const Eigen::VectorXd es = d.sigma2.colwise().mean();
  for ( int v = 0; v < m; v++ )
    EXPECT_NEAR( es[v], rss[v] / (n - 5), 0.03 * rss[v] / (n - 5) );
}

TEST(Glm, FrequentistCoverageOfCredibleIntervals) {
  std::mt19937_64 rng( 12 );
  const int n = 25, m = 2000;
  Eigen::MatrixXd x = gaussian( n, 3, rng );
  x.col(0).setOnes();
  const Eigen::MatrixXd beta = gaussian( m, 3, rng );
  const Eigen::MatrixXd y = beta * x.transpose() + 0.7 * gaussian( m, n, rng );
  const posterior_draws d = fit_glm( x, y, 2000, rng );
  const double cov = pointwise_coverage( pointwise_intervals(d, 0.95), beta );
  /* 6000 independent intervals: binomial sd 0.0028 */
  EXPECT_NEAR( cov, 0.95, 0.012 );
}

TEST(Glm, TooFewImagesThrows) {
  std::mt19937_64 rng( 13 );
  const Eigen::MatrixXd x = gaussian( 3, 3, rng );
  const Eigen::MatrixXd y = gaussian( 5, 3, rng );
  EXPECT_THROW( fit_glm(x, y, 10, rng), data_error );
  EXPECT_THROW( fit_glm(x, gaussian(5, 4, rng), 10, rng), argument_error );
}

TEST(GlmPs, ConstantImageUnchangedBySmoothing) {
  const spherical_mesh mesh = disc( 150 );
  const Eigen::MatrixXd w = smoothing_matrix( mesh, correlation_from_fwhm(6, 1) );
  const Eigen::VectorXd c = Eigen::VectorXd::Constant( mesh.size(), 3.25 );
  EXPECT_LT( (w * c - c).cwiseAbs().maxCoeff(), 1e-12 );
  EXPECT_TRUE( (w.array() >= 0).all() );
}

TEST(GlmPs, SmoothingReducesWhiteNoiseVariance) {
  std::mt19937_64 rng( 14 );
  const spherical_mesh mesh = disc( 200 );
  const Eigen::MatrixXd y = gaussian( mesh.size(), 60, rng );
  const Eigen::MatrixXd ys =
    smoothing_matrix( mesh, correlation_from_fwhm(6, 1) ) * y;
  auto vertex_var = []( const Eigen::MatrixXd& a ) {
    const Eigen::MatrixXd c = a.colwise() - a.rowwise().mean();
    return Eigen::VectorXd( c.rowwise().squaredNorm() / (a.cols() - 1.0) );
  };
  const Eigen::VectorXd v0 = vertex_var( y ), v1 = vertex_var( ys );
  EXPECT_LT( v1.mean(), 0.5 * v0.mean() );
  EXPECT_GT( (v1.array() < v0.array()).cast<double>().mean(), 0.95 );
  /* fit_glm_ps is fit_glm on the smoothed images */
  Eigen::MatrixXd x = gaussian( 60, 2, rng );
  x.col(0).setOnes();
  std::mt19937_64 r1( 5 ), r2( 5 );
  const posterior_draws a = fit_glm_ps( x, y, mesh, 50, r1 );
  const posterior_draws b = fit_glm( x, ys, 50, r2 );
  EXPECT_LT( (a.beta - b.beta).cwiseAbs().maxCoeff(), 1e-10 );
  EXPECT_EQ( a.variant, "glm_ps" );
}


class Oracle : public ::testing::Test {
protected:
  sim_config sim = small_sim( 120, 40 );
  spherical_mesh mesh = make_sim_mesh( sim );
  sim_dataset data;
  known_covariance kc = truth_covariance( sim );

  void SetUp() override {
    const gp_sampler gp( mesh, sim.truth_kernel() );
    data = simulate_dataset( sim, gp, 0 );
  }
};

TEST_F(Oracle, MeanSolvesNormalEquations) {
  const int m = mesh.size(), p = sim.p;
  const Eigen::MatrixXd cb = dense_correlation( mesh, kc.beta_kernel, false );
  Eigen::MatrixXd h = kc.tau2 * dense_correlation( mesh, kc.omega_kernel, false );
  h.diagonal().array() += kc.sigma2;
  const Eigen::MatrixXd hi = h.inverse(), ci = cb.inverse();
  const Eigen::MatrixXd xtx = data.x.transpose() * data.x;
  Eigen::MatrixXd q( m * p, m * p );
  for ( int a = 0; a < p; a++ )
    for ( int b = 0; b < p; b++ ) {
      q.block( a * m, b * m, m, m ) = xtx(a, b) * hi;
      if ( a == b ) q.block( a * m, b * m, m, m ) += ci / kc.beta_var[a];
    }
  const Eigen::MatrixXd r = hi * data.images * data.x;
  const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>( r.data(), m * p );

  std::mt19937_64 rng( 1 );
  Eigen::MatrixXd mean;
  const posterior_draws d = fit_oracle( data.x, data.images, mesh, kc, 10,
                                        rng, &mean );
  ASSERT_NO_THROW( d.validate() );
  const Eigen::VectorXd mv = Eigen::Map<const Eigen::VectorXd>( mean.data(), m * p );
  EXPECT_LT( (q * mv - rhs).norm() / rhs.norm(), 1e-8 );
}

TEST_F(Oracle, DiffusePriorLimitIsGeneralizedLeastSquares) {
  /* With a Kronecker error covariance, GLS for every vertex block
   * coincides with per-vertex least squares */
  known_covariance flat = kc;
  flat.beta_var.setConstant( 1e10 );
  std::mt19937_64 rng( 2 );
  Eigen::MatrixXd mean;
  fit_oracle( data.x, data.images, mesh, flat, 1, rng, &mean );
  const Eigen::MatrixXd ls = least_squares( data.x, data.images );
  EXPECT_LT( (mean - ls).cwiseAbs().maxCoeff() / ls.cwiseAbs().maxCoeff(), 1e-6 );
}

TEST_F(Oracle, DrawCovarianceMatchesPrecisionInverse) {
  /* Sample variance of a few coordinates against the dense inverse */
  std::mt19937_64 rng( 3 );
  Eigen::MatrixXd mean;
  const int s = 20000;
  const posterior_draws d = fit_oracle( data.x, data.images, mesh, kc, s,
                                        rng, &mean );
  const Eigen::VectorXd mv = Eigen::Map<const Eigen::VectorXd>(
    mean.data(), mean.size() );
  const Eigen::RowVectorXd emp = d.beta.colwise().mean();
  const Eigen::MatrixXd c = d.beta.rowwise() - emp;
  const Eigen::VectorXd var = c.colwise().squaredNorm() / (s - 1.0);
  for ( int i = 0; i < mv.size(); i += 37 ) {
    EXPECT_LT( std::abs(emp[i] - mv[i]), 4.5 * std::sqrt(var[i] / s) );
  }
  std::mt19937_64 rng2( 4 );
  Eigen::MatrixXd low_mean;
  const posterior_draws l = fit_low_rank( data.x, data.images, mesh, kc, 1.0,
                                          s, rng2, nullptr, &low_mean );
  const Eigen::RowVectorXd lm = l.beta.colwise().mean();
  const Eigen::VectorXd lvar =
    (l.beta.rowwise() - lm).colwise().squaredNorm() / (s - 1.0);
  for ( int i = 0; i < mv.size(); i += 37 )
    EXPECT_NEAR( lvar[i] / var[i], 1, 0.06 ) << i;
}

TEST_F(Oracle, MemoryGuard) {
  sim_config big = small_sim( 3000, 10 );
  const spherical_mesh bm = make_sim_mesh( big );
  std::mt19937_64 rng( 4 );
  const Eigen::MatrixXd y = Eigen::MatrixXd::Zero( bm.size(), 10 );
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones( 10, 3 );
  EXPECT_THROW( fit_oracle(x, y, bm, truth_covariance(big), 1, rng),
                argument_error );
  EXPECT_THROW( fit_low_rank(x, y, bm, truth_covariance(big), 0.8, 1, rng),
                argument_error );
}

TEST_F(Oracle, FullRankLowRankEqualsOracle) {
  std::mt19937_64 rng( 5 );
  Eigen::MatrixXd om, lm;
  fit_oracle( data.x, data.images, mesh, kc, 1, rng, &om );
  int kept = 0;
  fit_low_rank( data.x, data.images, mesh, kc, 1.0, 1, rng, &kept, &lm );
  EXPECT_EQ( kept, mesh.size() * sim.p );
  EXPECT_LT( (om - lm).cwiseAbs().maxCoeff() / om.cwiseAbs().maxCoeff(), 1e-8 );
}

TEST_F(Oracle, TruncationKeepsFewerDimensions) {
  std::mt19937_64 rng( 6 );
  int kept = 0;
  fit_low_rank( data.x, data.images, mesh, kc, 0.8, 1, rng, &kept );
  EXPECT_LT( kept, mesh.size() * sim.p );
  EXPECT_GT( kept, 0 );
  /* The kept set is the smallest reaching the variance share */
  const Eigen::MatrixXd cb = dense_correlation( mesh, kc.beta_kernel, false );
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es( cb );
  const Eigen::VectorXd lam = es.eigenvalues().reverse();
  const int k = kept / sim.p;
  EXPECT_GE( lam.head(k).sum(), 0.8 * lam.sum() * (1 - 1e-9) );
  EXPECT_LT( lam.head(k - 1).sum(), 0.8 * lam.sum() );
  EXPECT_THROW( fit_low_rank(data.x, data.images, mesh, kc, 0.0, 1, rng),
                argument_error );
}


TEST(Study, ComparatorOrderingAndOracleCoverage) {
  study_options o;
  o.sim = small_sim( 500, 100 );
  o.sim.sphere_points = 31416;
  o.sim.replicates = 10;
  o.methods = { "oracle", "low_rank", "glm", "glm_ps" };
  o.comparator_draws = 1000;
  const study_result r = run_study( o );
  ASSERT_EQ( r.cells.size(), 4u );
  for ( const auto& c : r.cells ) EXPECT_EQ( c.completed, 10 ) << c.method;
  const study_cell& oracle = r.cells[0];
  EXPECT_GE( oracle.ci_coverage.mean, 0.92 );
  EXPECT_LE( oracle.ci_coverage.mean, 0.98 );
  EXPECT_GE( r.cells[1].mrse.mean, oracle.mrse.mean );
  for ( const auto& c : r.cells ) EXPECT_GE( c.mrse.mean, oracle.mrse.mean );
  for ( const auto& c : r.cells ) EXPECT_EQ( c.band_violations, 0 ) << c.method;
}

TEST(Study, MccGrowsWithSampleSize) {
  study_options o;
  o.sim = small_sim( 300, 40 );
  o.sim.replicates = 6;
  o.grid = { {snr_setting::high, 40}, {snr_setting::high, 400} };
  o.methods = { "oracle", "glm", "glm_ps" };
  o.comparator_draws = 500;
  const study_result r = run_study( o );
  ASSERT_EQ( r.cells.size(), 6u );
  for ( int k = 0; k < 3; k++ )
    EXPECT_GT( r.cells[3 + k].mcc.mean, r.cells[k].mcc.mean )
      << r.cells[k].method;
}

TEST(Study, DeterministicAcrossRunsAndThreads) {
  study_options o;
  o.sim = small_sim( 80, 20 );
  o.sim.replicates = 2;
  o.grid = { {snr_setting::high, 20} };
  o.mcmc = quick_mcmc();
  o.comparator_draws = 100;
  auto table = []( const study_result& r ) {
    std::ostringstream os;
    write_study_csv( os, r );
    return os.str();
  };
  const study_result a = run_study( o );
  const study_result b = run_study( o );
  o.threads = 2;
  const study_result c = run_study( o );
  EXPECT_EQ( table(a), table(b) );
  EXPECT_EQ( table(a), table(c) );
  ASSERT_EQ( a.scores.size(), 2 * study_methods().size() );
  for ( std::size_t i = 0; i < a.scores.size(); i++ ) {
    EXPECT_FALSE( a.scores[i].failed ) << a.scores[i].method << ": "
                                       << a.scores[i].error;
    EXPECT_EQ( a.scores[i].mrse, c.scores[i].mrse );
  }
}

TEST(Study, FailedCellsAreRecordedNotFatal) {
  study_options o;
  o.sim = small_sim( 60, 3 );
  o.sim.replicates = 2;
  o.grid = { {snr_setting::high, 3} };
  o.methods = { "glm", "oracle" };
  o.comparator_draws = 50;
  study_result r;
  ASSERT_NO_THROW( r = run_study(o) );
  EXPECT_EQ( r.cells[0].failed, 2 );
  EXPECT_EQ( r.cells[0].completed, 0 );
  EXPECT_TRUE( std::isnan(r.cells[0].mrse.mean) );
  EXPECT_EQ( r.cells[1].completed, 2 );
  for ( const auto& s : r.scores )
    if ( s.method == "glm" ) { EXPECT_FALSE( s.error.empty() ); }
  std::ostringstream os;
  write_replicates_csv( os, r );
  EXPECT_NE( os.str().find("glm,1,"), std::string::npos );
}

TEST(Study, UnknownMethodRejected) {
  study_options o;
  o.methods = { "inla" };
  EXPECT_THROW( run_study(o), argument_error );
  EXPECT_THROW( method_index("nope"), argument_error );
  EXPECT_EQ( method_index("glm_ps"), 6 );
}

TEST(Study, ScoringIsMethodAgnostic) {
  /* Draws concentrated on the truth score perfectly */
  std::mt19937_64 rng( 8 );
  const int m = 40, p = 2;
  Eigen::MatrixXd truth = gaussian( m, p, rng );
  truth.topRows( 10 ).setZero();
  posterior_draws d;
  d.p = p;
  d.m = m;
  d.beta.resize( 400, m * p );
  for ( int s = 0; s < 400; s++ ) {
    const Eigen::MatrixXd b = truth + 1e-4 * gaussian( m, p, rng );
    d.beta.row(s) = Eigen::Map<const Eigen::RowVectorXd>( b.data(), b.size() );
  }
  d.chain_ends = { 400 };
  const replicate_score sc = score_draws( d, truth, 0.95, 0.8 );
  EXPECT_LT( sc.mrse, 1e-3 );
  EXPECT_NEAR( sc.mcc, 1, 1e-12 );
  EXPECT_EQ( sc.band_violations, 0 );
}
