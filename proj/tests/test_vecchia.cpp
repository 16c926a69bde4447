
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>
#include <Eigen/Cholesky>

#include "gpir/kernels.hpp"
#include "gpir/sphere_geom.hpp"
#include "gpir/vecchia.hpp"

using namespace gpir;


namespace {

  /* The m vertices of a coarse sphere nearest to one of its points */
  spherical_mesh disc( const int m, const int sphere_points = 4000 ) {
    const spherical_mesh full = fibonacci_sphere( sphere_points, 100 );
    const int c = sphere_points / 2;
    std::vector<int> ids( full.size() );
    std::iota( ids.begin(), ids.end(), 0 );
    std::stable_sort( ids.begin(), ids.end(), [&]( int a, int b ) {
      return full.distance(c, a) < full.distance(c, b); } );
    ids.resize( m );
    return full.subset( ids );
  }

  vecchia_options complete_opts( const int m ) {
    vecchia_options o;
    o.max_neighbors = m;
    return o;
  }

  vecchia_precision complete_build( const spherical_mesh& mesh,
                                    const correlation_model& k ) {
    const neighbor_index nb =
      build_neighbor_index( mesh, mesh_diameter(mesh) + 1 );
    return build_vecchia( mesh, nb, k, complete_opts(mesh.size()) );
  }

  Eigen::VectorXd random_vector( const int m, std::mt19937& rng ) {
    std::normal_distribution<double> z(0, 1);
    Eigen::VectorXd v(m);
    for ( int i = 0; i < m; i++ ) v[i] = z(rng);
    return v;
  }

  double rel( double a, double b ) {
    return std::abs(a - b) / std::max( std::abs(b), 1e-300 );
  }

}


TEST(Build, SingleVertex) {
  const spherical_mesh m( { {0, 0, 1} }, 100 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 8), correlation_from_fwhm(6, 1) );
  EXPECT_EQ( vp.nonzeros(), 0u );
  ASSERT_EQ( vp.cond_var().size(), 1 );
  EXPECT_EQ( vp.cond_var()[0], 1 );
  EXPECT_EQ( vp.log_det(), 0 );
  Eigen::VectorXd v(1);
  v[0] = 3;
  EXPECT_NEAR( vp.quad_form(v), 9, 1e-14 );
}

TEST(Build, TwoVertexClosedForm) {
  const double a = 4 / 100.0;
  const spherical_mesh m( { {0, 0, 1}, {std::sin(a), 0, std::cos(a)} }, 100 );
  const correlation_model k = correlation_from_fwhm( 6, 1 );
  const double rho = evaluate( k, 4 );
  const vecchia_precision vp =
    build_vecchia( m, build_neighbor_index(m, 8), k );
  const int first = vp.ordering()[0], second = vp.ordering()[1];
  EXPECT_TRUE( vp.row(first).empty() );
  const auto r = vp.row( second );
  ASSERT_EQ( r.size(), 1u );
  EXPECT_EQ( r[0].first, first );
  EXPECT_NEAR( r[0].second, rho, 1e-14 );
  EXPECT_NEAR( vp.cond_var()[first], 1, 1e-15 );
  EXPECT_NEAR( vp.cond_var()[second], 1 - rho * rho, 1e-14 );
}

TEST(Build, InvariantsOnSparseBuild) {
  const spherical_mesh m = disc( 300 );
  const double r = 15;
  const neighbor_index nb = build_neighbor_index( m, r );
  const vecchia_precision vp =
    build_vecchia( m, nb, correlation_from_fwhm(6, 1) );
  std::vector<int> rank( m.size() );
  for ( int k = 0; k < m.size(); k++ ) rank[vp.ordering()[k]] = k;
  EXPECT_TRUE( (vp.cond_var().array() > 0).all() );
  EXPECT_TRUE( vp.row(vp.ordering()[0]).empty() );
  EXPECT_EQ( vp.cond_var()[vp.ordering()[0]], 1 );
  for ( int i = 0; i < m.size(); i++ )
    for ( const auto& [j, w] : vp.row(i) ) {
      EXPECT_LT( rank[j], rank[i] );
      EXPECT_LE( m.distance(i, j), r );
    }
}

TEST(Build, NeighborTruncation) {
  const spherical_mesh m = disc( 300 );
  const neighbor_index nb = build_neighbor_index( m, 60 );
  vecchia_options o;
  o.max_neighbors = 10;
  const vecchia_precision vp =
    build_vecchia( m, nb, correlation_from_fwhm(6, 1), o );
  for ( int i = 0; i < m.size(); i++ ) EXPECT_LE( vp.row(i).size(), 10u );
}

TEST(Build, MaxminOrderingIsPermutation) {
  const spherical_mesh m = disc( 200 );
  std::vector<int> o = vecchia_order( m, vecchia_ordering::maxmin );
  std::sort( o.begin(), o.end() );
  for ( int i = 0; i < m.size(); i++ ) EXPECT_EQ( o[i], i );
}


/* Complete conditioning reproduces the dense Gaussian exactly */
class CompleteConditioning : public ::testing::TestWithParam<int> { };

TEST_P(CompleteConditioning, MatchesDenseOracle) {
  const int msize = GetParam();
  const spherical_mesh m = disc( msize, 3000 );
  const correlation_model k = correlation_from_fwhm( 20, 1 );
  const vecchia_precision vp = complete_build( m, k );
  const Eigen::MatrixXd c = dense_correlation( m, k );
  const Eigen::LLT<Eigen::MatrixXd> llt( c );
  ASSERT_EQ( llt.info(), Eigen::Success );
  const double logdet =
    2 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  EXPECT_LE( std::abs(vp.log_det() - logdet), 1e-8 * std::max(1.0, std::abs(logdet)) );

  std::mt19937 rng( 17 );
  for ( int t = 0; t < 20; t++ ) {
    const Eigen::VectorXd v = random_vector( msize, rng );
    EXPECT_LE( rel(vp.quad_form(v), v.dot(llt.solve(v))), 1e-8 );
    EXPECT_LE( (vp.apply_covariance(v) - c * v).norm() / (c * v).norm(), 1e-8 );
    EXPECT_LE( (vp.apply_precision(v) - llt.solve(v)).norm() /
               llt.solve(v).norm(), 1e-8 );
  }
  /* Unit diagonal of the implied covariance */
  const Eigen::MatrixXd ct = vp.apply_covariance(
    Eigen::MatrixXd(Eigen::MatrixXd::Identity(msize, msize)) );
  EXPECT_LE( (ct.diagonal().array() - 1).abs().maxCoeff(), 1e-6 );
}

INSTANTIATE_TEST_SUITE_P(Sizes, CompleteConditioning,
                         ::testing::Values(40, 50, 300));


TEST(Operations, QuadFormZeroAndPositive) {
  const spherical_mesh m = disc( 150 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 10), correlation_from_fwhm(6, 1) );
  EXPECT_EQ( vp.quad_form(Eigen::VectorXd::Zero(150)), 0 );
  std::mt19937 rng( 2 );
  for ( int t = 0; t < 20; t++ )
    EXPECT_GT( vp.quad_form(random_vector(150, rng)), 0 );
}

TEST(Operations, LengthMismatchThrows) {
  const spherical_mesh m = disc( 20 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 10), correlation_from_fwhm(6, 1) );
  EXPECT_THROW( vp.quad_form(Eigen::VectorXd::Zero(19)), argument_error );
  EXPECT_THROW( vp.apply_precision(Eigen::VectorXd(Eigen::VectorXd::Zero(21))),
                argument_error );
}

TEST(Operations, IndependenceBuild) {
  const spherical_mesh m = disc( 50 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 1e-6), correlation_from_fwhm(6, 1) );
  EXPECT_NEAR( vp.log_det(), 0, 1e-15 );
  Eigen::VectorXd e = Eigen::VectorXd::Zero( 50 );
  e[0] = 1;
  EXPECT_LE( (vp.apply_covariance(e) - e).norm(), 1e-15 );
  EXPECT_LE( (vp.apply_precision(e) - e).norm(), 1e-15 );
}

TEST(Operations, PrecisionAndCovarianceAreInverse) {
  const spherical_mesh m = disc( 300 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 8), correlation_from_fwhm(6, 1) );
  std::mt19937 rng( 5 );
  for ( int t = 0; t < 5; t++ ) {
    const Eigen::VectorXd v = random_vector( 300, rng );
    EXPECT_LE( (vp.apply_covariance(vp.apply_precision(v)) - v).norm(),
               1e-10 * v.norm() );
  }
}

TEST(Operations, WhitenGivesQuadraticForm) {
  const spherical_mesh m = disc( 120 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 8), correlation_from_fwhm(6, 1) );
  std::mt19937 rng( 8 );
  Eigen::MatrixXd v( 120, 3 );
  for ( int j = 0; j < 3; j++ ) v.col(j) = random_vector( 120, rng );
  const Eigen::MatrixXd e = vp.whiten( v );
  for ( int j = 0; j < 3; j++ )
    EXPECT_NEAR( e.col(j).squaredNorm(), vp.quad_form(v.col(j)),
                 1e-10 * e.col(j).squaredNorm() );
}

TEST(Operations, DensePrecisionMatchesApply) {
  const spherical_mesh m = disc( 80 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 8), correlation_from_fwhm(6, 1) );
  std::mt19937 rng( 9 );
  const Eigen::VectorXd v = random_vector( 80, rng );
  EXPECT_LE( (vp.dense_precision() * v - vp.apply_precision(v)).norm(),
             1e-10 * v.norm() );
}


TEST(Fidelity, KlNonincreasingInRadius) {
  const spherical_mesh m = disc( 200, 12000 );
  const correlation_model k = correlation_from_fwhm( 6, 1 );
  const Eigen::MatrixXd c = dense_correlation( m, k );
  const Eigen::LLT<Eigen::MatrixXd> llt( c );
  const double logdet_c =
    2 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double diam = mesh_diameter( m ) + 1;
  double prev = std::numeric_limits<double>::infinity();
  for ( double r : {2.0, 4.0, 8.0, 16.0, diam} ) {
    const vecchia_precision vp = build_vecchia(
      m, build_neighbor_index(m, r), k, complete_opts(200) );
    const double kl = 0.5 * ( (vp.dense_precision() * c).trace() - 200 +
                              vp.log_det() - logdet_c );
    EXPECT_LE( kl, prev + 1e-9 ) << "r = " << r;
    EXPECT_GE( kl, -1e-8 );
    prev = kl;
  }
  EXPECT_LT( prev, 1e-7 );
}


TEST(Sampling, MarginalVarianceAndNeighborCorrelation) {
  const spherical_mesh m = disc( 100 );
  const correlation_model k = correlation_from_fwhm( 20, 1 );
  const vecchia_precision vp = complete_build( m, k );
  std::mt19937_64 rng( 21 );
  const int n = 10000;
  const double scale = 1.7;
  Eigen::MatrixXd draws( n, 100 );
  for ( int s = 0; s < n; s++ ) draws.row(s) = vp.sample( scale, rng );
  const int a = 10;
  int b = -1;
  double best = 1e9;
  for ( int j = 0; j < 100; j++ )
    if ( j != a && m.distance(a, j) < best ) { best = m.distance(a, j); b = j; }
  const double va = draws.col(a).squaredNorm() / n;
  const double vb = draws.col(b).squaredNorm() / n;
  EXPECT_NEAR( va, scale * scale, 0.05 * scale * scale );
  const double corr = draws.col(a).dot( draws.col(b) ) / n / std::sqrt(va * vb);
  EXPECT_NEAR( corr, evaluate(k, best), 0.03 );
}

TEST(Sampling, ReproducibleAndValidated) {
  const spherical_mesh m = disc( 60 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 8), correlation_from_fwhm(6, 1) );
  std::mt19937_64 r1( 4 ), r2( 4 );
  EXPECT_EQ( vp.sample(1, r1), vp.sample(1, r2) );
  EXPECT_THROW( vp.sample(0, r1), argument_error );
}


TEST(Nugget, MatchesDenseWithComplete) {
  const spherical_mesh m = disc( 60 );
  const correlation_model k = correlation_from_fwhm( 8, 1.5 );
  Eigen::VectorXd nug( 60 );
  for ( int i = 0; i < 60; i++ ) nug[i] = 0.1 + 0.01 * i;
  const vecchia_precision vp = build_vecchia_covariance(
    m, build_neighbor_index(m, mesh_diameter(m) + 1), k, 2.5, nug,
    complete_opts(60) );
  Eigen::MatrixXd h = 2.5 * dense_correlation( m, k );
  h.diagonal() += nug;
  const Eigen::LLT<Eigen::MatrixXd> llt( h );
  const double logdet =
    2 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  EXPECT_NEAR( vp.log_det(), logdet, 1e-8 * std::abs(logdet) );
  std::mt19937 rng( 6 );
  const Eigen::VectorXd v = random_vector( 60, rng );
  EXPECT_LE( rel(vp.quad_form(v), v.dot(llt.solve(v))), 1e-8 );
}


TEST(Cache, SaveLoadRoundTrip) {
  const spherical_mesh m = disc( 90 );
  const vecchia_precision vp = build_vecchia(
    m, build_neighbor_index(m, 8), correlation_from_fwhm(6, 1) );
  std::stringstream ss;
  vp.save( ss );
  const vecchia_precision back = vecchia_precision::load( ss );
  EXPECT_EQ( back.ordering(), vp.ordering() );
  EXPECT_EQ( back.cond_var(), vp.cond_var() );
  std::mt19937 rng( 1 );
  const Eigen::VectorXd v = random_vector( 90, rng );
  EXPECT_EQ( back.quad_form(v), vp.quad_form(v) );
  EXPECT_EQ( back.info().mesh_hash, m.hash() );
}

TEST(Cache, RejectsGarbage) {
  std::stringstream ss( "not a cache file" );
  EXPECT_THROW( vecchia_precision::load(ss), data_error );
}

TEST(Build, MismatchedNeighborIndexThrows) {
  const spherical_mesh a = disc( 30 ), b = disc( 31 );
  EXPECT_THROW( build_vecchia(a, build_neighbor_index(b, 8),
                              correlation_from_fwhm(6, 1)),
                argument_error );
}
