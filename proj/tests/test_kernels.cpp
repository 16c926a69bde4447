
#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <Eigen/Eigenvalues>

#include "gpir/config.hpp"
#include "gpir/kernels.hpp"

using namespace gpir;


TEST(Evaluate, OneAtZero) {
  for ( double nu : {0.3, 1.0, 1.38, 2.0} )
    EXPECT_EQ( evaluate(correlation_model(0.5, nu), 0), 1.0 );
}

TEST(Evaluate, HalfMaximumAnchors) {
  EXPECT_NEAR( evaluate(correlation_model(0.077, 2), 3), 0.5, 0.002 );
  EXPECT_NEAR( evaluate(correlation_model(0.17, 1.38), 2.769), 0.5, 0.01 );
}

TEST(Evaluate, NegativeDistanceThrows) {
  EXPECT_THROW( evaluate(correlation_model(0.1, 1), -1e-3), argument_error );
}

TEST(Evaluate, StrictlyDecreasingInUnitInterval) {
  const correlation_model k( 0.3, 1.5 );
  double prev = 1;
  for ( double a = 0.01; a < 30; a += 0.37 ) {
    const double c = evaluate( k, a );
    EXPECT_LT( c, prev );
    EXPECT_GT( c, 0 );
    prev = c;
  }
}

TEST(Model, ParameterValidation) {
  EXPECT_THROW( correlation_model(0, 1), argument_error );
  EXPECT_THROW( correlation_model(-1, 1), argument_error );
  EXPECT_THROW( correlation_model(1, 0), argument_error );
  EXPECT_THROW( correlation_model(1, 2.01), argument_error );
  EXPECT_THROW( correlation_model(1, 1, "matern"), argument_error );
  EXPECT_NO_THROW( correlation_model(1, 2) );
}


TEST(Fwhm, PsiAnchors) {
  EXPECT_NEAR( fwhm_to_psi(6, 2), 0.0770, 0.0005 );
  EXPECT_NEAR( fwhm_to_psi(6, 2), std::log(2.0) / 9, 1e-15 );
  EXPECT_NEAR( fwhm_to_psi(6, 1), std::log(2.0) / 3, 1e-15 );
}

TEST(Fwhm, FwhmAnchors) {
  EXPECT_NEAR( psi_to_fwhm(0.17, 1.38), 5.55, 0.05 );
  EXPECT_NEAR( psi_to_fwhm(std::log(2.0), 1), 2, 1e-12 );
  EXPECT_NEAR( psi_to_fwhm(0.077, 2), 6.0, 0.01 );
}

TEST(Fwhm, HalfMaximumIsExact) {
  for ( double f : {1.0, 3.5, 6.0, 12.0} )
    for ( double nu : {0.5, 1.0, 1.7, 2.0} )
      EXPECT_NEAR( evaluate(correlation_from_fwhm(f, nu), f / 2), 0.5, 1e-14 );
}

TEST(Fwhm, RoundTripIsExactInverse) {
  std::mt19937 rng( 3 );
  std::uniform_real_distribution<double> uf( 0.1, 50 ), un( 0.05, 2 );
  for ( int t = 0; t < 200; t++ ) {
    const double f = uf(rng), nu = un(rng);
    EXPECT_NEAR( psi_to_fwhm(fwhm_to_psi(f, nu), nu), f, 1e-12 * f );
    const double psi = fwhm_to_psi( f, nu );
    EXPECT_NEAR( fwhm_to_psi(psi_to_fwhm(psi, nu), nu), psi, 1e-12 * psi );
  }
}

TEST(Fwhm, InvalidArguments) {
  EXPECT_THROW( fwhm_to_psi(0, 1), argument_error );
  EXPECT_THROW( fwhm_to_psi(-2, 1), argument_error );
  EXPECT_THROW( fwhm_to_psi(6, 0), argument_error );
  EXPECT_THROW( psi_to_fwhm(0, 1), argument_error );
  EXPECT_THROW( psi_to_fwhm(0.1, 2.5), argument_error );
}


TEST(Gram, SmallSetsArePositiveSemidefinite) {
  std::mt19937 rng( 11 );
  std::normal_distribution<double> z(0, 1);
  std::uniform_real_distribution<double> un( 0.1, 1.99 ), up( 0.01, 2 );
  for ( int t = 0; t < 100; t++ ) {
    std::vector<direction_type> d;
    for ( int i = 0; i < 12; i++ )
      d.push_back( direction_type(z(rng), z(rng), z(rng)).normalized() );
    const spherical_mesh m( d, 100 );
    const Eigen::MatrixXd c = dense_correlation( m,
                                                 correlation_model(up(rng) * 0.01,
                                                                   un(rng)) );
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es( c );
    EXPECT_GT( es.eigenvalues().minCoeff(), -1e-8 );
  }
}

TEST(Gram, GaussianClampOnlyAboveFiveHundred) {
  const correlation_model g( 0.05, 2 );
  const spherical_mesh small = fibonacci_sphere( 100, 100 );
  const spherical_mesh large = fibonacci_sphere( 501, 100 );
  const Eigen::MatrixXd cs = dense_correlation( small, g );
  EXPECT_EQ( cs(0, 1), evaluate(g, small.distance(0, 1)) );
  const Eigen::MatrixXd cl = dense_correlation( large, g );
  const double a = large.distance( 0, 1 );
  EXPECT_EQ( cl(0, 1), std::exp(-0.05 * std::pow(a, 2 - 1e-9)) );
  const Eigen::MatrixXd cu = dense_correlation( large, g, false );
  EXPECT_EQ( cu(0, 1), evaluate(g, a) );
}


TEST(Config, KernelKeys) {
  std::istringstream a( "kernel.fwhm_mm = 6\nkernel.nu = 1\n" );
  const correlation_model ka =
    correlation_from_config( key_value_config::parse(a) );
  EXPECT_NEAR( ka.psi, std::log(2.0) / 3, 1e-15 );
  EXPECT_EQ( ka.nu, 1 );

  std::istringstream b( "kernel.psi=0.17\nkernel.nu=1.38\n" );
  const correlation_model kb =
    correlation_from_config( key_value_config::parse(b) );
  EXPECT_EQ( kb.psi, 0.17 );
  EXPECT_EQ( kb.nu, 1.38 );

  std::istringstream c( "kernel.psi=0.17\nkernel.fwhm_mm=6\n" );
  EXPECT_THROW( correlation_from_config(key_value_config::parse(c)),
                argument_error );
}
