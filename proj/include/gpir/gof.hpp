
#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "gpir/draws.hpp"
#include "gpir/error.hpp"
#include "gpir/inference.hpp"


#ifndef _GPIR_GOF_
#define _GPIR_GOF_


namespace gpir {

  /*! Kolmogorov-Smirnov distance of a sample to N(0, 1) */
  inline double ks_distance_normal( std::vector<double> x ) {
    if ( x.empty() ) throw argument_error("ks_distance_normal: empty sample");
    std::sort( x.begin(), x.end() );
    const double n = static_cast<double>( x.size() );
    double d = 0;
    for ( std::size_t i = 0; i < x.size(); i++ ) {
      const double f = standard_normal_cdf( x[i] );
      d = std::max( { d, (i + 1) / n - f, f - i / n } );
    }
    return d;
  };


  /*! Regional mean, 10th and 90th percentile over participants and
   *  vertices */
  constexpr int gof_stat_count = 3;
  inline const std::array<const char*, gof_stat_count> gof_stat_names{
    "mean", "q10", "q90" };


  struct gof_region {
    int label = 0;
    int vertices = 0;
    std::array<double, gof_stat_count> observed{};
    std::array<double, gof_stat_count> predictive_mean{};
    std::array<double, gof_stat_count> predictive_sd{};
    std::array<double, gof_stat_count> discrepancy{};
    /*! Fraction of replicates with statistic <= observed */
    std::array<double, gof_stat_count> tail_fraction{};
    double ks = 0;   /*!< Standardized-residual normality discrepancy */
  };

  struct gof_report {
    std::vector<gof_region> regions;
    int best = -1, median = -1, worst = -1;   /* labels, ranked by ks */
  };


  namespace detail {

    inline std::array<double, gof_stat_count> region_stats(
      std::vector<double>& v
    ) {
      std::sort( v.begin(), v.end() );
      double mu = 0;
      for ( double x : v ) mu += x;
      mu /= v.size();
      return { mu, sorted_quantile(v, 0.1), sorted_quantile(v, 0.9) };
    };

  }  // namespace detail


  /*! Posterior predictive check of the working-model likelihood
   *
   * x: N x P design; images: M x N observed outcomes; regions: label
   * per vertex. Replicates use evenly spaced retained draws of beta
   * and sigma2 (sigma2_fixed overrides an absent trace).
   */
  template< typename URNG >
  gof_report posterior_predictive_gof(
    const posterior_draws& draws,
    const Eigen::MatrixXd& x,
    const Eigen::MatrixXd& images,
    const std::vector<int>& regions,
    const int replicates,
    URNG& rng,
    const Eigen::VectorXd* sigma2_fixed = nullptr
  ) {
    const int m = draws.m;
    const int n = static_cast<int>( x.rows() );
    if ( regions.empty() )
      throw data_error("posterior_predictive_gof: region labels missing");
    if ( static_cast<int>(regions.size()) != m || images.rows() != m ||
         images.cols() != n || x.cols() != draws.p )
      throw argument_error("posterior_predictive_gof: dimension mismatch");
    if ( draws.sigma2.rows() == 0 && !sigma2_fixed )
      throw argument_error("posterior_predictive_gof: no sigma2 available");
    if ( replicates < 1 )
      throw argument_error("posterior_predictive_gof: replicates >= 1");

    std::map<int, std::vector<int>> members;
    for ( int v = 0; v < m; v++ ) members[regions[v]].push_back(v);

    auto stats_of = [&]( const Eigen::MatrixXd& y ) {
      std::map<int, std::array<double, gof_stat_count>> out;
      std::vector<double> buf;
      for ( const auto& [lab, vs] : members ) {
        buf.clear();
        for ( int v : vs )
          for ( int i = 0; i < n; i++ ) buf.push_back( y(v, i) );
        out[lab] = detail::region_stats( buf );
      }
      return out;
    };

    gof_report rep;
    const auto observed = stats_of( images );
    std::map<int, std::vector<std::array<double, gof_stat_count>>> sims;
    std::normal_distribution<double> normal(0, 1);
    const int s = draws.size();
    for ( int r = 0; r < replicates; r++ ) {
      const int k = static_cast<int>(
        (static_cast<long long>(r) * s) / replicates );
      const Eigen::MatrixXd beta = draws.beta.row(k).reshaped( m, draws.p );
      Eigen::VectorXd sd = sigma2_fixed ? sigma2_fixed->cwiseSqrt() :
        Eigen::VectorXd( draws.sigma2.row(k).transpose().cwiseSqrt() );
      Eigen::MatrixXd y = beta * x.transpose();
      for ( int i = 0; i < n; i++ )
        for ( int v = 0; v < m; v++ ) y(v, i) += sd[v] * normal(rng);
      for ( const auto& [lab, st] : stats_of(y) ) sims[lab].push_back(st);
    }

    /* Standardized residuals at posterior means */
    const Eigen::MatrixXd bbar = draws.mean_field();
    Eigen::VectorXd sbar = sigma2_fixed ? sigma2_fixed->cwiseSqrt() :
      Eigen::VectorXd( draws.sigma2.colwise().mean().transpose().cwiseSqrt() );
    const Eigen::MatrixXd resid = images - bbar * x.transpose();

    for ( const auto& [lab, vs] : members ) {
      gof_region g;
      g.label = lab;
      g.vertices = static_cast<int>( vs.size() );
      g.observed = observed.at(lab);
      const auto& sv = sims[lab];
      for ( int t = 0; t < gof_stat_count; t++ ) {
        double mu = 0, ss = 0, below = 0;
        for ( const auto& a : sv ) {
          mu += a[t];
          below += a[t] <= g.observed[t] ? 1 : 0;
        }
        mu /= sv.size();
        for ( const auto& a : sv ) ss += (a[t] - mu) * (a[t] - mu);
        g.predictive_mean[t] = mu;
        g.predictive_sd[t] = sv.size() > 1 ? std::sqrt(ss / (sv.size() - 1))
          : 0;
        g.discrepancy[t] = std::abs( g.observed[t] - mu );
        g.tail_fraction[t] = below / sv.size();
      }
      std::vector<double> z;
      z.reserve( vs.size() * n );
      for ( int v : vs )
        for ( int i = 0; i < n; i++ )
          z.push_back( resid(v, i) / std::max(sbar[v], 1e-300) );
      g.ks = ks_distance_normal( z );
      rep.regions.push_back( g );
    }
    std::vector<int> order( rep.regions.size() );
    for ( std::size_t i = 0; i < order.size(); i++ ) order[i] = int(i);
    std::sort( order.begin(), order.end(), [&]( int a, int b ) {
      return rep.regions[a].ks < rep.regions[b].ks; } );
    rep.best = rep.regions[order.front()].label;
    rep.worst = rep.regions[order.back()].label;
    rep.median = rep.regions[order[order.size() / 2]].label;
    return rep;
  };

}  // namespace gpir

#endif  // _GPIR_GOF_
