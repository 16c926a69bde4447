
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <boost/math/distributions/normal.hpp>

#include "gpir/draws.hpp"
#include "gpir/error.hpp"


#ifndef _GPIR_INFERENCE_
#define _GPIR_INFERENCE_


namespace gpir {

  /*! Empirical quantile with linear interpolation between order
   *  statistics; `sorted` must be ascending */
  inline double sorted_quantile( const std::vector<double>& sorted,
                                 const double q ) {
    if ( sorted.empty() ) throw argument_error("quantile of empty set");
    const double h = (sorted.size() - 1) * std::clamp(q, 0.0, 1.0);
    const std::size_t lo = static_cast<std::size_t>( std::floor(h) );
    const std::size_t hi = std::min( lo + 1, sorted.size() - 1 );
    return sorted[lo] + (h - lo) * (sorted[hi] - sorted[lo]);
  };

  inline double quantile( std::vector<double> x, const double q ) {
    std::sort( x.begin(), x.end() );
    return sorted_quantile( x, q );
  };


  inline double standard_normal_cdf( const double x ) {
    return 0.5 * std::erfc( -x / std::sqrt(2.0) );
  };

  inline double standard_normal_quantile( const double p ) {
    return boost::math::quantile( boost::math::normal(), p );
  };




  /* ****************************************************************/
  /*! Equal-tailed pointwise intervals, M x P */
  struct interval_set {
    Eigen::MatrixXd lo;
    Eigen::MatrixXd hi;
    double level = 0.95;
  };

  inline interval_set pointwise_intervals( const posterior_draws& draws,
                                           const double level ) {
    if ( !(level > 0 && level < 1) )
      throw argument_error("pointwise_intervals: level must be in (0, 1)");
    if ( draws.size() < 20 )
      throw argument_error("pointwise_intervals: need at least 20 draws");
    interval_set out;
    out.level = level;
    out.lo.resize( draws.m, draws.p );
    out.hi.resize( draws.m, draws.p );
    const double a = 0.5 * (1 - level);
    std::vector<double> col( draws.size() );
    for ( int j = 0; j < draws.p; j++ ) {
      for ( int v = 0; v < draws.m; v++ ) {
        const auto c = draws.beta.col( static_cast<Eigen::Index>(j) *
                                       draws.m + v );
        for ( int s = 0; s < draws.size(); s++ ) col[s] = c[s];
        std::sort( col.begin(), col.end() );
        out.lo(v, j) = sorted_quantile( col, a );
        out.hi(v, j) = sorted_quantile( col, 1 - a );
      }
    }
    return out;
  };


  /*! Fraction of (vertex, coefficient) cells with truth inside */
  inline double pointwise_coverage( const interval_set& iv,
                                    const Eigen::MatrixXd& truth ) {
    if ( truth.rows() != iv.lo.rows() || truth.cols() != iv.lo.cols() )
      throw argument_error("pointwise_coverage: shape mismatch");
    return ( (truth.array() >= iv.lo.array()) &&
             (truth.array() <= iv.hi.array()) ).cast<double>().mean();
  };


  /* ****************************************************************/
  /*! center +/- multiplier * scale, jointly over vertices */
  struct credible_band {
    Eigen::VectorXd center;
    Eigen::VectorXd scale;
    double multiplier = 0;
    double level = 0.8;      /*!< Joint (simultaneous) probability */

    Eigen::VectorXd lower() const { return center - multiplier * scale; }
    Eigen::VectorXd upper() const { return center + multiplier * scale; }
  };


  /*! Simultaneous band from S x M draws of one coefficient
   *
   * Standardizes by posterior mean and sd (or median and MAD), takes
   * the max over vertices of |draw - center| / scale for each draw,
   * and sets the multiplier to the ceil(level S)-th smallest maximum.
   */
  inline credible_band simultaneous_band( const Eigen::MatrixXd& draws,
                                          const double level,
                                          const bool robust = false ) {
    if ( !(level > 0 && level < 1) )
      throw argument_error("simultaneous_band: level must be in (0, 1)");
    const int s = static_cast<int>( draws.rows() );
    const int m = static_cast<int>( draws.cols() );
    if ( s < 50 )
      throw argument_error("simultaneous_band: need at least 50 draws");
    credible_band b;
    b.level = level;
    b.center.resize(m);
    b.scale.resize(m);
    std::vector<double> col(s);
    for ( int v = 0; v < m; v++ ) {
      if ( robust ) {
        for ( int i = 0; i < s; i++ ) col[i] = draws(i, v);
        std::sort( col.begin(), col.end() );
        const double med = sorted_quantile( col, 0.5 );
        for ( int i = 0; i < s; i++ ) col[i] = std::abs( draws(i, v) - med );
        std::sort( col.begin(), col.end() );
        b.center[v] = med;
        b.scale[v] = 1.4826 * sorted_quantile( col, 0.5 );
      }
      else {
        const double mu = draws.col(v).mean();
        b.center[v] = mu;
        b.scale[v] = std::sqrt(
          (draws.col(v).array() - mu).square().sum() / std::max(s - 1, 1) );
      }
      b.scale[v] = std::max( b.scale[v], 1e-12 );
    }
    std::vector<double> mx(s);
    for ( int i = 0; i < s; i++ )
      mx[i] = ( (draws.row(i).transpose() - b.center).array().abs() /
                b.scale.array() ).maxCoeff();
    std::sort( mx.begin(), mx.end() );
    const int k = std::clamp(
      static_cast<int>( std::ceil(level * s - 1e-9) ) - 1, 0, s - 1 );
    b.multiplier = std::max( mx[k], 1e-300 );
    return b;
  };


  /*! Fraction of draws lying inside the band at every vertex */
  inline double band_containment( const credible_band& b,
                                  const Eigen::MatrixXd& draws ) {
    const Eigen::VectorXd lo = b.lower(), hi = b.upper();
    int inside = 0;
    for ( Eigen::Index i = 0; i < draws.rows(); i++ ) {
      const Eigen::VectorXd d = draws.row(i).transpose();
      if ( ((d.array() >= lo.array()) && (d.array() <= hi.array())).all() )
        inside++;
    }
    return static_cast<double>(inside) / draws.rows();
  };


  /*! True when truth lies inside the band at every vertex */
  inline bool band_covers( const credible_band& b,
                           const Eigen::VectorXd& truth ) {
    const Eigen::VectorXd lo = b.lower(), hi = b.upper();
    return ( (truth.array() >= lo.array()) &&
             (truth.array() <= hi.array()) ).all();
  };

  /*! Fraction of vertices where truth lies inside the band */
  inline double band_vertex_coverage( const credible_band& b,
                                      const Eigen::VectorXd& truth ) {
    const Eigen::VectorXd lo = b.lower(), hi = b.upper();
    return ( (truth.array() >= lo.array()) &&
             (truth.array() <= hi.array()) ).cast<double>().mean();
  };


  /*! True where 0 lies outside [center - m scale, center + m scale] */
  inline std::vector<bool> decide_nonzero( const credible_band& b ) {
    const Eigen::VectorXd lo = b.lower(), hi = b.upper();
    std::vector<bool> out( b.center.size() );
    for ( Eigen::Index v = 0; v < b.center.size(); v++ )
      out[v] = lo[v] > 0 || hi[v] < 0;
    return out;
  };

  /*! Pointwise counterpart for coefficient j */
  inline std::vector<bool> decide_nonzero( const interval_set& iv,
                                           const int j ) {
    std::vector<bool> out( iv.lo.rows() );
    for ( Eigen::Index v = 0; v < iv.lo.rows(); v++ )
      out[v] = iv.lo(v, j) > 0 || iv.hi(v, j) < 0;
    return out;
  };




  enum class activation_label {
    null, positive_core, negative_core, positive_mean, negative_mean
  };

  inline std::string to_string( const activation_label a ) {
    switch ( a ) {
    case activation_label::positive_core: return "positive-core";
    case activation_label::negative_core: return "negative-core";
    case activation_label::positive_mean: return "positive-mean";
    case activation_label::negative_mean: return "negative-mean";
    default: return "null";
    }
  };


  inline std::vector<activation_label> activation_map(
    const credible_band& b,
    const double threshold
  ) {
    if ( !(threshold >= 0) )
      throw argument_error("activation_map: threshold must be >= 0");
    const Eigen::VectorXd lo = b.lower(), hi = b.upper();
    std::vector<activation_label> out( b.center.size(),
                                       activation_label::null );
    for ( Eigen::Index v = 0; v < b.center.size(); v++ ) {
      if ( lo[v] > threshold ) out[v] = activation_label::positive_core;
      else if ( hi[v] < -threshold ) out[v] = activation_label::negative_core;
      else if ( b.center[v] > threshold )
        out[v] = activation_label::positive_mean;
      else if ( b.center[v] < -threshold )
        out[v] = activation_label::negative_mean;
    }
    return out;
  };

  inline std::vector<activation_label> activation_map(
    const Eigen::MatrixXd& draws,
    const double threshold,
    const double band_level
  ) {
    return activation_map( simultaneous_band(draws, band_level), threshold );
  };




  /*! Matthews correlation; 0 when any margin is empty */
  inline double mcc( const std::vector<bool>& decision,
                     const std::vector<bool>& truth ) {
    if ( decision.empty() || decision.size() != truth.size() )
      throw argument_error("mcc: inputs must be non-empty, equal length");
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for ( std::size_t i = 0; i < decision.size(); i++ ) {
      if ( decision[i] ) (truth[i] ? tp : fp) += 1;
      else (truth[i] ? fn : tn) += 1;
    }
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if ( den == 0 ) return 0;
    return (tp * tn - fp * fn) / std::sqrt(den);
  };


  /*! 100 sum (estimate - truth)^2 / sum truth^2 */
  inline double mrse( const Eigen::MatrixXd& estimate,
                      const Eigen::MatrixXd& truth ) {
    if ( estimate.rows() != truth.rows() || estimate.cols() != truth.cols() )
      throw argument_error("mrse: shape mismatch");
    const double t2 = truth.squaredNorm();
    if ( !(t2 > 0) ) throw argument_error("mrse: truth has zero norm");
    return 100 * (estimate - truth).squaredNorm() / t2;
  };




  /* ****************************************************************/
  /*! Rank-normalized split R-hat
   *
   * Each chain is split in half; values are pooled, ranked (ties
   * averaged) and mapped to normal scores before the classic
   * between/within variance ratio. The folded variant applies the
   * same to |x - median|.
   */
  inline double split_rhat( const std::vector<Eigen::VectorXd>& chains,
                            const bool folded = false ) {
    std::vector<std::vector<double>> split;
    for ( const auto& c : chains ) {
      const Eigen::Index n = c.size();
      if ( n < 4 ) throw argument_error("split_rhat: chains need >= 4 draws");
      const Eigen::Index h = n / 2;
      split.emplace_back( c.data(), c.data() + h );
      split.emplace_back( c.data() + (n - h), c.data() + n );
    }
    if ( split.size() < 2 )
      throw argument_error("split_rhat: need at least 2 splits");
    std::vector<double> all;
    for ( const auto& s : split ) all.insert( all.end(), s.begin(), s.end() );
    if ( folded ) {
      const double med = quantile( all, 0.5 );
      for ( auto& s : split ) for ( auto& x : s ) x = std::abs(x - med);
      all.clear();
      for ( const auto& s : split ) all.insert( all.end(), s.begin(), s.end() );
    }
    const std::size_t total = all.size();
    if ( *std::max_element(all.begin(), all.end()) ==
         *std::min_element(all.begin(), all.end()) )
      return 1;
    /* Average ranks */
    std::vector<std::size_t> idx( total );
    std::iota( idx.begin(), idx.end(), 0 );
    std::sort( idx.begin(), idx.end(),
               [&]( std::size_t a, std::size_t b ) { return all[a] < all[b]; } );
    std::vector<double> rank( total );
    for ( std::size_t i = 0; i < total; ) {
      std::size_t j = i;
      while ( j + 1 < total && all[idx[j + 1]] == all[idx[i]] ) j++;
      const double r = 0.5 * (i + j) + 1;
      for ( std::size_t k = i; k <= j; k++ ) rank[idx[k]] = r;
      i = j + 1;
    }
    std::size_t pos = 0;
    for ( auto& s : split )
      for ( auto& x : s )
        x = standard_normal_quantile(
          (rank[pos++] - 0.375) / (static_cast<double>(total) + 0.25) );

    const double nchain = static_cast<double>( split.size() );
    double n = 1e300;
    for ( const auto& s : split ) n = std::min( n, double(s.size()) );
    std::vector<double> mean, var;
    for ( const auto& s : split ) {
      const double mu = std::accumulate( s.begin(), s.end(), 0.0 ) / s.size();
      double v = 0;
      for ( double x : s ) v += (x - mu) * (x - mu);
      mean.push_back( mu );
      var.push_back( v / (s.size() - 1) );
    }
    const double grand = std::accumulate( mean.begin(), mean.end(), 0.0 ) /
      nchain;
    double b = 0;
    for ( double mu : mean ) b += (mu - grand) * (mu - grand);
    b *= n / (nchain - 1);
    const double w = std::accumulate( var.begin(), var.end(), 0.0 ) / nchain;
    if ( !(w > 0) ) return 1;
    return std::sqrt( ((n - 1) / n * w + b / n) / w );
  };


  /*! Split R-hat of every (vertex, coefficient) */
  inline Eigen::MatrixXd rhat_map( const posterior_draws& draws,
                                   const bool folded ) {
    Eigen::MatrixXd out( draws.m, draws.p );
    for ( int j = 0; j < draws.p; j++ )
      for ( int v = 0; v < draws.m; v++ )
        out(v, j) = split_rhat( draws.chain_series(j, v), folded );
    return out;
  };

}  // namespace gpir

#endif  // _GPIR_INFERENCE_
