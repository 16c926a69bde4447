
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gpir/error.hpp"


#ifndef _GPIR_DRAWS_
#define _GPIR_DRAWS_


namespace gpir {

  /* ****************************************************************/
  /*! Retained posterior draws of beta, S x P x M
   *
   * Row s of `beta` holds draw s laid out coefficient-major:
   * column j * M + v is beta_j(v). Draws from chain c occupy rows
   * [chain_ends[c-1], chain_ends[c]).
   */
  struct posterior_draws {
    int p = 0;
    int m = 0;
    Eigen::MatrixXd beta;            /* S x (P M) */
    std::vector<int> chain_ends;
    /* Variance traces; empty when a method has no such parameter */
    Eigen::MatrixXd sigma2;          /* S x M */
    Eigen::VectorXd tau2;            /* S */
    Eigen::VectorXd xi;              /* S */
    Eigen::MatrixXd zeta2;           /* S x P */
    /* Sampler summaries per chain */
    std::vector<double> accept_rate;
    std::vector<double> step_size;
    /* Provenance */
    std::string variant;
    unsigned long long seed = 0;
    std::string config_hash;

    int size() const { return static_cast<int>( beta.rows() ); }
    int chains() const { return static_cast<int>( chain_ends.size() ); }

    /*! S x M draws of coefficient j */
    Eigen::MatrixXd coefficient( const int j ) const {
      if ( j < 0 || j >= p )
        throw argument_error("posterior_draws: coefficient out of range");
      return beta.middleCols( static_cast<Eigen::Index>(j) * m, m );
    }

    /*! Posterior mean as an M x P matrix */
    Eigen::MatrixXd mean_field() const {
      const Eigen::RowVectorXd mu = beta.colwise().mean();
      return Eigen::Map<const Eigen::MatrixXd>( mu.data(), m, p );
    }

    /*! Draws of one scalar (coefficient j, vertex v), per chain */
    std::vector<Eigen::VectorXd> chain_series( const int j,
                                               const int v ) const {
      std::vector<Eigen::VectorXd> out;
      int start = 0;
      const Eigen::Index col = static_cast<Eigen::Index>(j) * m + v;
      for ( int end : chain_ends ) {
        out.push_back( beta.col(col).segment(start, end - start) );
        start = end;
      }
      return out;
    }

    void validate() const {
      if ( size() < 2 )
        throw data_error("posterior_draws: need at least 2 draws");
      if ( beta.cols() != static_cast<Eigen::Index>(p) * m )
        throw data_error("posterior_draws: shape mismatch");
      if ( chain_ends.empty() || chain_ends.back() != size() )
        throw data_error("posterior_draws: chain boundaries do not "
                         "partition the draws");
      for ( std::size_t c = 1; c < chain_ends.size(); c++ )
        if ( chain_ends[c] <= chain_ends[c - 1] )
          throw data_error("posterior_draws: empty or unsorted chain");
      if ( !beta.allFinite() )
        throw data_error("posterior_draws: non-finite draws");
    }
  };


  /*! Concatenate per-chain draw sets (same p, m) in chain order */
  inline posterior_draws concatenate_chains(
    const std::vector<posterior_draws>& parts
  ) {
    if ( parts.empty() )
      throw argument_error("concatenate_chains: nothing to merge");
    posterior_draws out;
    out.p = parts[0].p;
    out.m = parts[0].m;
    out.variant = parts[0].variant;
    out.seed = parts[0].seed;
    out.config_hash = parts[0].config_hash;
    int total = 0;
    for ( const auto& d : parts ) total += d.size();
    auto stack = [&]( auto member, Eigen::Index cols ) {
      Eigen::MatrixXd m( cols > 0 ? total : 0, cols );
      int r = 0;
      for ( const auto& d : parts ) {
        const Eigen::MatrixXd& src = d.*member;
        if ( cols > 0 ) m.middleRows( r, d.size() ) = src;
        r += d.size();
      }
      return m;
    };
    out.beta = stack( &posterior_draws::beta, parts[0].beta.cols() );
    out.sigma2 = stack( &posterior_draws::sigma2, parts[0].sigma2.cols() );
    out.zeta2 = stack( &posterior_draws::zeta2, parts[0].zeta2.cols() );
    out.tau2.resize( parts[0].tau2.size() ? total : 0 );
    out.xi.resize( parts[0].xi.size() ? total : 0 );
    int r = 0;
    for ( const auto& d : parts ) {
      if ( out.tau2.size() ) out.tau2.segment( r, d.size() ) = d.tau2;
      if ( out.xi.size() ) out.xi.segment( r, d.size() ) = d.xi;
      r += d.size();
      out.chain_ends.push_back( r );
      out.accept_rate.insert( out.accept_rate.end(),
                              d.accept_rate.begin(), d.accept_rate.end() );
      out.step_size.insert( out.step_size.end(),
                            d.step_size.begin(), d.step_size.end() );
    }
    return out;
  };

}  // namespace gpir

#endif  // _GPIR_DRAWS_
