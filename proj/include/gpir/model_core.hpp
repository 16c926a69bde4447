
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "gpir/error.hpp"


#ifndef _GPIR_MODEL_CORE_
#define _GPIR_MODEL_CORE_


namespace gpir {

  /* ****************************************************************/
  /*! Thin SVD of the design:  X = U diag(d) V'
   *
   * Directions with singular value below 1e-10 * max are dropped,
   * so rank may be less than P.
   */
  struct design_factor {
    Eigen::MatrixXd x;   /* N x P */
    Eigen::MatrixXd u;   /* N x rank */
    Eigen::VectorXd d;   /* rank, nonincreasing, > 0 */
    Eigen::MatrixXd v;   /* P x rank */
    std::vector<std::string> warnings;

    int n() const { return static_cast<int>( x.rows() ); }
    int p() const { return static_cast<int>( x.cols() ); }
    int rank() const { return static_cast<int>( d.size() ); }
    bool full_rank() const { return rank() == p(); }
  };


  inline design_factor factorize_design( const Eigen::MatrixXd& x ) {
    if ( x.rows() < 1 || x.cols() < 1 )
      throw argument_error("factorize_design: X must be at least 1 x 1");
    if ( !x.allFinite() )
      throw data_error("factorize_design: X has non-finite entries");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(
      x, Eigen::ComputeThinU | Eigen::ComputeThinV );
    const Eigen::VectorXd& sv = svd.singularValues();
    if ( sv.size() == 0 || !(sv[0] > 0) )
      throw data_error("factorize_design: design matrix is all zero");
    int rank = 0;
    while ( rank < sv.size() && sv[rank] >= 1e-10 * sv[0] ) rank++;
    design_factor f;
    f.x = x;
    f.u = svd.matrixU().leftCols(rank);
    f.d = sv.head(rank);
    f.v = svd.matrixV().leftCols(rank);
    if ( rank < x.cols() ) {
      f.warnings.push_back(
        "factorize_design: X is rank deficient (rank " +
        std::to_string(rank) + " < " + std::to_string(x.cols()) +
        "); dropped " + std::to_string(x.cols() - rank) +
        " singular direction(s)" );
    }
    return f;
  };




  /* ****************************************************************/
  /*! Sequential access to outcome images (each length M) */
  class image_source {
  public:
    virtual ~image_source() = default;
    virtual int n() const = 0;
    virtual int m() const = 0;
    virtual void rewind() = 0;
    /*! Next image into y; false when exhausted */
    virtual bool next( Eigen::VectorXd& y ) = 0;
  };


  /*! In-memory images, one column per image (M x N) */
  class matrix_image_source : public image_source {
  public:
    explicit matrix_image_source( Eigen::MatrixXd images ) :
      y_(std::move(images)) { ; }
    int n() const override { return static_cast<int>( y_.cols() ); }
    int m() const override { return static_cast<int>( y_.rows() ); }
    void rewind() override { pos_ = 0; }
    bool next( Eigen::VectorXd& y ) override {
      if ( pos_ >= y_.cols() ) return false;
      y = y_.col(pos_++);
      return true;
    }
    const Eigen::MatrixXd& images() const { return y_; }
  private:
    Eigen::MatrixXd y_;
    Eigen::Index pos_ = 0;
  };


  /*! Images produced on demand by gen(i, y); nothing is stored */
  class generated_image_source : public image_source {
  public:
    using generator = std::function<void(int, Eigen::VectorXd&)>;
    generated_image_source( int n, int m, generator gen ) :
      n_(n), m_(m), gen_(std::move(gen)) { ; }
    int n() const override { return n_; }
    int m() const override { return m_; }
    void rewind() override { pos_ = 0; }
    bool next( Eigen::VectorXd& y ) override {
      if ( pos_ >= n_ ) return false;
      y.resize(m_);
      gen_( pos_++, y );
      return true;
    }
  private:
    int n_, m_;
    generator gen_;
    int pos_ = 0;
  };




  /* ****************************************************************/
  /*! Single-pass sufficient statistics of the working model
   *
   * yu(s, j) = sum_i y_i(s) U(i, j)   (the projection (U' x I) y,
   *                                    stored vertex-major)
   * sumsq(s) = sum_i y_i(s)^2
   */
  struct sufficient_stats {
    Eigen::MatrixXd yu;      /* M x rank */
    Eigen::VectorXd sumsq;   /* M */
    int n_images = 0;

    int m() const { return static_cast<int>( sumsq.size() ); }
    int rank() const { return static_cast<int>( yu.cols() ); }
  };


  inline sufficient_stats stream_sufficient_stats(
    const design_factor& design,
    image_source& images
  ) {
    const int m = images.m();
    const int rank = design.rank();
    sufficient_stats st;
    st.yu = Eigen::MatrixXd::Zero( m, rank );
    st.sumsq = Eigen::VectorXd::Zero( m );
    images.rewind();
    Eigen::VectorXd y;
    int i = 0;
    while ( images.next(y) ) {
      if ( i >= design.n() )
        throw data_error("stream_sufficient_stats: more images than "
                         "design rows (image " + std::to_string(i) + ")");
      if ( y.size() != m )
        throw data_error("stream_sufficient_stats: image " +
                         std::to_string(i) + " has length " +
                         std::to_string(y.size()) + ", expected " +
                         std::to_string(m));
      if ( !y.allFinite() )
        throw data_error("stream_sufficient_stats: image " +
                         std::to_string(i) + " has non-finite values");
      st.yu.noalias() += y * design.u.row(i);
      st.sumsq.array() += y.array().square();
      i++;
    }
    if ( i != design.n() )
      throw data_error("stream_sufficient_stats: read " +
                       std::to_string(i) + " images, design has " +
                       std::to_string(design.n()) + " rows");
    st.n_images = i;
    return st;
  };


  /*! Prior-only statistics (N = 0) for M vertices */
  inline sufficient_stats empty_stats( const int m, const int rank ) {
    sufficient_stats st;
    st.yu = Eigen::MatrixXd::Zero( m, rank );
    st.sumsq = Eigen::VectorXd::Zero( m );
    st.n_images = 0;
    return st;
  };




  /* ****************************************************************/
  /*! Parameter state of one chain
   *
   * gamma = B V is the rotated coefficient matrix (M x rank), with
   * B = [beta_0, ..., beta_{P-1}] (M x P); beta is recovered as
   * gamma V'.
   */
  struct chain_state {
    Eigen::MatrixXd gamma;   /* M x rank */
    Eigen::VectorXd sigma2;  /* M */
    double xi = 1;
    double tau2 = 1;
    Eigen::VectorXd zeta2;   /* P */
    double step_size = 0.1;

    void validate() const {
      if ( !gamma.allFinite() )
        throw numerical_error("chain_state: gamma is not finite");
      if ( !(sigma2.array() > 0).all() )
        throw numerical_error("chain_state: sigma2 must be positive");
      if ( !(xi > 0) || !(tau2 > 0) )
        throw numerical_error("chain_state: xi, tau2 must be positive");
      if ( !(zeta2.array() > 0).all() )
        throw numerical_error("chain_state: zeta2 must be positive");
    }
  };


  inline Eigen::MatrixXd rotate_to_beta(
    const design_factor& design,
    const Eigen::MatrixXd& gamma
  ) {
    return gamma * design.v.transpose();
  };

  inline Eigen::MatrixXd rotate_to_gamma(
    const design_factor& design,
    const Eigen::MatrixXd& beta
  ) {
    return beta * design.v;
  };



  /*! -1/2 sum_s [gamma(s)' D^2 gamma(s) - 2 gamma(s)' D yu(s) + sumsq(s)]
   *  / sigma2(s)  - (N/2) sum_s log sigma2(s)
   *
   * The constant -(NM/2) log 2 pi is omitted.
   */
  inline double working_loglik(
    const sufficient_stats& stats,
    const Eigen::VectorXd& d,
    const Eigen::MatrixXd& gamma,
    const Eigen::VectorXd& sigma2
  ) {
    if ( gamma.rows() != stats.m() || gamma.cols() != stats.rank() ||
         d.size() != stats.rank() || sigma2.size() != stats.m() )
      throw argument_error("working_loglik: dimension mismatch");
    if ( !(sigma2.array() > 0).all() )
      throw numerical_error("working_loglik: sigma2 must be positive");
    const Eigen::MatrixXd gd = gamma * d.asDiagonal();
    const Eigen::ArrayXd quad =
      gd.array().square().rowwise().sum() -
      2 * (gd.array() * stats.yu.array()).rowwise().sum() +
      stats.sumsq.array();
    return -0.5 * (quad / sigma2.array()).sum() -
      0.5 * stats.n_images * sigma2.array().log().sum();
  };

  inline double working_loglik(
    const sufficient_stats& stats,
    const design_factor& design,
    const chain_state& state
  ) {
    return working_loglik( stats, design.d, state.gamma, state.sigma2 );
  };


  /*! RSS(s) = sumsq - 2 gamma' D yu + gamma' D^2 gamma, clamped at 0 */
  inline Eigen::VectorXd residual_ss_per_vertex(
    const sufficient_stats& stats,
    const Eigen::VectorXd& d,
    const Eigen::MatrixXd& gamma
  ) {
    if ( gamma.rows() != stats.m() || gamma.cols() != stats.rank() ||
         d.size() != stats.rank() )
      throw argument_error("residual_ss_per_vertex: dimension mismatch");
    const Eigen::MatrixXd gd = gamma * d.asDiagonal();
    Eigen::VectorXd rss = stats.sumsq +
      ( gd.array().square().rowwise().sum() -
        2 * (gd.array() * stats.yu.array()).rowwise().sum() ).matrix();
    return rss.cwiseMax(0.0);
  };

}  // namespace gpir

#endif  // _GPIR_MODEL_CORE_
