
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include <Eigen/Core>

#include "gpir/bobyqa.hpp"
#include "gpir/config.hpp"
#include "gpir/error.hpp"
#include "gpir/kernels.hpp"
#include "gpir/sphere_geom.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_HYPERPARAM_
#define _GPIR_HYPERPARAM_


namespace gpir {

  /*! Covariance parameters of the surrogate model
   *  y_i ~ N(0, tau2 C(psi, nu) + sigma2_0 I)
   */
  struct hyper_params {
    double psi = fwhm_to_psi(6, 1.5);
    double nu = 1.5;
    double tau2 = 1;
    double sigma2_0 = 1;

    correlation_model kernel() const { return correlation_model(psi, nu); }
  };


  struct hyper_estimate : public hyper_params {
    double objective = -std::numeric_limits<double>::infinity();
    int evaluations = 0;
    bool converged = false;
  };


  struct hyper_bounds {
    double psi_lo = 1e-4, psi_hi = 10;
    double nu_lo = 0.2, nu_hi = 2;
    double var_lo = 1e-8, var_hi = 1e4;
  };


  struct hyper_options {
    hyper_bounds bounds;
    /*! Optimize only (tau2, sigma2_0), holding (psi, nu) at the start */
    bool fix_kernel = false;
    box_optimizer_options optimizer;
    vecchia_options vecchia;
  };


  /*! Subtract each image's (column's) mean */
  inline Eigen::MatrixXd center_images( const Eigen::MatrixXd& images ) {
    return images.rowwise() - images.colwise().mean();
  };


  /*! Surrogate log marginal likelihood (constant omitted)
   *
   * images: M x N, one mean-centered image per column. Evaluated by a
   * Vecchia approximation of tau2 C(d) + sigma2_0 1{d = 0}. Returns
   * -infinity when that approximation cannot be built.
   */
  inline double surrogate_loglik(
    const Eigen::MatrixXd& images,
    const spherical_mesh& mesh,
    const neighbor_index& nbrs,
    const hyper_params& params,
    const vecchia_options& opts = vecchia_options{}
  ) {
    if ( images.rows() != mesh.size() )
      throw argument_error("surrogate_loglik: images must have M rows");
    if ( !(params.tau2 >= 0) || !(params.sigma2_0 >= 0) ||
         !(params.tau2 + params.sigma2_0 > 0) )
      throw argument_error("surrogate_loglik: variances must be >= 0 and "
                           "not both zero");
    const double n = static_cast<double>( images.cols() );
    try {
      const vecchia_precision h = build_vecchia_covariance(
        mesh, nbrs, params.kernel(), params.tau2,
        Eigen::VectorXd::Constant(1, params.sigma2_0), opts );
      const Eigen::MatrixXd e = h.whiten( images );
      return -0.5 * n * h.log_det() - 0.5 * e.squaredNorm();
    }
    catch ( const numerical_error& ) {
      return -std::numeric_limits<double>::infinity();
    }
  };


  /*! Default start: nu = 1.5, FWHM 6 mm, tau2 = sigma2_0 = half the
   *  pooled image variance */
  inline hyper_params default_hyper_start( const Eigen::MatrixXd& images ) {
    hyper_params h;
    const double pooled = images.size() > 0 ?
      images.squaredNorm() / static_cast<double>(images.size()) : 1;
    h.nu = 1.5;
    h.psi = fwhm_to_psi( 6, h.nu );
    h.tau2 = h.sigma2_0 = std::max( 0.5 * pooled, 1e-8 );
    return h;
  };


  namespace detail {

    inline double logit_clip( const double u ) {
      const double t = std::log( u / (1 - u) );
      return std::clamp( t, -8.0, 8.0 );
    };

    inline double inv_logit( const double t ) {
      return 1 / (1 + std::exp(-t));
    };

  }  // namespace detail


  /*! Maximize surrogate_loglik over (log psi, logit nu, log tau2,
   *  log sigma2_0) within bounds
   */
  hyper_estimate estimate_hyper(
    const Eigen::MatrixXd& images,
    const spherical_mesh& mesh,
    const neighbor_index& nbrs,
    const hyper_params& start,
    const hyper_options& opts = hyper_options{}
  );


  void write_hyper( std::ostream& os, const hyper_estimate& h );
  hyper_estimate read_hyper( std::istream& is );

}  // namespace gpir




inline gpir::hyper_estimate gpir::estimate_hyper(
  const Eigen::MatrixXd& images,
  const gpir::spherical_mesh& mesh,
  const gpir::neighbor_index& nbrs,
  const gpir::hyper_params& start,
  const gpir::hyper_options& opts
) {
  const hyper_bounds& b = opts.bounds;
  auto inside = [&]( const hyper_params& h ) {
    return h.psi >= b.psi_lo && h.psi <= b.psi_hi &&
      h.nu >= b.nu_lo && h.nu <= b.nu_hi &&
      h.tau2 >= b.var_lo && h.tau2 <= b.var_hi &&
      h.sigma2_0 >= b.var_lo && h.sigma2_0 <= b.var_hi;
  };
  if ( !inside(start) )
    throw argument_error("estimate_hyper: start point outside bounds");

  const bool fk = opts.fix_kernel;
  const int n = fk ? 2 : 4;
  Eigen::VectorXd lo(n), hi(n), x0(n);
  const double nu_span = b.nu_hi - b.nu_lo;
  auto nu_of = [&]( double t ) {
    return std::clamp( b.nu_lo + nu_span * detail::inv_logit(t),
                       b.nu_lo, b.nu_hi );
  };
  int k = 0;
  if ( !fk ) {
    lo[0] = std::log(b.psi_lo); hi[0] = std::log(b.psi_hi);
    x0[0] = std::log(start.psi);
    lo[1] = -8; hi[1] = 8;
    const double u = std::clamp( (start.nu - b.nu_lo) / nu_span,
                                 1e-12, 1 - 1e-12 );
    x0[1] = detail::logit_clip( u );
    k = 2;
  }
  lo[k] = lo[k + 1] = std::log(b.var_lo);
  hi[k] = hi[k + 1] = std::log(b.var_hi);
  x0[k] = std::log(start.tau2);
  x0[k + 1] = std::log(start.sigma2_0);

  auto unpack = [&]( const Eigen::VectorXd& x ) {
    hyper_params h = start;
    if ( !fk ) {
      h.psi = std::clamp( std::exp(x[0]), b.psi_lo, b.psi_hi );
      h.nu = nu_of( x[1] );
    }
    h.tau2 = std::clamp( std::exp(x[k]), b.var_lo, b.var_hi );
    h.sigma2_0 = std::clamp( std::exp(x[k + 1]), b.var_lo, b.var_hi );
    return h;
  };
  auto negloglik = [&]( const Eigen::VectorXd& x ) {
    const hyper_params h = unpack(x);
    if ( !inside(h) )
      throw numerical_error("estimate_hyper: evaluation outside bounds");
    return -surrogate_loglik( images, mesh, nbrs, h, opts.vecchia );
  };

  const box_optimizer_result r =
    minimize_box( negloglik, x0, lo, hi, opts.optimizer );
  hyper_estimate est;
  static_cast<hyper_params&>(est) = unpack( r.x );
  est.objective = -r.f;
  est.evaluations = r.evaluations;
  est.converged = r.converged;
  return est;
};


inline void gpir::write_hyper( std::ostream& os,
                               const gpir::hyper_estimate& h ) {
  os.precision(17);
  os << "psi=" << h.psi << "\n"
     << "nu=" << h.nu << "\n"
     << "tau2=" << h.tau2 << "\n"
     << "sigma2_0=" << h.sigma2_0 << "\n"
     << "fwhm_mm=" << psi_to_fwhm(h.psi, h.nu) << "\n"
     << "objective=" << h.objective << "\n"
     << "evaluations=" << h.evaluations << "\n"
     << "converged=" << (h.converged ? 1 : 0) << "\n";
};


inline gpir::hyper_estimate gpir::read_hyper( std::istream& is ) {
  const key_value_config cfg = key_value_config::parse( is );
  hyper_estimate h;
  auto need = [&]( const std::string& key ) {
    const auto v = cfg.get_double(key);
    if ( !v ) throw data_error("hyper file: missing key '" + key + "'");
    return *v;
  };
  h.psi = need("psi");
  h.nu = need("nu");
  h.tau2 = need("tau2");
  h.sigma2_0 = need("sigma2_0");
  h.objective = cfg.get_double("objective").value_or(
    -std::numeric_limits<double>::infinity() );
  h.evaluations = static_cast<int>( cfg.get_int("evaluations").value_or(0) );
  h.converged = cfg.get_bool("converged").value_or(false);
  if ( !(h.psi > 0) || !(h.nu > 0 && h.nu <= 2) || !(h.tau2 >= 0) ||
       !(h.sigma2_0 >= 0) )
    throw data_error("hyper file: parameter out of range");
  return h;
};


#endif  // _GPIR_HYPERPARAM_
