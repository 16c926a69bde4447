
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "gpir/config.hpp"
#include "gpir/error.hpp"
#include "gpir/sphere_geom.hpp"


#ifndef _GPIR_KERNELS_
#define _GPIR_KERNELS_


namespace gpir {

  /*! Stationary isotropic correlation C(alpha; psi, nu) */
  using kernel_function = std::function<double(double, double, double)>;

  /*! Named correlation families. Only "rbf", exp(-psi |a|^nu), ships */
  inline std::map<std::string, kernel_function>& kernel_registry() {
    static std::map<std::string, kernel_function> registry{
      { "rbf", []( double a, double psi, double nu ) {
          return std::exp( -psi * std::pow(a, nu) );
        } }
    };
    return registry;
  };


  /* ****************************************************************/
  /*! Correlation model: family + (psi, nu)
   *
   * psi > 0 is the bandwidth (inverse length scale, mm^-nu); nu in
   * (0, 2] the exponent. nu = 2 gives the Gaussian kernel.
   */
  struct correlation_model {
    double psi = 0.077;
    double nu = 2;
    std::string family = "rbf";

    correlation_model() { validate(); }
    correlation_model( const double psi_, const double nu_,
                       std::string family_ = "rbf" ) :
      psi(psi_), nu(nu_), family(std::move(family_)) {
      validate();
    }

    /*! Checks parameters and binds the family; call after edits */
    void validate() const {
      if ( !(psi > 0) || !std::isfinite(psi) )
        throw argument_error("correlation_model: psi must be > 0");
      if ( !(nu > 0 && nu <= 2) )
        throw argument_error("correlation_model: nu must lie in (0, 2]");
      const auto it = kernel_registry().find(family);
      if ( it == kernel_registry().end() )
        throw argument_error("correlation_model: unknown family '" +
                             family + "'");
      fn_ = it->second;
    }

    /*! C(alpha); alpha is a distance in mm */
    double operator()( const double alpha ) const {
      if ( alpha < 0 )
        throw argument_error("correlation_model: negative distance");
      if ( alpha == 0 ) return 1;
      return fn_(alpha, psi, nu);
    }

  private:
    mutable kernel_function fn_;
  };
  /* ****************************************************************/


  inline double evaluate( const correlation_model& model,
                          const double alpha ) {
    return model(alpha);
  };


  /*! Bandwidth giving C(fwhm / 2) = 1/2 */
  inline double fwhm_to_psi( const double fwhm, const double nu ) {
    if ( !(fwhm > 0) )
      throw argument_error("fwhm_to_psi: FWHM must be > 0");
    if ( !(nu > 0 && nu <= 2) )
      throw argument_error("fwhm_to_psi: nu must lie in (0, 2]");
    return std::numbers::ln2 / std::pow( fwhm / 2, nu );
  };


  inline double psi_to_fwhm( const double psi, const double nu ) {
    if ( !(psi > 0) )
      throw argument_error("psi_to_fwhm: psi must be > 0");
    if ( !(nu > 0 && nu <= 2) )
      throw argument_error("psi_to_fwhm: nu must lie in (0, 2]");
    return 2 * std::pow( std::numbers::ln2 / psi, 1 / nu );
  };


  inline correlation_model correlation_from_fwhm(
    const double fwhm,
    const double nu
  ) {
    return correlation_model( fwhm_to_psi(fwhm, nu), nu );
  };


  /*! Kernel from config keys kernel.psi / kernel.fwhm_mm + kernel.nu */
  inline correlation_model correlation_from_config(
    const key_value_config& cfg,
    const correlation_model& fallback = correlation_model()
  ) {
    const auto psi = cfg.get_double("kernel.psi");
    const auto fwhm = cfg.get_double("kernel.fwhm_mm");
    const double nu = cfg.get_double("kernel.nu").value_or(fallback.nu);
    const std::string family =
      cfg.get("kernel.family").value_or(fallback.family);
    if ( psi && fwhm )
      throw argument_error("config: specify kernel.psi or "
                           "kernel.fwhm_mm, not both");
    if ( psi ) return correlation_model( *psi, nu, family );
    if ( fwhm ) return correlation_model( fwhm_to_psi(*fwhm, nu), nu,
                                          family );
    return correlation_model( fallback.psi, nu, family );
  };


  /*! Dense correlation matrix over a mesh
   *
   * For more than 500 vertices, nu = 2 is nudged to 2 - 1e-9 unless
   * clamp_gaussian is false.
   */
  inline Eigen::MatrixXd dense_correlation(
    const spherical_mesh& mesh,
    correlation_model model,
    const bool clamp_gaussian = true
  ) {
    const int m = mesh.size();
    if ( clamp_gaussian && m > 500 && model.nu >= 2 ) {
      model.nu = 2 - 1e-9;
      model.validate();
    }
    Eigen::MatrixXd c(m, m);
    for ( int i = 0; i < m; i++ ) {
      c(i, i) = 1;
      for ( int j = i + 1; j < m; j++ ) {
        c(i, j) = c(j, i) = model( mesh.distance(i, j) );
      }
    }
    return c;
  };

}  // namespace gpir

#endif  // _GPIR_KERNELS_
