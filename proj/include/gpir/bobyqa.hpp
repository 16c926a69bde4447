
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "gpir/error.hpp"


#ifndef _GPIR_BOBYQA_
#define _GPIR_BOBYQA_


namespace gpir {

  struct box_optimizer_options {
    double rho_begin = 0.5;     /*!< Initial trust radius */
    double rho_end = 1e-6;      /*!< Stop when the trust radius falls below */
    int max_evaluations = 2000;
  };

  struct box_optimizer_result {
    Eigen::VectorXd x;
    double f = std::numeric_limits<double>::infinity();
    int evaluations = 0;
    bool converged = false;
    bool used_fallback = false;
  };


  /*! Minimize f over the box [lo, hi] without derivatives
   *
   * Quadratic-model trust-region method: 2n + 1 interpolation points,
   * models updated by the least-Frobenius-norm change in the Hessian,
   * steps from a projected-gradient minimization of the model inside
   * box and trust region. Falls back to a bounded Nelder-Mead search
   * if the interpolation system becomes singular. Every evaluated
   * point lies inside the box. Non-finite f values are treated as
   * infeasible.
   */
  box_optimizer_result minimize_box(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x0,
    const Eigen::VectorXd& lo,
    const Eigen::VectorXd& hi,
    const box_optimizer_options& opts = box_optimizer_options{}
  );


  /*! Bounded Nelder-Mead; used as the fallback of minimize_box */
  box_optimizer_result nelder_mead_box(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x0,
    const Eigen::VectorXd& lo,
    const Eigen::VectorXd& hi,
    double scale,
    int max_evaluations,
    double tol
  );



  namespace detail {

    /* Quadratic model  c + g'(x - base) + 1/2 (x - base)' H (x - base) */
    struct quad_model {
      Eigen::VectorXd base;
      double c = 0;
      Eigen::VectorXd g;
      Eigen::MatrixXd h;

      double operator()( const Eigen::VectorXd& x ) const {
        const Eigen::VectorXd s = x - base;
        return c + g.dot(s) + 0.5 * s.dot(h * s);
      }
      Eigen::VectorXd gradient( const Eigen::VectorXd& x ) const {
        return g + h * (x - base);
      }
    };


    /* Least-Frobenius-norm correction so the model interpolates
     * (pts, vals); false if the KKT system is singular */
    inline bool update_model( quad_model& q,
                              const std::vector<Eigen::VectorXd>& pts,
                              const std::vector<double>& vals ) {
      const int npt = static_cast<int>( pts.size() );
      const int n = static_cast<int>( q.base.size() );
      const int dim = npt + n + 1;
      Eigen::MatrixXd w = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
      std::vector<Eigen::VectorXd> s(npt);
      for ( int k = 0; k < npt; k++ ) s[k] = pts[k] - q.base;
      for ( int i = 0; i < npt; i++ ) {
        for ( int j = 0; j < npt; j++ ) {
          const double ip = s[i].dot(s[j]);
          w(i, j) = 0.5 * ip * ip;
        }
        w(i, npt) = w(npt, i) = 1;
        for ( int a = 0; a < n; a++ )
          w(i, npt + 1 + a) = w(npt + 1 + a, i) = s[i][a];
        rhs[i] = vals[i] - q(pts[i]);
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu( w );
      if ( !lu.isInvertible() ) return false;
      const Eigen::VectorXd sol = lu.solve( rhs );
      if ( !sol.allFinite() ) return false;
      if ( (w * sol - rhs).norm() > 1e-6 * (1 + rhs.norm()) ) return false;
      q.c += sol[npt];
      q.g += sol.tail(n);
      for ( int k = 0; k < npt; k++ )
        q.h.noalias() += sol[k] * s[k] * s[k].transpose();
      return q.h.allFinite();
    };


    /* Approximate minimizer of q over box and ball(center, radius) */
    inline Eigen::VectorXd model_step( const quad_model& q,
                                       const Eigen::VectorXd& center,
                                       const double radius,
                                       const Eigen::VectorXd& lo,
                                       const Eigen::VectorXd& hi ) {
      auto project = [&]( Eigen::VectorXd x ) {
        for ( int iter = 0; iter < 3; iter++ ) {
          x = x.cwiseMax(lo).cwiseMin(hi);
          const Eigen::VectorXd d = x - center;
          const double nd = d.norm();
          if ( nd > radius ) x = center + d * (radius / nd);
        }
        return x.cwiseMax(lo).cwiseMin(hi);
      };
      Eigen::VectorXd x = center;
      double fx = q(x);
      double t = radius;
      for ( int iter = 0; iter < 200; iter++ ) {
        const Eigen::VectorXd gr = q.gradient(x);
        const double gn = gr.norm();
        if ( gn < 1e-14 ) break;
        bool moved = false;
        double tt = t / gn;
        for ( int bt = 0; bt < 40; bt++ ) {
          const Eigen::VectorXd y = project( x - tt * gr );
          const double fy = q(y);
          if ( fy < fx - 1e-14 * std::abs(fx) ) {
            moved = (y - x).norm() > 1e-14 * radius;
            x = y;
            fx = fy;
            break;
          }
          tt *= 0.5;
        }
        if ( !moved ) break;
        t = std::min( radius, 2 * tt * gn );
      }
      return x;
    };

  }  // namespace detail

}  // namespace gpir




inline gpir::box_optimizer_result gpir::minimize_box(
  const std::function<double(const Eigen::VectorXd&)>& f,
  const Eigen::VectorXd& x0,
  const Eigen::VectorXd& lo,
  const Eigen::VectorXd& hi,
  const gpir::box_optimizer_options& opts
) {
  const int n = static_cast<int>( x0.size() );
  if ( n < 1 || lo.size() != n || hi.size() != n )
    throw argument_error("minimize_box: dimension mismatch");
  if ( !((lo.array() < hi.array()).all()) )
    throw argument_error("minimize_box: need lo < hi");
  if ( !((x0.array() >= lo.array()).all() && (x0.array() <= hi.array()).all()) )
    throw argument_error("minimize_box: start point outside bounds");

  box_optimizer_result res;
  auto eval = [&]( const Eigen::VectorXd& x ) {
    const Eigen::VectorXd xc = x.cwiseMax(lo).cwiseMin(hi);
    res.evaluations++;
    const double v = f(xc);
    const double fv = std::isfinite(v) ? v :
      std::numeric_limits<double>::infinity();
    if ( fv < res.f ) { res.f = fv; res.x = xc; }
    return fv;
  };

  const double f0 = eval( x0 );
  if ( !std::isfinite(f0) )
    throw argument_error("minimize_box: objective is not finite at the "
                         "start point");

  double rho = std::min( opts.rho_begin, 0.5 * (hi - lo).minCoeff() );
  const double rho_max = 4 * opts.rho_begin;

  /* Initial interpolation set: x0, x0 +/- rho e_i (flipped at bounds) */
  std::vector<Eigen::VectorXd> pts{ x0 };
  std::vector<double> vals{ f0 };
  for ( int i = 0; i < n; i++ ) {
    for ( int sgn : {1, -1} ) {
      Eigen::VectorXd y = x0;
      double step = sgn * rho;
      if ( y[i] + step > hi[i] ) step = -2 * rho;
      if ( y[i] + step < lo[i] ) step = 2 * rho;
      if ( sgn == -1 && std::abs(y[i] + step - pts.back()[i]) < 1e-12 )
        step = -step;
      y[i] = std::clamp( y[i] + step, lo[i], hi[i] );
      double fy = eval( y );
      for ( int shrink = 0; !std::isfinite(fy) && shrink < 20; shrink++ ) {
        y[i] = 0.5 * (y[i] + x0[i]);
        fy = eval( y );
      }
      if ( !std::isfinite(fy) ) {
        box_optimizer_result nm = nelder_mead_box(
          f, res.x, lo, hi, rho, opts.max_evaluations - res.evaluations,
          opts.rho_end );
        nm.evaluations += res.evaluations;
        if ( res.f < nm.f ) { nm.f = res.f; nm.x = res.x; }
        return nm;
      }
      pts.push_back( y );
      vals.push_back( fy );
    }
  }

  detail::quad_model q;
  q.base = x0;
  q.g = Eigen::VectorXd::Zero(n);
  q.h = Eigen::MatrixXd::Zero(n, n);

  auto fallback = [&]() {
    box_optimizer_result nm = nelder_mead_box(
      f, res.x, lo, hi, std::max(rho, 10 * opts.rho_end),
      opts.max_evaluations - res.evaluations, opts.rho_end );
    nm.evaluations += res.evaluations;
    nm.used_fallback = true;
    if ( res.f < nm.f ) { nm.f = res.f; nm.x = res.x; }
    return nm;
  };

  if ( !detail::update_model( q, pts, vals ) ) return fallback();

  int geometry_turn = 0;
  while ( res.evaluations < opts.max_evaluations ) {
    if ( rho < opts.rho_end ) { res.converged = true; break; }
    const int kopt = static_cast<int>(
      std::min_element(vals.begin(), vals.end()) - vals.begin() );
    const Eigen::VectorXd xopt = pts[kopt];
    const double fopt = vals[kopt];

    const Eigen::VectorXd xnew =
      detail::model_step( q, xopt, rho, lo, hi );
    const double snorm = (xnew - xopt).norm();
    const double predicted = q(xopt) - q(xnew);

    bool improved = false;
    if ( snorm > 0.1 * rho && predicted > 0 ) {
      const double fnew = eval( xnew );
      const double ratio = std::isfinite(fnew) ?
        (fopt - fnew) / predicted : -1;
      if ( ratio < 0.1 ) rho *= 0.5;
      else if ( ratio > 0.7 && snorm > 0.9 * rho )
        rho = std::min( 2 * rho, rho_max );
      if ( std::isfinite(fnew) ) {
        /* Replace the point farthest from the better of xopt / xnew */
        const Eigen::VectorXd& anchor = fnew < fopt ? xnew : xopt;
        int kfar = -1;
        double dfar = -1;
        for ( int k = 0; k < static_cast<int>(pts.size()); k++ ) {
          if ( k == kopt && fnew >= fopt ) continue;
          const double d = (pts[k] - anchor).norm();
          if ( d > dfar ) { dfar = d; kfar = k; }
        }
        if ( fnew < fopt || dfar > snorm ) {
          pts[kfar] = xnew;
          vals[kfar] = fnew;
          if ( !detail::update_model( q, pts, vals ) ) return fallback();
        }
        improved = fnew < fopt;
      }
    }
    else {
      rho *= 0.5;
    }

    if ( !improved ) {
      /* Geometry: pull in the farthest point if it is far away */
      int kfar = -1;
      double dfar = 0;
      for ( int k = 0; k < static_cast<int>(pts.size()); k++ ) {
        const double d = (pts[k] - xopt).norm();
        if ( d > dfar ) { dfar = d; kfar = k; }
      }
      if ( kfar >= 0 && dfar > 2 * rho && rho >= opts.rho_end &&
           res.evaluations < opts.max_evaluations ) {
        const int axis = geometry_turn % n;
        const double sgn = (geometry_turn / n) % 2 == 0 ? 1 : -1;
        geometry_turn++;
        Eigen::VectorXd y = xopt;
        double step = sgn * rho;
        if ( y[axis] + step > hi[axis] || y[axis] + step < lo[axis] )
          step = -step;
        y[axis] = std::clamp( y[axis] + step, lo[axis], hi[axis] );
        const double fy = eval( y );
        if ( std::isfinite(fy) && (y - xopt).norm() > 0 ) {
          pts[kfar] = y;
          vals[kfar] = fy;
          if ( !detail::update_model( q, pts, vals ) ) return fallback();
        }
      }
    }
  }
  return res;
};




inline gpir::box_optimizer_result gpir::nelder_mead_box(
  const std::function<double(const Eigen::VectorXd&)>& f,
  const Eigen::VectorXd& x0,
  const Eigen::VectorXd& lo,
  const Eigen::VectorXd& hi,
  const double scale,
  const int max_evaluations,
  const double tol
) {
  const int n = static_cast<int>( x0.size() );
  box_optimizer_result res;
  res.used_fallback = true;
  auto eval = [&]( const Eigen::VectorXd& x ) {
    const Eigen::VectorXd xc = x.cwiseMax(lo).cwiseMin(hi);
    res.evaluations++;
    const double v = f(xc);
    const double fv = std::isfinite(v) ? v :
      std::numeric_limits<double>::infinity();
    if ( fv < res.f ) { res.f = fv; res.x = xc; }
    return fv;
  };
  auto clip = [&]( const Eigen::VectorXd& x ) {
    return Eigen::VectorXd( x.cwiseMax(lo).cwiseMin(hi) );
  };

  std::vector<Eigen::VectorXd> s{ clip(x0) };
  std::vector<double> fs{ eval(s[0]) };
  for ( int i = 0; i < n; i++ ) {
    Eigen::VectorXd y = x0;
    y[i] += (y[i] + scale <= hi[i]) ? scale : -scale;
    s.push_back( clip(y) );
    fs.push_back( eval(s.back()) );
  }
  std::vector<int> idx(n + 1);
  while ( res.evaluations < max_evaluations ) {
    std::iota( idx.begin(), idx.end(), 0 );
    std::sort( idx.begin(), idx.end(),
               [&]( int a, int b ) { return fs[a] < fs[b]; } );
    double size = 0;
    for ( int k = 1; k <= n; k++ )
      size = std::max( size, (s[idx[k]] - s[idx[0]]).cwiseAbs().maxCoeff() );
    if ( size < tol ) { res.converged = true; break; }
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for ( int k = 0; k < n; k++ ) centroid += s[idx[k]];
    centroid /= n;
    const int w = idx[n];
    const Eigen::VectorXd xr = clip( centroid + (centroid - s[w]) );
    const double fr = eval( xr );
    if ( fr < fs[idx[0]] ) {
      const Eigen::VectorXd xe = clip( centroid + 2 * (centroid - s[w]) );
      const double fe = eval( xe );
      if ( fe < fr ) { s[w] = xe; fs[w] = fe; }
      else { s[w] = xr; fs[w] = fr; }
    }
    else if ( fr < fs[idx[n - 1]] ) {
      s[w] = xr; fs[w] = fr;
    }
    else {
      const Eigen::VectorXd xc = clip( centroid + 0.5 * (s[w] - centroid) );
      const double fc = eval( xc );
      if ( fc < fs[w] ) { s[w] = xc; fs[w] = fc; }
      else {
        for ( int k = 1; k <= n; k++ ) {
          const int j = idx[k];
          s[j] = clip( s[idx[0]] + 0.5 * (s[j] - s[idx[0]]) );
          fs[j] = eval( s[j] );
        }
      }
    }
  }
  return res;
};


#endif  // _GPIR_BOBYQA_
