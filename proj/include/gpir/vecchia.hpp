
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include "gpir/error.hpp"
#include "gpir/kernels.hpp"
#include "gpir/sphere_geom.hpp"


#ifndef _GPIR_VECCHIA_
#define _GPIR_VECCHIA_


namespace gpir {

  enum class vecchia_ordering { sweep, maxmin };

  struct vecchia_options {
    vecchia_ordering ordering = vecchia_ordering::sweep;
    int max_neighbors = 64;      /*!< Nearest prior neighbors kept */
    double jitter_min = 1e-10;   /*!< First diagonal jitter tried */
    double jitter_max = 1e-6;    /*!< Give up beyond this */
  };


  /*! Vertex ordering used by the Vecchia factorization
   *
   * sweep: by geodesic distance from vertex 0 (ties by id).
   * maxmin: greedy farthest-point ordering starting at vertex 0.
   */
  std::vector<int> vecchia_order(
    const spherical_mesh& mesh,
    const vecchia_ordering type
  );



  /* ****************************************************************/
  /*! Sparse Vecchia/NNGP approximation to a GP covariance
   *
   * Represents  C~^-1 = (I - A)' D^-1 (I - A)  where, in the chosen
   * vertex ordering, row i of A holds the regression weights of
   * vertex i on its prior-ordered neighbors within radius r and D
   * the conditional variances. Storage is indexed by original vertex
   * id; rows are visited in ordering sequence. All public vectors
   * are in original vertex order.
   *
   * The modeled covariance is  scale * C(d) + nugget(s) 1{s = s'};
   * plain correlation priors use scale = 1 and no nugget.
   */
  class vecchia_precision {
  public:
    struct metadata {
      double psi = 0;
      double nu = 0;
      double radius = 0;
      double scale = 1;
      bool has_nugget = false;
      std::uint64_t mesh_hash = 0;
    };

    vecchia_precision() = default;

    int size() const { return static_cast<int>( order_.size() ); }
    const std::vector<int>& ordering() const { return order_; }
    const Eigen::VectorXd& cond_var() const { return cond_var_; }
    const metadata& info() const { return info_; }

    /*! Nonzeros of row `vertex` of A: (neighbor vertex, weight) */
    std::vector<std::pair<int, double>> row( const int vertex ) const;
    std::size_t nonzeros() const { return col_.size(); }

    /*! v' C~^-1 v */
    double quad_form( const Eigen::VectorXd& v ) const;

    /*! log det C~ = sum log cond_var */
    double log_det() const;

    /*! D^-1/2 (I - A) V, column-wise; E'E gives the quadratic forms */
    Eigen::MatrixXd whiten( const Eigen::MatrixXd& v ) const;

    /*! C~^-1 V (two sparse passes per column) */
    Eigen::MatrixXd apply_precision( const Eigen::MatrixXd& v ) const;
    Eigen::VectorXd apply_precision( const Eigen::VectorXd& v ) const;

    /*! C~ V (two triangular solves per column) */
    Eigen::MatrixXd apply_covariance( const Eigen::MatrixXd& v ) const;
    Eigen::VectorXd apply_covariance( const Eigen::VectorXd& v ) const;

    /*! (I - A)' D^-1/2 Z: maps iid N(0, 1) columns to N(0, C~^-1) */
    Eigen::MatrixXd precision_root_transpose(
      const Eigen::MatrixXd& z ) const;

    /*! (I - A)^-1 D^1/2 Z: maps iid N(0, 1) columns to N(0, C~) */
    Eigen::MatrixXd covariance_root( const Eigen::MatrixXd& z ) const;

    /*! Draw from N(0, scale^2 C~) */
    template< typename URNG >
    Eigen::VectorXd sample( const double scale, URNG& rng ) const;

    /*! Dense C~^-1 (testing / small problems only) */
    Eigen::MatrixXd dense_precision() const;

    void save( std::ostream& os ) const;
    static vecchia_precision load( std::istream& is );

    friend vecchia_precision build_vecchia_covariance(
      const spherical_mesh&, const neighbor_index&,
      const correlation_model&, double, const Eigen::VectorXd&,
      const vecchia_options& );

  private:
    std::vector<int> order_;       /* order_[k] = vertex id */
    std::vector<int> row_ptr_;     /* CSR over vertex ids */
    std::vector<int> col_;         /* neighbor vertex ids */
    std::vector<double> val_;
    Eigen::VectorXd cond_var_;     /* by vertex id */
    metadata info_;

    void check_length( const Eigen::Index n ) const {
      if ( n != size() )
        throw argument_error("vecchia_precision: vector length " +
                             std::to_string(n) + " != " +
                             std::to_string(size()));
    }

    /* In place: x <- (I - A) x */
    void residual_inplace( double* x ) const;
    /* In place: x <- (I - A)' x */
    void transpose_inplace( double* x ) const;
    /* In place: x <- (I - A)^-1 x */
    void forward_solve_inplace( double* x ) const;
    /* In place: x <- (I - A)^-T x */
    void backward_solve_inplace( double* x ) const;
  };
  // class vecchia_precision
  /* ****************************************************************/



  /*! Vecchia approximation of  scale * C(d) + nugget(s) 1{s = s'}
   *
   * nugget may be empty (no nugget), length 1 (homogeneous), or
   * length M.
   */
  vecchia_precision build_vecchia_covariance(
    const spherical_mesh& mesh,
    const neighbor_index& nbrs,
    const correlation_model& kernel,
    const double scale,
    const Eigen::VectorXd& nugget,
    const vecchia_options& opts = vecchia_options{}
  );


  /*! Vecchia approximation of the correlation matrix C */
  inline vecchia_precision build_vecchia(
    const spherical_mesh& mesh,
    const neighbor_index& nbrs,
    const correlation_model& kernel,
    const vecchia_options& opts = vecchia_options{}
  ) {
    return build_vecchia_covariance( mesh, nbrs, kernel, 1,
                                     Eigen::VectorXd(), opts );
  };


  /*! Build, or reuse a cached binary keyed by (mesh, theta, r) */
  vecchia_precision cached_vecchia(
    const std::string& cache_dir,
    const spherical_mesh& mesh,
    const neighbor_index& nbrs,
    const correlation_model& kernel,
    const vecchia_options& opts = vecchia_options{}
  );

}  // namespace gpir




inline std::vector<int> gpir::vecchia_order(
  const gpir::spherical_mesh& mesh,
  const gpir::vecchia_ordering type
) {
  const int m = mesh.size();
  std::vector<int> order(m);
  std::iota( order.begin(), order.end(), 0 );
  if ( type == vecchia_ordering::sweep ) {
    std::vector<double> d(m);
    for ( int i = 0; i < m; i++ ) d[i] = mesh.distance(0, i);
    std::stable_sort( order.begin(), order.end(),
                      [&d]( int a, int b ) { return d[a] < d[b]; } );
    return order;
  }
  /* maxmin: chord distance is monotone in geodesic distance */
  std::vector<double> mind( m, std::numeric_limits<double>::infinity() );
  std::vector<char> used( m, 0 );
  int next = 0;
  for ( int k = 0; k < m; k++ ) {
    order[k] = next;
    used[next] = 1;
    const direction_type& u = mesh.direction(next);
    int best = -1;
    double bestd = -1;
    for ( int i = 0; i < m; i++ ) {
      if ( used[i] ) continue;
      mind[i] = std::min( mind[i], (mesh.direction(i) - u).squaredNorm() );
      if ( mind[i] > bestd ) { bestd = mind[i]; best = i; }
    }
    next = best;
  }
  return order;
};




inline gpir::vecchia_precision gpir::build_vecchia_covariance(
  const gpir::spherical_mesh& mesh,
  const gpir::neighbor_index& nbrs,
  const gpir::correlation_model& kernel,
  const double scale,
  const Eigen::VectorXd& nugget,
  const gpir::vecchia_options& opts
) {
  const int m = mesh.size();
  if ( nbrs.size() != m )
    throw argument_error("build_vecchia: neighbor index built on a "
                         "different mesh");
  if ( !(scale >= 0) )
    throw argument_error("build_vecchia: scale must be >= 0");
  if ( nugget.size() != 0 && nugget.size() != 1 && nugget.size() != m )
    throw argument_error("build_vecchia: nugget length must be 0, 1, "
                         "or M");
  if ( opts.max_neighbors < 0 )
    throw argument_error("build_vecchia: max_neighbors must be >= 0");
  kernel.validate();
  auto nug = [&nugget]( int i ) -> double {
    if ( nugget.size() == 0 ) return 0;
    return nugget.size() == 1 ? nugget[0] : nugget[i];
  };
  for ( int i = 0; i < nugget.size(); i++ )
    if ( !(nugget[i] >= 0) )
      throw argument_error("build_vecchia: nugget must be >= 0");

  vecchia_precision vp;
  vp.order_ = vecchia_order( mesh, opts.ordering );
  std::vector<int> rank(m);
  for ( int k = 0; k < m; k++ ) rank[vp.order_[k]] = k;

  /* Prior-ordered neighbor sets, nearest first */
  std::vector<std::vector<int>> prior(m);
  for ( int i = 0; i < m; i++ ) {
    for ( const auto& e : nbrs[i] ) {
      if ( static_cast<int>(prior[i].size()) >= opts.max_neighbors )
        break;
      if ( rank[e.id] < rank[i] ) prior[i].push_back( e.id );
    }
    std::sort( prior[i].begin(), prior[i].end() );
  }
  vp.row_ptr_.assign( m + 1, 0 );
  for ( int i = 0; i < m; i++ )
    vp.row_ptr_[i + 1] = vp.row_ptr_[i] +
      static_cast<int>( prior[i].size() );
  vp.col_.resize( vp.row_ptr_[m] );
  vp.val_.resize( vp.row_ptr_[m] );
  vp.cond_var_.resize( m );

  int failed_vertex = -1;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 64)
#endif
  for ( int i = 0; i < m; i++ ) {
    const std::vector<int>& nb = prior[i];
    const int k = static_cast<int>( nb.size() );
    const double cii = scale + nug(i);
    std::copy( nb.begin(), nb.end(), vp.col_.begin() + vp.row_ptr_[i] );
    if ( k == 0 ) {
      vp.cond_var_[i] = cii;
      if ( !(cii > 0) ) {
#ifdef _OPENMP
#pragma omp critical
#endif
        failed_vertex = i;
      }
      continue;
    }
    Eigen::MatrixXd g(k, k);
    Eigen::VectorXd c(k);
    for ( int a = 0; a < k; a++ ) {
      c[a] = scale * kernel( mesh.distance(i, nb[a]) );
      g(a, a) = scale + nug(nb[a]);
      for ( int b = a + 1; b < k; b++ )
        g(a, b) = g(b, a) = scale * kernel( mesh.distance(nb[a], nb[b]) );
    }
    bool ok = false;
    double jitter = 0;
    Eigen::VectorXd w;
    double cv = 0;
    while ( !ok ) {
      Eigen::MatrixXd gj = g;
      gj.diagonal().array() += jitter * scale;
      Eigen::LLT<Eigen::MatrixXd> llt( gj );
      if ( llt.info() == Eigen::Success ) {
        w = llt.solve( c );
        const Eigen::VectorXd h = llt.matrixL().solve( c );
        cv = cii - h.squaredNorm();
        ok = std::isfinite(cv) && cv > 1e-12 * cii &&
          w.allFinite();
      }
      if ( !ok ) {
        if ( jitter >= opts.jitter_max ) break;
        jitter = (jitter == 0) ? opts.jitter_min : jitter * 10;
      }
    }
    if ( !ok ) {
#ifdef _OPENMP
#pragma omp critical
#endif
      failed_vertex = i;
      continue;
    }
    std::copy( w.data(), w.data() + k, vp.val_.begin() + vp.row_ptr_[i] );
    vp.cond_var_[i] = cv;
  }
  if ( failed_vertex >= 0 )
    throw numerical_error("build_vecchia: local covariance at vertex " +
                          std::to_string(failed_vertex) +
                          " not factorizable after maximum jitter");

  vp.info_.psi = kernel.psi;
  vp.info_.nu = kernel.nu;
  vp.info_.radius = nbrs.radius();
  vp.info_.scale = scale;
  vp.info_.has_nugget = nugget.size() > 0;
  vp.info_.mesh_hash = mesh.hash();
  return vp;
};




inline std::vector<std::pair<int, double>> gpir::vecchia_precision::row(
  const int vertex
) const {
  std::vector<std::pair<int, double>> r;
  for ( int p = row_ptr_[vertex]; p < row_ptr_[vertex + 1]; p++ )
    r.emplace_back( col_[p], val_[p] );
  return r;
};


inline void gpir::vecchia_precision::residual_inplace( double* x ) const {
  /* Later rows depend only on earlier vertices: go in reverse order */
  for ( int k = size() - 1; k >= 0; k-- ) {
    const int i = order_[k];
    double s = 0;
    for ( int p = row_ptr_[i]; p < row_ptr_[i + 1]; p++ )
      s += val_[p] * x[col_[p]];
    x[i] -= s;
  }
};


inline void gpir::vecchia_precision::transpose_inplace( double* x ) const {
  /* y_j = x_j - sum_{i after j} a_ij x_i; scatter in forward order */
  for ( int k = 0; k < size(); k++ ) {
    const int i = order_[k];
    const double xi = x[i];
    for ( int p = row_ptr_[i]; p < row_ptr_[i + 1]; p++ )
      x[col_[p]] -= val_[p] * xi;
  }
};


inline void gpir::vecchia_precision::forward_solve_inplace(
  double* x
) const {
  for ( int k = 0; k < size(); k++ ) {
    const int i = order_[k];
    double s = 0;
    for ( int p = row_ptr_[i]; p < row_ptr_[i + 1]; p++ )
      s += val_[p] * x[col_[p]];
    x[i] += s;
  }
};


inline void gpir::vecchia_precision::backward_solve_inplace(
  double* x
) const {
  for ( int k = size() - 1; k >= 0; k-- ) {
    const int i = order_[k];
    const double xi = x[i];
    for ( int p = row_ptr_[i]; p < row_ptr_[i + 1]; p++ )
      x[col_[p]] += val_[p] * xi;
  }
};



inline double gpir::vecchia_precision::quad_form(
  const Eigen::VectorXd& v
) const {
  check_length( v.size() );
  Eigen::VectorXd e = v;
  residual_inplace( e.data() );
  return ( e.array().square() / cond_var_.array() ).sum();
};


inline double gpir::vecchia_precision::log_det() const {
  return cond_var_.array().log().sum();
};


inline Eigen::MatrixXd gpir::vecchia_precision::whiten(
  const Eigen::MatrixXd& v
) const {
  check_length( v.rows() );
  Eigen::MatrixXd e = v;
  const Eigen::ArrayXd isd = cond_var_.array().rsqrt();
  for ( Eigen::Index c = 0; c < e.cols(); c++ ) {
    residual_inplace( e.col(c).data() );
    e.col(c).array() *= isd;
  }
  return e;
};


inline Eigen::MatrixXd gpir::vecchia_precision::apply_precision(
  const Eigen::MatrixXd& v
) const {
  check_length( v.rows() );
  Eigen::MatrixXd e = v;
  for ( Eigen::Index c = 0; c < e.cols(); c++ ) {
    residual_inplace( e.col(c).data() );
    e.col(c).array() /= cond_var_.array();
    transpose_inplace( e.col(c).data() );
  }
  return e;
};


inline Eigen::VectorXd gpir::vecchia_precision::apply_precision(
  const Eigen::VectorXd& v
) const {
  return apply_precision( Eigen::MatrixXd(v) ).col(0);
};


inline Eigen::MatrixXd gpir::vecchia_precision::apply_covariance(
  const Eigen::MatrixXd& v
) const {
  check_length( v.rows() );
  Eigen::MatrixXd e = v;
  for ( Eigen::Index c = 0; c < e.cols(); c++ ) {
    backward_solve_inplace( e.col(c).data() );
    e.col(c).array() *= cond_var_.array();
    forward_solve_inplace( e.col(c).data() );
  }
  return e;
};


inline Eigen::VectorXd gpir::vecchia_precision::apply_covariance(
  const Eigen::VectorXd& v
) const {
  return apply_covariance( Eigen::MatrixXd(v) ).col(0);
};


inline Eigen::MatrixXd gpir::vecchia_precision::precision_root_transpose(
  const Eigen::MatrixXd& z
) const {
  check_length( z.rows() );
  Eigen::MatrixXd e = z;
  const Eigen::ArrayXd isd = cond_var_.array().rsqrt();
  for ( Eigen::Index c = 0; c < e.cols(); c++ ) {
    e.col(c).array() *= isd;
    transpose_inplace( e.col(c).data() );
  }
  return e;
};


inline Eigen::MatrixXd gpir::vecchia_precision::covariance_root(
  const Eigen::MatrixXd& z
) const {
  check_length( z.rows() );
  Eigen::MatrixXd e = z;
  const Eigen::ArrayXd sd = cond_var_.array().sqrt();
  for ( Eigen::Index c = 0; c < e.cols(); c++ ) {
    e.col(c).array() *= sd;
    forward_solve_inplace( e.col(c).data() );
  }
  return e;
};


template< typename URNG >
Eigen::VectorXd gpir::vecchia_precision::sample(
  const double scale,
  URNG& rng
) const {
  if ( !(scale > 0) )
    throw argument_error("vecchia_precision::sample: scale must be > 0");
  std::normal_distribution<double> normal(0, 1);
  Eigen::MatrixXd z(size(), 1);
  for ( int i = 0; i < size(); i++ ) z(i, 0) = normal(rng);
  return scale * covariance_root( z ).col(0);
};


inline Eigen::MatrixXd gpir::vecchia_precision::dense_precision() const {
  const int m = size();
  Eigen::MatrixXd ia = Eigen::MatrixXd::Identity(m, m);
  for ( int i = 0; i < m; i++ )
    for ( int p = row_ptr_[i]; p < row_ptr_[i + 1]; p++ )
      ia(i, col_[p]) -= val_[p];
  return ia.transpose() * cond_var_.cwiseInverse().asDiagonal() * ia;
};




namespace gpir::detail {

  template< typename T >
  void write_pod( std::ostream& os, const T& x ) {
    os.write( reinterpret_cast<const char*>(&x), sizeof(T) );
  };

  template< typename T >
  T read_pod( std::istream& is ) {
    T x;
    is.read( reinterpret_cast<char*>(&x), sizeof(T) );
    if ( !is ) throw data_error("unexpected end of binary stream");
    return x;
  };

  template< typename T >
  void write_array( std::ostream& os, const T* p, std::size_t n ) {
    os.write( reinterpret_cast<const char*>(p), sizeof(T) * n );
  };

  template< typename T >
  void read_array( std::istream& is, T* p, std::size_t n ) {
    is.read( reinterpret_cast<char*>(p), sizeof(T) * n );
    if ( !is ) throw data_error("unexpected end of binary stream");
  };

}  // namespace gpir::detail



inline void gpir::vecchia_precision::save( std::ostream& os ) const {
  using namespace gpir::detail;
  os.write( "GPVC", 4 );
  write_pod<std::uint32_t>( os, 1 );
  write_pod( os, info_.mesh_hash );
  write_pod( os, info_.psi );
  write_pod( os, info_.nu );
  write_pod( os, info_.radius );
  write_pod( os, info_.scale );
  write_pod<std::uint8_t>( os, info_.has_nugget ? 1 : 0 );
  write_pod<std::uint64_t>( os, order_.size() );
  write_pod<std::uint64_t>( os, col_.size() );
  write_array( os, order_.data(), order_.size() );
  write_array( os, row_ptr_.data(), row_ptr_.size() );
  write_array( os, col_.data(), col_.size() );
  write_array( os, val_.data(), val_.size() );
  write_array( os, cond_var_.data(), cond_var_.size() );
};


inline gpir::vecchia_precision gpir::vecchia_precision::load(
  std::istream& is
) {
  using namespace gpir::detail;
  char magic[4];
  read_array( is, magic, 4 );
  if ( std::memcmp(magic, "GPVC", 4) != 0 )
    throw data_error("vecchia cache: bad magic");
  if ( read_pod<std::uint32_t>(is) != 1 )
    throw data_error("vecchia cache: unsupported version");
  vecchia_precision vp;
  vp.info_.mesh_hash = read_pod<std::uint64_t>(is);
  vp.info_.psi = read_pod<double>(is);
  vp.info_.nu = read_pod<double>(is);
  vp.info_.radius = read_pod<double>(is);
  vp.info_.scale = read_pod<double>(is);
  vp.info_.has_nugget = read_pod<std::uint8_t>(is) != 0;
  const auto m = read_pod<std::uint64_t>(is);
  const auto nnz = read_pod<std::uint64_t>(is);
  vp.order_.resize(m);
  vp.row_ptr_.resize(m + 1);
  vp.col_.resize(nnz);
  vp.val_.resize(nnz);
  vp.cond_var_.resize(m);
  read_array( is, vp.order_.data(), m );
  read_array( is, vp.row_ptr_.data(), m + 1 );
  read_array( is, vp.col_.data(), nnz );
  read_array( is, vp.val_.data(), nnz );
  read_array( is, vp.cond_var_.data(), m );
  return vp;
};


inline gpir::vecchia_precision gpir::cached_vecchia(
  const std::string& cache_dir,
  const gpir::spherical_mesh& mesh,
  const gpir::neighbor_index& nbrs,
  const gpir::correlation_model& kernel,
  const gpir::vecchia_options& opts
) {
  std::ostringstream name;
  name << "vecchia_" << std::hex << mesh.hash() << std::dec
       << "_" << kernel.family << "_" << kernel.psi << "_" << kernel.nu
       << "_r" << nbrs.radius() << "_k" << opts.max_neighbors
       << (opts.ordering == vecchia_ordering::maxmin ? "_mm" : "_sw")
       << ".bin";
  const std::filesystem::path path =
    std::filesystem::path(cache_dir) / name.str();
  if ( std::filesystem::exists(path) ) {
    std::ifstream is( path, std::ios::binary );
    try {
      vecchia_precision vp = vecchia_precision::load( is );
      if ( vp.info().mesh_hash == mesh.hash() && vp.size() == mesh.size() )
        return vp;
    }
    catch ( const data_error& ) { /* rebuild */ }
  }
  vecchia_precision vp = build_vecchia( mesh, nbrs, kernel, opts );
  std::filesystem::create_directories( cache_dir );
  std::ofstream os( path, std::ios::binary );
  if ( os ) vp.save( os );
  return vp;
};


#endif  // _GPIR_VECCHIA_
