
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gpir/config.hpp"
#include "gpir/draws.hpp"
#include "gpir/error.hpp"
#include "gpir/inference.hpp"
#include "gpir/model_core.hpp"
#include "gpir/sphere_geom.hpp"
#include "gpir/vecchia.hpp"


#ifndef _GPIR_IO_
#define _GPIR_IO_


/*
 * File formats
 *
 *   mesh CSV        header  vertex,x,y,z[,region]   (unit directions)
 *   covariates CSV  header  id,<name>,...           (one row per image)
 *   outcomes        binary  "GPIS" u32=1 u64 N u64 M, N*M f64 row-major
 *                   or CSV, one row per image, M comma-separated values
 *   draws           binary  "GPDR" u32=1 u64 S u64 P u64 M u64 C,
 *                   C x u64 chain lengths, S*P*M f64 (draw-major)
 *
 * Other imaging formats can be converted into the outcomes layout and
 * streamed through file_image_source.
 */

namespace gpir {

  namespace detail {

    inline std::vector<std::string> split_csv( const std::string& line ) {
      std::vector<std::string> out;
      std::string cell;
      std::istringstream ss( line );
      while ( std::getline(ss, cell, ',') ) out.push_back( trim(cell) );
      if ( !line.empty() && line.back() == ',' ) out.push_back("");
      return out;
    };

    inline double parse_double( const std::string& s,
                                const std::string& where ) {
      try {
        std::size_t pos = 0;
        const double x = std::stod( s, &pos );
        if ( pos != s.size() ) throw std::invalid_argument("");
        return x;
      }
      catch ( const std::exception& ) {
        throw data_error( where + ": not a number: '" + s + "'" );
      }
    };

    inline bool ends_with( const std::string& s, const std::string& suf ) {
      return s.size() >= suf.size() &&
        s.compare( s.size() - suf.size(), suf.size(), suf ) == 0;
    };

  }  // namespace detail




  /*! Mesh CSV; directions within 1e-6 of unit norm are renormalized */
  inline spherical_mesh read_mesh_csv( const std::string& path,
                                       const double radius ) {
    std::ifstream is( path );
    if ( !is ) throw data_error("cannot open mesh file: " + path);
    std::string line;
    if ( !std::getline(is, line) ) throw data_error("empty mesh file");
    const auto head = detail::split_csv( line );
    if ( head.size() < 4 || head[0] != "vertex" || head[1] != "x" ||
         head[2] != "y" || head[3] != "z" )
      throw data_error("mesh file: header must be vertex,x,y,z[,region]");
    const bool has_region = head.size() >= 5 && head[4] == "region";
    std::vector<direction_type> dirs;
    std::vector<int> regions;
    int row = 0;
    while ( std::getline(is, line) ) {
      if ( detail::trim(line).empty() ) continue;
      const auto c = detail::split_csv( line );
      const std::string where = path + " row " + std::to_string(row + 1);
      if ( c.size() < (has_region ? 5u : 4u) )
        throw data_error( where + ": too few columns" );
      if ( static_cast<int>(detail::parse_double(c[0], where)) != row )
        throw data_error( where + ": vertex ids must be 0..M-1 in order" );
      direction_type u( detail::parse_double(c[1], where),
                        detail::parse_double(c[2], where),
                        detail::parse_double(c[3], where) );
      const double nrm = u.norm();
      if ( std::abs(nrm - 1) > 1e-6 )
        throw data_error( where + ": direction is not unit length" );
      dirs.push_back( u / nrm );
      if ( has_region )
        regions.push_back( static_cast<int>(detail::parse_double(c[4], where)) );
      row++;
    }
    if ( dirs.empty() ) throw data_error("mesh file has no vertices");
    return spherical_mesh( std::move(dirs), radius, std::move(regions) );
  };


  inline void write_mesh_csv( const std::string& path,
                              const spherical_mesh& mesh ) {
    std::ofstream os( path );
    if ( !os ) throw data_error("cannot write mesh file: " + path);
    os << "vertex,x,y,z" << (mesh.has_regions() ? ",region" : "") << "\n";
    os << std::setprecision(17);
    for ( int i = 0; i < mesh.size(); i++ ) {
      const auto& u = mesh.direction(i);
      os << i << "," << u.x() << "," << u.y() << "," << u.z();
      if ( mesh.has_regions() ) os << "," << mesh.region_labels()[i];
      os << "\n";
    }
  };




  struct covariate_table {
    std::vector<std::string> names;
    std::vector<std::string> ids;
    Eigen::MatrixXd x;   /* N x P */
  };

  inline covariate_table read_covariates_csv( const std::string& path ) {
    std::ifstream is( path );
    if ( !is ) throw data_error("cannot open covariates file: " + path);
    std::string line;
    if ( !std::getline(is, line) ) throw data_error("empty covariates file");
    covariate_table t;
    auto head = detail::split_csv( line );
    if ( head.size() < 2 )
      throw data_error("covariates file: need an id column and >= 1 "
                       "covariate");
    t.names.assign( head.begin() + 1, head.end() );
    std::vector<std::vector<double>> rows;
    while ( std::getline(is, line) ) {
      if ( detail::trim(line).empty() ) continue;
      const auto c = detail::split_csv( line );
      const std::string where = path + " row " + std::to_string(rows.size() + 1);
      if ( c.size() != head.size() )
        throw data_error( where + ": expected " +
                          std::to_string(head.size()) + " columns" );
      t.ids.push_back( c[0] );
      std::vector<double> r;
      for ( std::size_t k = 1; k < c.size(); k++ )
        r.push_back( detail::parse_double(c[k], where) );
      rows.push_back( std::move(r) );
    }
    t.x.resize( rows.size(), t.names.size() );
    for ( std::size_t i = 0; i < rows.size(); i++ )
      for ( std::size_t j = 0; j < t.names.size(); j++ )
        t.x(i, j) = rows[i][j];
    return t;
  };


  inline void write_covariates_csv( const std::string& path,
                                    const Eigen::MatrixXd& x,
                                    std::vector<std::string> names = {} ) {
    std::ofstream os( path );
    if ( !os ) throw data_error("cannot write covariates file: " + path);
    if ( names.empty() )
      for ( int j = 0; j < x.cols(); j++ )
        names.push_back( "x" + std::to_string(j) );
    os << "id";
    for ( const auto& nm : names ) os << "," << nm;
    os << "\n" << std::setprecision(17);
    for ( int i = 0; i < x.rows(); i++ ) {
      os << i;
      for ( int j = 0; j < x.cols(); j++ ) os << "," << x(i, j);
      os << "\n";
    }
  };




  inline void write_covariates_csv( const std::string& path,
                                    const covariate_table& t ) {
    if ( !t.ids.empty() && static_cast<Eigen::Index>(t.ids.size()) != t.x.rows() )
      throw argument_error("write_covariates_csv: ids do not match rows");
    std::ofstream os( path );
    if ( !os ) throw data_error("cannot write covariates file: " + path);
    os << "id";
    for ( int j = 0; j < t.x.cols(); j++ )
      os << "," << ( j < static_cast<int>(t.names.size()) ? t.names[j] :
                     "x" + std::to_string(j) );
    os << "\n" << std::setprecision(17);
    for ( int i = 0; i < t.x.rows(); i++ ) {
      if ( t.ids.empty() ) os << i;
      else os << t.ids[i];
      for ( int j = 0; j < t.x.cols(); j++ ) os << "," << t.x(i, j);
      os << "\n";
    }
  };



  /*! Write images (M x N, one per column) as GPIS binary */
  inline void write_outcomes_binary( const std::string& path,
                                     const Eigen::MatrixXd& images ) {
    using namespace detail;
    std::ofstream os( path, std::ios::binary );
    if ( !os ) throw data_error("cannot write outcomes file: " + path);
    os.write( "GPIS", 4 );
    write_pod<std::uint32_t>( os, 1 );
    write_pod<std::uint64_t>( os, images.cols() );
    write_pod<std::uint64_t>( os, images.rows() );
    write_array( os, images.data(), images.size() );
  };


  /*! Streams GPIS binary images one at a time */
  class file_image_source : public image_source {
  public:
    explicit file_image_source( const std::string& path ) :
      path_(path), is_(path, std::ios::binary) {
      using namespace detail;
      if ( !is_ ) throw data_error("cannot open outcomes file: " + path);
      char magic[4];
      read_array( is_, magic, 4 );
      if ( std::memcmp(magic, "GPIS", 4) != 0 )
        throw data_error("outcomes file: bad magic in " + path);
      if ( read_pod<std::uint32_t>(is_) != 1 )
        throw data_error("outcomes file: unsupported version");
      n_ = static_cast<int>( read_pod<std::uint64_t>(is_) );
      m_ = static_cast<int>( read_pod<std::uint64_t>(is_) );
      data_start_ = is_.tellg();
    }
    int n() const override { return n_; }
    int m() const override { return m_; }
    void rewind() override {
      is_.clear();
      is_.seekg( data_start_ );
      pos_ = 0;
    }
    bool next( Eigen::VectorXd& y ) override {
      if ( pos_ >= n_ ) return false;
      y.resize( m_ );
      is_.read( reinterpret_cast<char*>(y.data()), sizeof(double) * m_ );
      if ( !is_ )
        throw data_error("outcomes file: truncated at image " +
                         std::to_string(pos_));
      pos_++;
      return true;
    }
  private:
    std::string path_;
    std::ifstream is_;
    std::streampos data_start_;
    int n_ = 0, m_ = 0, pos_ = 0;
  };


  /*! Load all images as M x N; binary GPIS or CSV (by .csv suffix) */
  inline Eigen::MatrixXd read_outcomes( const std::string& path ) {
    if ( !detail::ends_with(path, ".csv") ) {
      file_image_source src( path );
      Eigen::MatrixXd y( src.m(), src.n() );
      Eigen::VectorXd yi;
      int i = 0;
      while ( src.next(yi) ) y.col(i++) = yi;
      return y;
    }
    std::ifstream is( path );
    if ( !is ) throw data_error("cannot open outcomes file: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while ( std::getline(is, line) ) {
      if ( detail::trim(line).empty() ) continue;
      const auto c = detail::split_csv( line );
      const std::string where = path + " image " + std::to_string(rows.size());
      std::vector<double> r;
      for ( const auto& s : c ) r.push_back( detail::parse_double(s, where) );
      if ( !rows.empty() && r.size() != rows[0].size() )
        throw data_error( where + ": inconsistent length" );
      rows.push_back( std::move(r) );
    }
    if ( rows.empty() ) throw data_error("outcomes file has no images");
    Eigen::MatrixXd y( rows[0].size(), rows.size() );
    for ( std::size_t i = 0; i < rows.size(); i++ )
      for ( std::size_t v = 0; v < rows[i].size(); v++ ) y(v, i) = rows[i][v];
    return y;
  };




  inline void write_draws_binary( const std::string& path,
                                  const posterior_draws& d ) {
    using namespace detail;
    std::ofstream os( path, std::ios::binary );
    if ( !os ) throw data_error("cannot write draws file: " + path);
    os.write( "GPDR", 4 );
    write_pod<std::uint32_t>( os, 1 );
    write_pod<std::uint64_t>( os, d.size() );
    write_pod<std::uint64_t>( os, d.p );
    write_pod<std::uint64_t>( os, d.m );
    write_pod<std::uint64_t>( os, d.chain_ends.size() );
    int prev = 0;
    for ( int e : d.chain_ends ) {
      write_pod<std::uint64_t>( os, e - prev );
      prev = e;
    }
    /* Row-major S x (P M) */
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                        Eigen::RowMajor> rm = d.beta;
    write_array( os, rm.data(), rm.size() );
  };


  inline posterior_draws read_draws_binary( const std::string& path ) {
    using namespace detail;
    std::ifstream is( path, std::ios::binary );
    if ( !is ) throw data_error("cannot open draws file: " + path);
    char magic[4];
    read_array( is, magic, 4 );
    if ( std::memcmp(magic, "GPDR", 4) != 0 )
      throw data_error("draws file: bad magic in " + path);
    if ( read_pod<std::uint32_t>(is) != 1 )
      throw data_error("draws file: unsupported version");
    posterior_draws d;
    const auto s = read_pod<std::uint64_t>(is);
    d.p = static_cast<int>( read_pod<std::uint64_t>(is) );
    d.m = static_cast<int>( read_pod<std::uint64_t>(is) );
    const auto c = read_pod<std::uint64_t>(is);
    std::uint64_t total = 0;
    for ( std::uint64_t k = 0; k < c; k++ ) {
      total += read_pod<std::uint64_t>(is);
      d.chain_ends.push_back( static_cast<int>(total) );
    }
    if ( total != s ) throw data_error("draws file: chain lengths != S");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
      rm( s, static_cast<Eigen::Index>(d.p) * d.m );
    read_array( is, rm.data(), rm.size() );
    d.beta = rm;
    return d;
  };




  /*! Per-vertex summary: mean, sd, 2.5/10/90/97.5% quantiles,
   *  simultaneous band, activation label */
  inline void write_summary_csv( std::ostream& os,
                                 const posterior_draws& d,
                                 const double band_level = 0.8,
                                 const double threshold = 0 ) {
    os << "vertex,coefficient,mean,sd,q2.5,q10,q90,q97.5,band_lo,band_hi,"
          "activation\n";
    os << std::setprecision(10);
    std::vector<double> col( d.size() );
    for ( int j = 0; j < d.p; j++ ) {
      const Eigen::MatrixXd cj = d.coefficient(j);
      const bool can_band = d.size() >= 50;
      credible_band band;
      std::vector<activation_label> act;
      if ( can_band ) {
        band = simultaneous_band( cj, band_level );
        act = activation_map( band, threshold );
      }
      for ( int v = 0; v < d.m; v++ ) {
        for ( int s = 0; s < d.size(); s++ ) col[s] = cj(s, v);
        std::sort( col.begin(), col.end() );
        const double mu = cj.col(v).mean();
        const double sd = std::sqrt( (cj.col(v).array() - mu).square().sum() /
                                     std::max(d.size() - 1, 1) );
        os << v << "," << j << "," << mu << "," << sd << ","
           << sorted_quantile(col, 0.025) << "," << sorted_quantile(col, 0.1)
           << "," << sorted_quantile(col, 0.9) << ","
           << sorted_quantile(col, 0.975) << ",";
        if ( can_band )
          os << band.lower()[v] << "," << band.upper()[v] << ","
             << to_string(act[v]) << "\n";
        else
          os << ",,\n";
      }
    }
  };

}  // namespace gpir

#endif  // _GPIR_IO_
