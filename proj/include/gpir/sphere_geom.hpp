
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "gpir/error.hpp"


#ifndef _GPIR_SPHERE_GEOM_
#define _GPIR_SPHERE_GEOM_


namespace gpir {

  using direction_type = Eigen::Vector3d;

  /* ****************************************************************/
  /*! Vertex set on a sphere of known radius (mm)
   *
   * Vertices are stored as unit direction vectors; all distances
   * are great-circle distances in mm. Immutable after construction.
   */
  class spherical_mesh {
  public:
    static constexpr double default_radius = 100.0;

    spherical_mesh() = default;

    spherical_mesh(
      std::vector<direction_type> directions,
      const double radius = default_radius,
      std::vector<int> region_labels = {}
    );

    int size() const { return static_cast<int>( dirs_.size() ); }
    double radius() const { return radius_; }

    const direction_type& direction( const int i ) const {
      return dirs_[check_index(i)];
    }
    const std::vector<direction_type>& directions() const {
      return dirs_;
    }
    /*! Embedded Cartesian coordinates (mm) */
    Eigen::Vector3d position( const int i ) const {
      return radius_ * direction(i);
    }

    bool has_regions() const { return !regions_.empty(); }
    const std::vector<int>& region_labels() const { return regions_; }

    /*! Great-circle distance between vertices i and j (mm) */
    double distance( const int i, const int j ) const;

    /*! Sub-mesh on the given vertex ids (order preserved) */
    spherical_mesh subset( const std::vector<int>& ids ) const;

    /*! FNV-1a hash over radius and coordinates; keys caches */
    std::uint64_t hash() const;

    int check_index( const int i ) const {
      if ( i < 0 || i >= size() )
        throw argument_error("spherical_mesh: vertex index " +
                             std::to_string(i) + " out of range");
      return i;
    }

  private:
    std::vector<direction_type> dirs_;
    std::vector<int> regions_;
    double radius_ = default_radius;
  };
  // class spherical_mesh
  /* ****************************************************************/



  /*! Great-circle angle between two unit vectors
   *
   * atan2(|u x v|, u.v) is algebraically arccos(u.v) but keeps full
   * relative precision for nearby points.
   */
  inline double central_angle(
    const direction_type& u,
    const direction_type& v
  ) {
    const double dot = std::clamp( u.dot(v), -1.0, 1.0 );
    return std::atan2( u.cross(v).norm(), dot );
  };


  /*! Chord length corresponding to geodesic distance r on radius R */
  inline double chord_length( const double r, const double radius ) {
    const double angle = std::min( r / radius, std::numbers::pi );
    return 2 * radius * std::sin( angle / 2 );
  };


  inline double great_circle_distance(
    const spherical_mesh& mesh,
    const int i,
    const int j
  ) {
    return mesh.distance(i, j);
  };




  /* ****************************************************************/
  /*! Radius-r neighbor lists
   *
   * Each list holds (neighbor id, geodesic distance) pairs sorted by
   * distance, then id. Self is excluded; the relation is symmetric.
   */
  class neighbor_index {
  public:
    struct entry {
      int id;
      double distance;
    };

    neighbor_index() = default;
    neighbor_index( std::vector<std::vector<entry>> lists, double r ) :
      lists_(std::move(lists)), radius_(r) { ; }

    int size() const { return static_cast<int>( lists_.size() ); }
    double radius() const { return radius_; }
    const std::vector<entry>& operator[]( const int i ) const {
      return lists_[i];
    }
    std::size_t total_entries() const {
      std::size_t n = 0;
      for ( const auto& l : lists_ ) n += l.size();
      return n;
    }

  private:
    std::vector<std::vector<entry>> lists_;
    double radius_ = 0;
  };
  // class neighbor_index
  /* ****************************************************************/



  /*! Build an exact radius-r neighbor index
   *
   * Vertices are bucketed on a 3D grid of embedded coordinates with
   * cell width equal to the chord bound 2R sin(r / 2R); candidate
   * pairs from the 27 adjacent cells are post-filtered on geodesic
   * distance. Since chord <= geodesic, no pair within r is missed.
   */
  neighbor_index build_neighbor_index(
    const spherical_mesh& mesh,
    const double r
  );

  /*! Quasi-uniform golden-angle lattice of count points */
  spherical_mesh fibonacci_sphere(
    const int count,
    const double radius = spherical_mesh::default_radius
  );

  /*! Vertices within cap_radius of center, sorted by distance */
  std::vector<int> geodesic_disc(
    const spherical_mesh& mesh,
    const int center,
    const double cap_radius
  );

  /*! Nearest-neighbor spacing of each vertex (brute force, O(M^2)) */
  std::vector<double> nearest_neighbor_spacing(
    const spherical_mesh& mesh
  );

  /*! Largest pairwise geodesic distance (O(M^2)) */
  double mesh_diameter( const spherical_mesh& mesh );

}  // namespace gpir




inline gpir::spherical_mesh::spherical_mesh(
  std::vector<gpir::direction_type> directions,
  const double radius,
  std::vector<int> region_labels
) :
  dirs_(std::move(directions)),
  regions_(std::move(region_labels)),
  radius_(radius)
{
  if ( !(radius_ > 0) || !std::isfinite(radius_) )
    throw argument_error("spherical_mesh: radius must be positive");
  if ( dirs_.empty() )
    throw argument_error("spherical_mesh: need at least one vertex");
  if ( !regions_.empty() && regions_.size() != dirs_.size() )
    throw argument_error("spherical_mesh: region label count "
                         "does not match vertex count");
  for ( std::size_t i = 0; i < dirs_.size(); i++ ) {
    const double nrm = dirs_[i].norm();
    if ( !std::isfinite(nrm) || std::abs(nrm - 1) > 1e-9 )
      throw argument_error("spherical_mesh: vertex " +
                           std::to_string(i) +
                           " is not a unit direction");
  }
};


inline double gpir::spherical_mesh::distance(
  const int i,
  const int j
) const {
  return radius_ * central_angle( direction(i), direction(j) );
};


inline gpir::spherical_mesh gpir::spherical_mesh::subset(
  const std::vector<int>& ids
) const {
  std::vector<direction_type> d;
  std::vector<int> reg;
  d.reserve( ids.size() );
  for ( int i : ids ) {
    d.push_back( direction(i) );
    if ( has_regions() ) reg.push_back( regions_[i] );
  }
  return spherical_mesh( std::move(d), radius_, std::move(reg) );
};


inline std::uint64_t gpir::spherical_mesh::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h]( const double x ) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(&x);
    for ( std::size_t k = 0; k < sizeof(double); k++ ) {
      h ^= bytes[k];
      h *= 1099511628211ull;
    }
  };
  mix( radius_ );
  for ( const auto& u : dirs_ ) {
    mix( u[0] );  mix( u[1] );  mix( u[2] );
  }
  return h;
};




inline gpir::neighbor_index gpir::build_neighbor_index(
  const gpir::spherical_mesh& mesh,
  const double r
) {
  if ( !(r > 0) )
    throw argument_error("build_neighbor_index: radius must be > 0");
  const int m = mesh.size();
  const double R = mesh.radius();
  std::vector<std::vector<neighbor_index::entry>> lists(m);
  /* Cell width: chord bound, padded for rounding */
  const double width = chord_length(r, R) * (1 + 1e-12) + 1e-12 * R;
  const double lo = -R - width;
  const int ncell = static_cast<int>(
    std::min( std::ceil( (2 * R + 2 * width) / width ), 1.0e5 ) );
  auto cell_of = [&]( const double x ) {
    return std::clamp( static_cast<int>( (x - lo) / width ), 0,
                       ncell - 1 );
  };
  auto key = [ncell]( int a, int b, int c ) -> std::int64_t {
    return ( static_cast<std::int64_t>(a) * ncell + b ) * ncell + c;
  };
  std::unordered_map<std::int64_t, std::vector<int>> cells;
  std::vector<std::array<int, 3>> home(m);
  for ( int i = 0; i < m; i++ ) {
    const Eigen::Vector3d p = mesh.position(i);
    home[i] = { cell_of(p[0]), cell_of(p[1]), cell_of(p[2]) };
    cells[ key(home[i][0], home[i][1], home[i][2]) ].push_back(i);
  }
  for ( int i = 0; i < m; i++ ) {
    const auto [a, b, c] = home[i];
    for ( int da = -1; da <= 1; da++ ) {
      for ( int db = -1; db <= 1; db++ ) {
        for ( int dc = -1; dc <= 1; dc++ ) {
          const int aa = a + da, bb = b + db, cc = c + dc;
          if ( aa < 0 || bb < 0 || cc < 0 ||
               aa >= ncell || bb >= ncell || cc >= ncell ) continue;
          const auto it = cells.find( key(aa, bb, cc) );
          if ( it == cells.end() ) continue;
          for ( int j : it->second ) {
            if ( j <= i ) continue;
            const double d = mesh.distance(i, j);
            if ( d <= r ) {
              lists[i].push_back( {j, d} );
              lists[j].push_back( {i, d} );
            }
          }
        }
      }
    }
  }
  for ( auto& l : lists ) {
    std::sort( l.begin(), l.end(),
               []( const auto& x, const auto& y ) {
                 return x.distance < y.distance ||
                   (x.distance == y.distance && x.id < y.id);
               });
  }
  return neighbor_index( std::move(lists), r );
};



inline gpir::spherical_mesh gpir::fibonacci_sphere(
  const int count,
  const double radius
) {
  if ( count < 1 )
    throw argument_error("fibonacci_sphere: count must be >= 1");
  std::vector<direction_type> dirs;
  dirs.reserve(count);
  if ( count == 1 ) {
    dirs.emplace_back( 0, 0, 1 );
    return spherical_mesh( std::move(dirs), radius );
  }
  const double golden_angle = std::numbers::pi * (3 - std::sqrt(5.0));
  for ( int k = 0; k < count; k++ ) {
    const double z = 1 - (2.0 * k + 1) / count;
    const double rho = std::sqrt( std::max(0.0, 1 - z * z) );
    const double phi = golden_angle * k;
    direction_type u( rho * std::cos(phi), rho * std::sin(phi), z );
    dirs.push_back( u.normalized() );
  }
  return spherical_mesh( std::move(dirs), radius );
};



inline std::vector<int> gpir::geodesic_disc(
  const gpir::spherical_mesh& mesh,
  const int center,
  const double cap_radius
) {
  mesh.check_index(center);
  if ( !(cap_radius > 0) )
    throw argument_error("geodesic_disc: cap radius must be > 0");
  std::vector<std::pair<double, int>> found;
  for ( int i = 0; i < mesh.size(); i++ ) {
    const double d = mesh.distance(center, i);
    if ( d <= cap_radius ) found.emplace_back( d, i );
  }
  std::sort( found.begin(), found.end() );
  std::vector<int> ids;
  ids.reserve( found.size() );
  for ( const auto& f : found ) ids.push_back( f.second );
  return ids;
};



inline std::vector<double> gpir::nearest_neighbor_spacing(
  const gpir::spherical_mesh& mesh
) {
  const int m = mesh.size();
  std::vector<double> nn( m, std::numeric_limits<double>::infinity() );
  for ( int i = 0; i < m; i++ ) {
    for ( int j = i + 1; j < m; j++ ) {
      const double d = mesh.distance(i, j);
      nn[i] = std::min( nn[i], d );
      nn[j] = std::min( nn[j], d );
    }
  }
  return nn;
};


inline double gpir::mesh_diameter( const gpir::spherical_mesh& mesh ) {
  double dmax = 0;
  for ( int i = 0; i < mesh.size(); i++ )
    for ( int j = i + 1; j < mesh.size(); j++ )
      dmax = std::max( dmax, mesh.distance(i, j) );
  return dmax;
};


#endif  // _GPIR_SPHERE_GEOM_
