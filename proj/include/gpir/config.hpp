
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "gpir/error.hpp"


#ifndef _GPIR_CONFIG_
#define _GPIR_CONFIG_


namespace gpir {

  /*! Plain-text key=value settings
   *
   * One assignment per line; '#' starts a comment; surrounding
   * whitespace is ignored. Keys are free-form dotted names
   * (e.g. "kernel.fwhm_mm").
   */
  class key_value_config {
  public:
    key_value_config() = default;

    static key_value_config parse( std::istream& is );
    static key_value_config read( const std::string& path );

    bool contains( const std::string& key ) const {
      return values_.count(key) > 0;
    }
    void set( const std::string& key, const std::string& value ) {
      values_[key] = value;
    }

    std::optional<std::string> get( const std::string& key ) const;
    std::optional<double> get_double( const std::string& key ) const;
    std::optional<long long> get_int( const std::string& key ) const;
    std::optional<bool> get_bool( const std::string& key ) const;

    const std::map<std::string, std::string>& values() const {
      return values_;
    }

    void write( std::ostream& os ) const {
      for ( const auto& [k, v] : values_ ) os << k << "=" << v << "\n";
    }

  private:
    std::map<std::string, std::string> values_;
  };


  namespace detail {
    inline std::string trim( const std::string& s ) {
      const auto b = s.find_first_not_of(" \t\r\n");
      if ( b == std::string::npos ) return "";
      const auto e = s.find_last_not_of(" \t\r\n");
      return s.substr(b, e - b + 1);
    };
  }

}  // namespace gpir



inline gpir::key_value_config gpir::key_value_config::parse(
  std::istream& is
) {
  key_value_config cfg;
  std::string line;
  int lineno = 0;
  while ( std::getline(is, line) ) {
    lineno++;
    const auto hash = line.find('#');
    if ( hash != std::string::npos ) line.erase(hash);
    line = detail::trim(line);
    if ( line.empty() ) continue;
    const auto eq = line.find('=');
    if ( eq == std::string::npos )
      throw data_error("config line " + std::to_string(lineno) +
                       ": expected key=value");
    const std::string key = detail::trim( line.substr(0, eq) );
    if ( key.empty() )
      throw data_error("config line " + std::to_string(lineno) +
                       ": empty key");
    cfg.values_[key] = detail::trim( line.substr(eq + 1) );
  }
  return cfg;
};


inline gpir::key_value_config gpir::key_value_config::read(
  const std::string& path
) {
  std::ifstream is(path);
  if ( !is ) throw data_error("cannot open config file: " + path);
  return parse(is);
};


inline std::optional<std::string> gpir::key_value_config::get(
  const std::string& key
) const {
  const auto it = values_.find(key);
  if ( it == values_.end() ) return std::nullopt;
  return it->second;
};


inline std::optional<double> gpir::key_value_config::get_double(
  const std::string& key
) const {
  const auto v = get(key);
  if ( !v ) return std::nullopt;
  try {
    std::size_t pos = 0;
    const double x = std::stod(*v, &pos);
    if ( pos != v->size() ) throw std::invalid_argument("");
    return x;
  }
  catch ( const std::exception& ) {
    throw data_error("config key '" + key + "': not a number: " + *v);
  }
};


inline std::optional<long long> gpir::key_value_config::get_int(
  const std::string& key
) const {
  const auto v = get(key);
  if ( !v ) return std::nullopt;
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(*v, &pos);
    if ( pos != v->size() ) throw std::invalid_argument("");
    return x;
  }
  catch ( const std::exception& ) {
    throw data_error("config key '" + key + "': not an integer: " + *v);
  }
};


inline std::optional<bool> gpir::key_value_config::get_bool(
  const std::string& key
) const {
  const auto v = get(key);
  if ( !v ) return std::nullopt;
  if ( *v == "1" || *v == "true" || *v == "yes" ) return true;
  if ( *v == "0" || *v == "false" || *v == "no" ) return false;
  throw data_error("config key '" + key + "': not a boolean: " + *v);
};


#endif  // _GPIR_CONFIG_
