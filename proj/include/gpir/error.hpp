
#ifndef _GPIR_ERROR_
#define _GPIR_ERROR_

#include <stdexcept>
#include <string>


namespace gpir {

  /*! Invalid argument or configuration (precondition violation) */
  class argument_error : public std::invalid_argument {
  public:
    explicit argument_error( const std::string& what ) :
      std::invalid_argument(what) { ; }
  };

  /*! Malformed, inconsistent, or non-finite input data */
  class data_error : public std::runtime_error {
  public:
    explicit data_error( const std::string& what ) :
      std::runtime_error(what) { ; }
  };

  /*! Numerical failure: factorization, divergence, non-convergence */
  class numerical_error : public std::runtime_error {
  public:
    explicit numerical_error( const std::string& what ) :
      std::runtime_error(what) { ; }
  };

}  // namespace gpir

#endif  // _GPIR_ERROR_
