#pragma once

#include <stdexcept>
#include <string>

namespace sdfm {

struct invalid_parameter_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct singular_solve_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct degenerate_series_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct non_finite_likelihood_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct non_convergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct non_monotone_likelihood_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct singular_moment_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct degenerate_input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct rotation_failure_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct layout_too_small_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct singular_anchor_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct schema_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct index_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sdfm
