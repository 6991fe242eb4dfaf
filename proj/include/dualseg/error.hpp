#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dualseg {

enum class Errc {
  invalid_window,
  invalid_spacing,
  shape_mismatch,
  format,
  empty_input,
  invalid_parameter,
  no_positive_region,
  no_negative_region,
  degenerate_sample,
  empty_denominator,
  insufficient_samples,
  out_of_range,
  precondition,
  config,
  dependency,
  invalid_spec,
  io,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_window: return "invalid-window";
    case Errc::invalid_spacing: return "invalid-spacing";
    case Errc::shape_mismatch: return "shape";
    case Errc::format: return "format";
    case Errc::empty_input: return "empty-input";
    case Errc::invalid_parameter: return "parameter";
    case Errc::no_positive_region: return "no-positive-region";
    case Errc::no_negative_region: return "no-negative-region";
    case Errc::degenerate_sample: return "degenerate-sample";
    case Errc::empty_denominator: return "empty-denominator";
    case Errc::insufficient_samples: return "insufficient-samples";
    case Errc::out_of_range: return "range";
    case Errc::precondition: return "precondition";
    case Errc::config: return "config";
    case Errc::dependency: return "dependency";
    case Errc::invalid_spec: return "spec";
    case Errc::io: return "io";
  }
  return "unknown";
}

/// Exception type thrown by every dualseg operation; `code()` identifies the
/// failure class so callers (and the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + " error: " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace dualseg
