#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace caps {

enum class Errc {
  zero_norm_row,
  non_finite,
  format_error,
  io_error,
  out_of_range_class,
  non_contiguous_classes,
  empty_class_prompt_set,
  dim_mismatch,
  shape_mismatch,
  length_mismatch,
  not_normalized,
  delta_out_of_range,
  invalid_hyperparams,
  not_stochastic,
  empty_input,
  invalid_range,
  empty_grid,
  no_common_classes,
  empty_report,
  empty_class,
  empty_classname,
  no_prompts,
  invalid_count,
  client_error,
  timeout,
  bad_response,
  exhausted,
  dim_zero,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::zero_norm_row: return "ZeroNormRow";
    case Errc::non_finite: return "NonFinite";
    case Errc::format_error: return "FormatError";
    case Errc::io_error: return "IoError";
    case Errc::out_of_range_class: return "OutOfRangeClass";
    case Errc::non_contiguous_classes: return "NonContiguousClasses";
    case Errc::empty_class_prompt_set: return "EmptyClassPromptSet";
    case Errc::dim_mismatch: return "DimMismatch";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::not_normalized: return "NotNormalized";
    case Errc::delta_out_of_range: return "DeltaOutOfRange";
    case Errc::invalid_hyperparams: return "InvalidHyperParams";
    case Errc::not_stochastic: return "NotStochastic";
    case Errc::empty_input: return "EmptyInput";
    case Errc::invalid_range: return "InvalidRange";
    case Errc::empty_grid: return "EmptyGrid";
    case Errc::no_common_classes: return "NoCommonClasses";
    case Errc::empty_report: return "EmptyReport";
    case Errc::empty_class: return "EmptyClass";
    case Errc::empty_classname: return "EmptyClassname";
    case Errc::no_prompts: return "NoPrompts";
    case Errc::invalid_count: return "InvalidCount";
    case Errc::client_error: return "ClientError";
    case Errc::timeout: return "Timeout";
    case Errc::bad_response: return "BadResponse";
    case Errc::exhausted: return "Exhausted";
    case Errc::dim_zero: return "DimZero";
  }
  return "Unknown";
}

/// Every failure raised by the engine carries one of the codes above; the
/// message is prefixed with the code name.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace caps
