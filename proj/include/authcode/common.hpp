#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace authcode {

enum class ErrorCode {
  invalid_argument,
  validation,
  schema_mismatch,
  not_found,
  config,
  io,
  unauthorized,
  numeric,
  unsupported,
  unavailable,
};

std::string_view to_string(ErrorCode code);

// Every failure the library reports carries a machine-readable code; the
// HTTP layer and the CLI map codes to statuses and exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string detail = {});

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  void push_row(std::span<const double> values);
  bool operator==(const Matrix&) const = default;
};

// Population statistics; an empty population yields all zeros.
struct Summary {
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double variance = 0.0;
  double min = 0.0;
  double max = 0.0;
};

Summary summarize(std::span<const double> values);

// Shortest round-trip decimal representation.
std::string format_double(double value);
double parse_double(std::string_view text, std::string_view what);
long long parse_integer(std::string_view text, std::string_view what);

std::vector<std::string> split_csv_line(std::string_view line);
// Quotes a field when it contains a comma, quote or newline.
std::string csv_field(std::string_view text);

// Stable 64-bit FNV-1a hash, used to derive per-entity seeds.
std::uint64_t stable_hash(std::string_view text);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace authcode
