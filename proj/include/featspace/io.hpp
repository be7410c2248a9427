#pragma once

#include "featspace/core.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace featspace::io {

// Binary array file, little-endian:
//   "FSPA" | u8 dtype (1 real64, 2 complex128) | u8 rank | u16 n_attrs
//   | rank x u64 dims | n_attrs x (u16 key length, key bytes, f64 value)
//   | row-major payload
enum class DType : std::uint8_t { real64 = 1, complex128 = 2 };

struct ArrayFile {
  DType dtype = DType::real64;
  std::vector<std::uint64_t> dims;
  std::map<std::string, double> attrs;
  std::vector<double> real;
  std::vector<Cx> complex;

  [[nodiscard]] std::uint64_t element_count() const;
  [[nodiscard]] double attr(const std::string &key) const;
};

void write_array(const std::filesystem::path &path, const ArrayFile &array);
ArrayFile read_array(const std::filesystem::path &path);

// Matrices are stored as rank-2 arrays with dims [rows, cols].
ArrayFile from_matrix(const RMatrix &m, std::map<std::string, double> attrs = {});
ArrayFile from_matrix(const CxMatrix &m, std::map<std::string, double> attrs = {});
RMatrix to_real_matrix(const ArrayFile &a);
CxMatrix to_complex_matrix(const ArrayFile &a);

// key = value text with '#' comments.
class KeyValueConfig {
public:
  KeyValueConfig() = default;
  static KeyValueConfig parse(const std::string &text);
  static KeyValueConfig load(const std::filesystem::path &path);

  [[nodiscard]] bool has(const std::string &key) const;
  [[nodiscard]] std::string get(const std::string &key, const std::string &fallback) const;
  [[nodiscard]] double get(const std::string &key, double fallback) const;
  [[nodiscard]] int get(const std::string &key, int fallback) const;
  [[nodiscard]] std::uint64_t get(const std::string &key, std::uint64_t fallback) const;
  [[nodiscard]] std::vector<int> get_ints(const std::string &key, const std::vector<int> &fallback) const;
  void set(const std::string &key, const std::string &value) { values_[key] = value; }
  [[nodiscard]] const std::map<std::string, std::string> &values() const { return values_; }
  // Canonical "key=value\n" text, sorted by key.
  [[nodiscard]] std::string canonical() const;

private:
  std::map<std::string, std::string> values_;
};

std::string sha256_hex(const std::string &bytes);
std::string sha256_file(const std::filesystem::path &path);

std::string read_text(const std::filesystem::path &path);
void write_text(const std::filesystem::path &path, const std::string &text);

// Round-trip-exact decimal rendering of a double for CSV output.
std::string format_double(double v);

class CsvWriter {
public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<std::string> &cells);
  [[nodiscard]] std::string str() const { return text_; }
  void save(const std::filesystem::path &path) const { write_text(path, text_); }

private:
  std::size_t columns_;
  std::string text_;
};

// 8-bit binary PGM, values mapped linearly from [lo, hi] to [0, 255].
void write_pgm(const std::filesystem::path &path, const RVector &values, int width, int height, double lo, double hi);

} // namespace featspace::io
