#include "featspace/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace featspace::io {

static_assert(std::endian::native == std::endian::little, "binary array I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'S', 'P', 'A'};

template <typename T> void put(std::string &out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
public:
  Reader(const std::string &data, const std::filesystem::path &path) : data_(data), path_(path) {}

  template <typename T> T take() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string take_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }
  [[nodiscard]] const char *cursor() const { return data_.data() + pos_; }

private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("truncated array file: " + path_.string());
  }
  const std::string &data_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

} // namespace

std::uint64_t ArrayFile::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

double ArrayFile::attr(const std::string &key) const {
  const auto it = attrs.find(key);
  if (it == attrs.end()) throw IoError("array file is missing attribute '" + key + "'");
  return it->second;
}

void write_array(const std::filesystem::path &path, const ArrayFile &array) {
  const std::uint64_t n = array.element_count();
  if (array.dtype == DType::real64 ? array.real.size() != n : array.complex.size() != n) {
    throw IoError("write_array: payload length does not match dims for " + path.string());
  }
  if (array.dims.size() > 255 || array.attrs.size() > 65535) throw IoError("write_array: header too large");
  std::string out;
  out.append(kMagic, 4);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(array.dtype));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(array.dims.size()));
  put<std::uint16_t>(out, static_cast<std::uint16_t>(array.attrs.size()));
  for (auto d : array.dims) put<std::uint64_t>(out, d);
  for (const auto &[key, value] : array.attrs) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(key.size()));
    out.append(key);
    put<double>(out, value);
  }
  if (array.dtype == DType::real64) {
    out.append(reinterpret_cast<const char *>(array.real.data()), n * sizeof(double));
  } else {
    out.append(reinterpret_cast<const char *>(array.complex.data()), n * sizeof(Cx));
  }
  write_text(path, out);
}

ArrayFile read_array(const std::filesystem::path &path) {
  const std::string data = read_text(path);
  Reader in(data, path);
  if (in.take_bytes(4) != std::string(kMagic, 4)) throw IoError("not a featspace array file: " + path.string());
  ArrayFile a;
  const auto dtype = in.take<std::uint8_t>();
  if (dtype != 1 && dtype != 2) throw IoError("unknown dtype code in " + path.string());
  a.dtype = static_cast<DType>(dtype);
  const auto rank = in.take<std::uint8_t>();
  const auto n_attrs = in.take<std::uint16_t>();
  for (int i = 0; i < rank; ++i) a.dims.push_back(in.take<std::uint64_t>());
  for (int i = 0; i < n_attrs; ++i) {
    const auto len = in.take<std::uint16_t>();
    const std::string key = in.take_bytes(len);
    a.attrs[key] = in.take<double>();
  }
  const std::uint64_t n = a.element_count();
  const std::size_t bytes = n * (a.dtype == DType::real64 ? sizeof(double) : sizeof(Cx));
  if (in.remaining() != bytes) throw IoError("payload length does not match dims in " + path.string());
  if (a.dtype == DType::real64) {
    a.real.resize(n);
    std::memcpy(a.real.data(), in.cursor(), bytes);
  } else {
    a.complex.resize(n);
    std::memcpy(a.complex.data(), in.cursor(), bytes);
  }
  return a;
}

ArrayFile from_matrix(const RMatrix &m, std::map<std::string, double> attrs) {
  ArrayFile a;
  a.dtype = DType::real64;
  a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  a.attrs = std::move(attrs);
  a.real.resize(m.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(a.real.data(), m.rows(),
                                                                                      m.cols()) = m;
  return a;
}

ArrayFile from_matrix(const CxMatrix &m, std::map<std::string, double> attrs) {
  ArrayFile a;
  a.dtype = DType::complex128;
  a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  a.attrs = std::move(attrs);
  a.complex.resize(m.size());
  Eigen::Map<Eigen::Matrix<Cx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(a.complex.data(), m.rows(),
                                                                                  m.cols()) = m;
  return a;
}

RMatrix to_real_matrix(const ArrayFile &a) {
  if (a.dtype != DType::real64 || a.dims.size() != 2) throw IoError("expected a rank-2 real64 array");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      a.real.data(), static_cast<Eigen::Index>(a.dims[0]), static_cast<Eigen::Index>(a.dims[1]));
}

CxMatrix to_complex_matrix(const ArrayFile &a) {
  if (a.dtype != DType::complex128 || a.dims.size() != 2) throw IoError("expected a rank-2 complex128 array");
  return Eigen::Map<const Eigen::Matrix<Cx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      a.complex.data(), static_cast<Eigen::Index>(a.dims[0]), static_cast<Eigen::Index>(a.dims[1]));
}

namespace {

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

} // namespace

KeyValueConfig KeyValueConfig::parse(const std::string &text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidParameter("config line " + std::to_string(number) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw InvalidParameter("config line " + std::to_string(number) + ": empty key");
    cfg.values_[key] = trim(line.substr(eq + 1));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path &path) {
  if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path.string());
  return parse(read_text(path));
}

bool KeyValueConfig::has(const std::string &key) const { return values_.count(key) != 0; }

std::string KeyValueConfig::get(const std::string &key, const std::string &fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

namespace {

template <typename T> T parse_number(const std::string &key, const std::string &text) {
  T value{};
  const auto *end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw InvalidParameter("config key '" + key + "': cannot parse '" + text + "'");
  return value;
}

} // namespace

double KeyValueConfig::get(const std::string &key, double fallback) const {
  return has(key) ? parse_number<double>(key, values_.at(key)) : fallback;
}

int KeyValueConfig::get(const std::string &key, int fallback) const {
  return has(key) ? parse_number<int>(key, values_.at(key)) : fallback;
}

std::uint64_t KeyValueConfig::get(const std::string &key, std::uint64_t fallback) const {
  return has(key) ? parse_number<std::uint64_t>(key, values_.at(key)) : fallback;
}

std::vector<int> KeyValueConfig::get_ints(const std::string &key, const std::vector<int> &fallback) const {
  if (!has(key)) return fallback;
  std::vector<int> out;
  std::string text = values_.at(key);
  std::replace(text.begin(), text.end(), '-', ',');
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  return out;
}

std::string KeyValueConfig::canonical() const {
  std::string out;
  for (const auto &[k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::string sha256_hex(const std::string &bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

std::string sha256_file(const std::filesystem::path &path) { return sha256_hex(read_text(path)); }

std::string read_text(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

CsvWriter::CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

void CsvWriter::row(const std::vector<std::string> &cells) {
  if (cells.size() != columns_) throw Error("csv: row has wrong number of cells");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) text_ += ',';
    text_ += cells[i];
  }
  text_ += '\n';
}

void write_pgm(const std::filesystem::path &path, const RVector &values, int width, int height, double lo, double hi) {
  require(values.size() == static_cast<Eigen::Index>(width) * height, "write_pgm: size mismatch");
  require(hi > lo, "write_pgm: empty window");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double v = std::isfinite(values[i]) ? (values[i] - lo) / (hi - lo) * 255.0 : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L))));
  }
  write_text(path, out);
}

} // namespace featspace::io
