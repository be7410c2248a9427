#include "featspace/io.hpp"

#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

using namespace featspace;
using namespace featspace::io;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("featspace_io_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

template <class T> T read_le(const std::string &bytes, std::size_t offset) {
  T v{};
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

} // namespace

TEST_CASE("array files round trip") {
  TempDir tmp;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;

  SUBCASE("real matrix with attributes") {
    RMatrix m(3, 5);
    for (auto &v : m.reshaped()) v = g(rng);
    m(1, 2) = -0.0;
    m(2, 4) = std::numeric_limits<double>::denorm_min();
    const auto file = tmp.path / "real.fsa";
    write_array(file, from_matrix(m, {{"alpha", 1.5}, {"n", 7.0}}));
    const ArrayFile a = read_array(file);
    CHECK(a.dtype == DType::real64);
    CHECK(a.dims == std::vector<std::uint64_t>{3, 5});
    CHECK(a.attr("alpha") == 1.5);
    CHECK(a.attr("n") == 7.0);
    CHECK_THROWS_AS((void)a.attr("missing"), IoError);
    const RMatrix back = to_real_matrix(a);
    CHECK(std::memcmp(back.data(), m.data(), sizeof(double) * 15) == 0);
    CHECK_THROWS_AS(to_complex_matrix(a), IoError);

    // Re-writing what was read gives the same bytes.
    write_array(tmp.path / "again.fsa", a);
    CHECK(read_text(file) == read_text(tmp.path / "again.fsa"));
  }
  SUBCASE("complex matrix layout") {
    CxMatrix m(2, 3);
    for (auto &v : m.reshaped()) v = Cx{g(rng), g(rng)};
    const auto file = tmp.path / "cx.fsa";
    write_array(file, from_matrix(m));
    const std::string bytes = read_text(file);
    // Independent header parse.
    CHECK(bytes.substr(0, 4) == "FSPA");
    CHECK(static_cast<int>(bytes[4]) == 2);
    CHECK(static_cast<int>(bytes[5]) == 2);
    CHECK(read_le<std::uint16_t>(bytes, 6) == 0);
    CHECK(read_le<std::uint64_t>(bytes, 8) == 2);
    CHECK(read_le<std::uint64_t>(bytes, 16) == 3);
    CHECK(bytes.size() == 24 + 6 * 16);
    // Row-major payload: second element is (0, 1).
    CHECK(read_le<double>(bytes, 24 + 16) == m(0, 1).real());
    CHECK(read_le<double>(bytes, 24 + 24) == m(0, 1).imag());
    CHECK(to_complex_matrix(read_array(file)) == m);
  }
  SUBCASE("corrupt files") {
    const auto file = tmp.path / "bad.fsa";
    write_array(file, from_matrix(RMatrix(RMatrix::Ones(4, 4))));
    std::string bytes = read_text(file);
    write_text(file, bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_array(file), IoError);
    bytes[0] = 'X';
    write_text(file, bytes);
    CHECK_THROWS_AS(read_array(file), IoError);
    CHECK_THROWS_AS(read_array(tmp.path / "absent.fsa"), IoError);
    ArrayFile wrong;
    wrong.dims = {2, 2};
    wrong.real = {1.0};
    CHECK_THROWS_AS(write_array(file, wrong), IoError);
  }
}

TEST_CASE("key = value configuration") {
  const auto kv = KeyValueConfig::parse("# comment\n  grid_size = 64  \nname=desk # trailing\n\nlambda = 1e-3\n"
                                        "dilations = 1-4-8-1\nlist = 2,3\nseed = 18446744073709551615\n");
  CHECK(kv.has("grid_size"));
  CHECK_FALSE(kv.has("missing"));
  CHECK(kv.get("grid_size", 0) == 64);
  CHECK(kv.get("name", std::string("x")) == "desk");
  CHECK(kv.get("lambda", 0.0) == 1e-3);
  CHECK(kv.get("missing", 2.5) == 2.5);
  CHECK(kv.get_ints("dilations", {}) == std::vector<int>{1, 4, 8, 1});
  CHECK(kv.get_ints("list", {}) == std::vector<int>{2, 3});
  CHECK(kv.get("seed", std::uint64_t{0}) == std::numeric_limits<std::uint64_t>::max());
  CHECK_THROWS_AS((void)kv.get("name", 0), InvalidParameter);
  CHECK_THROWS_AS((void)kv.get("lambda", 0), InvalidParameter);
  CHECK_THROWS_AS(KeyValueConfig::parse("just words\n"), InvalidParameter);
  CHECK_THROWS_AS(KeyValueConfig::parse("= 3\n"), InvalidParameter);
  CHECK_THROWS_AS(KeyValueConfig::load("/nonexistent/featspace.cfg"), IoError);

  KeyValueConfig c;
  c.set("b", "2");
  c.set("a", "1");
  CHECK(c.canonical() == "a=1\nb=2\n");
}

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  TempDir tmp;
  write_text(tmp.path / "abc.txt", "abc");
  CHECK(sha256_file(tmp.path / "abc.txt") == sha256_hex("abc"));
}

TEST_CASE("double formatting is round-trip exact") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 200; ++i) {
    const double v = u(rng) * std::pow(10.0, i % 40 - 20);
    CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
  }
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("csv writer") {
  CsvWriter w({"a", "b"});
  w.row({"1", "2"});
  CHECK(w.str() == "a,b\n1,2\n");
  CHECK_THROWS_AS(w.row({"1"}), Error);
}

TEST_CASE("pgm preview") {
  TempDir tmp;
  RVector v(6);
  v << 0.0, 1000.0, 2000.0, -50.0, 3000.0, std::nan("");
  write_pgm(tmp.path / "t1.pgm", v, 3, 2, 0.0, 2000.0);
  const std::string bytes = read_text(tmp.path / "t1.pgm");
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(bytes.substr(0, header.size()) == header);
  const auto px = [&](int i) { return static_cast<unsigned char>(bytes[header.size() + i]); };
  CHECK(px(0) == 0);
  CHECK(px(1) == 128);
  CHECK(px(2) == 255);
  CHECK(px(3) == 0);
  CHECK(px(4) == 255);
  CHECK(px(5) == 0);
  CHECK_THROWS_AS(write_pgm(tmp.path / "x.pgm", v, 2, 2, 0, 1), InvalidParameter);
  CHECK_THROWS_AS(write_pgm(tmp.path / "x.pgm", v, 3, 2, 1, 1), InvalidParameter);
}
