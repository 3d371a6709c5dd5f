#pragma once

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "biaswap/error.hpp"
#include "biaswap/tensor.hpp"

namespace biaswap::io {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::span<const unsigned char> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) {
  return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

inline std::string sha256_hex(std::span<const float> v) {
  return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(v.data()), v.size_bytes()));
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

// Reads a whole file, transparently gunzipping *.gz inputs.
inline std::string read_maybe_gz(const fs::path& p) {
  if (p.extension() != ".gz") return read_text(p);
  gzFile f = gzopen(p.string().c_str(), "rb");
  if (!f) throw FormatError("cannot open " + p.string());
  std::string out;
  std::array<char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw FormatError("corrupt gzip stream in " + p.string());
  return out;
}

// Little-endian binary writer with a 4-byte magic and a format version.
class BinaryWriter {
 public:
  BinaryWriter(const fs::path& p, const char (&magic)[5], std::uint32_t version) : path_(p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    out_.open(p, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error("cannot write " + p.string());
    out_.write(magic, 4);
    u32(version);
  }
  void u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void i64(std::int64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void f64(double v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void floats(std::span<const float> v) {
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) u32(static_cast<std::uint32_t>(d));
    floats(t.span());
  }
  std::uint64_t tell() { return static_cast<std::uint64_t>(out_.tellp()); }
  void close() {
    out_.close();
    if (!out_) throw Error("write failed: " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  BinaryReader(const fs::path& p, const char (&magic)[5], std::uint32_t max_version) : path_(p) {
    in_.open(p, std::ios::binary);
    if (!in_) throw FormatError("cannot open " + p.string());
    char m[4];
    in_.read(m, 4);
    if (!in_ || std::memcmp(m, magic, 4) != 0) throw FormatError(p.string() + ": bad magic, expected " + magic);
    version_ = u32();
    if (version_ == 0 || version_ > max_version)
      throw FormatError(p.string() + ": unsupported format version " + std::to_string(version_));
  }
  std::uint32_t version() const { return version_; }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::int64_t i64() { return pod<std::int64_t>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const auto n = u32();
    if (n > (1u << 28)) fail("string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) fail("string");
    return s;
  }
  void floats(std::span<float> v) {
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
    if (!in_) fail("float payload");
  }
  Tensor tensor() {
    const auto r = u32();
    if (r > 8) fail("tensor rank");
    Shape s(r);
    for (auto& d : s) d = static_cast<int>(u32());
    Tensor t(s);
    floats(t.span());
    return t;
  }
  void seek(std::uint64_t off) {
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(off));
    if (!in_) fail("seek");
  }

 private:
  template <class T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) fail("truncated record");
    return v;
  }
  [[noreturn]] void fail(const std::string& what) { throw FormatError(path_.string() + ": " + what); }

  fs::path path_;
  std::ifstream in_;
  std::uint32_t version_ = 0;
};

}  // namespace biaswap::io
