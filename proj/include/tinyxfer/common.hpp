// SPDX-License-Identifier: Apache-2.0
//
// Shared plumbing: error types, little-endian byte I/O, content hashing and
// small JSON helpers used by every module.

#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

namespace tinyxfer {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// Broad failure classes; the CLI maps each to its own exit code.
enum class ErrorKind { Config, Input, Runtime };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error config_error(const std::string& what) { return Error(ErrorKind::Config, what); }
inline Error input_error(const std::string& what) { return Error(ErrorKind::Input, what); }
inline Error runtime_error(const std::string& what) { return Error(ErrorKind::Runtime, what); }

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw runtime_error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw runtime_error("short write to '" + path.string() + "'");
}

// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    buf_.append(raw, sizeof(T));
  }
  void put_bytes(std::string_view bytes) { buf_.append(bytes); }
  template <typename T>
  void put_span(std::span<const T> values) {
    buf_.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
  }

  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

// Bounds-checked little-endian reader over a byte view.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    T value;
    std::memcpy(&value, take(sizeof(T), what).data(), sizeof(T));
    return value;
  }
  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n)
      throw input_error(std::string("truncated input while reading ") + what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  template <typename T>
  void read_into(std::span<T> out, const char* what) {
    auto raw = take(out.size_bytes(), what);
    std::memcpy(out.data(), raw.data(), raw.size());
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Hashing

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw runtime_error("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string file_sha256(const std::filesystem::path& path) {
  return sha256_hex(read_file(path));
}

// Hash of a directory tree: sorted relative paths and their file hashes.
inline std::string path_sha256(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) return file_sha256(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files)
    acc += fs::relative(f, path).generic_string() + ":" + file_sha256(f) + "\n";
  return sha256_hex(acc);
}

// ---------------------------------------------------------------------------
// JSON

// nlohmann::json keeps object keys in a std::map, so dump() is already
// key-sorted; this just pins the formatting.
inline std::string canonical_dump(const json& j) { return j.dump(); }

inline json parse_json(std::string_view text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw input_error(origin + ": " + e.what());
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  return parse_json(read_file(path), path.string());
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open '" + path.string() + "'");
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(parse_json(line, path.string() + ":" + std::to_string(lineno)));
  }
  return rows;
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const json> rows) {
  std::string out;
  for (const auto& r : rows) out += canonical_dump(r) + "\n";
  write_file(path, out);
}

// ---------------------------------------------------------------------------
// Threads

// Runs fn(i) for i in [0, n) on up to `threads` workers with a static strided
// split. Callers write results into per-index slots so reductions stay
// deterministic. The first exception thrown by any worker is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace tinyxfer
