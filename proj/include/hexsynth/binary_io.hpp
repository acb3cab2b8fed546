#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hexsynth/common.hpp"

namespace hexsynth::binio {

static_assert(std::endian::native == std::endian::little, "binary containers are little-endian");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), os_(path, std::ios::binary | std::ios::trunc) {
    if (!os_) throw IoError("cannot write " + path.string());
  }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void put(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  template <typename T>
  void put_array(std::span<const T> values) {
    os_.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  }

  void put_bytes(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }

  void finish() {
    os_.flush();
    if (!os_) throw IoError("failed writing " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), is_(path, std::ios::binary) {
    if (!is_) throw IoError("cannot open " + path.string());
  }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  T get() {
    T v;
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }

  template <typename T>
  std::vector<T> get_array(std::size_t n) {
    std::vector<T> v(n);
    read(reinterpret_cast<char*>(v.data()), n * sizeof(T));
    return v;
  }

  std::string get_bytes(std::size_t n) {
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  void expect_magic(const char (&magic)[5]) {
    if (get_bytes(4) != std::string(magic, 4)) throw IoError("bad magic in " + path_.string());
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void read(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw IoError("truncated file " + path_.string());
  }

  std::filesystem::path path_;
  std::ifstream is_;
};

}  // namespace hexsynth::binio
