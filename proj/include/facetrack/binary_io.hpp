#pragma once

#include "facetrack/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace facetrack::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
    require(out_.good(), ErrorCategory::io, "cannot open for writing: " + path.string());
  }

  void magic(std::string_view tag) { out_.write(tag.data(), static_cast<std::streamsize>(tag.size())); }

  template <class T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }

  template <class T>
  void put_array(const T* data, std::size_t count) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
  }

  void string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void finish() {
    out_.flush();
    require(out_.good(), ErrorCategory::io, "write failed: " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    require(in_.good(), ErrorCategory::io, "cannot open for reading: " + path.string());
  }

  void expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(tag.size()));
    require(in_.good() && got == tag, ErrorCategory::format,
            path_.string() + ": bad magic, expected " + std::string(tag));
  }

  template <class T>
  T get() {
    T value{};
    in_.read(reinterpret_cast<char*>(&value), sizeof(T));
    require(in_.good(), ErrorCategory::format, path_.string() + ": truncated file");
    return value;
  }

  template <class T>
  void get_array(T* data, std::size_t count) {
    in_.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
    require(in_.good(), ErrorCategory::format, path_.string() + ": truncated file");
  }

  std::string string() {
    const auto n = get<std::uint32_t>();
    require(n < (1u << 24), ErrorCategory::format, path_.string() + ": unreasonable string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    require(in_.good(), ErrorCategory::format, path_.string() + ": truncated file");
    return s;
  }

  bool at_end() {
    return in_.peek() == std::char_traits<char>::eof();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

std::vector<char> read_file_bytes(const std::filesystem::path& path);

}  // namespace facetrack::io
