#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mdd/tensor.hpp"

namespace mdd {

using KeyValues = std::map<std::string, std::string>;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest text that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);

// "key=value" lines in key order.
std::string key_values_to_text(const KeyValues& kv);
KeyValues key_values_from_text(std::string_view text);

// Little-endian binary writer/reader over an in-memory byte buffer.
class ByteWriter {
 public:
  void raw(std::string_view bytes) { buf_.append(bytes); }
  void u32(std::uint32_t v);
  void f32(float v);
  void f32s(std::span<const float> values);
  void string(std::string_view s);  // u32 length + bytes
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : data_(bytes) {}
  std::string_view raw(std::size_t n);
  std::uint32_t u32();
  float f32();
  void f32s(std::span<float> out);
  std::string string();
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::string sha256_hex(std::string_view bytes);

// Binary portable pixmap from a [3, H, W] array with values in [-1, 1].
std::string encode_ppm(const Tensor<float>& chw);
// Tiles equally sized [3, H, W] images into one grid image.
Tensor<float> tile_images(const std::vector<Tensor<float>>& images, int columns, float pad_value = 1.0f);

}  // namespace mdd
