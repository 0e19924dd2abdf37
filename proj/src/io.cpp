#include "mdd/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mdd {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::string key_values_to_text(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("key/value not representable: " + k);
    }
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

KeyValues key_values_from_text(std::string_view text) {
  KeyValues kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError("malformed line: '" + std::string(line) + "'");
    kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }
  return kv;
}

void ByteWriter::u32(std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf_.append(b, 4);
}

void ByteWriter::f32(float v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf_.append(b, 4);
}

void ByteWriter::f32s(std::span<const float> values) {
  buf_.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
}

void ByteWriter::string(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.append(s);
}

std::string_view ByteReader::raw(std::size_t n) {
  if (data_.size() - pos_ < n) throw FormatError("unexpected end of data");
  std::string_view out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  std::memcpy(&v, raw(4).data(), 4);
  return v;
}

float ByteReader::f32() {
  float v;
  std::memcpy(&v, raw(4).data(), 4);
  return v;
}

void ByteReader::f32s(std::span<float> out) {
  std::memcpy(out.data(), raw(out.size() * sizeof(float)).data(), out.size() * sizeof(float));
}

std::string ByteReader::string() {
  const std::uint32_t n = u32();
  return std::string(raw(n));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return ss.str();
}

std::string encode_ppm(const Tensor<float>& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw std::invalid_argument("ppm needs a [3, H, W] array");
  const int h = chw.dim(1);
  const int w = chw.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp((chw[c * plane + i] + 1.0f) * 0.5f, 0.0f, 1.0f);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  }
  return out;
}

Tensor<float> tile_images(const std::vector<Tensor<float>>& images, int columns, float pad_value) {
  if (images.empty() || columns < 1) throw std::invalid_argument("tile_images: nothing to tile");
  const int h = images[0].dim(1);
  const int w = images[0].dim(2);
  const int n = static_cast<int>(images.size());
  const int rows = (n + columns - 1) / columns;
  const int gh = rows * (h + 1) - 1;
  const int gw = columns * (w + 1) - 1;
  Tensor<float> grid({3, gh, gw}, pad_value);
  for (int k = 0; k < n; ++k) {
    const Tensor<float>& img = images[static_cast<std::size_t>(k)];
    if (img.shape() != images[0].shape()) throw std::invalid_argument("tile_images: mixed image sizes");
    const int oy = (k / columns) * (h + 1);
    const int ox = (k % columns) * (w + 1);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          grid[(static_cast<std::size_t>(c) * gh + oy + y) * gw + ox + x] =
              img[(static_cast<std::size_t>(c) * h + y) * w + x];
        }
      }
    }
  }
  return grid;
}

}  // namespace mdd
