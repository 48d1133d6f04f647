#include "fincflow/image_io.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "fincflow/error.hpp"

namespace fincflow {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in, const std::string& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {}
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw BadFormat(path + ": truncated header");
  return tok;
}

std::size_t header_number(std::istream& in, const std::string& path) {
  const std::string tok = header_token(in, path);
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos || tok.size() > 9)
    throw BadFormat(path + ": bad header field '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + p);
  const std::string magic = header_token(in, p);
  Image img;
  if (magic == "P5")
    img.channels = 1;
  else if (magic == "P6")
    img.channels = 3;
  else
    throw BadFormat(p + ": expected P5 or P6, got '" + magic + "'");
  img.width = header_number(in, p);
  img.height = header_number(in, p);
  const std::size_t maxval = header_number(in, p);
  if (img.width == 0 || img.height == 0) throw BadFormat(p + ": zero dimension");
  if (maxval != 255) throw BadFormat(p + ": only 8-bit images (maxval 255) are supported");
  // header_token consumed exactly one whitespace byte after maxval

  const std::size_t count = img.channels * img.height * img.width;
  std::vector<std::uint8_t> raw(count);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count)))
    throw BadFormat(p + ": truncated pixel data");
  img.pixels.resize(count);
  for (std::size_t h = 0; h < img.height; ++h)
    for (std::size_t w = 0; w < img.width; ++w)
      for (std::size_t c = 0; c < img.channels; ++c) img.at(c, h, w) = raw[(h * img.width + w) * img.channels + c];
  return img;
}

void write_pnm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw BadFormat("PNM holds 1 or 3 channels, got " + std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> raw(img.pixels.size());
  for (std::size_t h = 0; h < img.height; ++h)
    for (std::size_t w = 0; w < img.width; ++w)
      for (std::size_t c = 0; c < img.channels; ++c) raw[(h * img.width + w) * img.channels + c] = img.at(c, h, w);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw Error("write failed: " + path.string());
}

Image tile_channels(const Image& img) {
  Image out{1, img.height, img.width * img.channels, {}};
  out.pixels.resize(img.pixels.size());
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t h = 0; h < img.height; ++h)
      for (std::size_t w = 0; w < img.width; ++w) out.at(0, h, c * img.width + w) = img.at(c, h, w);
  return out;
}

}  // namespace fincflow
