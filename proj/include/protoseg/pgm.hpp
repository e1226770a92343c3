#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace protoseg {

// Binary PGM (P5, maxval 255).
inline void write_pgm(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) {
    throw std::invalid_argument("write_pgm: pixel count does not match " + std::to_string(width) +
                                "x" + std::to_string(height));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

inline std::vector<std::uint8_t> read_pgm(const std::string& path, std::size_t& width,
                                          std::size_t& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  // Tokens separated by whitespace, # comments run to end of line. The single
  // whitespace byte after each token is consumed, so after the maxval token the
  // stream sits exactly at the binary pixel data.
  auto next_token = [&in, &path]() {
    std::string tok;
    int c = in.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = in.get();
      }
      c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      c = in.get();
    }
    if (tok.empty()) throw std::runtime_error("read_pgm: truncated header in " + path);
    return tok;
  };
  if (next_token() != "P5") throw std::runtime_error("read_pgm: " + path + " is not binary PGM");
  width = std::stoul(next_token());
  height = std::stoul(next_token());
  const unsigned maxval = static_cast<unsigned>(std::stoul(next_token()));
  if (maxval != 255) throw std::runtime_error("read_pgm: unsupported maxval in " + path);
  std::vector<std::uint8_t> pixels(width * height);
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(pixels.size())) {
    throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  }
  return pixels;
}

}  // namespace protoseg
