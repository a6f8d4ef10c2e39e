#pragma once

// Checkpoint file:
//
//   ITTACKPT 1\n
//   per parameter: "<group> <name> <rank> <d0> ... <dk>\n" + little-endian f64 payload
//   END\n
//
// Group tags are theta, phi, w, Theta, aux and buffer.

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "itta/params.hpp"

namespace itta {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline void write_f64_le(std::ostream& os, const std::vector<double>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  } else {
    for (double v : values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
      os.write(bytes, 8);
    }
  }
}

inline bool read_f64_le(std::istream& is, std::vector<double>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    return static_cast<std::size_t>(is.gcount()) == values.size() * sizeof(double);
  } else {
    for (double& v : values) {
      unsigned char bytes[8];
      is.read(reinterpret_cast<char*>(bytes), 8);
      if (is.gcount() != 8) return false;
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
      v = std::bit_cast<double>(bits);
    }
    return true;
  }
}

inline std::string read_line(std::istream& is, const char* what) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError(std::string(what) + ": unexpected end of file");
  return line;
}

}  // namespace io

inline constexpr const char* kCheckpointMagic = "ITTACKPT 1";

inline void save_checkpoint(std::ostream& os, const ParamStore& store) {
  os << kCheckpointMagic << '\n';
  for (const auto& p : store.params()) {
    os << group_tag(p.group) << ' ' << p.name << ' ' << p.value.shape.size();
    for (std::size_t d : p.value.shape) os << ' ' << d;
    os << '\n';
    io::write_f64_le(os, p.value.data);
  }
  os << "END\n";
  if (!os) throw std::runtime_error("save_checkpoint: write failed");
}

inline ParamStore load_checkpoint(std::istream& is) {
  const std::string header = io::read_line(is, "checkpoint");
  if (header != kCheckpointMagic)
    throw FormatError("checkpoint: expected header '" + std::string(kCheckpointMagic) + "', found '" + header + "'");
  ParamStore store;
  for (;;) {
    const std::string line = io::read_line(is, "checkpoint");
    if (line == "END") return store;
    std::istringstream rec(line);
    std::string tag, name;
    std::size_t rank = 0;
    if (!(rec >> tag >> name >> rank) || rank > 8) throw FormatError("checkpoint: malformed record '" + line + "'");
    Shape shape(rank);
    for (auto& d : shape)
      if (!(rec >> d)) throw FormatError("checkpoint: malformed shape in '" + line + "'");
    Array value = Array::zeros(shape);
    if (!io::read_f64_le(is, value.data)) throw FormatError("checkpoint: truncated payload for '" + name + "'");
    Group group;
    try {
      group = group_from_tag(tag);
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    store.add(name, group, std::move(value));
  }
}

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_checkpoint(os, store);
}

inline ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace itta
