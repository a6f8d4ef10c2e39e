#pragma once

// Synthetic multi-domain image benchmark. Each class is a fixed 16x16
// geometric template; a domain applies contrast, brightness, a sinusoidal
// texture and Gaussian noise before clipping to [0, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "itta/array.hpp"
#include "itta/checkpoint.hpp"

namespace itta {

struct DomainSpec {
  std::string domain_id;
  double brightness_shift = 0.0;
  double contrast_scale = 1.0;
  double noise_std = 0.0;
  double texture_freq = 0.0;
  std::size_t n_samples = 200;

  void validate() const {
    if (!(contrast_scale > 0.0)) throw std::invalid_argument("domain '" + domain_id + "': contrast_scale must be > 0");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("domain '" + domain_id + "': noise_std must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const DomainSpec& d) {
  j = {{"domain_id", d.domain_id},       {"brightness_shift", d.brightness_shift}, {"contrast_scale", d.contrast_scale},
       {"noise_std", d.noise_std},       {"texture_freq", d.texture_freq},         {"n_samples", d.n_samples}};
}

inline void from_json(const nlohmann::json& j, DomainSpec& d) {
  d.domain_id = j.at("domain_id").get<std::string>();
  d.brightness_shift = j.value("brightness_shift", 0.0);
  d.contrast_scale = j.value("contrast_scale", 1.0);
  d.noise_std = j.value("noise_std", 0.0);
  d.texture_freq = j.value("texture_freq", 0.0);
  d.n_samples = j.value("n_samples", std::size_t{200});
}

struct DomainData {
  DomainSpec spec;
  Array images;             // [n x side*side]
  std::vector<int> labels;  // [n]
};

struct DomainSuite {
  std::size_t class_count = 4;
  std::size_t side = 16;
  std::shared_ptr<const std::vector<DomainData>> domains;
  std::vector<std::string> source_ids;
  std::vector<std::string> target_ids;

  std::size_t pixels() const { return side * side; }

  const DomainData& domain(const std::string& id) const {
    for (const auto& d : *domains)
      if (d.spec.domain_id == id) return d;
    throw std::out_of_range("unknown domain '" + id + "'");
  }

  std::vector<std::string> domain_ids() const {
    std::vector<std::string> out;
    for (const auto& d : *domains) out.push_back(d.spec.domain_id);
    return out;
  }
};

inline constexpr std::size_t kTemplateCount = 7;
inline constexpr std::size_t kImageSide = 16;

// Binary template for class k: bars, diagonals, checker, disk, columns, cross, ring.
inline std::vector<double> class_template(std::size_t k, std::size_t side = kImageSide) {
  if (k >= kTemplateCount)
    throw std::invalid_argument("class " + std::to_string(k) + " has no template (" + std::to_string(kTemplateCount) +
                                " available)");
  std::vector<double> img(side * side, 0.0);
  const double centre = (static_cast<double>(side) - 1.0) / 2.0;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double dr = static_cast<double>(r) - centre, dc = static_cast<double>(c) - centre;
      const double dist = std::sqrt(dr * dr + dc * dc);
      bool on = false;
      switch (k) {
        case 0: on = (r / 2) % 2 == 0; break;
        case 1: on = ((r + c) / 3) % 2 == 0; break;
        case 2: on = (r / 4 + c / 4) % 2 == 0; break;
        case 3: on = dist < 5.0; break;
        case 4: on = (c / 2) % 2 == 0; break;
        case 5: on = std::abs(dr) < 2.0 || std::abs(dc) < 2.0; break;
        case 6: on = dist > 3.5 && dist < 6.5; break;
      }
      img[r * side + c] = on ? 1.0 : 0.0;
    }
  return img;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline DomainData generate_domain(const DomainSpec& spec, std::size_t class_count, std::uint64_t seed,
                                  std::size_t side = kImageSide) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const std::size_t pixels = side * side, n = spec.n_samples;
  std::vector<std::vector<double>> templates;
  for (std::size_t k = 0; k < class_count; ++k) templates.push_back(class_template(k, side));

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % class_count);
  std::shuffle(labels.begin(), labels.end(), rng);

  DomainData d{spec, Array::zeros({n, pixels}), labels};
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  constexpr double kTextureAmplitude = 0.3;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = templates[static_cast<std::size_t>(labels[i])];
    double orient = 0.0, phase = 0.0;
    if (spec.texture_freq > 0.0) {
      orient = angle(rng);
      phase = angle(rng);
    }
    for (std::size_t p = 0; p < pixels; ++p) {
      double v = spec.contrast_scale * t[p] + spec.brightness_shift;
      if (spec.texture_freq > 0.0) {
        const double r = static_cast<double>(p / side), c = static_cast<double>(p % side);
        v += kTextureAmplitude * std::sin(2.0 * std::numbers::pi * spec.texture_freq *
                                              (c * std::cos(orient) + r * std::sin(orient)) / static_cast<double>(side) +
                                          phase);
      }
      if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
      d.images[i * pixels + p] = std::clamp(v, 0.0, 1.0);
    }
  }
  return d;
}

// Generates every domain; all domains start out as sources.
inline DomainSuite generate_suite(std::size_t class_count, const std::vector<DomainSpec>& specs, std::uint64_t seed) {
  if (class_count < 2) throw std::invalid_argument("generate_suite: class_count must be >= 2");
  if (class_count > kTemplateCount)
    throw std::invalid_argument("generate_suite: class_count " + std::to_string(class_count) + " exceeds the " +
                                std::to_string(kTemplateCount) + " available templates");
  if (specs.size() < 2) throw std::invalid_argument("generate_suite: need at least 2 domains");
  std::set<std::string> seen;
  auto domains = std::make_shared<std::vector<DomainData>>();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (!seen.insert(specs[i].domain_id).second)
      throw std::invalid_argument("generate_suite: duplicate domain id '" + specs[i].domain_id + "'");
    domains->push_back(generate_domain(specs[i], class_count, mix_seed(seed, i)));
  }
  DomainSuite suite;
  suite.class_count = class_count;
  suite.domains = std::move(domains);
  suite.source_ids = suite.domain_ids();
  return suite;
}

// Four domains loosely modelled on photo / art / cartoon / sketch styles.
inline std::vector<DomainSpec> default_domain_specs(std::size_t n_samples = 200) {
  return {
      {"d0", 0.0, 0.5, 1.0, 0.0, n_samples},
      {"d1", 0.4, 0.3, 0.6, 1.5, n_samples},
      {"d2", -0.2, 0.6, 1.2, 3.0, n_samples},
      {"d3", 0.5, 0.2, 0.4, 0.0, n_samples},
  };
}

inline DomainSuite leave_one_out(const DomainSuite& suite, const std::string& held_out_id) {
  suite.domain(held_out_id);
  DomainSuite view = suite;
  view.source_ids.clear();
  for (const auto& id : suite.domain_ids())
    if (id != held_out_id) view.source_ids.push_back(id);
  view.target_ids = {held_out_id};
  return view;
}

inline DomainSuite single_source(const DomainSuite& suite, const std::string& source_id) {
  suite.domain(source_id);
  DomainSuite view = suite;
  view.source_ids = {source_id};
  view.target_ids.clear();
  for (const auto& id : suite.domain_ids())
    if (id != source_id) view.target_ids.push_back(id);
  return view;
}

// ---------------------------------------------------------------------------
// Train / validation split

struct SampleRef {
  std::size_t domain;  // index into suite.domains
  std::size_t index;
};

struct Split {
  std::vector<SampleRef> train;
  std::vector<SampleRef> val;
};

inline Split make_split(const DomainSuite& suite, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("make_split: val_fraction must lie in (0, 1)");
  if (suite.source_ids.empty()) throw std::invalid_argument("make_split: suite has no source domain");
  Split split;
  const auto& domains = *suite.domains;
  for (std::size_t di = 0; di < domains.size(); ++di) {
    const auto& d = domains[di];
    if (std::find(suite.source_ids.begin(), suite.source_ids.end(), d.spec.domain_id) == suite.source_ids.end())
      continue;
    const std::size_t n = d.labels.size();
    if (n == 0) throw std::invalid_argument("make_split: domain '" + d.spec.domain_id + "' is empty");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(seed, di));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) (i < n_val ? split.val : split.train).push_back({di, order[i]});
  }
  return split;
}

inline Array gather_images(const DomainSuite& suite, std::span<const SampleRef> refs) {
  const std::size_t pixels = suite.pixels();
  Array out = Array::zeros({refs.size(), pixels});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& src = (*suite.domains)[refs[i].domain].images.data;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(refs[i].index * pixels), pixels,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * pixels));
  }
  return out;
}

inline std::vector<int> gather_labels(const DomainSuite& suite, std::span<const SampleRef> refs) {
  std::vector<int> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back((*suite.domains)[r.domain].labels[r.index]);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file:
//   ITTADS 1\n
//   one-line JSON header\n
//   per domain in header order: f64 LE images, then i32 LE labels

inline constexpr const char* kDatasetMagic = "ITTADS 1";

inline void save_suite(std::ostream& os, const DomainSuite& suite) {
  nlohmann::json header;
  header["endianness"] = "little";
  header["class_count"] = suite.class_count;
  header["side"] = suite.side;
  header["source_ids"] = suite.source_ids;
  header["target_ids"] = suite.target_ids;
  header["domains"] = nlohmann::json::array();
  for (const auto& d : *suite.domains) header["domains"].push_back(d.spec);
  os << kDatasetMagic << '\n' << header.dump() << '\n';
  for (const auto& d : *suite.domains) {
    io::write_f64_le(os, d.images.data);
    for (int label : d.labels) {
      const auto u = static_cast<std::uint32_t>(label);
      const char bytes[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                             static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
      os.write(bytes, 4);
    }
  }
  if (!os) throw std::runtime_error("save_suite: write failed");
}

inline DomainSuite load_suite(std::istream& is) {
  const std::string magic = io::read_line(is, "dataset");
  if (magic != kDatasetMagic)
    throw FormatError("dataset: expected header '" + std::string(kDatasetMagic) + "', found '" + magic + "'");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(io::read_line(is, "dataset"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset: malformed JSON header: ") + e.what());
  }
  if (header.value("endianness", std::string{}) != "little")
    throw FormatError("dataset: payload is not flagged little-endian (found '" + header.value("endianness", std::string{"<unset>"}) +
                      "', expected 'little')");
  DomainSuite suite;
  suite.class_count = header.at("class_count").get<std::size_t>();
  suite.side = header.at("side").get<std::size_t>();
  suite.source_ids = header.at("source_ids").get<std::vector<std::string>>();
  suite.target_ids = header.at("target_ids").get<std::vector<std::string>>();
  auto domains = std::make_shared<std::vector<DomainData>>();
  for (const auto& spec_json : header.at("domains")) {
    DomainData d;
    d.spec = spec_json.get<DomainSpec>();
    const std::size_t n = d.spec.n_samples;
    d.images = Array::zeros({n, suite.side * suite.side});
    if (!io::read_f64_le(is, d.images.data))
      throw FormatError("dataset: truncated image payload for domain '" + d.spec.domain_id + "'");
    d.labels.resize(n);
    for (auto& label : d.labels) {
      unsigned char b[4];
      is.read(reinterpret_cast<char*>(b), 4);
      if (is.gcount() != 4) throw FormatError("dataset: truncated label payload for domain '" + d.spec.domain_id + "'");
      label = static_cast<int>(static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
                               static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24);
      if (label < 0 || static_cast<std::size_t>(label) >= suite.class_count)
        throw FormatError("dataset: label out of range in domain '" + d.spec.domain_id + "'");
    }
    domains->push_back(std::move(d));
  }
  suite.domains = std::move(domains);
  return suite;
}

inline void save_suite(const std::string& path, const DomainSuite& suite) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_suite(os, suite);
}

inline DomainSuite load_suite(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return load_suite(is);
}

inline bool bit_equal(const DomainSuite& a, const DomainSuite& b) {
  if (a.class_count != b.class_count || a.side != b.side || a.source_ids != b.source_ids ||
      a.target_ids != b.target_ids || a.domains->size() != b.domains->size())
    return false;
  for (std::size_t i = 0; i < a.domains->size(); ++i) {
    const auto& x = (*a.domains)[i];
    const auto& y = (*b.domains)[i];
    if (nlohmann::json(x.spec) != nlohmann::json(y.spec) || x.labels != y.labels || !bit_equal(x.images, y.images))
      return false;
  }
  return true;
}

}  // namespace itta
