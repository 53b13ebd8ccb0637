#include "sparling/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <tuple>

#include "sparling/binio.hpp"

namespace sparling {

namespace {

GlyphBitmap parse_glyph(const char* rows) {
  GlyphBitmap g{};
  for (int r = 0; r < kGlyphSize; ++r) {
    for (int c = 0; c < kGlyphSize; ++c) g[r][c] = rows[r * kGlyphSize + c] == '#' ? 1 : 0;
  }
  return g;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Uniform draws built directly from generator bits so streams do not depend
// on the standard library's distribution implementations.
class SampleRng {
 public:
  SampleRng(std::int64_t seed, std::int64_t index)
      : gen_(splitmix64(splitmix64(static_cast<std::uint64_t>(seed)) ^ static_cast<std::uint64_t>(index))) {}

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(uniform() * (hi - lo + 1));
  }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 gen_;
};

constexpr int kHalfGlyph = kGlyphSize / 2;

int max_footprint_diameter(const FootprintTable& table) {
  int d = 0;
  for (const Footprint& f : table) d = std::max({d, f.height(), f.width()});
  return d;
}

}  // namespace

const std::array<GlyphBitmap, kMaxGlyphs>& glyph_bitmaps() {
  static const std::array<GlyphBitmap, kMaxGlyphs> glyphs = {
      parse_glyph("#####"
                  "#...#"
                  "#...#"
                  "#...#"
                  "#####"),
      parse_glyph(".#..."
                  "##..."
                  ".#..."
                  ".#..."
                  "###.."),
      parse_glyph("#...#"
                  ".#.#."
                  "..#.."
                  ".#.#."
                  "#...#"),
      parse_glyph("#####"
                  "...#."
                  "..#.."
                  ".#..."
                  "#####"),
      parse_glyph("..#.."
                  "..#.."
                  "#####"
                  "..#.."
                  "..#.."),
      parse_glyph("..#.."
                  ".#.#."
                  ".#.#."
                  "#...#"
                  "#####"),
      parse_glyph("#...#"
                  "#...#"
                  "#####"
                  "#...#"
                  "#...#"),
      parse_glyph("#...."
                  "#...."
                  "#...."
                  "#...."
                  "#####"),
      parse_glyph("#.#.#"
                  "....."
                  "#.#.#"
                  "....."
                  "#.#.#"),
      parse_glyph("#####"
                  "....#"
                  "...#."
                  "..#.."
                  "..#.."),
  };
  return glyphs;
}

FootprintTable DomainSpec::footprints() const {
  FootprintTable table;
  for (int k = 0; k < glyph_count; ++k) {
    const GlyphBitmap& g = glyph_bitmaps()[static_cast<std::size_t>(k)];
    Footprint f{kGlyphSize, -1, kGlyphSize, -1};
    for (int r = 0; r < kGlyphSize; ++r) {
      for (int c = 0; c < kGlyphSize; ++c) {
        if (!g[r][c]) continue;
        f.min_row = std::min(f.min_row, r);
        f.max_row = std::max(f.max_row, r);
        f.min_col = std::min(f.min_col, c);
        f.max_col = std::max(f.max_col, c);
      }
    }
    f.min_row -= kHalfGlyph;
    f.max_row -= kHalfGlyph;
    f.min_col -= kHalfGlyph;
    f.max_col -= kHalfGlyph;
    table.push_back(f);
  }
  return table;
}

void DomainSpec::validate() const {
  if (glyph_count < 1 || glyph_count > kMaxGlyphs) {
    throw SpecError("glyph_count must lie in [1," + std::to_string(kMaxGlyphs) + "]");
  }
  if (min_glyphs < 1 || min_glyphs > max_glyphs || max_glyphs > glyph_count) {
    throw SpecError("need 1 <= min_glyphs <= max_glyphs <= glyph_count (glyphs are unique per image)");
  }
  if (!(radius_min > 0.0) || radius_max < radius_min) throw SpecError("need 0 < radius_min <= radius_max");
  if (center_jitter < 0.0 || angle_jitter < 0.0 || angle_jitter >= 1.0) {
    throw SpecError("center_jitter must be >= 0 and angle_jitter in [0,1)");
  }
  if (pre_noise < 0.0 || pre_noise >= 0.5 || post_noise < 0.0 || post_noise >= 0.5) {
    throw SpecError("noise rates must lie in [0,0.5)");
  }
  const double center = (image_size - 1) / 2.0;
  const double reach = center_jitter + radius_max + kHalfGlyph + 0.5;
  if (center - reach < 0.0 || center + reach > image_size - 1) {
    throw SpecError("glyphs at radius " + std::to_string(radius_max) + " do not fit inside a " +
                    std::to_string(image_size) + "x" + std::to_string(image_size) + " image");
  }
  if (max_glyphs >= 2) {
    const double chord = 2.0 * radius_max * std::sin(std::numbers::pi / max_glyphs);
    if (chord < max_footprint_diameter(footprints()) + 1.0) {
      throw SpecError("radius " + std::to_string(radius_max) + " too small to separate " +
                      std::to_string(max_glyphs) + " glyphs");
    }
  }
}

nlohmann::ordered_json DomainSpec::to_json() const {
  nlohmann::ordered_json j;
  j["image_size"] = image_size;
  j["glyph_count"] = glyph_count;
  j["min_glyphs"] = min_glyphs;
  j["max_glyphs"] = max_glyphs;
  j["radius_min"] = radius_min;
  j["radius_max"] = radius_max;
  j["center_jitter"] = center_jitter;
  j["angle_jitter"] = angle_jitter;
  j["pre_noise"] = pre_noise;
  j["post_noise"] = post_noise;
  return j;
}

DomainSpec DomainSpec::from_json(const nlohmann::json& j) {
  DomainSpec s;
  s.image_size = j.value("image_size", s.image_size);
  s.glyph_count = j.value("glyph_count", s.glyph_count);
  s.min_glyphs = j.value("min_glyphs", s.min_glyphs);
  s.max_glyphs = j.value("max_glyphs", s.max_glyphs);
  s.radius_min = j.value("radius_min", s.radius_min);
  s.radius_max = j.value("radius_max", s.radius_max);
  s.center_jitter = j.value("center_jitter", s.center_jitter);
  s.angle_jitter = j.value("angle_jitter", s.angle_jitter);
  s.pre_noise = j.value("pre_noise", s.pre_noise);
  s.post_noise = j.value("post_noise", s.post_noise);
  return s;
}

std::vector<int> counterclockwise_label(const std::vector<int>& ids, const std::vector<double>& angles) {
  if (ids.size() != angles.size()) throw std::invalid_argument("counterclockwise_label: size mismatch");
  if (ids.empty()) return {};
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto norm = [](double a) {
    a = std::fmod(a, 2.0 * std::numbers::pi);
    return a < 0 ? a + 2.0 * std::numbers::pi : a;
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norm(angles[a]) < norm(angles[b]); });
  std::vector<int> seq;
  for (std::size_t i : order) seq.push_back(ids[i]);
  std::rotate(seq.begin(), std::min_element(seq.begin(), seq.end()), seq.end());
  return seq;
}

Sample generate_one(const DomainSpec& spec, std::int64_t seed, std::int64_t index) {
  SampleRng rng(seed, index);
  const int S = spec.image_size;
  const int n = rng.integer(spec.min_glyphs, spec.max_glyphs);

  std::vector<int> pool(static_cast<std::size_t>(spec.glyph_count));
  for (int k = 0; k < spec.glyph_count; ++k) pool[k] = k;
  for (int i = spec.glyph_count - 1; i > 0; --i) std::swap(pool[i], pool[rng.integer(0, i)]);
  const std::vector<int> ids(pool.begin(), pool.begin() + n);

  const FootprintTable fp = spec.footprints();
  const int separation = max_footprint_diameter(fp);
  const double half_spacing = std::numbers::pi / n;

  std::vector<double> angles(n);
  std::vector<std::pair<int, int>> centers(n);
  bool placed = false;
  for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
    const double cy = (S - 1) / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter);
    const double cx = (S - 1) / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter);
    const double base = rng.uniform(0.0, 2.0 * std::numbers::pi);
    placed = true;
    for (int j = 0; j < n; ++j) {
      angles[j] = base + 2.0 * half_spacing * j + rng.uniform(-spec.angle_jitter, spec.angle_jitter) * half_spacing;
      const double r = rng.uniform(spec.radius_min, spec.radius_max);
      const int row = static_cast<int>(std::lround(cy - r * std::sin(angles[j])));
      const int col = static_cast<int>(std::lround(cx + r * std::cos(angles[j])));
      centers[j] = {row, col};
      if (row < kHalfGlyph || row > S - 1 - kHalfGlyph || col < kHalfGlyph || col > S - 1 - kHalfGlyph) placed = false;
    }
    for (int a = 0; a < n && placed; ++a) {
      for (int b = 0; b < a && placed; ++b) {
        const int d = std::max(std::abs(centers[a].first - centers[b].first), std::abs(centers[a].second - centers[b].second));
        if (d < separation) placed = false;
      }
    }
  }
  if (!placed) throw SpecError("could not place glyphs after 10000 attempts");

  Tensor image(Shape{S, S, 1});
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = rng.bernoulli(spec.pre_noise) ? 1.0f : 0.0f;
  for (int j = 0; j < n; ++j) {
    const GlyphBitmap& g = glyph_bitmaps()[static_cast<std::size_t>(ids[j])];
    for (int r = 0; r < kGlyphSize; ++r) {
      for (int c = 0; c < kGlyphSize; ++c) {
        const int y = centers[j].first + r - kHalfGlyph;
        const int x = centers[j].second + c - kHalfGlyph;
        image[static_cast<std::size_t>(y) * S + x] = g[r][c] ? 1.0f : 0.0f;
      }
    }
  }
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (rng.bernoulli(spec.post_noise)) image[i] = 1.0f - image[i];
  }

  Sample s;
  s.image = std::move(image);
  s.label = counterclockwise_label(ids, angles);
  s.truth.height = S;
  s.truth.width = S;
  s.truth.channels = spec.glyph_count;
  for (int j = 0; j < n; ++j) s.truth.entries.push_back(Motif{centers[j].first, centers[j].second, ids[j], 1.0f});
  std::sort(s.truth.entries.begin(), s.truth.entries.end(), [](const Motif& a, const Motif& b) {
    return std::tie(a.row, a.col, a.channel) < std::tie(b.row, b.col, b.channel);
  });
  return s;
}

std::vector<Sample> generate(const DomainSpec& spec, std::int64_t seed, std::int64_t count, std::int64_t start) {
  if (count < 1) throw std::invalid_argument("generate: count must be >= 1");
  spec.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(generate_one(spec, seed, start + i));
  return out;
}

double min_density(const DomainSpec& spec) {
  const double mean_glyphs = (spec.min_glyphs + spec.max_glyphs) / 2.0;
  return mean_glyphs / (static_cast<double>(spec.image_size) * spec.image_size * spec.channels());
}

namespace {

std::string header_json(const DatasetHeader& h) {
  nlohmann::ordered_json j;
  j["spec"] = h.spec.to_json();
  j["seed"] = h.seed;
  j["start"] = h.start;
  j["count"] = h.count;
  return j.dump();
}

}  // namespace

void dataset_write(std::ostream& os, const DatasetHeader& header, const std::vector<Sample>& samples) {
  if (static_cast<std::int64_t>(samples.size()) != header.count) {
    throw std::invalid_argument("dataset_write: header count does not match sample count");
  }
  const int S = header.spec.image_size;
  os.write("SPDC", 4);
  binio::put_u32(os, kDatasetVersion);
  const std::string js = header_json(header);
  binio::put_string(os, js);
  binio::put_u64(os, binio::fnv1a(js));
  for (const Sample& s : samples) {
    if (s.image.size() != static_cast<std::size_t>(S) * S) throw ShapeError("dataset_write: image size mismatch");
    binio::put_u32(os, static_cast<std::uint32_t>(s.label.size()));
    for (int c : s.label) binio::put_u8(os, static_cast<std::uint8_t>(c));
    for (float v : s.image.data()) binio::put_f32(os, v);
    binio::put_u32(os, static_cast<std::uint32_t>(s.truth.entries.size()));
    for (const Motif& m : s.truth.entries) {
      binio::put_u16(os, static_cast<std::uint16_t>(m.row));
      binio::put_u16(os, static_cast<std::uint16_t>(m.col));
      binio::put_u8(os, static_cast<std::uint8_t>(m.channel));
      binio::put_f32(os, m.value);
    }
  }
  if (!os) throw binio::FormatError("dataset_write: stream error");
}

void dataset_write(const std::string& path, const DatasetHeader& header, const std::vector<Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw binio::FormatError("cannot open " + path + " for writing");
  dataset_write(os, header, samples);
}

Dataset dataset_read(std::istream& is) {
  binio::expect_magic(is, "SPDC");
  const std::uint32_t version = binio::get_u32(is);
  if (version != kDatasetVersion) {
    throw binio::FormatError("unsupported dataset format version " + std::to_string(version) + " (reader supports " +
                             std::to_string(kDatasetVersion) + ")");
  }
  const std::string js = binio::get_string(is);
  const std::uint64_t hash = binio::get_u64(is);
  if (hash != binio::fnv1a(js)) throw binio::FormatError("dataset header hash does not match its spec blob");

  Dataset ds;
  try {
    const auto j = nlohmann::json::parse(js);
    ds.header.spec = DomainSpec::from_json(j.at("spec"));
    ds.header.seed = j.at("seed").get<std::int64_t>();
    ds.header.start = j.at("start").get<std::int64_t>();
    ds.header.count = j.at("count").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw binio::FormatError(std::string("malformed dataset header: ") + e.what());
  }
  const DomainSpec& spec = ds.header.spec;
  const int S = spec.image_size;
  for (std::int64_t i = 0; i < ds.header.count; ++i) {
    Sample s;
    const std::uint32_t len = binio::get_u32(is);
    if (len > static_cast<std::uint32_t>(spec.glyph_count)) throw binio::FormatError("label longer than alphabet");
    for (std::uint32_t k = 0; k < len; ++k) s.label.push_back(binio::get_u8(is));
    std::vector<float> px(static_cast<std::size_t>(S) * S);
    for (float& v : px) v = binio::get_f32(is);
    s.image = Tensor(Shape{S, S, 1}, std::move(px));
    s.truth.height = S;
    s.truth.width = S;
    s.truth.channels = spec.channels();
    const std::uint32_t entries = binio::get_u32(is);
    if (entries > static_cast<std::uint32_t>(S) * S * spec.channels()) throw binio::FormatError("too many truth entries");
    for (std::uint32_t k = 0; k < entries; ++k) {
      Motif m;
      m.row = binio::get_u16(is);
      m.col = binio::get_u16(is);
      m.channel = binio::get_u8(is);
      m.value = binio::get_f32(is);
      s.truth.entries.push_back(m);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset dataset_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw binio::FormatError("cannot open " + path);
  return dataset_read(is);
}

}  // namespace sparling
