#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparling/footprint.hpp"
#include "sparling/sparsity.hpp"
#include "sparling/tensor.hpp"

namespace sparling {

/// Raised when a domain spec admits no valid sample.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

constexpr int kGlyphSize = 5;
constexpr int kMaxGlyphs = 10;

using GlyphBitmap = std::array<std::array<std::uint8_t, kGlyphSize>, kGlyphSize>;

/// The built-in 5×5 glyph designs; a spec with K glyphs uses the first K.
const std::array<GlyphBitmap, kMaxGlyphs>& glyph_bitmaps();

/// MicroDigitCircle: glyphs placed on a jittered circle over a speckled
/// background, read out counterclockwise starting from the smallest glyph.
struct DomainSpec {
  int image_size = 32;
  int glyph_count = 4;  ///< K, also the true motif channel count
  int min_glyphs = 2;
  int max_glyphs = 4;
  double radius_min = 8.0;
  double radius_max = 11.0;
  double center_jitter = 1.0;  ///< circle center offset from the image center, per axis
  double angle_jitter = 0.4;   ///< fraction of half the even angular spacing
  double pre_noise = 0.02;     ///< background speckle rate before placement
  double post_noise = 0.02;    ///< pixel flip rate after placement

  int channels() const { return glyph_count; }
  /// Throws SpecError when the spec cannot produce valid samples.
  void validate() const;
  FootprintTable footprints() const;

  nlohmann::ordered_json to_json() const;
  static DomainSpec from_json(const nlohmann::json& j);
  bool operator==(const DomainSpec&) const = default;
};

struct Sample {
  Tensor image;            ///< [S,S,1]
  std::vector<int> label;  ///< glyph ids, counterclockwise from the smallest
  MotifMap truth;          ///< one entry per glyph at its center, value 1

  bool operator==(const Sample&) const = default;
};

/// Glyph ids ordered by increasing angle (counterclockwise, y up), rotated
/// to start at the smallest id. Angles in radians.
std::vector<int> counterclockwise_label(const std::vector<int>& ids, const std::vector<double>& angles);

/// Sample `index` of the stream for `seed`; pure in (spec, seed, index).
Sample generate_one(const DomainSpec& spec, std::int64_t seed, std::int64_t index);

/// Samples start..start+count-1 of the stream for `seed`.
std::vector<Sample> generate(const DomainSpec& spec, std::int64_t seed, std::int64_t count, std::int64_t start = 0);

/// Expected fraction of nonzero entries in the true motif map:
/// E[glyphs] / (S·S·C).
double min_density(const DomainSpec& spec);

constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetHeader {
  DomainSpec spec;
  std::int64_t seed = 0;
  std::int64_t start = 0;
  std::int64_t count = 0;
};

/// "SPDC" | u32 version | u32 len + JSON {spec, seed, start, count} |
/// u64 FNV-1a of the JSON | per sample: u32 label length + label bytes,
/// S·S f32 pixels, u32 entry count + (u16 row, u16 col, u8 channel, f32 value).
void dataset_write(std::ostream& os, const DatasetHeader& header, const std::vector<Sample>& samples);
void dataset_write(const std::string& path, const DatasetHeader& header, const std::vector<Sample>& samples);

struct Dataset {
  DatasetHeader header;
  std::vector<Sample> samples;
};

Dataset dataset_read(std::istream& is);
Dataset dataset_read(const std::string& path);

}  // namespace sparling
