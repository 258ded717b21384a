#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dx {

enum class Level { k5x, k10x, k20x };

std::string_view to_string(Level level);
Level parse_level(std::string_view text);  // throws NotFoundError
std::optional<Level> try_parse_level(std::string_view text);
inline constexpr Level kAllLevels[] = {Level::k5x, Level::k10x, Level::k20x};

struct GridCoord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

struct PatchRecord {
  std::string slide_id;
  std::int32_t x = 0;
  std::int32_t y = 0;
  Level level = Level::k10x;
  std::vector<float> embedding;
};

// Stable textual reference for a patch, used as the image id on the wire.
std::string patch_ref(std::string_view slide_id, Level level, GridCoord c);

struct LevelInfo {
  std::size_t count = 0;
  double pitch_px = 0.0;
  std::string file;
};

struct SlideManifest {
  std::string slide_id;
  std::map<Level, LevelInfo> levels;
  std::size_t dimension = 0;
  std::string provenance;
};

// Row-major N x d matrix of embeddings in (y, x) order, plus their coordinates.
struct EmbeddingView {
  std::span<const float> data;
  std::span<const GridCoord> coords;
  std::size_t rows = 0;
  std::size_t dim = 0;

  std::span<const float> row(std::size_t i) const { return data.subspan(i * dim, dim); }
};

// One (slide, level) block. Rows are kept in file order for faithful rewriting;
// `sorted` holds the same rows in ascending (y, x) order for retrieval.
struct EmbeddingBlock {
  std::size_t dim = 0;
  std::vector<GridCoord> coords;
  std::vector<float> values;
  std::vector<GridCoord> sorted_coords;
  std::vector<float> sorted_values;

  std::size_t rows() const { return coords.size(); }
  EmbeddingView view() const {
    return {sorted_values, sorted_coords, sorted_coords.size(), dim};
  }
};

// Binary block codec. Header is 32 bytes: magic[8], u32 version, u32 dim,
// u64 rows, u32 flags, u32 reserved. flags bit 0: an int32 (x, y) section follows
// the header. Then rows * dim little-endian float32 values.
inline constexpr std::uint32_t kBlockVersion = 1;
inline constexpr std::size_t kBlockHeaderSize = 32;

struct RawBlock {
  std::size_t dim = 0;
  std::vector<GridCoord> coords;  // empty when the block carries none
  std::vector<float> values;
};

RawBlock read_block(const std::filesystem::path& path);
void write_block(const std::filesystem::path& path, const RawBlock& block);

class Corpus {
 public:
  std::size_t dimension() const { return dim_; }
  const std::vector<SlideManifest>& slides() const { return slides_; }
  const SlideManifest& manifest(std::string_view slide_id) const;
  bool has(std::string_view slide_id, Level level) const;

  // All patches of (slide, level) in ascending (y, x) order.
  std::vector<PatchRecord> fetch_patches(std::string_view slide_id, Level level) const;
  // Zero-copy access to the same data for the kernels.
  EmbeddingView view(std::string_view slide_id, Level level) const;
  const EmbeddingBlock& block(std::string_view slide_id, Level level) const;
  std::size_t total_records() const;

  void write(const std::filesystem::path& dir) const;

 private:
  friend Corpus ingest_corpus(const std::filesystem::path&);
  friend class CorpusBuilder;
  std::size_t dim_ = 0;
  std::string note_;
  std::vector<SlideManifest> slides_;
  std::map<std::pair<std::string, Level>, EmbeddingBlock, std::less<>> blocks_;
};

// Reads manifest.json plus every referenced block and validates the corpus.
Corpus ingest_corpus(const std::filesystem::path& dir);

// In-memory construction, used by the synthetic generator and tests.
class CorpusBuilder {
 public:
  explicit CorpusBuilder(std::size_t dim, std::string note = {});
  CorpusBuilder& add(std::string_view slide_id, Level level, GridCoord coord,
                     std::span<const float> embedding, double pitch_px = 256.0);
  CorpusBuilder& set_provenance(std::string_view slide_id, std::string provenance);
  Corpus build() &&;

 private:
  std::size_t dim_;
  std::string note_;
  std::map<std::string, std::string> provenance_;
  std::map<std::pair<std::string, Level>, RawBlock> raw_;
  std::map<std::pair<std::string, Level>, double> pitch_;
};

}  // namespace dx
