#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "f3r/geometry.hpp"
#include "f3r/model.hpp"

namespace f3r {

/// One inference result: the source views it was computed from, their images,
/// the index slots used, and both heads.
struct PredictionRecord {
  std::uint32_t sample = 0;           // position in the source dataset
  std::vector<std::uint32_t> views;   // source view indices, views[0] is the anchor
  IndexAssignment slots;
  ImageSet images;
  PredictionBundle bundle;
};

inline constexpr char kPredictionMagic[] = "F3RPRED1";
inline constexpr std::uint32_t kPredictionVersion = 1;

/// Little-endian: magic, u32 version, u32 count; per record u32 sample, N, H,
/// W, N u32 source views, N u32 slots, then per view the image (H*W*3 f32),
/// local points (H*W*3 f32), local confidence (H*W f32), local mask (H*W u8)
/// and the same three fields for the global head.
void write_predictions(std::span<const PredictionRecord> records, const std::string& path);
std::vector<PredictionRecord> read_predictions(const std::string& path);

struct ColoredCloud {
  std::vector<Vec3> points;
  std::vector<std::array<std::uint8_t, 3>> colors;
};

/// Binary little-endian PLY with float x y z and uchar red green blue.
void write_ply(const ColoredCloud& cloud, const std::string& path);
/// Reads files produced by write_ply. Throws FormatError on anything else.
ColoredCloud read_ply(const std::string& path);

}  // namespace f3r
