#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "kronfisher/linalg.hpp"

namespace kronfisher {

/// Random cubic Bezier strokes rendered with antialiasing onto side x side
/// grids, one image per row, pixels row-major in [0, 1]. Deterministic per seed.
Matrix gen_synthetic_curves(Index n, std::uint64_t seed, Index side = 28);

/// Sums of a few Gaussian blobs on side x side grids, clamped to [0, 1].
/// Stand-in for face images that cannot be redistributed.
Matrix gen_gaussian_blobs(Index n, std::uint64_t seed, Index side = 25);

class IdxFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Unsigned-byte IDX file: big-endian magic 0x000008NN (NN = number of
/// dimensions), then NN big-endian uint32 sizes, then the payload.
struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

IdxFile read_idx(const std::string& path);
IdxFile parse_idx(const std::vector<std::uint8_t>& bytes);
void write_idx(const std::string& path, const IdxFile& file);

/// Images (magic 0x803) as an n x (rows*cols) matrix scaled by 1/255.
Matrix load_idx(const std::string& path);
/// Labels (magic 0x801).
std::vector<std::uint8_t> load_idx_labels(const std::string& path);

/// Quantises an n x (side*side) matrix in [0,1] to an IDX image file.
void save_idx_images(const std::string& path, const Matrix& images, Index rows, Index cols);

}  // namespace kronfisher
