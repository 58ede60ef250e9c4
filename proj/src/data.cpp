#include "kronfisher/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>

namespace kronfisher {

namespace {

using Rng64 = std::mt19937_64;

// Coverage of a pixel whose centre is `dist` away from the stroke centre line.
double stroke_coverage(double dist) {
  constexpr double kHalfWidth = 0.5;
  return std::clamp(1.0 - (dist - kHalfWidth), 0.0, 1.0);
}

void render_bezier(Eigen::RowVectorXd& image, Index side, Rng64& rng) {
  std::uniform_real_distribution<double> pos(0.15 * side, 0.85 * side);
  double px[4], py[4];
  for (int k = 0; k < 4; ++k) {
    px[k] = pos(rng);
    py[k] = pos(rng);
  }
  const int samples = static_cast<int>(8 * side);
  for (int s = 0; s <= samples; ++s) {
    const double t = static_cast<double>(s) / samples;
    const double u = 1.0 - t;
    const double b0 = u * u * u, b1 = 3 * u * u * t, b2 = 3 * u * t * t, b3 = t * t * t;
    const double x = b0 * px[0] + b1 * px[1] + b2 * px[2] + b3 * px[3];
    const double y = b0 * py[0] + b1 * py[1] + b2 * py[2] + b3 * py[3];
    const Index c0 = std::max<Index>(0, static_cast<Index>(std::floor(x - 2)));
    const Index c1 = std::min<Index>(side - 1, static_cast<Index>(std::ceil(x + 2)));
    const Index r0 = std::max<Index>(0, static_cast<Index>(std::floor(y - 2)));
    const Index r1 = std::min<Index>(side - 1, static_cast<Index>(std::ceil(y + 2)));
    for (Index r = r0; r <= r1; ++r) {
      for (Index c = c0; c <= c1; ++c) {
        const double dx = (c + 0.5) - x;
        const double dy = (r + 0.5) - y;
        double& pixel = image(r * side + c);
        pixel = std::max(pixel, stroke_coverage(std::sqrt(dx * dx + dy * dy)));
      }
    }
  }
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {char((v >> 24) & 0xff), char((v >> 16) & 0xff), char((v >> 8) & 0xff),
                         char(v & 0xff)};
  os.write(bytes, 4);
}

}  // namespace

Matrix gen_synthetic_curves(Index n, std::uint64_t seed, Index side) {
  if (n < 0 || side < 2) throw std::invalid_argument("gen_synthetic_curves: bad size");
  Matrix out = Matrix::Zero(n, side * side);
  Rng64 rng(seed);
  Eigen::RowVectorXd image(side * side);
  for (Index i = 0; i < n; ++i) {
    image.setZero();
    render_bezier(image, side, rng);
    out.row(i) = image;
  }
  return out;
}

Matrix gen_gaussian_blobs(Index n, std::uint64_t seed, Index side) {
  if (n < 0 || side < 2) throw std::invalid_argument("gen_gaussian_blobs: bad size");
  Matrix out = Matrix::Zero(n, side * side);
  Rng64 rng(seed);
  std::uniform_int_distribution<int> count(1, 3);
  std::uniform_real_distribution<double> centre(0.2 * side, 0.8 * side);
  std::uniform_real_distribution<double> width(side / 10.0, side / 4.0);
  std::uniform_real_distribution<double> amp(0.3, 1.0);
  for (Index i = 0; i < n; ++i) {
    const int blobs = count(rng);
    for (int b = 0; b < blobs; ++b) {
      const double cx = centre(rng), cy = centre(rng), w = width(rng), a = amp(rng);
      for (Index r = 0; r < side; ++r) {
        for (Index c = 0; c < side; ++c) {
          const double dx = (c + 0.5) - cx, dy = (r + 0.5) - cy;
          out(i, r * side + c) += a * std::exp(-(dx * dx + dy * dy) / (2 * w * w));
        }
      }
    }
  }
  return out.cwiseMin(1.0);
}

IdxFile parse_idx(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw IdxFormatError("IDX: truncated header");
  const std::uint32_t magic = read_be32(bytes, 0);
  if ((magic & 0xffff0000u) != 0 || ((magic >> 8) & 0xffu) != 0x08u) {
    std::ostringstream os;
    os << "IDX: bad magic 0x" << std::hex << magic << " (only unsigned-byte data is supported)";
    throw IdxFormatError(os.str());
  }
  const std::size_t ndims = magic & 0xffu;
  if (ndims == 0) throw IdxFormatError("IDX: zero dimensions");
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) throw IdxFormatError("IDX: truncated dimension list");

  IdxFile file;
  std::uint64_t total = 1;
  for (std::size_t k = 0; k < ndims; ++k) {
    const std::uint32_t dim = read_be32(bytes, 4 + 4 * k);
    file.dims.push_back(dim);
    if (dim != 0 && total > std::numeric_limits<std::uint32_t>::max() / dim) {
      throw IdxFormatError("IDX: dimension product overflows");
    }
    total *= dim;
  }
  if (bytes.size() - header < total) {
    std::ostringstream os;
    os << "IDX: truncated payload (" << bytes.size() - header << " of " << total << " bytes)";
    throw IdxFormatError(os.str());
  }
  file.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                   bytes.begin() + static_cast<std::ptrdiff_t>(header + total));
  return file;
}

IdxFile read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxFormatError("IDX: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

void write_idx(const std::string& path, const IdxFile& file) {
  if (file.dims.empty() || file.dims.size() > 255) throw IdxFormatError("IDX: bad dimension count");
  std::uint64_t total = 1;
  for (auto d : file.dims) total *= d;
  if (total != file.data.size()) throw IdxFormatError("IDX: payload size does not match dims");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxFormatError("IDX: cannot write '" + path + "'");
  write_be32(out, 0x00000800u | static_cast<std::uint32_t>(file.dims.size()));
  for (auto d : file.dims) write_be32(out, d);
  out.write(reinterpret_cast<const char*>(file.data.data()),
            static_cast<std::streamsize>(file.data.size()));
}

Matrix load_idx(const std::string& path) {
  const IdxFile file = read_idx(path);
  if (file.dims.size() != 3) throw IdxFormatError("IDX: expected an image file (magic 0x803)");
  const Index n = file.dims[0];
  const Index pixels = static_cast<Index>(file.dims[1]) * file.dims[2];
  Matrix out(n, pixels);
  for (Index i = 0; i < n; ++i)
    for (Index p = 0; p < pixels; ++p) out(i, p) = file.data[i * pixels + p] / 255.0;
  return out;
}

std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
  IdxFile file = read_idx(path);
  if (file.dims.size() != 1) throw IdxFormatError("IDX: expected a label file (magic 0x801)");
  return std::move(file.data);
}

void save_idx_images(const std::string& path, const Matrix& images, Index rows, Index cols) {
  if (images.cols() != rows * cols) throw DimensionError("save_idx_images: pixel count mismatch");
  IdxFile file;
  file.dims = {static_cast<std::uint32_t>(images.rows()), static_cast<std::uint32_t>(rows),
               static_cast<std::uint32_t>(cols)};
  file.data.resize(images.size());
  for (Index i = 0; i < images.rows(); ++i) {
    for (Index p = 0; p < images.cols(); ++p) {
      const double x = std::clamp(images(i, p), 0.0, 1.0);
      file.data[i * images.cols() + p] = static_cast<std::uint8_t>(std::lround(x * 255.0));
    }
  }
  write_idx(path, file);
}

}  // namespace kronfisher
