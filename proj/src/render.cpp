#include "bevis/render.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <stdexcept>
#include <string>

#include "bevis/binary_io.hpp"

namespace bevis {

std::vector<unsigned char> encode_ppm(const Image& image) {
  if (image.rgb.size() != image.width * image.height * 3) {
    throw std::invalid_argument("encode_ppm: pixel buffer size mismatch");
  }
  const std::string header =
      "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

Image decode_ppm(std::span<const unsigned char> bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    const std::size_t begin = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    if (begin == pos) throw FormatError("truncated PPM header", begin);
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(begin),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  if (token() != "P6") throw FormatError("bad magic", 0);
  Image img;
  img.width = std::stoul(token());
  img.height = std::stoul(token());
  if (token() != "255") throw FormatError("unsupported PPM max value", pos);
  ++pos;
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() - std::min(pos, bytes.size()) != n) throw FormatError("PPM payload size mismatch", pos);
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_file_bytes(path, encode_ppm(image));
}

namespace {

Image blank(const BirdsEyeView& view) {
  return {view.width, view.height, std::vector<std::uint8_t>(view.cells() * 3, 0)};
}

template <class Fn>
void paint(Image& img, const BirdsEyeView& view, Fn color) {
  for (std::size_t r = 0; r < view.height; ++r)
    for (std::size_t c = 0; c < view.width; ++c) {
      const std::size_t cell = r * view.width + c;
      if (!view.valid[cell]) continue;
      const std::array<std::uint8_t, 3> rgb = color(cell);
      std::copy(rgb.begin(), rgb.end(), &img.rgb[((view.height - 1 - r) * view.width + c) * 3]);
    }
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::array<std::uint8_t, 3> palette_color(int id) {
  if (id < 0) return {0, 0, 0};
  // Golden-angle hue walk, fixed saturation and value.
  const double h = std::fmod(static_cast<double>(id) * 0.618033988749895, 1.0) * 6.0;
  const double s = 0.75, v = 0.95;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  return {to_byte(table[sector][0]), to_byte(table[sector][1]), to_byte(table[sector][2])};
}

Image render_bev_colors(const BirdsEyeView& view) {
  Image img = blank(view);
  paint(img, view, [&](std::size_t cell) {
    const double* ch = &view.channels[cell * kBevChannels];
    return std::array<std::uint8_t, 3>{to_byte(ch[0]), to_byte(ch[1]), to_byte(ch[2])};
  });
  return img;
}

Image render_labels(const BirdsEyeView& view, std::span<const int> cell_labels) {
  if (cell_labels.size() != view.cells()) throw std::invalid_argument("render_labels: size mismatch");
  Image img = blank(view);
  paint(img, view, [&](std::size_t cell) { return palette_color(cell_labels[cell]); });
  return img;
}

Image render_pca(const BirdsEyeView& view, std::span<const double> cell_features,
                 std::size_t dim) {
  if (dim == 0 || cell_features.size() != view.cells() * dim) {
    throw std::invalid_argument("render_pca: feature map does not match the view");
  }
  std::vector<std::size_t> cells;
  for (std::size_t c = 0; c < view.cells(); ++c)
    if (view.valid[c]) cells.push_back(c);
  Image img = blank(view);
  if (cells.empty()) return img;

  Eigen::MatrixXd x(static_cast<Eigen::Index>(cells.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (std::size_t t = 0; t < dim; ++t)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = cell_features[cells[i] * dim + t];
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const auto d = static_cast<Eigen::Index>(dim);
  Eigen::MatrixXd proj = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cells.size()), 3);
  for (Eigen::Index k = 0; k < std::min<Eigen::Index>(3, d); ++k) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    proj.col(k) = x * v;
  }
  std::array<double, 3> lo{}, range{};
  for (Eigen::Index k = 0; k < 3; ++k) {
    lo[static_cast<std::size_t>(k)] = proj.col(k).minCoeff();
    range[static_cast<std::size_t>(k)] = proj.col(k).maxCoeff() - proj.col(k).minCoeff();
  }
  const double tiny = 1e-12 * std::max(1.0, *std::max_element(range.begin(), range.end()));
  std::vector<std::array<std::uint8_t, 3>> colors(view.cells());
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      const double v = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
      colors[cells[i]][k] = range[k] > tiny ? to_byte((v - lo[k]) / range[k]) : 128;
    }
  paint(img, view, [&](std::size_t cell) { return colors[cell]; });
  return img;
}

}  // namespace bevis
