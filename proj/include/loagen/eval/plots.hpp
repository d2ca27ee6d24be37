#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <vector>

#include "loagen/core/errors.hpp"
#include "loagen/core/tensor.hpp"

namespace loagen::eval {

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(std::size_t w, std::size_t h, unsigned char fill = 255)
      : width(w), height(h), rgb(3 * w * h, fill) {}

  void set(std::size_t x, std::size_t y, unsigned char r, unsigned char g,
           unsigned char b) {
    if (x >= width || y >= height) return;
    std::size_t i = 3 * (y * width + x);
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = b;
  }
};

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IngestionError("write_ppm: cannot open " + path.string());
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
}

// dark-blue -> yellow heat map
inline void heat(double v, unsigned char& r, unsigned char& g,
                 unsigned char& b) {
  v = std::clamp(v, 0.0, 1.0);
  r = static_cast<unsigned char>(255.0 * std::pow(v, 0.8));
  g = static_cast<unsigned char>(255.0 * std::pow(v, 1.2));
  b = static_cast<unsigned char>(80.0 + 100.0 * (1.0 - v));
}

// mel (T,F) rendered with time horizontal, low frequencies at the bottom
inline Image render_mel(const Tensor& X) {
  const std::size_t T = X.rows(), F = X.cols();
  double lo = X[0], hi = X[0];
  for (std::size_t i = 0; i < X.numel(); ++i) {
    lo = std::min(lo, X[i]);
    hi = std::max(hi, X[i]);
  }
  double span = std::max(hi - lo, 1e-9);
  Image img(T, F);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) {
      unsigned char r, g, b;
      heat((X.at(t, f) - lo) / span, r, g, b);
      img.set(t, F - 1 - f, r, g, b);
    }
  return img;
}

inline Image hcat(const std::vector<Image>& panels, std::size_t gap = 2) {
  if (panels.empty()) throw InputError("hcat: no panels");
  std::size_t h = 0, w = 0;
  for (const auto& p : panels) {
    h = std::max(h, p.height);
    w += p.width;
  }
  w += gap * (panels.size() - 1);
  Image out(w, h, 30);
  std::size_t x0 = 0;
  for (const auto& p : panels) {
    for (std::size_t y = 0; y < p.height; ++y)
      for (std::size_t x = 0; x < p.width; ++x) {
        std::size_t i = 3 * (y * p.width + x);
        out.set(x0 + x, y, p.rgb[i], p.rgb[i + 1], p.rgb[i + 2]);
      }
    x0 += p.width + gap;
  }
  return out;
}

// grid of mel panels in one row (lambda sweeps, guidance sweeps)
inline void write_mel_grid(const std::filesystem::path& path,
                           const std::vector<Tensor>& mels) {
  std::vector<Image> panels;
  for (const auto& m : mels) panels.push_back(render_mel(m));
  write_ppm(path, hcat(panels));
}

// 2-component PCA projection of feature rows
inline Tensor project_2d(const Tensor& features) {
  const std::size_t N = features.rows(), D = features.cols();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < D; ++c)
      X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          features.at(r, c);
  Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinV);
  Eigen::MatrixXd P = X * svd.matrixV().leftCols(2);
  Tensor out({N, 2});
  for (std::size_t r = 0; r < N; ++r) {
    out.at(r, 0) = P(static_cast<Eigen::Index>(r), 0);
    out.at(r, 1) = P(static_cast<Eigen::Index>(r), 1);
  }
  return out;
}

// one dot per row, colored by label
inline void write_scatter(const std::filesystem::path& path,
                          const Tensor& points_2d,
                          const std::vector<std::size_t>& labels,
                          std::size_t size = 256) {
  if (points_2d.rows() != labels.size())
    throw InputError("write_scatter: label count mismatch");
  static const unsigned char palette[][3] = {
      {220, 60, 60}, {60, 170, 60}, {60, 90, 220},  {220, 170, 40},
      {160, 60, 200}, {40, 190, 190}, {230, 120, 40}, {120, 120, 120}};
  double xlo = points_2d.at(0, 0), xhi = xlo;
  double ylo = points_2d.at(0, 1), yhi = ylo;
  for (std::size_t r = 0; r < points_2d.rows(); ++r) {
    xlo = std::min(xlo, points_2d.at(r, 0));
    xhi = std::max(xhi, points_2d.at(r, 0));
    ylo = std::min(ylo, points_2d.at(r, 1));
    yhi = std::max(yhi, points_2d.at(r, 1));
  }
  double xs = std::max(xhi - xlo, 1e-9), ys = std::max(yhi - ylo, 1e-9);
  Image img(size, size, 250);
  for (std::size_t r = 0; r < points_2d.rows(); ++r) {
    const auto* c = palette[labels[r] % 8];
    std::size_t px = static_cast<std::size_t>(
        (points_2d.at(r, 0) - xlo) / xs * (size - 9)) + 4;
    std::size_t py = static_cast<std::size_t>(
        (points_2d.at(r, 1) - ylo) / ys * (size - 9)) + 4;
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx)
        if (dx * dx + dy * dy <= 4)
          img.set(px + static_cast<std::size_t>(dx + 2) - 2,
                  size - 1 - (py + static_cast<std::size_t>(dy + 2) - 2),
                  c[0], c[1], c[2]);
  }
  write_ppm(path, img);
}

}  // namespace loagen::eval
