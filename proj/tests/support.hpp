#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "mrcl/mrcl.hpp"

namespace mrcl::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "mrcl-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// 8x8x3 images, P=4 (N=4), D=8, one encoder and one decoder block.
inline vit::ViTConfig tiny_model() {
  vit::ViTConfig c;
  c.image_height = 8;
  c.image_width = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  c.decoder_dim = 4;
  c.decoder_depth = 1;
  c.decoder_heads = 2;
  c.proj_hidden_dim = 8;
  c.proj_dim = 4;
  return c;
}

inline Image random_image(int h, int w, int c, Rng& rng) {
  Image img(h, w, c);
  for (auto& v : img.data) v = static_cast<float>(uniform01(rng));
  return img;
}

template <typename T>
Mat<T> random_mat(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(uniform(rng, lo, hi));
  return m;
}

/// Overwrites every parameter (including norms and tokens) with uniform noise in [-scale, scale],
/// with LayerNorm weights centred on 1.
template <typename T>
void randomize(vit::ParamStore<T>& store, Rng& rng, double scale) {
  for (auto& p : store) {
    const bool norm_weight = p.name.find("norm") != std::string::npos && p.name.ends_with(".weight");
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      p.value.data()[i] = static_cast<T>((norm_weight ? 1.0 : 0.0) + uniform(rng, -scale, scale));
    }
  }
}

/// Class k is a flat colour with a bright k-th quadrant, plus noise.
inline data::Dataset synthetic_dataset(std::size_t n, int side, int classes, std::uint64_t seed) {
  data::Dataset ds;
  Rng rng = make_rng({seed, 0x5eed});
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    Image img(side, side, 3);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const int quadrant = (y * 2 / side) * 2 + (x * 2 / side);
        for (int c = 0; c < 3; ++c) {
          double v = 0.2 + 0.15 * ((label + c) % 3);
          if (quadrant == label % 4) v += 0.45;
          v += uniform(rng, -0.08, 0.08);
          img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    ds.add({img, label});
  }
  return ds;
}

/// CIFAR-10 binary records: label byte + 1024 R + 1024 G + 1024 B.
inline void write_cifar_batch(const fs::path& path, const std::vector<std::uint8_t>& labels, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  Rng rng = make_rng({seed, 0xc1fa});
  for (auto label : labels) {
    out.put(static_cast<char>(label));
    for (int k = 0; k < 3 * 1024; ++k) out.put(static_cast<char>(rng() & 0xff));
  }
}

/// Central-difference gradient of `f` w.r.t. every scalar of `p`.
template <typename T>
Mat<T> numeric_grad(Mat<T>& p, const std::function<double()>& f, double h) {
  Mat<T> g(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const T saved = p.data()[i];
    p.data()[i] = static_cast<T>(saved + h);
    const double up = f();
    p.data()[i] = static_cast<T>(saved - h);
    const double down = f();
    p.data()[i] = saved;
    g.data()[i] = static_cast<T>((up - down) / (2 * h));
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
template <typename T>
double rel_error(const Mat<T>& a, const Mat<T>& b) {
  const double scale = std::max(static_cast<double>(a.norm()), static_cast<double>(b.norm()));
  if (scale == 0.0) return 0.0;
  return static_cast<double>((a - b).norm()) / scale;
}

}  // namespace mrcl::testing
