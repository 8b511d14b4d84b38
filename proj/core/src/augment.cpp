#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "mrcl/data.hpp"
#include "mrcl/errors.hpp"

namespace mrcl::data {

namespace {

constexpr int kCropAttempts = 10;

bool in_unit(double p) { return p >= 0.0 && p <= 1.0; }

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

void clamp01(Image& img) {
  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

void adjust_brightness(Image& img, float factor) {
  for (float& v : img.data) v *= factor;
  clamp01(img);
}

void adjust_contrast(Image& img, float factor) {
  double mean = 0.0;
  const std::size_t pixels = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t p = 0; p < pixels; ++p) {
    const float* px = &img.data[p * img.channels];
    mean += img.channels == 3 ? luma(px[0], px[1], px[2]) : px[0];
  }
  const auto m = static_cast<float>(mean / static_cast<double>(pixels));
  for (float& v : img.data) v = (v - m) * factor + m;
  clamp01(img);
}

void adjust_saturation(Image& img, float factor) {
  const std::size_t pixels = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t p = 0; p < pixels; ++p) {
    float* px = &img.data[p * 3];
    const float g = luma(px[0], px[1], px[2]);
    for (int c = 0; c < 3; ++c) px[c] = std::clamp((px[c] - g) * factor + g, 0.0f, 1.0f);
  }
}

void adjust_hue(Image& img, float shift) {
  const std::size_t pixels = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t p = 0; p < pixels; ++p) {
    float* px = &img.data[p * 3];
    const float r = px[0], g = px[1], b = px[2];
    const float maxc = std::max({r, g, b});
    const float minc = std::min({r, g, b});
    const float delta = maxc - minc;
    if (delta <= 0.0f) continue;  // achromatic
    float h;
    if (maxc == r) {
      h = std::fmod((g - b) / delta, 6.0f);
    } else if (maxc == g) {
      h = (b - r) / delta + 2.0f;
    } else {
      h = (r - g) / delta + 4.0f;
    }
    h = h / 6.0f + shift;
    h -= std::floor(h);
    const float s = delta / maxc;
    const float v = maxc;
    const float h6 = h * 6.0f;
    const int sector = static_cast<int>(h6) % 6;
    const float f = h6 - std::floor(h6);
    const float pp = v * (1.0f - s);
    const float q = v * (1.0f - s * f);
    const float t = v * (1.0f - s * (1.0f - f));
    static constexpr std::array<std::array<int, 3>, 6> kSel{
        {{0, 3, 2}, {1, 0, 2}, {2, 0, 3}, {2, 1, 0}, {3, 2, 0}, {0, 2, 1}}};
    const std::array<float, 4> vals{v, q, pp, t};
    for (int c = 0; c < 3; ++c) px[c] = std::clamp(vals[kSel[sector][c]], 0.0f, 1.0f);
  }
}

void to_grayscale(Image& img) {
  const std::size_t pixels = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t p = 0; p < pixels; ++p) {
    float* px = &img.data[p * 3];
    const float g = luma(px[0], px[1], px[2]);
    px[0] = px[1] = px[2] = g;
  }
}

// Jitter factors follow the SimCLR parameterization: (0.8s, 0.8s, 0.8s, 0.2s), applied in random order.
void color_jitter(Image& img, double strength, Rng& rng) {
  const double s = strength;
  const auto factor = [&](double spread) {
    return static_cast<float>(uniform(rng, std::max(0.0, 1.0 - spread), 1.0 + spread));
  };
  const float brightness = factor(0.8 * s);
  const float contrast = factor(0.8 * s);
  const float saturation = factor(0.8 * s);
  const auto hue = static_cast<float>(uniform(rng, -0.2 * s, 0.2 * s));
  std::array<int, 4> order{0, 1, 2, 3};
  std::shuffle(order.begin(), order.end(), rng);
  for (int op : order) {
    switch (op) {
      case 0: adjust_brightness(img, brightness); break;
      case 1: adjust_contrast(img, contrast); break;
      case 2:
        if (img.channels == 3) adjust_saturation(img, saturation);
        break;
      case 3:
        if (img.channels == 3 && hue != 0.0f) adjust_hue(img, hue);
        break;
    }
  }
}

std::uint64_t epoch_key(const AugConfig& cfg, const SampleKey& key) {
  return cfg.seed_policy == SeedPolicy::kPerSample ? key.epoch : 0;
}

Image crop_and_flip(const Image& src, const AugConfig& cfg, Rng& rng) {
  const CropBox box = sample_crop(src.height, src.width, cfg, rng);
  Image out = resized_crop(src, box, cfg.output_size[0], cfg.output_size[1]);
  if (bernoulli(rng, cfg.hflip_prob)) out = hflip(out);
  return out;
}

Image augment_view(const Image& src, const AugConfig& cfg, Rng& rng) {
  Image out = crop_and_flip(src, cfg, rng);
  if (cfg.color_jitter_strength > 0.0 && bernoulli(rng, cfg.color_jitter_prob)) {
    color_jitter(out, cfg.color_jitter_strength, rng);
  }
  if (out.channels == 3 && bernoulli(rng, cfg.grayscale_prob)) to_grayscale(out);
  clamp01(out);
  return out;
}

}  // namespace

void AugConfig::validate(int patch_size) const {
  const auto [smin, smax] = crop_scale_range;
  if (!(smin > 0.0 && smin <= smax && smax <= 1.0)) {
    throw ConfigError("aug.crop_scale_range must satisfy 0 < min <= max <= 1");
  }
  if (!(crop_ratio_range[0] > 0.0 && crop_ratio_range[0] <= crop_ratio_range[1])) {
    throw ConfigError("aug.crop_ratio_range must satisfy 0 < min <= max");
  }
  if (output_size[0] <= 0 || output_size[1] <= 0) throw ConfigError("aug.output_size must be positive");
  if (patch_size > 0 && (output_size[0] % patch_size != 0 || output_size[1] % patch_size != 0)) {
    throw ConfigError("aug.output_size (" + std::to_string(output_size[0]) + "x" +
                      std::to_string(output_size[1]) + ") must be divisible by the patch size " +
                      std::to_string(patch_size));
  }
  if (!in_unit(hflip_prob)) throw ConfigError("aug.hflip_prob must be in [0,1]");
  if (!in_unit(color_jitter_prob)) throw ConfigError("aug.color_jitter_prob must be in [0,1]");
  if (!in_unit(grayscale_prob)) throw ConfigError("aug.grayscale_prob must be in [0,1]");
  if (!(color_jitter_strength >= 0.0)) throw ConfigError("aug.color_jitter_strength must be >= 0");
}

CropBox sample_crop(int height, int width, const AugConfig& cfg, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(cfg.crop_ratio_range[0]);
  const double log_hi = std::log(cfg.crop_ratio_range[1]);
  for (int attempt = 0; attempt < kCropAttempts; ++attempt) {
    const double target = area * uniform(rng, cfg.crop_scale_range[0], cfg.crop_scale_range[1]);
    const double ratio = std::exp(uniform(rng, log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const int top = static_cast<int>(rng() % static_cast<std::uint64_t>(height - h + 1));
      const int left = static_cast<int>(rng() % static_cast<std::uint64_t>(width - w + 1));
      return {top, left, h, w};
    }
  }
  return {0, 0, height, width};
}

Image resized_crop(const Image& src, const CropBox& box, int out_h, int out_w) {
  if (box.height <= 0 || box.width <= 0) throw ShapeError("crop box has zero area");
  Image out(out_h, out_w, src.channels);
  const double sy = static_cast<double>(box.height) / out_h;
  const double sx = static_cast<double>(box.width) / out_w;
  const int y_last = box.top + box.height - 1;
  const int x_last = box.left + box.width - 1;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp(box.top + (y + 0.5) * sy - 0.5, double(box.top), double(y_last));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, y_last);
    const auto wy = static_cast<float>(fy - y0);
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp(box.left + (x + 0.5) * sx - 0.5, double(box.left), double(x_last));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, x_last);
      const auto wx = static_cast<float>(fx - x0);
      for (int c = 0; c < src.channels; ++c) {
        if (wy == 0.0f && wx == 0.0f) {
          out.at(y, x, c) = src.at(y0, x0, c);
          continue;
        }
        const float top = src.at(y0, x0, c) * (1.0f - wx) + src.at(y0, x1, c) * wx;
        const float bottom = src.at(y1, x0, c) * (1.0f - wx) + src.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1.0f - wy) + bottom * wy;
      }
    }
  }
  return out;
}

Image hflip(const Image& src) {
  Image out(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(y, src.width - 1 - x, c);
    }
  }
  return out;
}

ViewPair augment_pair(const LabeledImage& img, const AugConfig& cfg, const SampleKey& key) {
  const std::uint64_t epoch = epoch_key(cfg, key);
  Rng rng1 = make_rng({key.seed, epoch, key.index, 1, tag(Stream::kAugment)});
  Rng rng2 = make_rng({key.seed, epoch, key.index, 2, tag(Stream::kAugment)});
  return {augment_view(img.pixels, cfg, rng1), augment_view(img.pixels, cfg, rng2),
          static_cast<std::size_t>(key.index)};
}

LabeledImage probe_augment(const LabeledImage& img, const AugConfig& cfg, const SampleKey& key) {
  Rng rng = make_rng({key.seed, epoch_key(cfg, key), key.index, 0, tag(Stream::kProbe)});
  return {crop_and_flip(img.pixels, cfg, rng), img.label};
}

LabeledImage eval_view(const LabeledImage& img, const AugConfig& cfg) {
  const auto& px = img.pixels;
  if (px.height == cfg.output_size[0] && px.width == cfg.output_size[1]) return img;
  return {resized_crop(px, {0, 0, px.height, px.width}, cfg.output_size[0], cfg.output_size[1]),
          img.label};
}

}  // namespace mrcl::data
