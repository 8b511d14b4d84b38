#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "mrcl/data.hpp"
#include "mrcl/errors.hpp"

namespace mrcl::data {

namespace fs = std::filesystem;

namespace {

constexpr int kCifarSide = 32;
constexpr std::size_t kCifarPixels = kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarPixels;
constexpr int kStlSide = 96;
constexpr std::size_t kStlPixels = kStlSide * kStlSide;
constexpr std::size_t kStlRecord = 3 * kStlPixels;

std::vector<std::uint8_t> read_file(const fs::path& path) {
  if (!fs::exists(path)) throw IngestionError("missing dataset file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open dataset file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

fs::path resolve_dir(const fs::path& root, const char* nested) {
  if (!fs::exists(root)) throw IngestionError("dataset root does not exist: " + root.string());
  if (fs::is_directory(root / nested)) return root / nested;
  return root;
}

Dataset load_cifar10(const fs::path& root, Split split) {
  const fs::path dir = resolve_dir(root, "cifar-10-batches-bin");
  std::vector<fs::path> files;
  if (split == Split::kTrain) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  // Fail before reading anything if a batch is absent.
  for (const auto& f : files) {
    if (!fs::exists(f)) throw IngestionError("missing CIFAR-10 file: " + f.string());
  }

  Dataset ds;
  for (const auto& f : files) {
    const auto raw = read_file(f);
    if (raw.empty() || raw.size() % kCifarRecord != 0) {
      throw IngestionError("corrupt CIFAR-10 file (size " + std::to_string(raw.size()) +
                           " is not a whole number of records): " + f.string());
    }
    for (std::size_t r = 0; r < raw.size() / kCifarRecord; ++r) {
      const std::uint8_t* rec = raw.data() + r * kCifarRecord;
      if (rec[0] > 9) throw IngestionError("corrupt CIFAR-10 label in " + f.string());
      std::vector<std::uint8_t> hwc(3 * kCifarPixels);
      for (std::size_t p = 0; p < kCifarPixels; ++p) {
        for (int c = 0; c < 3; ++c) hwc[p * 3 + c] = rec[1 + c * kCifarPixels + p];
      }
      ds.add(kCifarSide, kCifarSide, 3, std::move(hwc), rec[0]);
    }
  }
  if (auto names = read_lines(dir / "batches.meta.txt"); names.size() == 10) {
    ds.class_names = std::move(names);
  } else {
    ds.class_names = {"airplane", "automobile", "bird", "cat", "deer",
                      "dog", "frog", "horse", "ship", "truck"};
  }
  return ds;
}

void append_stl_images(Dataset& ds, const fs::path& x_path, const std::vector<std::uint8_t>* labels) {
  const auto raw = read_file(x_path);
  if (raw.empty() || raw.size() % kStlRecord != 0) {
    throw IngestionError("corrupt STL-10 image file: " + x_path.string());
  }
  const std::size_t count = raw.size() / kStlRecord;
  if (labels && labels->size() != count) {
    throw IngestionError("STL-10 label count " + std::to_string(labels->size()) +
                         " does not match image count " + std::to_string(count) + " for " +
                         x_path.string());
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* rec = raw.data() + i * kStlRecord;
    std::vector<std::uint8_t> hwc(kStlRecord);
    // Planes are stored column-major.
    for (int c = 0; c < 3; ++c) {
      for (int col = 0; col < kStlSide; ++col) {
        for (int row = 0; row < kStlSide; ++row) {
          hwc[(static_cast<std::size_t>(row) * kStlSide + col) * 3 + c] =
              rec[c * kStlPixels + static_cast<std::size_t>(col) * kStlSide + row];
        }
      }
    }
    int label = kUnlabeled;
    if (labels) {
      const int raw_label = (*labels)[i];
      if (raw_label < 1 || raw_label > 10) {
        throw IngestionError("corrupt STL-10 label " + std::to_string(raw_label) + " in file for " +
                             x_path.string());
      }
      label = raw_label - 1;
    }
    ds.add(kStlSide, kStlSide, 3, std::move(hwc), label);
  }
}

Dataset load_stl10(const fs::path& root, Split split, bool labeled) {
  const fs::path dir = resolve_dir(root, "stl10_binary");
  Dataset ds;
  if (!labeled) {
    if (split == Split::kTest) throw ConfigError("stl10_unlabeled has no test split");
    append_stl_images(ds, dir / "unlabeled_X.bin", nullptr);
  } else {
    const std::string prefix = split == Split::kTrain ? "train" : "test";
    const fs::path x_path = dir / (prefix + "_X.bin");
    const fs::path y_path = dir / (prefix + "_y.bin");
    if (!fs::exists(x_path)) throw IngestionError("missing STL-10 file: " + x_path.string());
    const auto labels = read_file(y_path);
    append_stl_images(ds, x_path, &labels);
  }
  ds.class_names = read_lines(dir / "class_names.txt");
  return ds;
}

std::vector<std::uint8_t> decode_rgb(const fs::path& path, int& height, int& width) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty() || bgr.type() != CV_8UC3) throw IngestionError("cannot decode image: " + path.string());
  height = bgr.rows;
  width = bgr.cols;
  std::vector<std::uint8_t> hwc(static_cast<std::size_t>(bgr.rows) * bgr.cols * 3);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * bgr.cols + x) * 3;
      hwc[o + 0] = row[x][2];
      hwc[o + 1] = row[x][1];
      hwc[o + 2] = row[x][0];
    }
  }
  return hwc;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

Dataset load_image_folder(const fs::path& root, Split split) {
  if (!fs::is_directory(root)) throw IngestionError("image folder does not exist: " + root.string());
  fs::path dir = root / to_string(split);
  if (!fs::is_directory(dir)) dir = root;

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IngestionError("no class subdirectories under " + dir.string());

  Dataset ds;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    ds.class_names.push_back(class_dirs[label].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      int h = 0, w = 0;
      auto hwc = decode_rgb(f, h, w);
      ds.add(h, w, 3, std::move(hwc), static_cast<int>(label));
    }
  }
  return ds;
}

}  // namespace

Image read_image(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IngestionError("image file does not exist: " + path.string());
  Image img;
  auto bytes = decode_rgb(path, img.height, img.width);
  img.channels = 3;
  img.data.resize(bytes.size());
  std::transform(bytes.begin(), bytes.end(), img.data.begin(), [](std::uint8_t b) { return b / 255.0f; });
  return img;
}

void write_image(const Image& img, const fs::path& path) {
  if (img.channels != 3 && img.channels != 1) throw ShapeError("write_image: expected 1 or 3 channels");
  cv::Mat out(img.height, img.width, img.channels == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < img.height; ++y) {
    auto* row = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        const float v = std::clamp(img.at(y, x, c), 0.0f, 1.0f);
        const int dst = img.channels == 3 ? 2 - c : 0;
        row[x * img.channels + dst] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), out);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write image " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write image " + path.string());
}

DatasetName parse_dataset_name(std::string_view name) {
  if (name == "cifar10") return DatasetName::kCifar10;
  if (name == "stl10_unlabeled") return DatasetName::kStl10Unlabeled;
  if (name == "stl10_labeled") return DatasetName::kStl10Labeled;
  if (name == "image_folder") return DatasetName::kImageFolder;
  throw ConfigError("unknown dataset name '" + std::string(name) +
                    "' (expected cifar10, stl10_unlabeled, stl10_labeled, image_folder)");
}

std::string to_string(DatasetName name) {
  switch (name) {
    case DatasetName::kCifar10: return "cifar10";
    case DatasetName::kStl10Unlabeled: return "stl10_unlabeled";
    case DatasetName::kStl10Labeled: return "stl10_labeled";
    case DatasetName::kImageFolder: return "image_folder";
  }
  return "?";
}

Split parse_split(std::string_view split) {
  if (split == "train") return Split::kTrain;
  if (split == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(split) + "' (expected train or test)");
}

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

void Dataset::add(int height, int width, int channels, std::vector<std::uint8_t> bytes, int label) {
  if (height <= 0 || width <= 0 || channels <= 0) throw ShapeError("image dimensions must be positive");
  if (bytes.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ShapeError("image byte count does not match its dimensions");
  }
  shapes_.push_back({height, width, channels});
  offsets_.push_back(bytes_.size());
  bytes_.insert(bytes_.end(), bytes.begin(), bytes.end());
  labels_.push_back(label);
}

void Dataset::add(const LabeledImage& image) {
  std::vector<std::uint8_t> bytes(image.pixels.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(image.pixels.data[i], 0.0f, 1.0f);
    bytes[i] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
  }
  add(image.pixels.height, image.pixels.width, image.pixels.channels, std::move(bytes), image.label);
}

LabeledImage Dataset::at(std::size_t i) const {
  const Shape& s = shapes_.at(i);
  LabeledImage out{Image(s.height, s.width, s.channels), labels_[i]};
  const std::uint8_t* src = bytes_.data() + offsets_[i];
  for (std::size_t k = 0; k < out.pixels.data.size(); ++k) out.pixels.data[k] = src[k] / 255.0f;
  return out;
}

bool Dataset::labeled() const {
  return !labels_.empty() &&
         std::none_of(labels_.begin(), labels_.end(), [](int l) { return l == kUnlabeled; });
}

int Dataset::num_classes() const {
  if (!labeled()) return 0;
  return *std::max_element(labels_.begin(), labels_.end()) + 1;
}

Dataset Dataset::head(std::size_t n) const {
  if (n == 0 || n >= size()) return *this;
  Dataset out;
  out.class_names = class_names;
  for (std::size_t i = 0; i < n; ++i) {
    const Shape& s = shapes_[i];
    const std::size_t len = static_cast<std::size_t>(s.height) * s.width * s.channels;
    std::vector<std::uint8_t> bytes(bytes_.begin() + static_cast<std::ptrdiff_t>(offsets_[i]),
                                    bytes_.begin() + static_cast<std::ptrdiff_t>(offsets_[i] + len));
    out.add(s.height, s.width, s.channels, std::move(bytes), labels_[i]);
  }
  return out;
}

Dataset load_dataset(const fs::path& root, Split split, DatasetName name) {
  switch (name) {
    case DatasetName::kCifar10: return load_cifar10(root, split);
    case DatasetName::kStl10Unlabeled: return load_stl10(root, split, false);
    case DatasetName::kStl10Labeled: return load_stl10(root, split, true);
    case DatasetName::kImageFolder: return load_image_folder(root, split);
  }
  throw ConfigError("unknown dataset");
}

}  // namespace mrcl::data
