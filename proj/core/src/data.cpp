#include "ims/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "ims/errors.hpp"
#include "ims/rng.hpp"

namespace ims {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ClassPattern {
  // kind 0: oriented sinusoidal bars; kind 1: gaussian blob; kind 2: checker
  int kind;
  double angle;      // bars
  double period;     // bars / checker block size
  double center_h, center_w;  // blob, fractional
  double phase;      // checker parity
};

ClassPattern pattern_for_class(std::int64_t c, std::int64_t num_classes) {
  ClassPattern p{};
  p.kind = static_cast<int>(c % 3);
  const std::int64_t variant = c / 3;
  const std::int64_t variants =
      (num_classes / 3) + ((c % 3) < (num_classes % 3) ? 1 : 0);
  const double frac = variants > 0 ? static_cast<double>(variant) /
                                         static_cast<double>(variants)
                                   : 0.0;
  switch (p.kind) {
    case 0:
      p.angle = kPi * frac;
      p.period = 4.0 + 2.0 * (variant % 2);
      break;
    case 1:
      p.center_h = 0.5 + 0.27 * std::sin(2.0 * kPi * frac);
      p.center_w = 0.5 + 0.27 * std::cos(2.0 * kPi * frac);
      break;
    default:
      p.period = 2.0 + 2.0 * static_cast<double>(variant % 3);
      p.phase = (variant % 2 == 0) ? 0.0 : 1.0;
      break;
  }
  return p;
}

double pattern_value(const ClassPattern& p, std::int64_t h, std::int64_t w,
                     std::int64_t side) {
  const double u = static_cast<double>(h);
  const double v = static_cast<double>(w);
  switch (p.kind) {
    case 0: {
      const double t = u * std::cos(p.angle) + v * std::sin(p.angle);
      return 0.5 + 0.42 * std::cos(2.0 * kPi * t / p.period);
    }
    case 1: {
      const double dh = u - p.center_h * static_cast<double>(side - 1);
      const double dw = v - p.center_w * static_cast<double>(side - 1);
      const double sigma = 0.16 * static_cast<double>(side);
      return 0.12 + 0.82 * std::exp(-(dh * dh + dw * dw) / (2.0 * sigma * sigma));
    }
    default: {
      const std::int64_t block =
          (h / static_cast<std::int64_t>(p.period)) +
          (w / static_cast<std::int64_t>(p.period)) +
          static_cast<std::int64_t>(p.phase);
      return (block % 2 == 0) ? 0.88 : 0.12;
    }
  }
}

std::pair<std::int64_t, std::int64_t> corner_origin(TriggerSpec::Corner corner,
                                                    std::int64_t size,
                                                    std::int64_t height,
                                                    std::int64_t width) {
  switch (corner) {
    case TriggerSpec::Corner::top_left:
      return {0, 0};
    case TriggerSpec::Corner::top_right:
      return {0, width - size};
    case TriggerSpec::Corner::bottom_left:
      return {height - size, 0};
    default:
      return {height - size, width - size};
  }
}

std::uint32_t read_be_u32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) {
    throw LoadError(LoadError::Kind::truncated, path + ": truncated header");
  }
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace

void TriggerSpec::validate(std::int64_t channels, std::int64_t height,
                           std::int64_t width) const {
  if (kind == Kind::patch) {
    if (patch_size < 1 || patch_size > height || patch_size > width) {
      throw ArgumentError("trigger patch of size " + std::to_string(patch_size) +
                          " does not fit a " + std::to_string(height) + "x" +
                          std::to_string(width) + " image");
    }
    if (patch_fill < 0.0f || patch_fill > 1.0f) {
      throw ArgumentError("trigger patch fill must lie in [0, 1]");
    }
  } else {
    if (!(blend_alpha > 0.0f) || !(blend_alpha < 1.0f)) {
      throw ArgumentError("blend alpha must lie in (0, 1)");
    }
    if (!blend_pattern.defined() || blend_pattern.rank() != 3 ||
        blend_pattern.dim(0) != channels || blend_pattern.dim(1) != height ||
        blend_pattern.dim(2) != width) {
      throw ArgumentError("blend pattern must be a (C, H, W) image matching the data");
    }
  }
}

Tensor<float> gather_images(const Tensor<float>& images,
                            std::span<const std::int64_t> indices) {
  const std::int64_t sample = images.size() / images.dim(0);
  Tensor<float> out = Tensor<float>::zeros(
      {static_cast<std::int64_t>(indices.size()), images.dim(1), images.dim(2),
       images.dim(3)});
  const float* src = images.values().data();
  float* dst = out.values().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(dst + static_cast<std::int64_t>(i) * sample,
                src + indices[i] * sample, static_cast<std::size_t>(sample) * 4);
  }
  return out;
}

LabeledDataset gather_dataset(const LabeledDataset& ds,
                              std::span<const std::int64_t> indices) {
  LabeledDataset out;
  out.images = gather_images(ds.images, indices);
  out.labels.reserve(indices.size());
  out.poison_flags.reserve(indices.size());
  for (auto i : indices) {
    out.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    out.poison_flags.push_back(ds.poison_flags[static_cast<std::size_t>(i)]);
  }
  out.num_classes = ds.num_classes;
  out.provenance = ds.provenance;
  return out;
}

LabeledDataset generate_synthetic(std::int64_t classes, std::int64_t per_class,
                                  std::int64_t size, std::uint64_t seed,
                                  std::int64_t channels, float noise) {
  if (classes < 2) {
    throw ArgumentError("generate_synthetic: need at least 2 classes");
  }
  if (per_class < 1) {
    throw ArgumentError("generate_synthetic: need at least 1 sample per class");
  }
  if (size < 8) {
    throw ArgumentError("generate_synthetic: image side must be at least 8");
  }

  const std::int64_t n = classes * per_class;
  LabeledDataset ds;
  ds.images = Tensor<float>::zeros({n, channels, size, size});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.poison_flags.assign(static_cast<std::size_t>(n), 0);
  ds.num_classes = classes;

  auto rng = make_rng(seed, "synthetic-data");
  std::normal_distribution<double> noise_dist(0.0, static_cast<double>(noise));
  std::uniform_real_distribution<double> brightness(-0.08, 0.08);

  float* img = ds.images.values().data();
  const std::int64_t plane = size * size;
  std::int64_t idx = 0;
  for (std::int64_t c = 0; c < classes; ++c) {
    const ClassPattern pat = pattern_for_class(c, classes);
    for (std::int64_t i = 0; i < per_class; ++i, ++idx) {
      ds.labels[static_cast<std::size_t>(idx)] = c;
      const double bright = brightness(rng);
      float* base = img + idx * channels * plane;
      for (std::int64_t h = 0; h < size; ++h) {
        for (std::int64_t w = 0; w < size; ++w) {
          const double v =
              pattern_value(pat, h, w, size) + bright + noise_dist(rng);
          const float pixel =
              static_cast<float>(std::clamp(v, 0.0, 1.0));
          for (std::int64_t ch = 0; ch < channels; ++ch) {
            base[ch * plane + h * size + w] = pixel;
          }
        }
      }
    }
  }

  // One deterministic shuffle so class runs do not dominate minibatches.
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return gather_dataset(ds, order);
}

LabeledDataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) {
    throw LoadError(LoadError::Kind::io, "cannot open " + images_path);
  }
  const std::uint32_t image_magic = read_be_u32(imf, images_path);
  if (image_magic != 0x00000803u) {
    throw LoadError(LoadError::Kind::bad_magic,
                    images_path + ": image magic 0x" + [&] {
                      char buf[16];
                      std::snprintf(buf, sizeof buf, "%08x", image_magic);
                      return std::string(buf);
                    }() + ", expected 0x00000803");
  }
  const std::int64_t n = read_be_u32(imf, images_path);
  const std::int64_t rows = read_be_u32(imf, images_path);
  const std::int64_t cols = read_be_u32(imf, images_path);

  std::vector<unsigned char> pixels(static_cast<std::size_t>(n * rows * cols));
  imf.read(reinterpret_cast<char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (!imf || imf.gcount() != static_cast<std::streamsize>(pixels.size())) {
    throw LoadError(LoadError::Kind::truncated,
                    images_path + ": truncated pixel payload");
  }

  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) {
    throw LoadError(LoadError::Kind::io, "cannot open " + labels_path);
  }
  const std::uint32_t label_magic = read_be_u32(lbf, labels_path);
  if (label_magic != 0x00000801u) {
    throw LoadError(LoadError::Kind::bad_magic,
                    labels_path + ": label magic mismatch, expected 0x00000801");
  }
  const std::int64_t n_labels = read_be_u32(lbf, labels_path);
  if (n_labels != n) {
    throw LoadError(LoadError::Kind::count_mismatch,
                    "image file holds " + std::to_string(n) + " records, label file " +
                        std::to_string(n_labels));
  }
  std::vector<unsigned char> raw_labels(static_cast<std::size_t>(n));
  lbf.read(reinterpret_cast<char*>(raw_labels.data()),
           static_cast<std::streamsize>(raw_labels.size()));
  if (!lbf || lbf.gcount() != static_cast<std::streamsize>(raw_labels.size())) {
    throw LoadError(LoadError::Kind::truncated,
                    labels_path + ": truncated label payload");
  }

  LabeledDataset ds;
  ds.images = Tensor<float>::zeros({n, 1, rows, cols});
  float* img = ds.images.values().data();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    img[i] = static_cast<float>(pixels[i]) / 255.0f;
  }
  ds.labels.reserve(static_cast<std::size_t>(n));
  std::int64_t max_label = 0;
  for (unsigned char l : raw_labels) {
    ds.labels.push_back(l);
    max_label = std::max<std::int64_t>(max_label, l);
  }
  ds.poison_flags.assign(static_cast<std::size_t>(n), 0);
  ds.num_classes = max_label + 1;
  return ds;
}

Tensor<float> apply_trigger(const Tensor<float>& images, const TriggerSpec& trigger) {
  if (images.rank() != 4) {
    throw ShapeError("apply_trigger: expected an image batch, got " +
                     shape_str(images.shape()));
  }
  const std::int64_t channels = images.dim(1), height = images.dim(2),
                     width = images.dim(3);
  trigger.validate(channels, height, width);

  Tensor<float> out = images.detached();
  float* v = out.values().data();
  const std::int64_t n = images.dim(0);
  const std::int64_t plane = height * width;

  if (trigger.kind == TriggerSpec::Kind::patch) {
    const auto [h0, w0] =
        corner_origin(trigger.patch_corner, trigger.patch_size, height, width);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < channels; ++ch) {
        float* base = v + (i * channels + ch) * plane;
        for (std::int64_t h = h0; h < h0 + trigger.patch_size; ++h) {
          for (std::int64_t w = w0; w < w0 + trigger.patch_size; ++w) {
            base[h * width + w] = trigger.patch_fill;
          }
        }
      }
    }
  } else {
    const float a = trigger.blend_alpha;
    const float* pat = trigger.blend_pattern.values().data();
    const std::int64_t sample = channels * plane;
    for (std::int64_t i = 0; i < n; ++i) {
      float* base = v + i * sample;
      for (std::int64_t j = 0; j < sample; ++j) {
        base[j] = std::clamp((1.0f - a) * base[j] + a * pat[j], 0.0f, 1.0f);
      }
    }
  }
  return out;
}

LabeledDataset poison(const LabeledDataset& dataset, const TriggerSpec& trigger,
                      double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio > 1.0) {
    throw ArgumentError("poison: ratio must lie in [0, 1]");
  }
  if (dataset.size() == 0) {
    throw ArgumentError("poison: empty dataset");
  }
  trigger.validate(dataset.images.dim(1), dataset.images.dim(2),
                   dataset.images.dim(3));

  const std::int64_t n = dataset.size();
  const std::int64_t count = static_cast<std::int64_t>(
      std::floor(ratio * static_cast<double>(n)));

  LabeledDataset out;
  out.images = dataset.images.detached();
  out.labels = dataset.labels;
  out.poison_flags = dataset.poison_flags;
  out.num_classes = dataset.num_classes;
  out.provenance = count > 0 ? Provenance::poisoned : dataset.provenance;
  if (count == 0) return out;

  // Already-flagged samples and samples of the target class are not
  // candidates; re-poisoning is a no-op by construction.
  std::vector<std::int64_t> pool;
  for (std::int64_t i = 0; i < n; ++i) {
    if (out.labels[static_cast<std::size_t>(i)] != trigger.target_class &&
        out.poison_flags[static_cast<std::size_t>(i)] == 0) {
      pool.push_back(i);
    }
  }
  if (count > static_cast<std::int64_t>(pool.size())) {
    throw ArgumentError("poison: requested " + std::to_string(count) +
                        " poisoned samples but only " + std::to_string(pool.size()) +
                        " candidates remain");
  }
  auto rng = make_rng(seed, "poison-selection");
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(count));

  Tensor<float> triggered = apply_trigger(gather_images(out.images, pool), trigger);
  const std::int64_t sample = out.images.size() / n;
  float* dst = out.images.values().data();
  const float* src = triggered.values().data();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    std::memcpy(dst + pool[i] * sample, src + static_cast<std::int64_t>(i) * sample,
                static_cast<std::size_t>(sample) * 4);
    out.labels[static_cast<std::size_t>(pool[i])] = trigger.target_class;
    out.poison_flags[static_cast<std::size_t>(pool[i])] = 1;
  }
  return out;
}

DefenderSplit make_defender_split(const LabeledDataset& holdout,
                                  std::int64_t samples_per_class,
                                  const TriggerSpec& trigger) {
  if (samples_per_class < 1) {
    throw ArgumentError("defender split: samples_per_class must be positive");
  }
  for (auto f : holdout.poison_flags) {
    if (f) {
      throw ArgumentError("defender split: holdout data must be clean");
    }
  }

  std::vector<std::int64_t> mitigation_idx, test_idx;
  std::vector<std::int64_t> taken(static_cast<std::size_t>(holdout.num_classes), 0);
  for (std::int64_t i = 0; i < holdout.size(); ++i) {
    const auto label = holdout.labels[static_cast<std::size_t>(i)];
    if (taken[static_cast<std::size_t>(label)] < samples_per_class) {
      mitigation_idx.push_back(i);
      ++taken[static_cast<std::size_t>(label)];
    } else {
      test_idx.push_back(i);
    }
  }
  for (std::int64_t c = 0; c < holdout.num_classes; ++c) {
    if (taken[static_cast<std::size_t>(c)] < samples_per_class) {
      throw ArgumentError("defender split: class " + std::to_string(c) + " has only " +
                          std::to_string(taken[static_cast<std::size_t>(c)]) +
                          " samples, need " + std::to_string(samples_per_class) +
                          " per class");
    }
  }

  DefenderSplit split;
  split.mitigation = gather_dataset(holdout, mitigation_idx);
  split.clean_test = gather_dataset(holdout, test_idx);
  split.triggered_test = split.clean_test;
  split.triggered_test.images = apply_trigger(split.clean_test.images, trigger);
  split.triggered_test.poison_flags.assign(split.triggered_test.labels.size(), 1);
  split.triggered_test.provenance = Provenance::poisoned;
  return split;
}

void save_dataset(const LabeledDataset& ds, const std::string& base) {
  nlohmann::json manifest;
  manifest["format"] = "ims-data-1";
  manifest["endianness"] = "little";
  manifest["shape"] = ds.images.shape();
  manifest["labels"] = ds.labels;
  manifest["poison_flags"] = ds.poison_flags;
  manifest["num_classes"] = ds.num_classes;
  manifest["provenance"] = ds.provenance == Provenance::clean ? "clean" : "poisoned";

  std::ofstream mf(base + ".manifest.json");
  if (!mf) {
    throw LoadError(LoadError::Kind::io, "cannot write " + base + ".manifest.json");
  }
  mf << manifest.dump() << '\n';

  std::ofstream bf(base + ".bin", std::ios::binary);
  if (!bf) {
    throw LoadError(LoadError::Kind::io, "cannot write " + base + ".bin");
  }
  std::vector<unsigned char> buf(static_cast<std::size_t>(ds.images.size()) * 4);
  const auto vals = ds.images.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &vals[i], 4);
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xff);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
  }
  bf.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size()));
}

LabeledDataset load_dataset(const std::string& base) {
  std::ifstream mf(base + ".manifest.json");
  if (!mf) {
    throw LoadError(LoadError::Kind::io, "cannot open " + base + ".manifest.json");
  }
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadError::Kind::manifest,
                    "malformed dataset manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "ims-data-1") {
    throw LoadError(LoadError::Kind::version, "unsupported dataset cache format");
  }
  if (manifest.value("endianness", "") != "little") {
    throw LoadError(LoadError::Kind::version, "unsupported dataset endianness tag");
  }

  LabeledDataset ds;
  const Shape shape = manifest.at("shape").get<Shape>();
  ds.labels = manifest.at("labels").get<std::vector<std::int64_t>>();
  ds.poison_flags = manifest.at("poison_flags").get<std::vector<std::uint8_t>>();
  ds.num_classes = manifest.at("num_classes").get<std::int64_t>();
  ds.provenance = manifest.value("provenance", "clean") == "poisoned"
                      ? Provenance::poisoned
                      : Provenance::clean;

  std::ifstream bf(base + ".bin", std::ios::binary);
  if (!bf) {
    throw LoadError(LoadError::Kind::io, "cannot open " + base + ".bin");
  }
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(bf)),
                                 std::istreambuf_iterator<char>());
  const std::int64_t expected = shape_size(shape);
  if (static_cast<std::int64_t>(buf.size()) < expected * 4) {
    throw LoadError(LoadError::Kind::truncated, base + ".bin: truncated payload");
  }
  if (static_cast<std::int64_t>(buf.size()) > expected * 4 ||
      static_cast<std::int64_t>(ds.labels.size()) != shape[0] ||
      ds.labels.size() != ds.poison_flags.size()) {
    throw LoadError(LoadError::Kind::shape_mismatch,
                    base + ": manifest/payload shape disagreement");
  }
  std::vector<float> values(static_cast<std::size_t>(expected));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(buf[4 * i + 0]) |
                               (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    std::memcpy(&values[i], &bits, 4);
  }
  ds.images = Tensor<float>::from_values(shape, std::move(values));
  return ds;
}

}  // namespace ims
