// SPDX-License-Identifier: Apache-2.0

#include "dcan/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace dcan::data {

using Rng = std::mt19937_64;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Spec -----------------------------------------------------------------------

void DomainShiftSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("DomainShiftSpec." + field + ": " + msg);
  };
  if (num_classes < 2) fail("num_classes", "needs at least 2 classes");
  if (num_classes > 65535) fail("num_classes", "labels are stored as u16");
  if (train_per_class == 0) fail("train_per_class", "must be positive");
  if (test_per_class == 0) fail("test_per_class", "must be positive");
  if (channels == 0 || height == 0 || width == 0) fail("channels/height/width", "extents must be positive");
  auto finite = [&](const char* field, double v) {
    if (!std::isfinite(v)) fail(field, "must be finite");
  };
  finite("color_bias", color_bias);
  finite("noise_sigma", noise_sigma);
  finite("rotation_degrees", rotation_degrees);
  finite("background_clutter", background_clutter);
  if (color_bias < 0 || color_bias > 1) fail("color_bias", "must lie in [0, 1]");
  if (noise_sigma < 0) fail("noise_sigma", "must be non-negative");
  if (background_clutter < 0 || background_clutter > 1) fail("background_clutter", "must lie in [0, 1]");
}

DomainShiftSpec DomainShiftSpec::without_shift() const {
  DomainShiftSpec s = *this;
  s.color_bias = s.noise_sigma = s.rotation_degrees = s.background_clutter = 0.0;
  return s;
}

void to_json(nlohmann::json& j, const DomainShiftSpec& s) {
  j = nlohmann::json{{"num_classes", s.num_classes},
                     {"train_per_class", s.train_per_class},
                     {"test_per_class", s.test_per_class},
                     {"channels", s.channels},
                     {"height", s.height},
                     {"width", s.width},
                     {"color_bias", s.color_bias},
                     {"noise_sigma", s.noise_sigma},
                     {"rotation_degrees", s.rotation_degrees},
                     {"background_clutter", s.background_clutter},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DomainShiftSpec& s) {
  static const std::vector<std::string> known{"num_classes",      "train_per_class", "test_per_class", "channels",
                                              "height",           "width",           "color_bias",     "noise_sigma",
                                              "rotation_degrees", "background_clutter", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("DomainShiftSpec: unknown field '" + key + "'");
    }
  }
  DomainShiftSpec d;
  s.num_classes = j.value("num_classes", d.num_classes);
  s.train_per_class = j.value("train_per_class", d.train_per_class);
  s.test_per_class = j.value("test_per_class", d.test_per_class);
  s.channels = j.value("channels", d.channels);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.color_bias = j.value("color_bias", d.color_bias);
  s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  s.rotation_degrees = j.value("rotation_degrees", d.rotation_degrees);
  s.background_clutter = j.value("background_clutter", d.background_clutter);
  s.seed = j.value("seed", d.seed);
  s.validate();
}

// Dataset --------------------------------------------------------------------

Dataset Dataset::without_labels() const {
  Dataset d = *this;
  d.labels.clear();
  return d;
}

Tensor<float> Dataset::gather_images(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw std::invalid_argument("gather_images needs at least one row");
  Shape shape = images.shape();
  const std::size_t stride = images.numel() / shape[0];
  shape[0] = rows.size();
  Tensor<float> out(shape);
  const float* src = images.raw();
  float* dst = out.raw();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw std::out_of_range("row " + std::to_string(rows[i]) + " outside dataset");
    std::copy_n(src + rows[i] * stride, stride, dst + i * stride);
  }
  return out;
}

std::vector<Label> Dataset::gather_labels(std::span<const std::size_t> rows) const {
  require_labels("gather_labels");
  std::vector<Label> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels.at(rows[i]);
  return out;
}

void Dataset::require_labels(const std::string& what) const {
  if (!has_labels()) throw std::invalid_argument(what + ": dataset has no labels");
}

// Generation -----------------------------------------------------------------

namespace {

enum class Split : std::uint64_t { train = 1, test = 2 };
enum class Side : std::uint64_t { source = 11, target = 13 };

// Colour every target image is pulled towards by color_bias.
constexpr float kTint[3] = {0.95f, 0.55f, 0.1f};
// Noise present in both domains.
constexpr double kBaseNoise = 0.03;
constexpr double kPatternRadius = 7.0;  // pixels at scale 1

double soft_edge(double signed_distance) { return std::clamp(0.5 - signed_distance, 0.0, 1.0); }

double box_sd(double u, double v, double hu, double hv) { return std::max(std::abs(u) - hu, std::abs(v) - hv); }

// Signed distance (pattern units, negative inside) of class `c`'s shape at
// local coordinates (u, v).
double pattern_sd(std::size_t c, double u, double v) {
  const std::size_t family = c % 5;
  const double variant = static_cast<double>(c / 5);
  switch (family) {
    case 0: {  // three horizontal bars
      const double half = 0.18 + 0.05 * variant;
      double d = 1e9;
      for (double centre : {-0.75, 0.0, 0.75}) d = std::min(d, box_sd(u, v - centre, 1.2, half));
      return d;
    }
    case 1:  // filled disc
      return std::hypot(u, v) - (0.9 - 0.15 * variant);
    case 2:  // ring
      return std::abs(std::hypot(u, v) - (1.0 - 0.1 * variant)) - 0.22;
    case 3:  // plus sign
      return std::min(box_sd(u, v, 1.2, 0.28), box_sd(u, v, 0.28, 1.2));
    default: {  // two discs side by side
      const double r = 0.5 - 0.05 * variant;
      return std::min(std::hypot(u - 0.7, v), std::hypot(u + 0.7, v)) - r;
    }
  }
}

void render_sample(std::size_t label, bool target, const DomainShiftSpec& spec, Rng& rng, float* out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t H = spec.height, W = spec.width, C = spec.channels;
  const double cx = 0.5 * static_cast<double>(W) + (unit(rng) - 0.5) * 6.0;
  const double cy = 0.5 * static_cast<double>(H) + (unit(rng) - 0.5) * 6.0;
  const double radius = kPatternRadius * (0.8 + 0.4 * unit(rng)) * static_cast<double>(std::min(H, W)) / 32.0;
  const double jitter = (unit(rng) - 0.5) * 20.0;
  const double angle = (jitter + (target ? spec.rotation_degrees : 0.0)) * std::numbers::pi / 180.0;
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<double> fg(C), bg(C);
  const double bg_level = 0.3 * unit(rng);
  for (std::size_t ch = 0; ch < C; ++ch) {
    fg[ch] = 0.5 + 0.5 * unit(rng);
    bg[ch] = bg_level + 0.05 * unit(rng);
  }

  const std::size_t plane = H * W;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double u = (ca * dx + sa * dy) / radius;
      const double v = (-sa * dx + ca * dy) / radius;
      const double m = soft_edge(pattern_sd(label, u, v) * radius);
      for (std::size_t ch = 0; ch < C; ++ch) {
        out[ch * plane + y * W + x] = static_cast<float>(bg[ch] * (1.0 - m) + fg[ch] * m);
      }
    }
  }

  if (target && spec.background_clutter > 0.0) {
    // Random short strokes composited over the image.
    const int strokes = static_cast<int>(std::lround(8.0 * spec.background_clutter));
    for (int s = 0; s < strokes; ++s) {
      const double x0 = unit(rng) * static_cast<double>(W), y0 = unit(rng) * static_cast<double>(H);
      const double theta = unit(rng) * std::numbers::pi;
      const double len = 4.0 + 8.0 * unit(rng);
      std::vector<double> col(C);
      for (auto& c : col) c = unit(rng);
      const double alpha = spec.background_clutter;
      const double ux = std::cos(theta), uy = std::sin(theta);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double px = static_cast<double>(x) + 0.5 - x0, py = static_cast<double>(y) + 0.5 - y0;
          const double along = std::clamp(px * ux + py * uy, 0.0, len);
          const double d = std::hypot(px - along * ux, py - along * uy) - 0.8;
          const double m = alpha * soft_edge(d);
          if (m <= 0.0) continue;
          for (std::size_t ch = 0; ch < C; ++ch) {
            float& p = out[ch * plane + y * W + x];
            p = static_cast<float>(p * (1.0 - m) + col[ch] * m);
          }
        }
      }
    }
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sigma = std::hypot(kBaseNoise, target ? spec.noise_sigma : 0.0);
  const double b = target ? spec.color_bias : 0.0;
  for (std::size_t ch = 0; ch < C; ++ch) {
    const double tint = kTint[ch % 3];
    for (std::size_t i = 0; i < plane; ++i) {
      float& p = out[ch * plane + i];
      double value = (1.0 - b) * p + b * tint + sigma * gauss(rng);
      p = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
}

Dataset generate_split(const DomainShiftSpec& spec, Side side, Split split) {
  const std::size_t per_class = split == Split::train ? spec.train_per_class : spec.test_per_class;
  const std::size_t n = per_class * spec.num_classes;
  Dataset d;
  d.num_classes = spec.num_classes;
  d.images = Tensor<float>({n, spec.channels, spec.height, spec.width});
  d.labels.resize(n);
  const std::size_t stride = spec.channels * spec.height * spec.width;
  const std::uint64_t stream = mix_seed(mix_seed(spec.seed, static_cast<std::uint64_t>(side)), static_cast<std::uint64_t>(split));
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<Label>(i % spec.num_classes);
    d.labels[i] = label;
    Rng rng(mix_seed(stream, i));
    render_sample(label, side == Side::target, spec, rng, d.images.raw() + i * stride);
  }
  return d;
}

}  // namespace

DomainPair generate_domain_pair(const DomainShiftSpec& spec) {
  spec.validate();
  return {generate_split(spec, Side::source, Split::train), generate_split(spec, Side::source, Split::test),
          generate_split(spec, Side::target, Split::train), generate_split(spec, Side::target, Split::test)};
}

// Files ----------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'C', 'N', '1'};
constexpr std::size_t kHeaderBytes = 4 + 6 * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) throw FormatError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode(const Dataset& d) {
  if (d.images.rank() != 4) throw FormatError("dataset images must be rank 4");
  const std::size_t n = d.images.dim(0);
  if (d.has_labels() && d.labels.size() != n) throw FormatError("label count does not match sample count");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.reserve(kHeaderBytes + d.images.numel() * 4 + d.labels.size() * 2);
  put_u32(out, checked_u32(n, "num_samples"));
  put_u32(out, checked_u32(d.images.dim(1), "channels"));
  put_u32(out, checked_u32(d.images.dim(2), "height"));
  put_u32(out, checked_u32(d.images.dim(3), "width"));
  put_u32(out, checked_u32(d.num_classes, "num_classes"));
  put_u32(out, d.has_labels() ? 1 : 0);
  for (float f : d.images.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  for (Label y : d.labels) {
    out.push_back(static_cast<std::uint8_t>(y));
    out.push_back(static_cast<std::uint8_t>(y >> 8));
  }
  return out;
}

Dataset decode(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw FormatError(origin + ": magic check failed (expected \"DCN1\")");
  }
  if (bytes.size() < kHeaderBytes) {
    throw TruncationError(origin + ": header needs " + std::to_string(kHeaderBytes) + " bytes, file has " +
                          std::to_string(bytes.size()));
  }
  const std::size_t n = get_u32(bytes, 4), c = get_u32(bytes, 8), h = get_u32(bytes, 12), w = get_u32(bytes, 16);
  const std::size_t classes = get_u32(bytes, 20);
  const std::uint32_t label_flag = get_u32(bytes, 24);
  if (n == 0 || c == 0 || h == 0 || w == 0) throw FormatError(origin + ": header has a zero extent");
  if (label_flag > 1) throw FormatError(origin + ": label_present flag must be 0 or 1");
  const std::size_t pixels = n * c * h * w;
  const std::size_t expected = kHeaderBytes + pixels * 4 + (label_flag ? n * 2 : 0);
  if (bytes.size() != expected) {
    throw TruncationError(origin + ": expected " + std::to_string(expected) + " bytes from the header, found " +
                          std::to_string(bytes.size()));
  }
  Dataset d;
  d.num_classes = classes;
  d.images = Tensor<float>({n, c, h, w});
  float* dst = d.images.raw();
  for (std::size_t i = 0; i < pixels; ++i) {
    const std::uint32_t bits = get_u32(bytes, kHeaderBytes + 4 * i);
    std::memcpy(dst + i, &bits, 4);
  }
  if (label_flag) {
    d.labels.resize(n);
    const std::size_t base = kHeaderBytes + pixels * 4;
    for (std::size_t i = 0; i < n; ++i) {
      d.labels[i] = static_cast<Label>(bytes[base + 2 * i] | (bytes[base + 2 * i + 1] << 8));
      if (classes && d.labels[i] >= classes) {
        throw FormatError(origin + ": label " + std::to_string(d.labels[i]) + " outside " + std::to_string(classes) +
                          " classes");
      }
    }
  }
  return d;
}

void save(const Dataset& d, const std::filesystem::path& path) {
  const auto bytes = encode(d);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write to " + path.string() + " failed");
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes, path.string());
}

namespace {
constexpr const char* kSplitFiles[4] = {"source_train.dcn", "source_test.dcn", "target_train.dcn", "target_test.dcn"};
}

void save_pair(const DomainPair& pair, const DomainShiftSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save(pair.source_train, dir / kSplitFiles[0]);
  save(pair.source_test, dir / kSplitFiles[1]);
  save(pair.target_train, dir / kSplitFiles[2]);
  save(pair.target_test, dir / kSplitFiles[3]);
  std::ofstream f(dir / "spec.json", std::ios::trunc);
  f << nlohmann::json(spec).dump(2) << "\n";
}

DomainPair load_pair(const std::filesystem::path& dir) {
  DomainPair p{load(dir / kSplitFiles[0]), load(dir / kSplitFiles[1]), load(dir / kSplitFiles[2]),
               load(dir / kSplitFiles[3])};
  const Dataset* all[] = {&p.source_train, &p.source_test, &p.target_train, &p.target_test};
  for (const Dataset* d : all) {
    if (d->num_classes != p.source_train.num_classes) {
      throw FormatError(dir.string() + ": splits disagree on the number of classes");
    }
    if (!std::equal(d->images.shape().begin() + 1, d->images.shape().end(),
                    p.source_train.images.shape().begin() + 1)) {
      throw FormatError(dir.string() + ": splits disagree on the image extent");
    }
  }
  return p;
}

DomainPair load_training_view(const std::filesystem::path& dir) {
  DomainPair p = load_pair(dir);
  p.target_train = p.target_train.without_labels();
  return p;
}

// Batching -------------------------------------------------------------------

BatchIterator::BatchIterator(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : size_(dataset_size), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  if (dataset_size == 0) throw std::invalid_argument("cannot iterate an empty dataset");
  batches_per_epoch_ = (size_ + batch_size_ - 1) / batch_size_;
}

std::vector<std::size_t> BatchIterator::permutation(std::size_t epoch) const {
  if (epoch != cached_epoch_) {
    cached_.resize(size_);
    std::iota(cached_.begin(), cached_.end(), std::size_t{0});
    Rng rng(mix_seed(seed_, epoch));
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = size_; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(cached_[i - 1], cached_[j]);
    }
    cached_epoch_ = epoch;
  }
  return cached_;
}

std::vector<std::size_t> BatchIterator::batch(std::size_t step) const {
  const std::size_t epoch = step / batches_per_epoch_;
  const std::size_t first = (step % batches_per_epoch_) * batch_size_;
  const auto perm = permutation(epoch);
  const std::size_t last = std::min(first + batch_size_, size_);
  return {perm.begin() + static_cast<std::ptrdiff_t>(first), perm.begin() + static_cast<std::ptrdiff_t>(last)};
}

}  // namespace dcan::data
