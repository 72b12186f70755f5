#include "sfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sfl/module.hpp"

namespace sfl {

namespace {

// Library distributions are implementation-defined; these are not.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

double normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

constexpr double kClassMean[5][3] = {
    {0.15, 0.15, 0.20},  // background
    {0.70, 0.62, 0.55},  // outer ring
    {0.52, 0.42, 0.48},  // inner ring
    {0.32, 0.36, 0.42},  // interior
    {0.56, 0.48, 0.40},  // blob
};

// Generic pixel remap: out(y,x) = in(src(y,x)).
template <class F>
Sample remap(const Sample& s, int out_h, int out_w, F src) {
  Sample out;
  out.id = s.id;
  out.channels = s.channels;
  out.height = out_h;
  out.width = out_w;
  out.image.resize(static_cast<std::size_t>(s.channels) * out_h * out_w);
  out.mask.resize(static_cast<std::size_t>(out_h) * out_w);
  const std::size_t in_plane = static_cast<std::size_t>(s.height) * s.width;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const auto [sy, sx] = src(y, x);
      const std::size_t i = static_cast<std::size_t>(sy) * s.width + sx;
      const std::size_t o = static_cast<std::size_t>(y) * out_w + x;
      out.mask[o] = s.mask[i];
      for (int c = 0; c < s.channels; ++c) out.image[c * out_plane + o] = s.image[c * in_plane + i];
    }
  return out;
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

std::vector<Sample> generate_synthetic_dataset(int n, int size, std::uint64_t seed, const SyntheticOptions& options) {
  if (size < 16) throw ConfigError("synthetic dataset: size must be >= 16, got " + std::to_string(size));
  if (n < 0) throw ConfigError("synthetic dataset: n must be >= 0");
  if (options.num_classes != 5)
    throw ConfigError("synthetic dataset: only the 5-class layout is generated, got " +
                      std::to_string(options.num_classes));
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  const double S = size;
  for (int k = 0; k < n; ++k) {
    std::mt19937_64 rng(name_seed(seed, "synthetic/" + std::to_string(k)));
    Sample s;
    s.id = "syn" + std::to_string(k);
    s.channels = 3;
    s.height = s.width = size;
    s.image.resize(static_cast<std::size_t>(3) * size * size);
    s.mask.resize(static_cast<std::size_t>(size) * size);

    const double cx = uniform(rng, 0.38, 0.62) * S, cy = uniform(rng, 0.38, 0.62) * S;
    const double a = uniform(rng, 0.24, 0.36) * S, b = uniform(rng, 0.24, 0.36) * S;
    const double th = uniform(rng, 0.0, std::numbers::pi);
    const double ring1 = uniform(rng, 0.80, 0.90), ring2 = uniform(rng, 0.62, 0.74);
    // Blob: an ellipse in normalized coordinates, centred off-axis.
    const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double rho = uniform(rng, 0.15, 0.35);
    const double bx = rho * std::cos(phi), by = rho * std::sin(phi);
    const double ba = uniform(rng, 0.18, 0.30), bb = uniform(rng, 0.18, 0.30);
    double shade[5][3];
    for (int c = 0; c < 5; ++c)
      for (int ch = 0; ch < 3; ++ch) shade[c][ch] = kClassMean[c][ch] + options.intensity_jitter * normal(rng);

    const double ct = std::cos(th), st = std::sin(th);
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (ct * dx + st * dy) / a, v = (-st * dx + ct * dy) / b;
        const double r = std::sqrt(u * u + v * v);
        ClassId cls = 0;
        if (r <= 1.0) cls = 1;
        if (r <= ring1) cls = 2;
        if (r <= ring2) {
          cls = 3;
          const double qu = (u - bx) / ba, qv = (v - by) / bb;
          if (qu * qu + qv * qv <= 1.0) cls = 4;
        }
        const std::size_t i = static_cast<std::size_t>(y) * size + x;
        s.mask[i] = cls;
        for (int ch = 0; ch < 3; ++ch) {
          const double val = shade[cls][ch] + options.noise_std * normal(rng);
          s.image[ch * plane + i] = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
      }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

PartitionResult partition_dataset(const std::vector<Sample>& samples, const PartitionSpec& spec) {
  std::int64_t need = spec.test_count;
  for (int c : spec.client_counts) {
    if (c < 0) throw ConfigError("partition: negative client count");
    need += c;
  }
  if (spec.test_count < 0) throw ConfigError("partition: negative test count");
  if (need > static_cast<std::int64_t>(samples.size()))
    throw ConfigError("partition: counts need " + std::to_string(need) + " samples, dataset has " +
                      std::to_string(samples.size()));
  const auto perm = seeded_permutation(samples.size(), name_seed(spec.seed, "partition"));
  PartitionResult r;
  std::size_t pos = 0;
  for (int c : spec.client_counts) {
    std::vector<Sample> shard;
    for (int k = 0; k < c; ++k) shard.push_back(samples[perm[pos++]]);
    r.clients.push_back(std::move(shard));
  }
  for (int k = 0; k < spec.test_count; ++k) r.test.push_back(samples[perm[pos++]]);
  return r;
}

std::int64_t validation_count(std::int64_t n) {
  if (n < 2) return 0;
  return std::max<std::int64_t>(1, n * 15 / 100);
}

TrainVal train_val_split(const std::vector<Sample>& shard, std::uint64_t seed) {
  const auto perm = seeded_permutation(shard.size(), name_seed(seed, "train-val"));
  const auto nval = static_cast<std::size_t>(validation_count(static_cast<std::int64_t>(shard.size())));
  TrainVal tv;
  for (std::size_t k = 0; k < perm.size(); ++k) (k < perm.size() - nval ? tv.train : tv.val).push_back(shard[perm[k]]);
  return tv;
}

const std::vector<DatasetPreset>& dataset_presets() {
  static const std::vector<DatasetPreset> presets{
      {"synthetic-4client", {55, 45, 100, 150}, 50, 5},
      {"blastocyst-4client", {110, 90, 200, 300}, 101, 5},
      {"ham10k-10client", {1176, 588, 305, 941, 1058, 1294, 648, 942, 883, 1132}, 1000, 2},
      {"kvasir-4client", {125, 175, 275, 325}, 100, 2},
  };
  return presets;
}

const DatasetPreset& dataset_preset(const std::string& name) {
  for (const auto& p : dataset_presets())
    if (p.name == name) return p;
  throw ConfigError("unknown dataset preset '" + name + "'");
}

Sample hflip(const Sample& s) {
  return remap(s, s.height, s.width, [&](int y, int x) { return std::pair{y, s.width - 1 - x}; });
}

Sample vflip(const Sample& s) {
  return remap(s, s.height, s.width, [&](int y, int x) { return std::pair{s.height - 1 - y, x}; });
}

Sample rot90(const Sample& s, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  Sample out = s;
  for (int t = 0; t < k; ++t) {
    const Sample in = out;
    // Counter-clockwise: out(y, x) = in(x, W-1-y), output is W x H.
    out = remap(in, in.width, in.height, [&](int y, int x) { return std::pair{x, in.width - 1 - y}; });
  }
  return out;
}

Sample rotate_small(const Sample& s, double degrees) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(t), sn = std::sin(t);
  const double cy = (s.height - 1) / 2.0, cx = (s.width - 1) / 2.0;
  return remap(s, s.height, s.width, [&](int y, int x) {
    const double dx = x - cx, dy = y - cy;
    const double sx = c * dx + sn * dy + cx, sy = -sn * dx + c * dy + cy;
    return std::pair{reflect(static_cast<int>(std::lround(sy)), s.height),
                     reflect(static_cast<int>(std::lround(sx)), s.width)};
  });
}

Sample normalize(const Sample& s, const std::array<float, 3>& mean, const std::array<float, 3>& std) {
  Sample out = s;
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (int c = 0; c < s.channels; ++c) {
    const auto k = static_cast<std::size_t>(std::min(c, 2));
    for (std::size_t i = 0; i < plane; ++i) out.image[c * plane + i] = (s.image[c * plane + i] - mean[k]) / std[k];
  }
  return out;
}

Sample augment_sample(const Sample& s, const AugmentConfig& config, std::mt19937_64& rng) {
  Sample out = s;
  if (config.hflip_prob > 0 && uniform01(rng) < config.hflip_prob) out = hflip(out);
  if (config.vflip_prob > 0 && uniform01(rng) < config.vflip_prob) out = vflip(out);
  if (config.rot90 && out.height == out.width) out = rot90(out, static_cast<int>(rng() % 4));
  if (config.max_rotation_deg > 0) out = rotate_small(out, uniform(rng, -config.max_rotation_deg, config.max_rotation_deg));
  const std::size_t plane = static_cast<std::size_t>(out.height) * out.width;
  if (config.rgb_shift > 0)
    for (int c = 0; c < out.channels; ++c) {
      const float d = static_cast<float>(uniform(rng, -config.rgb_shift, config.rgb_shift));
      for (std::size_t i = 0; i < plane; ++i) out.image[c * plane + i] = std::clamp(out.image[c * plane + i] + d, 0.0f, 1.0f);
    }
  if (config.brightness > 0 || config.contrast > 0) {
    const double gain = 1.0 + uniform(rng, -config.contrast, config.contrast);
    const double bias = uniform(rng, -config.brightness, config.brightness);
    double mean = 0.0;
    for (float v : out.image) mean += v;
    mean /= static_cast<double>(std::max<std::size_t>(1, out.image.size()));
    for (auto& v : out.image) v = static_cast<float>(std::clamp((v - mean) * gain + mean + bias, 0.0, 1.0));
  }
  if (config.normalize) out = normalize(out, config.mean, config.std);
  return out;
}

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices, DType dtype) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const Sample& first = samples.at(indices[0]);
  const auto C = first.channels, H = first.height, W = first.width;
  const std::size_t per = static_cast<std::size_t>(C) * H * W;
  Batch b;
  b.images = Tensor::zeros({static_cast<std::int64_t>(indices.size()), C, H, W}, dtype);
  b.masks.reserve(indices.size() * static_cast<std::size_t>(H) * W);
  dispatch(dtype, [&]<class T>(T) {
    auto dst = b.images.data<T>();
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const Sample& s = samples.at(indices[k]);
      if (s.channels != C || s.height != H || s.width != W)
        throw ContractError("make_batch: sample '" + s.id + "' has a different shape than '" + first.id + "'");
      std::copy(s.image.begin(), s.image.end(), dst.begin() + static_cast<std::ptrdiff_t>(k * per));
      b.masks.insert(b.masks.end(), s.mask.begin(), s.mask.end());
    }
  });
  return b;
}

Batch make_batch(const std::vector<Sample>& samples, DType dtype) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(samples, idx, dtype);
}

}  // namespace sfl
