// Encoder with three decoders: reflectance (RGB), gray shading and the
// global illuminant color. Reflectance and shading decoders are U-Net style
// with concatenated skips; the illuminant decoder reads the deepest encoder
// features.
//
// Layer layout for depth D and channel schedule C[0..D]:
//
//   enc.0.a, enc.0.b            3x3 Conv+BN+ReLU, 3 -> C0 -> C0
//   enc.s.down (s = 1..D)       3x3 Conv stride 2, C[s-1] -> C[s-1]
//   enc.s.a, enc.s.b            3x3 Conv+BN+ReLU, C[s-1] -> C[s] -> C[s]
//   {refl,shad}.s.up (s < D)    4x4 transposed conv stride 2, C[s+1] -> C[s]
//   {refl,shad}.s.a, .s.b       3x3 Conv+BN+ReLU on [skip_s, up], 2C[s] -> C[s] -> C[s]
//   refl.head / shad.head       1x1 Conv+ReLU, C0 -> 3 / C0 -> 1
//   illum.a, illum.b            3x3 Conv+BN+ReLU, C[D] -> K -> K
//   illum.head                  global average pool, then 1x1 Conv+ReLU, K -> 3
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "iidnet/autodiff.hpp"
#include "iidnet/checkpoint.hpp"
#include "iidnet/image.hpp"
#include "iidnet/rng.hpp"

namespace iidnet {

using ad::Mode;

struct NetConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t depth = 3;
  std::vector<std::size_t> channels{32, 64, 128, 256};
  std::size_t illum_head_channels = 64;
  std::size_t shading_channels = 1;
  /// Start the illuminant head at c = (1, 1, 1): zero weights, unit bias.
  bool neutral_illuminant_init = true;

  /// 64x64 input, depth 3, (32, 64, 128, 256).
  static NetConfig desk() { return {}; }

  /// 256x256 input, depth 4, (64, 128, 256, 512, 1024).
  static NetConfig paper() {
    NetConfig c;
    c.input_height = c.input_width = 256;
    c.depth = 4;
    c.channels = {64, 128, 256, 512, 1024};
    return c;
  }

  std::size_t granularity() const { return std::size_t{1} << depth; }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (depth < 1 || depth > 8) out.push_back("net.depth must be in [1, 8]");
    if (channels.size() != depth + 1)
      out.push_back("net.channels must have depth + 1 = " + std::to_string(depth + 1) + " entries");
    for (auto c : channels)
      if (c == 0) out.push_back("net.channels entries must be positive");
    if (illum_head_channels == 0) out.push_back("net.illum_head_channels must be positive");
    if (shading_channels != 1 && shading_channels != 3)
      out.push_back("net.shading_channels must be 1 or 3");
    if (depth >= 1 && depth <= 8) {
      if (input_height == 0 || input_height % granularity() != 0)
        out.push_back("net.input_size height must be a positive multiple of 2^depth");
      if (input_width == 0 || input_width % granularity() != 0)
        out.push_back("net.input_size width must be a positive multiple of 2^depth");
    }
    return out;
  }

  void validate() const {
    auto p = problems();
    if (!p.empty()) throw ConfigError(std::move(p));
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"input_size", {c.input_height, c.input_width}},
       {"depth", c.depth},
       {"channels", c.channels},
       {"illum_head_channels", c.illum_head_channels},
       {"shading_channels", c.shading_channels},
       {"neutral_illuminant_init", c.neutral_illuminant_init}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  auto size = j.at("input_size");
  c.input_height = size.at(0).get<std::size_t>();
  c.input_width = size.at(1).get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.illum_head_channels = j.at("illum_head_channels").get<std::size_t>();
  c.shading_channels = j.value("shading_channels", std::size_t{1});
  c.neutral_illuminant_init = j.value("neutral_illuminant_init", true);
}

/// Estimated reflectance, gray shading and illuminant color of one image.
struct Decomposition {
  LinearImage reflectance;
  GrayMap gray_shading;
  ColorVec illuminant;
};

/// Batched network outputs: reflectance (N,3,H,W), shading (N,1,H,W),
/// illuminant (N,3).
template <class T>
struct DecompositionTensors {
  ad::Tensor<T> reflectance;
  ad::Tensor<T> shading;
  ad::Tensor<T> illuminant;
};

/// Every trainable tensor and batch-norm buffer of the network, by name.
template <class T>
class NetParams {
 public:
  NetParams() = default;
  explicit NetParams(NetConfig config) : config_(std::move(config)) {}

  const NetConfig& config() const { return config_; }

  ad::Param<T>& add_param(const std::string& name, ad::Shape shape) {
    if (index_.count(name)) throw StructuralError("duplicate parameter " + name);
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(shape));
    return params_.back();
  }
  ad::BatchNormState<T>& add_bn_state(const std::string& name, std::size_t channels) {
    if (bn_index_.count(name)) throw StructuralError("duplicate batch-norm layer " + name);
    bn_index_[name] = bn_names_.size();
    bn_names_.push_back(name);
    bn_states_.emplace_back(channels);
    return bn_states_.back();
  }

  ad::Param<T>& param(const std::string& name) { return params_.at(lookup(index_, name)); }
  const ad::Param<T>& param(const std::string& name) const { return params_.at(lookup(index_, name)); }
  const ad::Tensor<T>& tensor(const std::string& name) const { return param(name).tensor; }
  ad::BatchNormState<T>& bn_state(const std::string& name) { return bn_states_.at(lookup(bn_index_, name)); }
  const ad::BatchNormState<T>& bn_state(const std::string& name) const {
    return bn_states_.at(lookup(bn_index_, name));
  }

  std::vector<ad::Param<T>>& params() { return params_; }
  const std::vector<ad::Param<T>>& params() const { return params_; }
  const std::vector<std::string>& bn_names() const { return bn_names_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  bool all_finite() const {
    for (const auto& p : params_)
      for (T v : p.tensor.value())
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  static std::size_t lookup(const std::map<std::string, std::size_t>& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw StructuralError("unknown layer " + name);
    return it->second;
  }

  NetConfig config_;
  std::vector<ad::Param<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> bn_names_;
  std::vector<ad::BatchNormState<T>> bn_states_;
  std::map<std::string, std::size_t> bn_index_;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
  return h;
}

struct LayerSpec {
  enum Kind { Conv, ConvTranspose, BatchNorm } kind;
  std::string name;
  std::size_t in, out, kernel, stride;
};

/// Layers in a fixed order; parameters are created in this order.
inline std::vector<LayerSpec> layer_specs(const NetConfig& cfg) {
  std::vector<LayerSpec> out;
  auto cbr = [&](const std::string& name, std::size_t in, std::size_t o) {
    out.push_back({LayerSpec::Conv, name + ".conv", in, o, 3, 1});
    out.push_back({LayerSpec::BatchNorm, name + ".bn", o, o, 0, 0});
  };
  const auto& ch = cfg.channels;
  cbr("enc.0.a", 3, ch[0]);
  cbr("enc.0.b", ch[0], ch[0]);
  for (std::size_t s = 1; s <= cfg.depth; ++s) {
    const std::string p = "enc." + std::to_string(s);
    out.push_back({LayerSpec::Conv, p + ".down", ch[s - 1], ch[s - 1], 3, 2});
    cbr(p + ".a", ch[s - 1], ch[s]);
    cbr(p + ".b", ch[s], ch[s]);
  }
  for (const std::string dec : {"refl", "shad"}) {
    for (std::size_t s = cfg.depth; s-- > 0;) {
      const std::string p = dec + "." + std::to_string(s);
      out.push_back({LayerSpec::ConvTranspose, p + ".up", ch[s + 1], ch[s], 4, 2});
      cbr(p + ".a", 2 * ch[s], ch[s]);
      cbr(p + ".b", ch[s], ch[s]);
    }
    const std::size_t head_out = dec == "refl" ? 3 : cfg.shading_channels;
    out.push_back({LayerSpec::Conv, dec + ".head", ch[0], head_out, 1, 1});
  }
  cbr("illum.a", ch[cfg.depth], cfg.illum_head_channels);
  cbr("illum.b", cfg.illum_head_channels, cfg.illum_head_channels);
  out.push_back({LayerSpec::Conv, "illum.head", cfg.illum_head_channels, 3, 1, 1});
  return out;
}

template <class T>
void create_layers(NetParams<T>& p) {
  for (const auto& l : layer_specs(p.config())) {
    switch (l.kind) {
      case LayerSpec::Conv:
        p.add_param(l.name + ".weight", {l.out, l.in, l.kernel, l.kernel});
        p.add_param(l.name + ".bias", {l.out});
        break;
      case LayerSpec::ConvTranspose:
        p.add_param(l.name + ".weight", {l.in, l.out, l.kernel, l.kernel});
        p.add_param(l.name + ".bias", {l.out});
        break;
      case LayerSpec::BatchNorm:
        p.add_param(l.name + ".gamma", {l.out});
        p.add_param(l.name + ".beta", {l.out});
        p.add_bn_state(l.name, l.out);
        break;
    }
  }
}

}  // namespace detail

/// He initialization: weights ~ N(0, 2 / fan_in), biases 0, BN gamma 1 and
/// beta 0. fan_in counts the inputs feeding one output value: C_in * k^2 for
/// a convolution and C_in * (k / stride)^2 for a transposed convolution.
/// Each tensor draws from its own stream keyed by (seed, name).
template <class T>
NetParams<T> init(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  NetParams<T> p(config);
  detail::create_layers(p);
  for (const auto& l : detail::layer_specs(config)) {
    if (l.kind == detail::LayerSpec::BatchNorm) {
      auto g = p.param(l.name + ".gamma").tensor.mutable_value();
      std::fill(g.begin(), g.end(), T(1));
      continue;
    }
    const double fan_in = l.kind == detail::LayerSpec::Conv
                              ? static_cast<double>(l.in * l.kernel * l.kernel)
                              : static_cast<double>(l.in * l.kernel * l.kernel) /
                                    static_cast<double>(l.stride * l.stride);
    const double stddev = std::sqrt(2.0 / fan_in);
    Rng rng = Rng::stream({seed, detail::fnv1a(l.name + ".weight")});
    auto w = p.param(l.name + ".weight").tensor.mutable_value();
    for (T& v : w) v = static_cast<T>(rng.normal(0.0, stddev));
  }
  if (config.neutral_illuminant_init) {
    auto w = p.param("illum.head.weight").tensor.mutable_value();
    std::fill(w.begin(), w.end(), T(0));
    auto b = p.param("illum.head.bias").tensor.mutable_value();
    std::fill(b.begin(), b.end(), T(1));
  }
  return p;
}

namespace detail {

template <class T>
ad::Tensor<T> conv(NetParams<T>& p, const std::string& name, const ad::Tensor<T>& x, std::size_t stride,
                   std::size_t padding) {
  return ad::conv2d(x, p.tensor(name + ".weight"), p.tensor(name + ".bias"), stride, padding);
}

template <class T>
ad::Tensor<T> conv_bn_relu(NetParams<T>& p, const std::string& name, const ad::Tensor<T>& x, Mode mode) {
  auto y = conv(p, name + ".conv", x, 1, 1);
  y = ad::batch_norm(y, p.tensor(name + ".bn.gamma"), p.tensor(name + ".bn.beta"), p.bn_state(name + ".bn"),
                     mode);
  return ad::relu(y);
}

template <class T>
ad::Tensor<T> image_decoder(NetParams<T>& p, const std::string& dec, const std::vector<ad::Tensor<T>>& skips,
                            const ad::Tensor<T>& bottleneck, Mode mode) {
  const std::size_t depth = p.config().depth;
  ad::Tensor<T> x = bottleneck;
  for (std::size_t s = depth; s-- > 0;) {
    const std::string pre = dec + "." + std::to_string(s);
    auto up = ad::conv_transpose2d(x, p.tensor(pre + ".up.weight"), p.tensor(pre + ".up.bias"), 2, 1);
    x = ad::concat_channels(skips[s], up);
    x = conv_bn_relu(p, pre + ".a", x, mode);
    x = conv_bn_relu(p, pre + ".b", x, mode);
  }
  return ad::relu(conv(p, dec + ".head", x, 1, 0));
}

}  // namespace detail

/// Runs the network on x (N, 3, H, W). H and W must be multiples of 2^depth.
template <class T>
DecompositionTensors<T> forward(NetParams<T>& p, const ad::Tensor<T>& x, Mode mode) {
  const NetConfig& cfg = p.config();
  if (x.rank() != 4 || x.dim(1) != 3)
    throw StructuralError("network input must be (N, 3, H, W), got " + ad::to_string(x.shape()));
  const std::size_t gran = cfg.granularity();
  if (x.dim(2) == 0 || x.dim(3) == 0 || x.dim(2) % gran != 0 || x.dim(3) % gran != 0)
    throw StructuralError("input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                          " is not a multiple of " + std::to_string(gran) + " in both dimensions");

  std::vector<ad::Tensor<T>> skips;
  ad::Tensor<T> h = detail::conv_bn_relu(p, "enc.0.a", x, mode);
  h = detail::conv_bn_relu(p, "enc.0.b", h, mode);
  for (std::size_t s = 1; s <= cfg.depth; ++s) {
    skips.push_back(h);
    const std::string pre = "enc." + std::to_string(s);
    h = detail::conv(p, pre + ".down", h, 2, 1);
    h = detail::conv_bn_relu(p, pre + ".a", h, mode);
    h = detail::conv_bn_relu(p, pre + ".b", h, mode);
  }

  DecompositionTensors<T> out;
  out.reflectance = detail::image_decoder(p, "refl", skips, h, mode);
  out.shading = detail::image_decoder(p, "shad", skips, h, mode);

  ad::Tensor<T> c = detail::conv_bn_relu(p, "illum.a", h, mode);
  c = detail::conv_bn_relu(p, "illum.b", c, mode);
  c = ad::global_avg_pool(c);
  c = ad::reshape(c, {c.dim(0), c.dim(1), 1, 1});
  c = ad::relu(detail::conv(p, "illum.head", c, 1, 0));
  out.illuminant = ad::reshape(c, {c.dim(0), 3});
  return out;
}

/// Differentiable reconstruction: I_hat = (S * c) (.) R, per pixel.
template <class T>
ad::Tensor<T> reconstruct(const DecompositionTensors<T>& d) {
  return ad::scale_pixels(ad::scale_channels(d.reflectance, d.illuminant), d.shading);
}

/// I_hat(x, y) = (S(x, y) * c) (.) R(x, y).
inline LinearImage reconstruct(const Decomposition& d) {
  require_same_dims(d.reflectance, d.gray_shading, "reconstruct");
  LinearImage out(d.reflectance.height(), d.reflectance.width());
  for (std::size_t y = 0; y < out.height(); ++y)
    for (std::size_t x = 0; x < out.width(); ++x) {
      const double s = d.gray_shading(y, x);
      for (std::size_t k = 0; k < 3; ++k) out(y, x, k) = (s * d.illuminant[k]) * d.reflectance(y, x, k);
    }
  return out;
}

/// Stacks same-sized images into an (N, 3, H, W) tensor.
template <class T>
ad::Tensor<T> images_to_tensor(const std::vector<LinearImage>& images, bool requires_grad = false) {
  if (images.empty()) throw StructuralError("images_to_tensor: empty batch");
  const std::size_t h = images[0].height(), w = images[0].width();
  std::vector<T> v(images.size() * 3 * h * w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    require_same_dims(images[0], images[n], "images_to_tensor");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          v[((n * 3 + c) * h + y) * w + x] = static_cast<T>(images[n](y, x, c));
  }
  return ad::Tensor<T>::from({images.size(), 3, h, w}, std::move(v), requires_grad);
}

template <class T>
LinearImage tensor_to_image(const ad::Tensor<T>& t, std::size_t n) {
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
  if (c != 3) throw StructuralError("tensor_to_image: expected 3 channels");
  LinearImage out(h, w);
  auto v = t.value();
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out(y, x, k) = static_cast<double>(v[((n * c + k) * h + y) * w + x]);
  return out;
}

/// Gray map from a 1-channel tensor, or the luminance of a 3-channel one.
template <class T>
GrayMap tensor_to_gray(const ad::Tensor<T>& t, std::size_t n) {
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
  GrayMap out(h, w);
  auto v = t.value();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      if (c == 1)
        s = static_cast<double>(v[(n * h + y) * w + x]);
      else
        for (std::size_t k = 0; k < 3; ++k)
          s += kLuminanceWeights[k] * static_cast<double>(v[((n * c + k) * h + y) * w + x]);
      out(y, x) = s;
    }
  return out;
}

template <class T>
std::vector<Decomposition> to_decompositions(const DecompositionTensors<T>& d) {
  std::vector<Decomposition> out;
  const std::size_t n = d.reflectance.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    Decomposition dec;
    dec.reflectance = tensor_to_image(d.reflectance, i);
    dec.gray_shading = tensor_to_gray(d.shading, i);
    auto c = d.illuminant.value();
    dec.illuminant = {static_cast<double>(c[i * 3]), static_cast<double>(c[i * 3 + 1]),
                      static_cast<double>(c[i * 3 + 2])};
    out.push_back(std::move(dec));
  }
  return out;
}

/// Eval-mode decomposition of a batch of same-sized images.
template <class T>
std::vector<Decomposition> decompose(NetParams<T>& p, const std::vector<LinearImage>& images) {
  ad::NoGradGuard guard;
  return to_decompositions(forward(p, images_to_tensor<T>(images), Mode::Eval));
}

template <class T>
Decomposition decompose(NetParams<T>& p, const LinearImage& image) {
  return decompose(p, std::vector<LinearImage>{image}).front();
}

// ---------------------------------------------------------------------------
// Checkpoint I/O. Values are stored as float32.

inline const std::string kAdamFirstPrefix = "adam.m/";
inline const std::string kAdamSecondPrefix = "adam.v/";

template <class T>
Checkpoint to_checkpoint(const NetParams<T>& p, bool with_optimizer_state) {
  Checkpoint ck;
  ck.meta["format"] = "iidnet";
  ck.meta["net"] = p.config();
  auto add = [&](const std::string& name, const ad::Shape& shape, auto values) {
    NamedArray a;
    a.name = name;
    for (auto d : shape) a.shape.push_back(d);
    for (auto v : values) a.values.push_back(static_cast<float>(v));
    ck.arrays.push_back(std::move(a));
  };
  for (const auto& prm : p.params()) add(prm.name, prm.tensor.shape(), prm.tensor.value());
  for (const auto& name : p.bn_names()) {
    const auto& st = p.bn_state(name);
    add(name + ".running_mean", {st.running_mean.size()}, st.running_mean);
    add(name + ".running_var", {st.running_var.size()}, st.running_var);
  }
  if (with_optimizer_state)
    for (const auto& prm : p.params()) {
      add(kAdamFirstPrefix + prm.name, prm.tensor.shape(), prm.first_moment);
      add(kAdamSecondPrefix + prm.name, prm.tensor.shape(), prm.second_moment);
    }
  return ck;
}

/// Rebuilds parameters from a checkpoint. Every expected array must be
/// present with the expected shape; nothing is returned on failure.
template <class T>
NetParams<T> from_checkpoint(const Checkpoint& ck, const std::string& origin = "<checkpoint>") {
  if (!ck.meta.contains("net")) throw CorruptFileError(origin + ": checkpoint has no network config");
  NetConfig cfg;
  try {
    cfg = ck.meta.at("net").get<NetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(origin + ": bad network config: " + e.what());
  }
  NetParams<T> p(cfg);
  detail::create_layers(p);
  auto fetch = [&](const std::string& name, std::size_t count, auto out, bool required) {
    const NamedArray* a = ck.find(name);
    if (!a) {
      if (required) throw CorruptFileError(origin + ": missing array " + name);
      return;
    }
    if (a->values.size() != count) throw CorruptFileError(origin + ": array " + name + " has wrong size");
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(a->values[i]);
  };
  for (auto& prm : p.params()) {
    const NamedArray* a = ck.find(prm.name);
    if (a) {
      ad::Shape shape(a->shape.begin(), a->shape.end());
      if (shape != prm.tensor.shape())
        throw CorruptFileError(origin + ": array " + prm.name + " has shape " + ad::to_string(shape) +
                               ", expected " + ad::to_string(prm.tensor.shape()));
    }
    fetch(prm.name, prm.numel(), prm.tensor.mutable_value().begin(), true);
    fetch(kAdamFirstPrefix + prm.name, prm.numel(), prm.first_moment.begin(), false);
    fetch(kAdamSecondPrefix + prm.name, prm.numel(), prm.second_moment.begin(), false);
  }
  for (const auto& name : p.bn_names()) {
    auto& st = p.bn_state(name);
    fetch(name + ".running_mean", st.running_mean.size(), st.running_mean.begin(), true);
    fetch(name + ".running_var", st.running_var.size(), st.running_var.begin(), true);
  }
  return p;
}

template <class T>
void save(const NetParams<T>& p, const std::filesystem::path& path, const nlohmann::json& extra_meta = {},
          bool with_optimizer_state = false) {
  Checkpoint ck = to_checkpoint(p, with_optimizer_state);
  if (extra_meta.is_object())
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) ck.meta[it.key()] = it.value();
  write_checkpoint(path, ck);
}

template <class T = float>
NetParams<T> load(const std::filesystem::path& path) {
  return from_checkpoint<T>(read_checkpoint(path), path.string());
}

}  // namespace iidnet
