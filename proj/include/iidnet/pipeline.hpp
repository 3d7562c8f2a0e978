// Training and evaluation drivers: configuration, augmentation, Adam, the
// two-view training step, the epoch loop with checkpoint/resume, and the
// evaluation and LMSE harnesses.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "iidnet/autodiff.hpp"
#include "iidnet/errors.hpp"
#include "iidnet/illum_sim.hpp"
#include "iidnet/image.hpp"
#include "iidnet/image_io.hpp"
#include "iidnet/losses.hpp"
#include "iidnet/metrics.hpp"
#include "iidnet/network.hpp"
#include "iidnet/rng.hpp"

namespace iidnet {

// ---------------------------------------------------------------------------
// Configuration

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 4;
  std::size_t patch_size = 64;
  double scale_min = 0.6;
  double scale_max = 1.0;
  double hflip_prob = 0.5;
  AdamConfig adam;
  std::uint64_t seed = 0;
  NetConfig net = NetConfig::desk();
  LossWeights weights;
  std::string dataset_dir;
  std::string checkpoint_path;
  std::string log_path;
  /// Write the checkpoint every this many epochs (and always after the last).
  std::size_t checkpoint_every = 1;

  static TrainConfig desk() { return {}; }

  static TrainConfig paper() {
    TrainConfig c;
    c.patch_size = 256;
    c.net = NetConfig::paper();
    return c;
  }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (batch_size == 0) out.push_back("batch_size must be positive");
    if (patch_size == 0) out.push_back("patch_size must be positive");
    if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
      out.push_back("scale_range must satisfy 0 < min <= max <= 1");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) out.push_back("hflip_prob must be in [0, 1]");
    if (!(adam.lr > 0.0 && std::isfinite(adam.lr))) out.push_back("adam.lr must be positive and finite");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) out.push_back("adam.beta1 must be in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) out.push_back("adam.beta2 must be in [0, 1)");
    if (!(adam.eps > 0.0 && std::isfinite(adam.eps))) out.push_back("adam.eps must be positive and finite");
    if (checkpoint_every == 0) out.push_back("checkpoint_every must be positive");
    for (auto& p : net.problems()) out.push_back(p);
    for (auto& p : weights.problems()) out.push_back(p);
    if (net.depth >= 1 && net.depth <= 8 && patch_size % net.granularity() != 0)
      out.push_back("patch_size " + std::to_string(patch_size) + " must be divisible by 2^net.depth = " +
                    std::to_string(net.granularity()));
    return out;
  }

  void validate() const {
    auto p = problems();
    if (!p.empty()) throw ConfigError(std::move(p));
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"patch_size", c.patch_size},
       {"scale_range", {c.scale_min, c.scale_max}},
       {"hflip_prob", c.hflip_prob},
       {"adam", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
       {"seed", c.seed},
       {"net", c.net},
       {"loss", c.weights},
       {"dataset_dir", c.dataset_dir},
       {"checkpoint", c.checkpoint_path},
       {"log", c.log_path},
       {"checkpoint_every", c.checkpoint_every}};
}

namespace detail {

/// Reads typed fields out of a JSON object, collecting every problem instead
/// of stopping at the first one.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string prefix, std::vector<std::string>& problems)
      : j_(j), prefix_(std::move(prefix)), problems_(problems) {
    if (!j_.is_object()) problems_.push_back(where("") + "must be a JSON object");
  }

  template <class U>
  void read(const std::string& key, U& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<U, bool>) {
      if (!v.is_boolean()) return bad(key, "a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<U>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
        return bad(key, "a non-negative integer");
      out = v.get<U>();
    } else if constexpr (std::is_floating_point_v<U>) {
      if (!v.is_number()) return bad(key, "a number");
      out = v.get<U>();
    } else if constexpr (std::is_same_v<U, std::string>) {
      if (!v.is_string()) return bad(key, "a string");
      out = v.get<std::string>();
    } else {
      static_assert(sizeof(U) == 0, "unsupported field type");
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void reject_unknown() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) problems_.push_back(where(it.key()) + "unknown key");
  }

  std::string where(const std::string& key) const {
    std::string path = prefix_.empty() ? key : (key.empty() ? prefix_ : prefix_ + "." + key);
    return path.empty() ? "" : path + ": ";
  }

 private:
  void bad(const std::string& key, const char* expected) {
    problems_.push_back(where(key) + "must be " + expected);
  }

  const nlohmann::json& j_;
  std::string prefix_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Builds a TrainConfig from JSON. An optional "preset" ("desk" or "paper")
/// supplies defaults; every other key overrides it. All problems (unknown
/// keys, wrong types, out-of-range values) are reported together.
inline TrainConfig parse_train_config(const nlohmann::json& j) {
  std::vector<std::string> problems;
  TrainConfig c;
  detail::FieldReader r(j, "", problems);
  std::string preset = "desk";
  r.read("preset", preset);
  if (preset == "paper")
    c = TrainConfig::paper();
  else if (preset != "desk")
    problems.push_back("preset: must be \"desk\" or \"paper\"");

  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("patch_size", c.patch_size);
  r.read("hflip_prob", c.hflip_prob);
  r.read("seed", c.seed);
  r.read("dataset_dir", c.dataset_dir);
  r.read("checkpoint", c.checkpoint_path);
  r.read("log", c.log_path);
  r.read("checkpoint_every", c.checkpoint_every);
  if (const auto* s = r.child("scale_range")) {
    if (s->is_array() && s->size() == 2 && (*s)[0].is_number() && (*s)[1].is_number()) {
      c.scale_min = (*s)[0].get<double>();
      c.scale_max = (*s)[1].get<double>();
    } else {
      problems.push_back("scale_range: must be a [min, max] pair of numbers");
    }
  }
  if (const auto* a = r.child("adam")) {
    detail::FieldReader ar(*a, "adam", problems);
    ar.read("lr", c.adam.lr);
    ar.read("beta1", c.adam.beta1);
    ar.read("beta2", c.adam.beta2);
    ar.read("eps", c.adam.eps);
    ar.reject_unknown();
  }
  if (const auto* l = r.child("loss")) {
    detail::FieldReader lr(*l, "loss", problems);
    lr.read("lambda1", c.weights.reconst_l1);
    lr.read("lambda2", c.weights.reconst_cos);
    lr.read("lambda3", c.weights.reflect_pair);
    lr.read("lambda4", c.weights.luminance);
    lr.read("lambda5", c.weights.illuminant);
    lr.reject_unknown();
  }
  bool input_size_given = false;
  if (const auto* n = r.child("net")) {
    detail::FieldReader nr(*n, "net", problems);
    nr.read("depth", c.net.depth);
    nr.read("illum_head_channels", c.net.illum_head_channels);
    nr.read("shading_channels", c.net.shading_channels);
    nr.read("neutral_illuminant_init", c.net.neutral_illuminant_init);
    if (const auto* ch = nr.child("channels")) {
      if (ch->is_array() && std::all_of(ch->begin(), ch->end(), [](const auto& v) { return v.is_number_unsigned(); }))
        c.net.channels = ch->get<std::vector<std::size_t>>();
      else
        problems.push_back("net.channels: must be an array of positive integers");
    }
    if (const auto* sz = nr.child("input_size")) {
      input_size_given = true;
      if (sz->is_array() && sz->size() == 2 && (*sz)[0].is_number_unsigned() && (*sz)[1].is_number_unsigned()) {
        c.net.input_height = (*sz)[0].get<std::size_t>();
        c.net.input_width = (*sz)[1].get<std::size_t>();
      } else {
        problems.push_back("net.input_size: must be an [H, W] pair of positive integers");
      }
    }
    nr.reject_unknown();
  }
  r.reject_unknown();
  if (!input_size_given) c.net.input_height = c.net.input_width = c.patch_size;
  else if (c.net.input_height != c.patch_size || c.net.input_width != c.patch_size)
    problems.push_back("net.input_size: must equal [patch_size, patch_size] for training");

  for (auto& p : c.problems()) problems.push_back(p);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({path.string() + ": not valid JSON: " + e.what()});
  }
  return parse_train_config(j);
}

// ---------------------------------------------------------------------------
// Dataset

struct DatasetEntry {
  std::filesystem::path path;
  bool valid = false;
  std::string message;
};

/// Linear-RGB PFM files of a directory, sorted by file name, each checked by
/// parsing it. Valid images are kept in memory.
class DatasetIndex {
 public:
  static DatasetIndex scan(const std::filesystem::path& dir, std::size_t min_side = 0) {
    if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".pfm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    DatasetIndex idx;
    for (const auto& f : files) {
      DatasetEntry entry{f, false, ""};
      try {
        LinearImage img = read_linear_image(f);
        if (std::min(img.height(), img.width()) < min_side) {
          entry.message = "image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                          " is smaller than the minimum side " + std::to_string(min_side);
        } else {
          entry.valid = true;
          idx.images_.push_back(std::move(img));
        }
      } catch (const Error& e) {
        entry.message = e.what();
      }
      idx.entries_.push_back(std::move(entry));
    }
    return idx;
  }

  const std::vector<DatasetEntry>& entries() const { return entries_; }
  /// Images of the valid entries, in entry order.
  const std::vector<LinearImage>& images() const { return images_; }

 private:
  std::vector<DatasetEntry> entries_;
  std::vector<LinearImage> images_;
};

// ---------------------------------------------------------------------------
// Augmentation

/// One augmentation draw: rescale, crop origin in the rescaled image, flip.
struct AugmentDraw {
  double scale = 1.0;
  std::size_t crop_y = 0;
  std::size_t crop_x = 0;
  bool flip = false;
};

/// Smallest source side that still yields a full patch at the minimum scale.
inline std::size_t min_source_side(const TrainConfig& cfg) {
  return static_cast<std::size_t>(std::ceil(static_cast<double>(cfg.patch_size) / cfg.scale_min - 1e-9));
}

inline std::pair<std::size_t, std::size_t> scaled_dims(std::size_t h, std::size_t w, double scale,
                                                        std::size_t patch) {
  auto dim = [&](std::size_t d) {
    return std::max(patch, static_cast<std::size_t>(std::lround(static_cast<double>(d) * scale)));
  };
  return {dim(h), dim(w)};
}

/// Draws scale ~ U[scale_min, scale_max], a uniform crop origin and a flip.
/// Returns nothing when the image is too small for a patch at minimum scale.
inline std::optional<AugmentDraw> draw_augment(std::size_t h, std::size_t w, Rng& rng, const TrainConfig& cfg) {
  if (std::min(h, w) < min_source_side(cfg)) return std::nullopt;
  AugmentDraw d;
  d.scale = cfg.scale_min == cfg.scale_max ? cfg.scale_min : rng.uniform(cfg.scale_min, cfg.scale_max);
  const auto [sh, sw] = scaled_dims(h, w, d.scale, cfg.patch_size);
  d.crop_y = rng.below(sh - cfg.patch_size + 1);
  d.crop_x = rng.below(sw - cfg.patch_size + 1);
  d.flip = rng.bernoulli(cfg.hflip_prob);
  return d;
}

/// Aspect-preserving bilinear rescale, crop to patch_size^2, optional flip.
inline LinearImage apply_augment(const LinearImage& img, const AugmentDraw& d, std::size_t patch) {
  const auto [sh, sw] = scaled_dims(img.height(), img.width(), d.scale, patch);
  if (d.crop_y + patch > sh || d.crop_x + patch > sw) throw StructuralError("augment: crop outside image");
  LinearImage scaled = (sh == img.height() && sw == img.width()) ? img : resize_bilinear(img, sh, sw);
  LinearImage out = crop(scaled, d.crop_y, d.crop_x, patch, patch);
  return d.flip ? flip_horizontal(out) : out;
}

/// Random training patch, or nothing (skip with a warning) if img is too small.
inline std::optional<LinearImage> augment(const LinearImage& img, Rng& rng, const TrainConfig& cfg) {
  auto d = draw_augment(img.height(), img.width(), rng, cfg);
  if (!d) return std::nullopt;
  return apply_augment(img, *d, cfg.patch_size);
}

// ---------------------------------------------------------------------------
// Adam

/// One bias-corrected Adam update of a flat parameter block at step t >= 1.
template <class T>
void adam_update(std::span<T> values, std::span<const T> grads, std::span<T> m, std::span<T> v, std::size_t t,
                 const AdamConfig& cfg) {
  if (t == 0) throw StructuralError("adam: step counter starts at 1");
  if (grads.size() != values.size() || m.size() != values.size() || v.size() != values.size())
    throw StructuralError("adam: state size mismatch");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double m_hat = mi / c1, v_hat = vi / c2;
    values[i] = static_cast<T>(static_cast<double>(values[i]) - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

/// Updates every parameter from its accumulated gradient. Any non-finite
/// gradient aborts the step before a single value changes.
template <class T>
void adam_step(std::vector<ad::Param<T>>& params, std::size_t t, const AdamConfig& cfg) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NumericError("non-finite gradient " + std::to_string(static_cast<double>(g[i])) + " in " + p.name +
                           "[" + std::to_string(i) + "] at step " + std::to_string(t));
  }
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    std::vector<T> grad(p.tensor.grad().begin(), p.tensor.grad().end());
    adam_update<T>(p.tensor.mutable_value(), grad, p.first_moment, p.second_moment, t, cfg);
  }
}

// ---------------------------------------------------------------------------
// Training step

/// Simulated inputs of one step: view k of every source, plus the colors.
struct ViewPairs {
  std::vector<LinearImage> first, second;
  std::vector<ColorVec> first_color, second_color;
};

/// Two random illumination views per source patch, drawn in order from rng.
inline ViewPairs make_view_pairs(const std::vector<LinearImage>& patches, Rng& rng) {
  ViewPairs out;
  for (const auto& p : patches) {
    auto views = generate_views(p, rng, 2);
    out.first.push_back(std::move(views[0].image));
    out.second.push_back(std::move(views[1].image));
    out.first_color.push_back(views[0].condition.color);
    out.second_color.push_back(views[1].condition.color);
  }
  return out;
}

template <class T>
ad::Tensor<T> colors_to_tensor(const std::vector<ColorVec>& colors) {
  std::vector<T> v;
  for (const auto& c : colors)
    for (std::size_t k = 0; k < 3; ++k) v.push_back(static_cast<T>(c[k]));
  return ad::Tensor<T>::from({colors.size(), 3}, std::move(v));
}

/// Loss of a batch of view pairs. Both views go through the network in one
/// stacked batch, so batch-norm statistics cover all 2B images.
template <class T>
tl::LossTerms<T> pair_loss(NetParams<T>& params, const ViewPairs& pairs, const LossWeights& w, Mode mode) {
  const std::size_t b = pairs.first.size();
  std::vector<LinearImage> stacked = pairs.first;
  stacked.insert(stacked.end(), pairs.second.begin(), pairs.second.end());
  const auto x = images_to_tensor<T>(stacked);
  const auto d = forward(params, x, mode);
  auto half = [&](std::size_t lo, std::size_t hi) {
    return DecompositionTensors<T>{ad::slice_batch(d.reflectance, lo, hi), ad::slice_batch(d.shading, lo, hi),
                                   ad::slice_batch(d.illuminant, lo, hi)};
  };
  return tl::total_loss(ad::slice_batch(x, 0, b), ad::slice_batch(x, b, 2 * b), half(0, b), half(b, 2 * b),
                        colors_to_tensor<T>(pairs.first_color), colors_to_tensor<T>(pairs.second_color), w);
}

/// One optimization step on a batch of source patches: draw two views per
/// patch, decompose, evaluate the objective, backpropagate, apply Adam at
/// step t (1-based).
template <class T>
LossBreakdown train_step(NetParams<T>& params, const std::vector<LinearImage>& patches, Rng& rng,
                         const TrainConfig& cfg, std::size_t t) {
  if (patches.empty()) throw StructuralError("train_step: empty batch");
  const ViewPairs pairs = make_view_pairs(patches, rng);
  params.zero_grad();
  auto loss = pair_loss(params, pairs, cfg.weights, Mode::Train);
  if (!std::isfinite(loss.breakdown.total))
    throw NumericError("non-finite loss at step " + std::to_string(t));
  ad::backward(loss.total);
  adam_step(params.params(), t, cfg.adam);
  if (!params.all_finite()) throw NumericError("non-finite parameter after step " + std::to_string(t));
  return loss.breakdown;
}

// ---------------------------------------------------------------------------
// Training loop

struct LogEntry {
  std::size_t epoch = 0;  // 0-based
  std::size_t step = 0;   // within the epoch
  std::size_t global_step = 0;
  LossBreakdown loss;
};

inline nlohmann::json to_json_line(const LogEntry& e) {
  nlohmann::json j = e.loss;
  j["epoch"] = e.epoch;
  j["step"] = e.step;
  j["global_step"] = e.global_step;
  return j;
}

struct TrainState {
  std::size_t epochs_done = 0;
  std::size_t global_step = 0;
};

struct TrainOptions {
  /// Continue from this checkpoint (written by a run with the same config,
  /// apart from the epoch count).
  std::string resume_from;
  /// Called after every step.
  std::function<void(const LogEntry&)> on_step;
  bool verbose = false;
};

struct TrainResult {
  NetParams<float> params;
  TrainState state;
  std::vector<LogEntry> log;  // entries of this invocation only
};

namespace detail {

inline constexpr std::uint64_t kShuffleStream = 0x5817ull;
inline constexpr std::uint64_t kStepStream = 0x57E9ull;

/// Config fields that must match for a resumed run to continue identically.
inline nlohmann::json resume_signature(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("epochs");
  j.erase("checkpoint");
  j.erase("log");
  j.erase("checkpoint_every");
  return j;
}

inline nlohmann::json train_meta(const TrainConfig& cfg, const TrainState& st) {
  nlohmann::json cfg_json = cfg;
  return {{"train",
           {{"epochs_done", st.epochs_done}, {"global_step", st.global_step}, {"config", cfg_json}}}};
}

}  // namespace detail

/// Sample order of one epoch; depends only on (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream({seed, detail::kShuffleStream, epoch});
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

inline std::size_t steps_per_epoch(std::size_t images, std::size_t batch) { return (images + batch - 1) / batch; }

/// Runs epochs [start, cfg.epochs) over the given images. Every step draws
/// from its own stream keyed by (seed, epoch, step), so a resumed run repeats
/// the uninterrupted one exactly.
inline TrainResult train_on(const TrainConfig& cfg, const std::vector<LinearImage>& images,
                            const TrainOptions& opt = {}) {
  cfg.validate();
  if (images.empty()) throw ConfigError({"dataset is empty"});

  TrainResult res;
  if (!opt.resume_from.empty()) {
    Checkpoint ck = read_checkpoint(opt.resume_from);
    if (!ck.meta.contains("train")) throw CorruptFileError(opt.resume_from + ": not a training checkpoint");
    const auto& t = ck.meta.at("train");
    if (detail::resume_signature(parse_train_config(t.at("config"))) != detail::resume_signature(cfg))
      throw ConfigError({"resume: checkpoint was written with a different configuration"});
    res.params = from_checkpoint<float>(ck, opt.resume_from);
    res.state.epochs_done = t.at("epochs_done").get<std::size_t>();
    res.state.global_step = t.at("global_step").get<std::size_t>();
  } else {
    res.params = init<float>(cfg.net, cfg.seed);
  }

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, opt.resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open log " + cfg.log_path);
  }
  auto save_ckpt = [&] {
    if (!cfg.checkpoint_path.empty())
      save(res.params, cfg.checkpoint_path, detail::train_meta(cfg, res.state), true);
  };

  const std::size_t steps = steps_per_epoch(images.size(), cfg.batch_size);
  if (res.state.epochs_done >= cfg.epochs) save_ckpt();
  for (std::size_t epoch = res.state.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, images.size());
    for (std::size_t s = 0; s < steps; ++s) {
      Rng rng = Rng::stream({cfg.seed, detail::kStepStream, epoch, s});
      std::vector<LinearImage> patches;
      for (std::size_t i = s * cfg.batch_size; i < std::min(images.size(), (s + 1) * cfg.batch_size); ++i) {
        auto patch = augment(images[order[i]], rng, cfg);
        if (!patch) {
          std::cerr << "warning: skipping image " << order[i] << " (smaller than " << min_source_side(cfg)
                    << " px)\n";
          continue;
        }
        patches.push_back(std::move(*patch));
      }
      if (patches.empty()) continue;
      LogEntry entry{epoch, s, res.state.global_step + 1, {}};
      try {
        entry.loss = train_step(res.params, patches, rng, cfg, res.state.global_step + 1);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(s) + ")");
      }
      ++res.state.global_step;
      if (log) log << to_json_line(entry).dump() << "\n" << std::flush;
      if (opt.on_step) opt.on_step(entry);
      if (opt.verbose && (entry.global_step % 10 == 0 || s + 1 == steps))
        std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << " step " << entry.global_step
                  << " loss " << entry.loss.total << "\n";
      res.log.push_back(entry);
    }
    res.state.epochs_done = epoch + 1;
    if (res.state.epochs_done % cfg.checkpoint_every == 0 || res.state.epochs_done == cfg.epochs) save_ckpt();
  }
  return res;
}

/// train_on() over the valid images of cfg.dataset_dir.
inline TrainResult train(const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  if (cfg.dataset_dir.empty()) throw ConfigError({"dataset_dir: required"});
  const auto index = DatasetIndex::scan(cfg.dataset_dir, min_source_side(cfg));
  for (const auto& e : index.entries())
    if (!e.valid) std::cerr << "warning: skipping " << e.path.string() << ": " << e.message << "\n";
  if (index.images().empty()) throw IoError("no usable images in " + cfg.dataset_dir);
  return train_on(cfg, index.images(), opt);
}

// ---------------------------------------------------------------------------
// Evaluation

struct NamedImage {
  std::string name;
  LinearImage image;
};

inline std::vector<NamedImage> load_image_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("image directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pfm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<NamedImage> out;
  for (const auto& f : files) out.push_back({f.stem().string(), read_linear_image(f)});
  return out;
}

/// Center crop to the largest size whose sides are multiples of granularity.
inline LinearImage fit_to_granularity(const LinearImage& img, std::size_t granularity) {
  const std::size_t h = img.height() / granularity * granularity, w = img.width() / granularity * granularity;
  if (h == 0 || w == 0)
    throw StructuralError("image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                          " is smaller than the network granularity " + std::to_string(granularity));
  if (h == img.height() && w == img.width()) return img;
  return crop(img, (img.height() - h) / 2, (img.width() - w) / 2, h, w);
}

inline GrayMap fit_to_granularity(const GrayMap& map, std::size_t granularity) {
  const LinearImage rgb = fit_to_granularity(gray_to_rgb(map), granularity);
  GrayMap out(rgb.height(), rgb.width());
  for (std::size_t y = 0; y < out.height(); ++y)
    for (std::size_t x = 0; x < out.width(); ++x) out(y, x) = rgb(y, x, 0);
  return out;
}

struct ImageEvaluation {
  std::string name;
  std::vector<View> views;                     // the nine grid views
  std::vector<Decomposition> decompositions;   // one per view
  ConsistencyReport reflectance;               // R_i against the reference
  ConsistencyReport inputs;                    // I_i against the reference (identity baseline)
  ConsistencyReport reconstruction;            // I_i against its reconstruction
  double mean_reflectance_luminance = 0.0;
  double illuminant_mae = 0.0;                 // mean over views of l1(c_i, c_hat_i)
};

struct EvaluationSummary {
  std::vector<ImageEvaluation> images;
  AggregateReport reflectance, inputs, reconstruction;
  double reflectance_psnr = 0.0;  // mean of the reflectance rows
  double baseline_psnr = 0.0;     // mean of the input rows
  double mean_reflectance_luminance = 0.0;
  double illuminant_mae = 0.0;
};

namespace detail {

inline double mean_row_psnr(const AggregateReport& r) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& row : r.rows)
    if (!is_identical_psnr(row.psnr)) {
      s += row.psnr;
      ++n;
    }
  return n ? s / static_cast<double>(n) : kPsnrIdentical;
}

}  // namespace detail

/// Decomposes each of the nine grid views of one image independently.
template <class T>
ImageEvaluation evaluate_image(NetParams<T>& params, const NamedImage& img) {
  ImageEvaluation ev;
  ev.name = img.name;
  ev.views = evaluation_grid(fit_to_granularity(img.image, params.config().granularity()));
  std::vector<LinearImage> inputs, refl, recon;
  double lum = 0.0, mae = 0.0;
  for (const auto& v : ev.views) {
    ev.decompositions.push_back(decompose(params, v.image));
    const auto& d = ev.decompositions.back();
    inputs.push_back(v.image);
    refl.push_back(d.reflectance);
    recon.push_back(reconstruct(d));
    const auto l = luminance(d.reflectance).data();
    lum += std::accumulate(l.begin(), l.end(), 0.0) / static_cast<double>(l.size());
    mae += l1(v.condition.color, d.illuminant);
  }
  ev.reflectance = consistency_report(refl, kGridReference, "Reflectance consistency");
  ev.inputs = consistency_report(inputs, kGridReference, "Input consistency (identity baseline)");
  ev.reconstruction = reconstruction_report(inputs, recon, "Reconstruction");
  ev.mean_reflectance_luminance = lum / 9.0;
  ev.illuminant_mae = mae / 9.0;
  return ev;
}

template <class T>
EvaluationSummary evaluate(NetParams<T>& params, const std::vector<NamedImage>& images) {
  if (images.empty()) throw StructuralError("evaluate: no images");
  EvaluationSummary s;
  std::vector<ConsistencyReport> refl, inputs, recon;
  for (const auto& img : images) {
    s.images.push_back(evaluate_image(params, img));
    const auto& ev = s.images.back();
    refl.push_back(ev.reflectance);
    inputs.push_back(ev.inputs);
    recon.push_back(ev.reconstruction);
    s.mean_reflectance_luminance += ev.mean_reflectance_luminance;
    s.illuminant_mae += ev.illuminant_mae;
  }
  s.reflectance = aggregate(refl);
  s.inputs = aggregate(inputs);
  s.reconstruction = aggregate(recon);
  s.reflectance_psnr = detail::mean_row_psnr(s.reflectance);
  s.baseline_psnr = detail::mean_row_psnr(s.inputs);
  s.mean_reflectance_luminance /= static_cast<double>(images.size());
  s.illuminant_mae /= static_cast<double>(images.size());
  return s;
}

// ---------------------------------------------------------------------------
// LMSE harness. A benchmark directory holds one subdirectory per image with
// original.pfm, reflectance.pfm and shading.pfm.

struct MitSample {
  std::string name;
  LinearImage original;
  LinearImage reflectance;
  GrayMap shading;
};

inline std::vector<MitSample> load_mit_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("benchmark directory not found: " + dir.string());
  std::vector<std::filesystem::path> subdirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  std::vector<MitSample> out;
  for (const auto& d : subdirs) {
    for (const char* f : {"original.pfm", "reflectance.pfm", "shading.pfm"})
      if (!std::filesystem::exists(d / f)) throw IoError(d.string() + ": missing " + f);
    MitSample s{d.filename().string(), read_linear_image(d / "original.pfm"),
                read_linear_image(d / "reflectance.pfm"), read_gray_map(d / "shading.pfm")};
    require_same_dims(s.original, s.reflectance, "benchmark reflectance");
    if (s.shading.height() != s.original.height() || s.shading.width() != s.original.width())
      throw StructuralError(d.string() + ": shading size differs from original");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("no benchmark samples in " + dir.string());
  return out;
}

struct Estimate {
  LinearImage reflectance;
  GrayMap shading;
};

using Estimator = std::function<Estimate(const MitSample&)>;

/// Uses the ground truth as the estimate (harness check: every score is 0).
inline Estimator ground_truth_estimator() {
  return [](const MitSample& s) { return Estimate{s.reflectance, s.shading}; };
}

/// Network estimate on the exposure-anchored original.
template <class T>
Estimator network_estimator(NetParams<T>& params) {
  return [&params](const MitSample& s) {
    auto d = decompose(params, anchor_exposure(s.original));
    return Estimate{std::move(d.reflectance), std::move(d.gray_shading)};
  };
}

/// Scores each sample; all maps are first center-cropped to multiples of
/// granularity so network estimates and ground truth align.
inline LmseTable lmse_evaluate(const std::vector<MitSample>& samples, const Estimator& estimator,
                               std::size_t granularity = 1, const LmseConfig& cfg = {}) {
  std::vector<LmseRow> rows;
  for (const auto& s : samples) {
    MitSample fitted{s.name, fit_to_granularity(s.original, granularity),
                     fit_to_granularity(s.reflectance, granularity), fit_to_granularity(s.shading, granularity)};
    const Estimate e = estimator(fitted);
    rows.push_back({s.name, lmse_decomposition(e.reflectance, e.shading, fitted.reflectance, fitted.shading, cfg)});
  }
  return make_lmse_table(std::move(rows));
}

}  // namespace iidnet
