// Gradient self-checks shared by the test suite, the acceptance run and the
// `selftest` command: every differentiable op on small random shapes, and the
// full training objective through a tiny network.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iidnet/autodiff.hpp"
#include "iidnet/losses.hpp"
#include "iidnet/network.hpp"
#include "iidnet/rng.hpp"

namespace iidnet::selftest {

struct GradientCase {
  std::string name;
  ad::GradCheckReport report;
};

inline ad::GradCheckOptions check_options() {
  ad::GradCheckOptions o;
  o.step = 1e-4;
  o.tolerance = 1e-4;
  o.floor = 1e-6;
  return o;
}

namespace detail {

using TD = ad::Tensor<double>;

inline TD random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return TD::from(std::move(shape), std::move(v), true);
}

// |x| >= 0.1 keeps relu/abs kinks out of every finite-difference interval.
inline TD away_from_zero(ad::Shape shape, Rng& rng) {
  TD t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  for (double& v : t.mutable_value())
    if (rng.bernoulli(0.5)) v = -v;
  return t;
}

inline TD probe(const TD& out, std::uint64_t seed) {
  Rng rng = Rng::stream({seed, out.numel()});
  std::vector<double> w(out.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return ad::sum(ad::mul(out, TD::from(out.shape(), std::move(w), false)));
}

}  // namespace detail

/// One grad_check per op (and per input configuration) for the given seed.
inline std::vector<GradientCase> op_gradient_checks(std::uint64_t seed) {
  using detail::away_from_zero;
  using detail::probe;
  using detail::random_tensor;
  using detail::TD;
  using namespace ad;

  Rng rng = Rng::stream({0x6f70u, seed});
  const Shape s{2, 3, 3, 4};
  std::vector<GradientCase> out;
  const auto run = [&](std::string name, const std::function<TD()>& f, std::vector<TD> inputs) {
    out.push_back({std::move(name), grad_check(f, std::move(inputs), check_options())});
  };

  {
    TD a = random_tensor(s, rng), b = random_tensor(s, rng);
    run("add", [&] { return probe(add(a, b), seed); }, {a, b});
    run("sub", [&] { return probe(sub(a, b), seed); }, {a, b});
    run("mul", [&] { return probe(mul(a, b), seed); }, {a, b});
  }
  {
    TD a = random_tensor(s, rng), b = random_tensor(s, rng, 0.5, 1.5);
    run("div", [&] { return probe(div(a, b), seed); }, {a, b});
  }
  {
    TD a = random_tensor(s, rng);
    run("add_scalar", [&] { return probe(add_scalar(a, 0.3), seed); }, {a});
    run("mul_scalar", [&] { return probe(mul_scalar(a, -1.7), seed); }, {a});
    run("rsub_scalar", [&] { return probe(rsub_scalar(0.5, a), seed); }, {a});
    run("mean", [&] { return mean(mul(a, a)); }, {a});
    run("sum", [&] { return sum(mul(a, a)); }, {a});
    run("reshape", [&] { return probe(reshape(a, {6, 12}), seed); }, {a});
    run("slice_batch", [&] { return probe(slice_batch(a, 1, 2), seed); }, {a});
    run("global_avg_pool", [&] { return probe(global_avg_pool(a), seed); }, {a});
    run("weighted_channel_sum", [&] { return probe(weighted_channel_sum(a, {0.2126, 0.7152, 0.0722}), seed); },
        {a});
  }
  {
    TD a = away_from_zero(s, rng);
    run("relu", [&] { return probe(relu(a), seed); }, {a});
    run("abs", [&] { return probe(abs(a), seed); }, {a});
    run("l2_norm_channels", [&] { return probe(l2_norm_channels(a), seed); }, {a});
  }
  {
    TD a = random_tensor(s, rng), b = random_tensor({2, 5, 3, 4}, rng);
    run("concat_channels", [&] { return probe(concat_channels(a, b), seed); }, {a, b});
  }
  {
    TD a = random_tensor(s, rng), v = random_tensor({2, 3}, rng), p = random_tensor({2, 1, 3, 4}, rng),
       b = random_tensor(s, rng);
    run("scale_channels", [&] { return probe(scale_channels(a, v), seed); }, {a, v});
    run("scale_pixels", [&] { return probe(scale_pixels(a, p), seed); }, {a, p});
    run("channel_dot", [&] { return probe(channel_dot(a, b), seed); }, {a, b});
  }
  {
    TD x = random_tensor({2, 2, 4, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    run("conv2d", [&] { return probe(conv2d(x, w, b, 1 + seed % 2, 1), seed); }, {x, w, b});
  }
  {
    TD x = random_tensor({2, 2, 2, 3}, rng), w = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({3}, rng);
    run("conv_transpose2d", [&] { return probe(conv_transpose2d(x, w, b, 2, 1), seed); }, {x, w, b});
  }
  {
    TD x = random_tensor({3, 2, 2, 2}, rng), g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
    run("batch_norm",
        [&] {
          BatchNormState<double> st(2);
          return probe(batch_norm(x, g, b, st, Mode::Train), seed);
        },
        {x, g, b});
  }
  return out;
}

/// Small network used by the full-objective check: depth 2, 16x16 input.
inline NetConfig gradient_check_config() {
  NetConfig c;
  c.depth = 2;
  c.input_height = 16;
  c.input_width = 16;
  c.channels = {2, 3, 4};
  c.illum_head_channels = 3;
  c.neutral_illuminant_init = false;
  return c;
}

/// Full objective on two views of a batch of two 16x16 images, checked on a
/// random subsample of parameter entries.
///
/// The evaluation point is chosen away from non-differentiable regions:
/// biases and betas are small random values, head biases sit near 1 and head
/// weights are shrunk, so every decoder output stays well above zero, where
/// the cosine term is smooth. Entries whose +-step perturbation still flips a
/// relu/abs branch are replaced (and counted in branch_switches).
inline ad::GradCheckReport full_loss_grad_check(std::uint64_t seed, std::size_t samples = 200,
                                                std::vector<std::string>* names = nullptr) {
  auto p = init<double>(gradient_check_config(), seed);
  Rng rng = Rng::stream({0x6c6fu, seed});
  for (auto& prm : p.params()) {
    const bool head = prm.name.ends_with("head.bias");
    if (prm.name.ends_with(".bias") || prm.name.ends_with(".beta"))
      for (double& v : prm.tensor.mutable_value()) v = (head ? 1.0 : 0.0) + rng.uniform(-0.1, 0.1);
    if (prm.name.ends_with("head.weight"))
      for (double& v : prm.tensor.mutable_value()) v *= 0.1;
  }

  const auto image = [&] {
    std::vector<double> v(16 * 16 * 3);
    for (double& x : v) x = rng.uniform(0.05, 1.0);
    return LinearImage::from_data(16, 16, std::move(v));
  };
  const auto color = [&] {
    std::vector<double> v(6);
    for (double& x : v) x = rng.uniform(0.9, 1.1);
    return ad::Tensor<double>::from({2, 3}, std::move(v));
  };
  const auto x1 = images_to_tensor<double>({image(), image()});
  const auto x2 = images_to_tensor<double>({image(), image()});
  const auto c1 = color(), c2 = color();

  std::vector<ad::Tensor<double>> inputs;
  for (auto& prm : p.params()) {
    inputs.push_back(prm.tensor);
    if (names != nullptr) names->push_back(prm.name);
  }
  const auto f = [&] {
    auto d1 = forward(p, x1, Mode::Train);
    auto d2 = forward(p, x2, Mode::Train);
    return tl::total_loss(x1, x2, d1, d2, c1, c2).total;
  };
  auto opt = check_options();
  opt.max_samples = samples;
  opt.seed = seed;
  opt.skip_branch_switches = true;
  return ad::grad_check(f, inputs, opt);
}

}  // namespace iidnet::selftest
