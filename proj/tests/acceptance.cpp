// Acceptance run: one PASS/FAIL line per criterion A1-A7.
//
//   acceptance [--workdir DIR] [--only A1,A5,...]
//
// Progress goes to stderr; the result lines go to stdout.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iidnet/alloc_tuning.hpp"
#include "iidnet/pipeline.hpp"
#include "iidnet/selftest.hpp"
#include "iidnet/synthetic.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace iidnet;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

LinearImage random_image(std::size_t h, std::size_t w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(h * w * 3);
  for (double& x : v) x = d(rng);
  return LinearImage::from_data(h, w, std::move(v));
}

GrayMap random_gray(std::size_t h, std::size_t w, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(h * w);
  for (double& x : v) x = d(rng);
  return GrayMap::from_data(h, w, std::move(v));
}

ColorVec random_color(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return {d(rng), d(rng), d(rng)};
}

std::vector<double> values(const LinearImage& img) { return {img.data().begin(), img.data().end()}; }

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------- A1

Outcome a1() {
  Outcome o;
  double worst_op = 0.0, worst_full = 0.0;
  std::size_t cases = 0, switches = 0, checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& c : selftest::op_gradient_checks(seed)) {
      ++cases;
      worst_op = std::max(worst_op, c.report.max_rel_error);
      o.require(c.report.passed, fmt("%s seed %d rel err %.3g", c.name.c_str(), int(seed), c.report.max_rel_error));
    }
    const auto r = selftest::full_loss_grad_check(seed, 200);
    worst_full = std::max(worst_full, r.max_rel_error);
    switches += r.branch_switches;
    checked += r.checked;
    o.require(r.passed && r.checked == 200,
              fmt("full objective seed %d rel err %.3g (%zu checked)", int(seed), r.max_rel_error, r.checked));
  }
  o.detail = fmt("%zu op checks max rel err %.2e; full objective %zu entries max rel err %.2e, %zu kink entries "
                 "replaced",
                 cases, worst_op, checked, worst_full, switches) +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- A2

Eigen::Matrix3d random_full_rank(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-0.3, 0.3);
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) += d(rng);
  return m;
}

Outcome a2() {
  Outcome o;
  std::mt19937_64 rng(2);

  double wb_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto img = random_image(16, 16, rng);
    std::uniform_real_distribution<double> g(0.5, 2.0);
    const WbParams p{g(rng), g(rng), g(rng), random_full_rank(rng)};
    const auto back = apply_color_matrix(apply_color_matrix(img, wb_matrix(p)), inverse_wb_matrix(p));
    for (std::size_t i = 0; i < img.data().size(); ++i)
      wb_err = std::max(wb_err, std::abs(back.data()[i] - img.data()[i]));
  }
  o.require(wb_err <= 1e-10, fmt("white-balance round trip error %.3g", wb_err));

  // Integer offsets are exact powers of two; fractional ones are within two
  // roundings (2^v, then the product) of the extended-precision value.
  bool exact = true;
  const auto img = random_image(16, 16, rng, 0.01, 1.0);
  for (int v = -3; v <= 3; ++v) {
    const auto out = simulate_brightness(img, v);
    for (std::size_t i = 0; i < img.data().size(); ++i) exact = exact && out.data()[i] == std::ldexp(img.data()[i], v);
  }
  double frac_err = 0.0;
  std::uniform_real_distribution<double> ev(-1.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const double v = ev(rng);
    const long double k = std::pow(2.0L, static_cast<long double>(v));
    const auto out = simulate_brightness(img, v);
    for (std::size_t i = 0; i < img.data().size(); ++i) {
      const long double want = static_cast<long double>(img.data()[i]) * k;
      frac_err = std::max(frac_err, static_cast<double>(std::abs(out.data()[i] - want) / want));
    }
  }
  o.require(exact, "integer exposure offsets are not exact powers of two");
  o.require(frac_err <= 4.5e-16, fmt("fractional exposure relative error %.3g", frac_err));

  double anchor_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const double lo = std::ldexp(1.0, -1 - t % 6);
    const auto anchored = anchor_exposure(random_image(24, 20, rng, lo, 8.0 * lo));
    std::vector<double> lum;
    for (std::size_t i = 0; i < anchored.data().size(); i += 3)
      lum.push_back(0.2126 * anchored.data()[i] + 0.7152 * anchored.data()[i + 1] + 0.0722 * anchored.data()[i + 2]);
    anchor_err = std::max(anchor_err, std::abs(oracle::geometric_mean(lum, 1e-6) - 0.18));
  }
  o.require(anchor_err <= 1e-4, fmt("anchored geometric-mean luminance off by %.3g", anchor_err));

  Rng srng(2024);
  double ev_min = 1e9, ev_max = -1e9, c_min = 1e9, c_max = -1e9;
  for (int i = 0; i < 100000; ++i) {
    const auto c = sample_condition(srng);
    ev_min = std::min(ev_min, c.ev);
    ev_max = std::max(ev_max, c.ev);
    for (double x : {c.color.r, c.color.g, c.color.b}) {
      c_min = std::min(c_min, x);
      c_max = std::max(c_max, x);
    }
  }
  o.require(ev_min >= -1.0 && ev_max <= 1.0, fmt("EV draws outside [-1, 1]: [%g, %g]", ev_min, ev_max));
  o.require(c_min >= 0.9 && c_max <= 1.1, fmt("color draws outside [0.9, 1.1]: [%g, %g]", c_min, c_max));
  o.require(ev_min < -0.99 && ev_max > 0.99 && c_min < 0.901 && c_max > 1.099, "draws do not cover their ranges");

  const std::string summary = fmt(
      "wb round trip %.1e; 2^v exact (fractional rel %.1e); anchor |gm-0.18| %.1e; 1e5 draws ev [%.4f, %.4f] c "
      "[%.4f, %.4f]",
      wb_err, frac_err, anchor_err, ev_min, ev_max, c_min, c_max);
  o.detail = summary + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- A3

Outcome a3() {
  Outcome o;
  std::mt19937_64 rng(3);
  const LmseConfig cfg;
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto est = random_image(64, 64, rng), gt = random_image(64, 64, rng);
    const double ref = oracle::lmse_grid_search(values(est), values(gt), 64, 64, 3, cfg.window_size, cfg.step);
    worst = std::max(worst, std::abs(lmse(est, gt, cfg) - ref));
  }
  o.require(worst <= 1e-6, fmt("closed form vs grid search %.3g", worst));

  double scaled = 0.0;
  const auto gt = random_image(64, 64, rng);
  for (double k : {0.1, 0.5, 2.0, 13.0}) scaled = std::max(scaled, lmse(scale(gt, k), gt, cfg));
  // Zero up to the rounding of the fitted 1/k.
  o.require(scaled <= 1e-12, fmt("lmse(k*gt, gt) = %.3g", scaled));

  const double p = psnr_from_mse(0.01);
  o.require(p == 20.0, fmt("psnr(mse=0.01) = %.17g", p));
  const auto x = random_image(48, 48, rng);
  const double d = dssim(x, x);
  o.require(d == 0.0, fmt("dssim(x,x) = %.3g", d));

  o.detail = fmt("20 pairs max |closed form - grid search| %.2e; lmse(k*gt,gt) %.1e; psnr %.1f dB; dssim(x,x) %g", worst,
                 scaled, p, d) +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- A4

LinearImage half_luminance_reflectance(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  // Random chromaticity, rescaled per pixel so its luminance is exactly 0.5.
  auto img = random_image(h, w, rng, 0.1, 1.0);
  std::vector<double> v = values(img);
  for (std::size_t i = 0; i < v.size(); i += 3) {
    const double l = 0.2126 * v[i] + 0.7152 * v[i + 1] + 0.0722 * v[i + 2];
    for (int c = 0; c < 3; ++c) v[i + c] *= 0.5 / l;
  }
  return LinearImage::from_data(h, w, std::move(v));
}

Outcome a4() {
  Outcome o;
  std::mt19937_64 rng(4);
  const LossWeights w;

  double perfect_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto r = half_luminance_reflectance(12, 10, rng);
    const auto s = random_gray(12, 10, rng, 0.2, 1.5);
    const auto c1 = random_color(rng, 0.9, 1.1), c2 = random_color(rng, 0.9, 1.1);
    const Decomposition d1{r, s, c1}, d2{r, s, c2};
    const double total = total_loss(reconstruct(d1), reconstruct(d2), d1, d2, c1, c2, w).total;
    perfect_err = std::max(perfect_err, std::abs(total - (-2.0 * w.reconst_cos)));
  }
  o.require(perfect_err <= 1e-6, fmt("perfect decomposition off by %.3g", perfect_err));

  // Half the draws are unrelated random images and decompositions; the other
  // half perturb a perfect decomposition, which lands close to the bound.
  double lowest = 1e300;
  bool recombined = true;
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  for (int t = 0; t < 1000; ++t) {
    LinearImage v1 = random_image(4, 4, rng), v2 = random_image(4, 4, rng);
    const ColorVec c1 = random_color(rng, 0.9, 1.1), c2 = random_color(rng, 0.9, 1.1);
    Decomposition d1, d2;
    if (t % 2 == 0) {
      const auto rand_dec = [&] {
        return Decomposition{random_image(4, 4, rng, 0.0, 2.0), random_gray(4, 4, rng, 0.0, 2.0),
                             random_color(rng, 0.0, 2.0)};
      };
      d1 = rand_dec();
      d2 = rand_dec();
    } else {
      const auto r = half_luminance_reflectance(4, 4, rng);
      const auto s = random_gray(4, 4, rng, 0.2, 1.5);
      v1 = reconstruct(Decomposition{r, s, c1});
      v2 = reconstruct(Decomposition{r, s, c2});
      const auto perturb = [&](const ColorVec& c) {
        std::vector<double> rv = values(r), sv(s.data().begin(), s.data().end());
        for (double& x : rv) x = std::max(0.0, x + jitter(rng));
        for (double& x : sv) x = std::max(0.0, x + jitter(rng));
        return Decomposition{LinearImage::from_data(4, 4, std::move(rv)), GrayMap::from_data(4, 4, std::move(sv)),
                             {c.r + jitter(rng), c.g + jitter(rng), c.b + jitter(rng)}};
      };
      d1 = perturb(c1);
      d2 = perturb(c2);
    }
    const auto b = total_loss(v1, v2, d1, d2, c1, c2, w);
    lowest = std::min(lowest, b.total);
    const double direct = w.reconst_l1 * b.reconst_l1 - w.reconst_cos * b.reconst_cos +
                          w.reflect_pair * b.reflect_pair_l1 + w.luminance * (b.lum_1 + b.lum_2) +
                          w.illuminant * b.illum_l1;
    recombined = recombined && b.total == direct;
  }
  o.require(lowest >= -2.0 * w.reconst_cos, fmt("total %.6g below -2*lambda2", lowest));
  o.require(recombined, "breakdown does not recombine to the total");

  o.detail = fmt("perfect decomposition |total + 2| %.1e; min total over 1000 random inputs %.4f >= -2; "
                 "recombination exact",
                 perfect_err, lowest) +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- data

constexpr std::uint64_t kDataSeed = 0;
constexpr std::size_t kA5Epochs = 200;  // 32 images / batch 4 = 8 steps per epoch: 1600 steps

SyntheticLayout ensure_dataset(const fs::path& work) {
  const auto layout = synthetic_layout(work / "data");
  if (!fs::exists(layout.mit_dir)) {
    std::cerr << "writing synthetic dataset to " << (work / "data").string() << "\n";
    return write_synthetic_dataset(work / "data", 32, 8, kDataSeed);
  }
  return layout;
}

TrainConfig desk_config(const SyntheticLayout& data, const fs::path& run_dir, std::size_t epochs) {
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = epochs;
  cfg.seed = 0;
  cfg.dataset_dir = data.train_dir.string();
  cfg.checkpoint_path = (run_dir / "model.ckpt").string();
  cfg.log_path = (run_dir / "log.jsonl").string();
  cfg.checkpoint_every = 1;
  return cfg;
}

// ---------------------------------------------------------------- A5

Outcome a5(const fs::path& work) {
  Outcome o;
  const auto data = ensure_dataset(work);
  const fs::path run = work / "a5";
  fs::create_directories(run);
  TrainConfig cfg = desk_config(data, run, kA5Epochs);
  cfg.checkpoint_every = 25;

  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opt;
  opt.on_step = [](const LogEntry& e) {
    if (e.global_step % 100 == 0)
      std::cerr << "  A5 step " << e.global_step << " loss " << e.loss.total << "\n";
  };
  auto res = train(cfg, opt);
  const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto held = load_image_dir(data.heldout_dir);
  const auto s = evaluate(res.params, held);
  const double total_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::ofstream rep(run / "evaluation.txt");
    rep << to_text(s.reflectance) << "\n" << to_text(s.inputs) << "\n" << to_text(s.reconstruction);
  }

  const double gap = s.reflectance_psnr - s.baseline_psnr;
  o.require(res.state.global_step <= 2000, fmt("%zu steps > 2000", res.state.global_step));
  o.require(gap >= 5.0, fmt("(a) gap %.2f dB < 5", gap));
  o.require(s.mean_reflectance_luminance >= 0.4 && s.mean_reflectance_luminance <= 0.6,
            fmt("(b) luminance %.3f outside [0.4, 0.6]", s.mean_reflectance_luminance));
  o.require(s.illuminant_mae < 0.05, fmt("(c) illuminant MAE %.4f >= 0.05", s.illuminant_mae));
  o.require(total_s < 1800.0, fmt("runtime %.0f s >= 30 min", total_s));
  o.detail = fmt("%zu steps; (a) reflectance %.2f dB vs inputs %.2f dB, gap %+.2f dB; (b) mean luminance %.3f; "
                 "(c) illuminant MAE %.4f; train %.0f s, total %.0f s",
                 res.state.global_step, s.reflectance_psnr, s.baseline_psnr, gap, s.mean_reflectance_luminance,
                 s.illuminant_mae, train_s, total_s) +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- A6

// Desk preset network, patch and batch on the A5 dataset, shortened to
// kA6Epochs so three runs fit next to A5.
constexpr std::size_t kA6Epochs = 6;
constexpr std::size_t kA6ResumeAt = 3;

Outcome a6(const fs::path& work) {
  Outcome o;
  const auto data = ensure_dataset(work);
  const fs::path run = work / "a6";
  fs::create_directories(run);
  const TrainConfig full = desk_config(data, run, kA6Epochs);

  // Every run writes to the same paths (they are recorded in the checkpoint
  // metadata); results are copied aside before the next run.
  std::cerr << "  A6 run 1/3\n";
  train(full);
  const std::string ck1 = file_bytes(full.checkpoint_path), log1 = file_bytes(full.log_path);
  std::cerr << "  A6 run 2/3\n";
  train(full);
  const std::string ck2 = file_bytes(full.checkpoint_path), log2 = file_bytes(full.log_path);

  std::cerr << "  A6 run 3/3 (stop at epoch " << kA6ResumeAt << ", then resume)\n";
  TrainConfig part = full;
  part.epochs = kA6ResumeAt;
  train(part);
  const fs::path mid = run / "epoch_k.ckpt";
  fs::copy_file(part.checkpoint_path, mid, fs::copy_options::overwrite_existing);
  TrainOptions resume;
  resume.resume_from = mid.string();
  train(full, resume);
  const std::string ck3 = file_bytes(full.checkpoint_path), log3 = file_bytes(full.log_path);

  o.require(!ck1.empty() && ck1 == ck2, "repeated runs give different checkpoints");
  o.require(log1 == log2, "repeated runs give different logs");
  o.require(ck1 == ck3, "resumed run checkpoint differs from the uninterrupted one");
  o.require(log1 == log3, "resumed run log differs from the uninterrupted one");
  o.detail = fmt("%zu epochs (%zu steps) x2: checkpoints (%zu bytes) and logs bitwise equal; resume at epoch %zu "
                 "reproduces both",
                 kA6Epochs, kA6Epochs * steps_per_epoch(32, full.batch_size), ck1.size(), kA6ResumeAt) +
             (o.detail.empty() ? "" : " | " + o.detail);
  if (!o.pass) o.detail = "mismatch: " + o.detail;
  return o;
}

// ---------------------------------------------------------------- A7

Outcome a7(const fs::path& work) {
  Outcome o;
  const auto data = ensure_dataset(work);
  const auto samples = load_mit_dir(data.mit_dir);
  const auto table = lmse_evaluate(samples, ground_truth_estimator(), NetConfig::desk().granularity());
  const std::string text = to_text(table);
  {
    std::ofstream(work / "a7_lmse_table.txt") << text;
  }

  o.require(table.rows.size() == samples.size() && !samples.empty(), "row count");
  for (const auto& r : table.rows)
    o.require(r.result.reflectance == 0.0 && r.result.shading == 0.0 && r.result.score == 0.0,
              r.name + " scores nonzero");

  // Rendered layout: header, rule, one line per image, rule, mean line.
  std::vector<std::string> lines;
  {
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  o.require(lines.size() == table.rows.size() + 4, "table line count");
  for (std::size_t i = 0; i < table.rows.size() && i + 2 < lines.size(); ++i) {
    const auto& l = lines[i + 2];
    o.require(l.rfind(table.rows[i].name, 0) == 0, "row " + std::to_string(i) + " name");
    o.require(l.ends_with("0.000      0.000  0.000"), "row " + std::to_string(i) + " does not read 0.000");
  }
  o.require(!lines.empty() && lines.back().rfind("Mean", 0) == 0 && lines.back().ends_with("0.000  0.000"),
            "mean row");

  // The mean row of a table with known, unequal rows.
  std::vector<LmseRow> rows;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 0.3);
  double sr = 0, ss = 0, sm = 0;
  for (int i = 0; i < 16; ++i) {
    LmseResult r{u(rng), u(rng), 0.0};
    r.score = 0.5 * (r.reflectance + r.shading);
    sr += r.reflectance;
    ss += r.shading;
    sm += r.score;
    rows.push_back({"img" + std::to_string(i), r});
  }
  const auto t = make_lmse_table(rows);
  o.require(std::abs(t.mean.reflectance - sr / 16) < 1e-15 && std::abs(t.mean.shading - ss / 16) < 1e-15 &&
                std::abs(t.mean.score - sm / 16) < 1e-15,
            "mean row is not the arithmetic mean");

  o.detail = fmt("%zu images all 0.000 (reflectance, shading, LMSE); %zu-line table with mean row; mean of 16 "
                 "unequal rows exact",
                 table.rows.size(), lines.size()) +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  fs::path work = fs::temp_directory_path() / "iidnet_acceptance";
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string id; std::getline(ss, id, ',');) only.insert(id);
    } else {
      std::cerr << "usage: acceptance [--workdir DIR] [--only A1,A2,...]\n";
      return 2;
    }
  }
  fs::create_directories(work);

  struct Criterion {
    std::string id;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"A1", 120, a1},
      {"A2", 30, a2},
      {"A3", 60, a3},
      {"A4", 30, a4},
      {"A5", 1800, [&] { return a5(work); }},
      {"A6", 1e9, [&] { return a6(work); }},
      {"A7", 1e9, [&] { return a7(work); }},
  };

  bool all = true;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.contains(c.id)) continue;
    std::cerr << c.id << " running\n";
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (s >= c.budget_s) {
      o.pass = false;
      o.detail += fmt(" | over the %.0f s budget", c.budget_s);
    }
    all = all && o.pass;
    std::cout << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << fmt("  [%.1f s]", s) << std::endl;
  }
  return all ? 0 : 1;
}
