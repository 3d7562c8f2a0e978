// iidnet command line: synthesize data, train, decompose, evaluate, score
// against ground truth and run the gradient self-checks.
#include <CLI11.hpp>
#include <Eigen/Core>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "iidnet/alloc_tuning.hpp"
#include "iidnet/pipeline.hpp"
#include "iidnet/selftest.hpp"
#include "iidnet/synthetic.hpp"

namespace fs = std::filesystem;
using namespace iidnet;

namespace {

void apply_thread_env() {
  if (const char* s = std::getenv("IID_NUM_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(s, &end, 10);
    if (end == s || *end != '\0' || n < 1) throw ConfigError({"IID_NUM_THREADS must be a positive integer"});
    Eigen::setNbThreads(static_cast<int>(n));
  }
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out_path);
  if (!f) throw IoError("cannot write " + out_path);
  f << text;
  if (!f.flush()) throw IoError("failed writing " + out_path);
}

nlohmann::json color_json(const ColorVec& c) { return {c.r, c.g, c.b}; }

nlohmann::json lmse_json(const LmseTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  const auto row = [](const std::string& name, const LmseResult& r) {
    return nlohmann::json{{"image", name}, {"reflectance", r.reflectance}, {"shading", r.shading}, {"lmse", r.score}};
  };
  for (const auto& r : t.rows) rows.push_back(row(r.name, r.result));
  return {{"rows", rows}, {"mean", row("mean", t.mean)}};
}

// --- synthesize ------------------------------------------------------------

struct SynthesizeArgs {
  std::string out;
  std::size_t train = 32, heldout = 8, size = 128;
  std::uint64_t seed = 0;
};

int run_synthesize(const SynthesizeArgs& a) {
  SyntheticOptions opt;
  opt.size = a.size;
  const auto layout = write_synthetic_dataset(a.out, a.train, a.heldout, a.seed, opt);
  std::cout << "wrote " << a.train << " training and " << a.heldout << " held-out scenes\n"
            << "  train:   " << layout.train_dir.string() << "\n"
            << "  heldout: " << layout.heldout_dir.string() << "\n"
            << "  mit:     " << layout.mit_dir.string() << "\n";
  return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, resume, dataset, checkpoint, log;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = load_train_config(a.config);
  // Relative paths in the config are resolved against its directory.
  const fs::path base = fs::absolute(a.config).parent_path();
  const auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(cfg.dataset_dir);
  resolve(cfg.checkpoint_path);
  resolve(cfg.log_path);
  if (!a.dataset.empty()) cfg.dataset_dir = a.dataset;
  if (!a.checkpoint.empty()) cfg.checkpoint_path = a.checkpoint;
  if (!a.log.empty()) cfg.log_path = a.log;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.seed) cfg.seed = *a.seed;
  if (cfg.checkpoint_path.empty()) throw ConfigError({"checkpoint_path: required (config or --checkpoint)"});
  for (const auto& p : {cfg.checkpoint_path, cfg.log_path})
    if (!p.empty() && fs::path(p).has_parent_path()) fs::create_directories(fs::path(p).parent_path());

  TrainOptions opt;
  opt.resume_from = a.resume;
  opt.verbose = !a.quiet;
  const auto res = train(cfg, opt);
  std::cout << "trained " << res.state.epochs_done << " epochs, " << res.state.global_step << " steps";
  if (!res.log.empty()) std::cout << ", final loss " << res.log.back().loss.total;
  std::cout << "\ncheckpoint: " << cfg.checkpoint_path << "\n";
  return 0;
}

// --- decompose -------------------------------------------------------------

struct DecomposeArgs {
  std::string checkpoint, input, out_dir, out_reflectance, out_shading, out_illum;
  bool png = false, no_anchor = false;
};

int run_decompose(const DecomposeArgs& a) {
  if (a.out_dir.empty() && a.out_reflectance.empty() && a.out_shading.empty() && a.out_illum.empty())
    throw ConfigError({"decompose: give --out-dir or at least one of --out-reflectance, --out-shading, --out-illum"});
  auto params = load<float>(a.checkpoint);
  LinearImage img = fit_to_granularity(read_linear_image(a.input), params.config().granularity());
  if (!a.no_anchor) img = anchor_exposure(img);
  const Decomposition d = decompose(params, img);
  const LinearImage recon = reconstruct(d);
  const nlohmann::json j = {{"illuminant", color_json(d.illuminant)},
                            {"height", img.height()},
                            {"width", img.width()},
                            {"reconstruction_psnr", psnr(img, recon)}};
  const auto write_json = [&](const fs::path& p) {
    std::ofstream f(p);
    if (!(f << j.dump(2) << "\n")) throw IoError("failed writing " + p.string());
  };

  if (!a.out_reflectance.empty()) write_pfm(a.out_reflectance, d.reflectance);
  if (!a.out_shading.empty()) write_pfm(a.out_shading, d.gray_shading);
  if (!a.out_illum.empty()) write_json(a.out_illum);
  if (!a.out_dir.empty()) {
    const fs::path dir(a.out_dir);
    fs::create_directories(dir);
    write_pfm(dir / "input.pfm", img);
    write_pfm(dir / "reflectance.pfm", d.reflectance);
    write_pfm(dir / "shading.pfm", d.gray_shading);
    write_pfm(dir / "reconstruction.pfm", recon);
    write_json(dir / "illuminant.json");
    if (a.png) {
      write_png16(dir / "input.png", img);
      write_png16(dir / "reflectance.png", d.reflectance);
      write_png16(dir / "shading.png", d.gray_shading);
      write_png16(dir / "reconstruction.png", recon);
    }
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

// --- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint, images, format = "text", out;
  bool per_image = false;
};

int run_evaluate(const EvaluateArgs& a) {
  auto params = load<float>(a.checkpoint);
  const auto images = load_image_dir(a.images);
  const auto s = evaluate(params, images);

  std::string text;
  if (a.format == "json") {
    nlohmann::json j = {{"reflectance", to_json(s.reflectance)},
                        {"inputs", to_json(s.inputs)},
                        {"reconstruction", to_json(s.reconstruction)},
                        {"reflectance_psnr", s.reflectance_psnr},
                        {"baseline_psnr", s.baseline_psnr},
                        {"mean_reflectance_luminance", s.mean_reflectance_luminance},
                        {"illuminant_mae", s.illuminant_mae}};
    if (a.per_image) {
      j["images"] = nlohmann::json::array();
      for (const auto& ev : s.images)
        j["images"].push_back({{"name", ev.name},
                               {"reflectance", to_json(aggregate(ev.reflectance))},
                               {"mean_reflectance_luminance", ev.mean_reflectance_luminance},
                               {"illuminant_mae", ev.illuminant_mae}});
    }
    text = j.dump(2) + "\n";
  } else if (a.format == "csv") {
    text = to_csv(s.reflectance) + "\n" + to_csv(s.inputs) + "\n" + to_csv(s.reconstruction);
  } else {
    std::ostringstream os;
    os << to_text(s.reflectance) << "\n" << to_text(s.inputs) << "\n" << to_text(s.reconstruction) << "\n";
    if (a.per_image)
      for (const auto& ev : s.images) os << ev.name << "\n" << to_text(aggregate(ev.reflectance)) << "\n";
    os << "images:                      " << images.size() << "\n"
       << "mean reflectance PSNR:       " << s.reflectance_psnr << " dB\n"
       << "mean input (baseline) PSNR:  " << s.baseline_psnr << " dB\n"
       << "mean reflectance luminance:  " << s.mean_reflectance_luminance << "\n"
       << "illuminant MAE:              " << s.illuminant_mae << "\n";
    text = os.str();
  }
  emit(text, a.out);
  return 0;
}

// --- lmse-eval -------------------------------------------------------------

struct LmseArgs {
  std::string checkpoint, mit, format = "text", out;
  bool ground_truth = false;
};

int run_lmse(const LmseArgs& a) {
  const auto samples = load_mit_dir(a.mit);
  LmseTable table;
  if (a.ground_truth) {
    table = lmse_evaluate(samples, ground_truth_estimator());
  } else {
    if (a.checkpoint.empty()) throw ConfigError({"lmse-eval: --checkpoint or --use-ground-truth is required"});
    auto params = load<float>(a.checkpoint);
    table = lmse_evaluate(samples, network_estimator(params), params.config().granularity());
  }
  if (a.format == "json")
    emit(lmse_json(table).dump(2) + "\n", a.out);
  else if (a.format == "csv")
    emit(to_csv(table), a.out);
  else
    emit(to_text(table), a.out);
  return 0;
}

// --- selftest --------------------------------------------------------------

int run_selftest(std::size_t seeds, std::size_t samples) {
  bool ok = true;
  const auto line = [&](bool pass, const std::string& what, const std::string& detail) {
    ok = ok && pass;
    std::cout << (pass ? "ok   " : "FAIL ") << what << "  " << detail << "\n";
  };

  double worst_op = 0.0;
  std::string worst_name;
  bool ops_ok = true;
  for (std::size_t s = 0; s < seeds; ++s)
    for (const auto& c : selftest::op_gradient_checks(s)) {
      ops_ok = ops_ok && c.report.passed;
      if (c.report.max_rel_error >= worst_op) {
        worst_op = c.report.max_rel_error;
        worst_name = c.name;
      }
    }
  line(ops_ok, "op gradients", "max rel err " + std::to_string(worst_op) + " (" + worst_name + ")");

  double worst_full = 0.0;
  std::size_t switches = 0;
  bool full_ok = true;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto r = selftest::full_loss_grad_check(s, samples);
    full_ok = full_ok && r.passed;
    worst_full = std::max(worst_full, r.max_rel_error);
    switches += r.branch_switches;
  }
  line(full_ok, "full objective gradient",
       "max rel err " + std::to_string(worst_full) + ", " + std::to_string(switches) + " kink entries skipped");

  Rng rng(7);
  std::vector<double> px(32 * 32 * 3);
  for (double& v : px) v = rng.uniform(0.01, 1.0);
  const auto img = LinearImage::from_data(32, 32, px);

  const auto anchored = anchor_exposure(img);
  line(std::abs(geometric_mean_luminance(anchored) - 0.18) < 1e-4, "exposure anchoring",
       "geo-mean luminance " + std::to_string(geometric_mean_luminance(anchored)));

  WbParams wb{1.3, 1.0, 0.7};
  const auto round = apply_color_matrix(apply_color_matrix(img, wb_matrix(wb)), inverse_wb_matrix(wb));
  double err = 0.0;
  for (std::size_t i = 0; i < px.size(); ++i) err = std::max(err, std::abs(round.data()[i] - px[i]));
  line(err < 1e-10, "white balance round trip", "max abs err " + std::to_string(err));

  line(psnr_from_mse(0.01) == 20.0, "psnr(mse = 0.01)", std::to_string(psnr_from_mse(0.01)) + " dB");
  line(dssim(img, img) == 0.0, "dssim(x, x)", std::to_string(dssim(img, img)));

  const Decomposition d{img, GrayMap::from_data(32, 32, std::vector<double>(32 * 32, 1.0)), {1.0, 1.0, 1.0}};
  const double total = total_loss(img, img, d, d, {1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}).total;
  const double lum = lum_loss(img);
  // Only the luminance terms are nonzero extras; the cosine epsilon keeps cos(x, x) a hair under 1.
  const double expected = -2.0 * cos_sim(img, img) + 2.0 * lum;
  line(std::abs(total - expected) < 1e-9, "loss of a perfect decomposition",
       std::to_string(total) + " (luminance term " + std::to_string(2.0 * lum) + ")");

  std::cout << (ok ? "selftest passed\n" : "selftest FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Self-supervised intrinsic image decomposition"};
  app.require_subcommand(1);

  SynthesizeArgs syn;
  auto* c_syn = app.add_subcommand("synthesize", "Write a procedural Lambertian dataset with ground truth");
  c_syn->alias("gen-synthetic");
  c_syn->add_option("-o,--out", syn.out, "Output root")->required();
  c_syn->add_option("--train", syn.train, "Training scenes")->capture_default_str();
  c_syn->add_option("--heldout", syn.heldout, "Held-out scenes")->capture_default_str();
  c_syn->add_option("--size", syn.size, "Side length in pixels")->capture_default_str()->check(CLI::Range(16, 4096));
  c_syn->add_option("--seed", syn.seed, "Scene family seed")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train from a JSON config");
  c_train->add_option("-c,--config", tr.config, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  c_train->add_option("--resume", tr.resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  c_train->add_option("--dataset", tr.dataset, "Override dataset_dir");
  c_train->add_option("--checkpoint", tr.checkpoint, "Override checkpoint_path");
  c_train->add_option("--log", tr.log, "Override log_path");
  c_train->add_option("--epochs", tr.epochs, "Override epochs");
  c_train->add_option("--seed", tr.seed, "Override seed");
  c_train->add_flag("-q,--quiet", tr.quiet, "No progress output");

  DecomposeArgs dec;
  auto* c_dec = app.add_subcommand("decompose", "Split one linear PFM image into reflectance, shading and color");
  c_dec->add_option("--ckpt,--checkpoint", dec.checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  c_dec->add_option("-i,--input", dec.input, "Linear RGB PFM")->required()->check(CLI::ExistingFile);
  c_dec->add_option("--out-reflectance", dec.out_reflectance, "Reflectance PFM");
  c_dec->add_option("--out-shading", dec.out_shading, "Gray shading PFM");
  c_dec->add_option("--out-illum", dec.out_illum, "Illuminant color JSON");
  c_dec->add_option("-o,--out-dir", dec.out_dir, "Write every output (and the reconstruction) here");
  c_dec->add_flag("--png", dec.png, "With --out-dir, also write 16-bit PNG previews");
  c_dec->add_flag("--no-anchor", dec.no_anchor, "Skip exposure anchoring of the input");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Reflectance consistency over the nine-view illumination grid");
  c_ev->add_option("--ckpt,--checkpoint", ev.checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--images", ev.images, "Directory of linear PFM images")->required()->check(CLI::ExistingDirectory);
  c_ev->add_option("--format", ev.format, "text, csv or json")
      ->capture_default_str()
      ->check(CLI::IsMember({"text", "csv", "json"}));
  c_ev->add_option("-o,--out", ev.out, "Write the report here instead of stdout");
  c_ev->add_flag("--per-image", ev.per_image, "Include a table per image");

  LmseArgs lm;
  auto* c_lm = app.add_subcommand("lmse-eval", "Local scale-invariant MSE against ground-truth triples");
  c_lm->add_option("--mit", lm.mit, "Directory of <name>/{original,reflectance,shading}.pfm")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_lm->add_option("--ckpt,--checkpoint", lm.checkpoint, "Trained checkpoint")->check(CLI::ExistingFile);
  c_lm->add_flag("--use-ground-truth", lm.ground_truth, "Score the ground truth itself (harness check)");
  c_lm->add_option("--format", lm.format, "text, csv or json")
      ->capture_default_str()
      ->check(CLI::IsMember({"text", "csv", "json"}));
  c_lm->add_option("-o,--out", lm.out, "Write the table here instead of stdout");

  std::size_t st_seeds = 3, st_samples = 200;
  auto* c_st = app.add_subcommand("selftest", "Gradient checks and numeric identities");
  c_st->add_option("--seeds", st_seeds, "Random seeds for the gradient checks")->capture_default_str();
  c_st->add_option("--samples", st_samples, "Parameter entries per full-objective check")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    apply_thread_env();
    if (*c_syn) return run_synthesize(syn);
    if (*c_train) return run_train(tr);
    if (*c_dec) return run_decompose(dec);
    if (*c_ev) return run_evaluate(ev);
    if (*c_lm) return run_lmse(lm);
    if (*c_st) return run_selftest(st_seeds, st_samples);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error:\n";
    for (const auto& p : e.problems()) std::cerr << "  - " << p << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
