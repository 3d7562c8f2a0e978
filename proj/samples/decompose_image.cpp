// Trains a small network for a few epochs on synthetic scenes, then
// decomposes a held-out scene and compares it with its ground truth.
//
//   sample_decompose_image [epochs] [out_dir]
#include <cstdio>
#include <filesystem>
#include <string>

#include "iidnet/image_io.hpp"
#include "iidnet/pipeline.hpp"
#include "iidnet/synthetic.hpp"

using namespace iidnet;

int main(int argc, char** argv) {
  const std::size_t epochs = argc > 1 ? std::stoul(argv[1]) : 10;
  const std::filesystem::path out = argc > 2 ? argv[2] : "decomposition";

  std::vector<LinearImage> train;
  for (std::size_t i = 0; i < 16; ++i) train.push_back(make_synthetic_sample(1, i).image);
  const SyntheticSample test = make_synthetic_sample(1, 100);

  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = 1;
  TrainOptions opt;
  opt.on_step = [](const LogEntry& e) {
    if (e.global_step % 20 == 0) std::printf("step %4zu  loss %.4f\n", e.global_step, e.loss.total);
  };
  auto result = train_on(cfg, train, opt);

  const LinearImage input = anchor_exposure(test.image);
  const Decomposition d = decompose(result.params, input);

  std::filesystem::create_directories(out);
  write_png16(out / "input.png", input);
  write_png16(out / "reflectance.png", d.reflectance);
  write_png16(out / "shading.png", d.gray_shading);
  write_png16(out / "reconstruction.png", reconstruct(d));
  write_png16(out / "reflectance_gt.png", test.reflectance);

  const auto lm = lmse_decomposition(d.reflectance, d.gray_shading, test.reflectance, test.shading);
  std::printf("illuminant  (%.3f, %.3f, %.3f)\n", d.illuminant.r, d.illuminant.g, d.illuminant.b);
  std::printf("reconstruction PSNR  %.2f dB\n", psnr(input, reconstruct(d)));
  std::printf("LMSE  reflectance %.4f  shading %.4f  mean %.4f\n", lm.reflectance, lm.shading, lm.score);
  std::printf("wrote %s\n", out.string().c_str());
}
