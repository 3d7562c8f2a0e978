// Renders one synthetic scene under the nine-view evaluation grid and under a
// few random training conditions, writing 16-bit PNG previews.
//
//   sample_simulate_views [out_dir] [seed]
#include <cstdio>
#include <filesystem>
#include <string>

#include "iidnet/illum_sim.hpp"
#include "iidnet/image_io.hpp"
#include "iidnet/synthetic.hpp"

using namespace iidnet;

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "views";
  const std::uint64_t seed = argc > 2 ? std::stoull(argv[2]) : 0;
  std::filesystem::create_directories(out);

  const SyntheticSample scene = make_synthetic_sample(seed, 0);
  write_png16(out / "scene.png", scene.image);
  write_png16(out / "reflectance_gt.png", scene.reflectance);
  write_png16(out / "shading_gt.png", scene.shading);

  const auto grid = evaluation_grid(scene.image);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& v = grid[i];
    write_png16(out / ("grid_" + std::to_string(i + 1) + ".png"), v.image);
    std::printf("grid %zu  %-22s  geo-mean luminance %.4f\n", i + 1, condition_label(i).c_str(),
                geometric_mean_luminance(v.image));
  }

  Rng rng(seed);
  const auto train = generate_views(scene.image, rng, 4);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& c = train[i].condition;
    write_png16(out / ("train_" + std::to_string(i + 1) + ".png"), train[i].image);
    std::printf("train %zu  ev %+.3f  c = (%.3f, %.3f, %.3f)\n", i + 1, c.ev, c.color.r, c.color.g, c.color.b);
  }
  std::printf("wrote %s\n", out.string().c_str());
}
