// Procedural Lambertian scenes with known reflectance and shading.
//
// A scene is a tilted background plane lit by a directional light plus one
// to three spheres. Reflectance is a piecewise-constant Voronoi mosaic on the
// plane and a flat color per sphere. After rendering, reflectance channels are
// rebalanced so the image mean is gray; this keeps any color cast in a
// simulated view attributable to the illuminant.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "iidnet/image.hpp"
#include "iidnet/image_io.hpp"
#include "iidnet/rng.hpp"

namespace iidnet {

struct SyntheticSample {
  std::string name;
  LinearImage image;        // shading * reflectance
  LinearImage reflectance;
  GrayMap shading;
};

struct SyntheticOptions {
  std::size_t size = 128;
  double ambient = 0.15;
};

namespace detail {

struct Sphere {
  double cx, cy, r;
  Rgb color;
};

inline std::array<double, 3> normalized(double x, double y, double z) {
  const double n = std::sqrt(x * x + y * y + z * z);
  return {x / n, y / n, z / n};
}

}  // namespace detail

/// Scene `index` of the family identified by `seed`; independent of how many
/// other scenes are generated.
inline SyntheticSample make_synthetic_sample(std::uint64_t seed, std::size_t index,
                                             const SyntheticOptions& opt = {}) {
  Rng rng = Rng::stream({seed, 0x5CE7Eull, index});
  const std::size_t n = opt.size;
  const double size = static_cast<double>(n);

  auto random_color = [&] { return Rgb{rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9)}; };

  const std::size_t cells = 6 + rng.below(7);
  std::vector<std::array<double, 2>> sites(cells);
  std::vector<Rgb> cell_color(cells);
  for (std::size_t i = 0; i < cells; ++i) {
    sites[i] = {rng.uniform(0.0, size), rng.uniform(0.0, size)};
    cell_color[i] = random_color();
  }

  std::vector<detail::Sphere> spheres(1 + rng.below(3));
  for (auto& s : spheres) {
    s.r = rng.uniform(0.15, 0.3) * size;
    s.cx = rng.uniform(s.r, size - s.r);
    s.cy = rng.uniform(s.r, size - s.r);
    s.color = random_color();
  }

  const double theta = rng.uniform(0.0, 2.0 * M_PI);
  const double elev = rng.uniform(0.35, 0.85);
  const auto light = detail::normalized(std::cos(theta) * std::cos(elev * M_PI / 2),
                                        std::sin(theta) * std::cos(elev * M_PI / 2), std::sin(elev * M_PI / 2));
  const auto plane_normal = detail::normalized(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 1.0);
  // Soft spotlight on the plane so its shading is not constant.
  const double spot_x = rng.uniform(0.0, size), spot_y = rng.uniform(0.0, size);
  const double spot_sigma = rng.uniform(0.5, 1.2) * size;

  LinearImage refl(n, n);
  GrayMap shading(n, n);
  const double k = 1.0 - opt.ambient;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const detail::Sphere* hit = nullptr;
      double hit_z = -1.0;
      for (const auto& s : spheres) {
        const double dx = (px - s.cx) / s.r, dy = (py - s.cy) / s.r, rr = dx * dx + dy * dy;
        if (rr < 1.0 && std::sqrt(1.0 - rr) * s.r > hit_z) {
          hit = &s;
          hit_z = std::sqrt(1.0 - rr) * s.r;
        }
      }
      Rgb color;
      double s_val;
      if (hit) {
        const double dx = (px - hit->cx) / hit->r, dy = (py - hit->cy) / hit->r;
        const double nz = std::sqrt(std::max(0.0, 1.0 - dx * dx - dy * dy));
        const double lambert = std::max(0.0, dx * light[0] + dy * light[1] + nz * light[2]);
        s_val = opt.ambient + k * lambert;
        color = hit->color;
      } else {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t i = 0; i < cells; ++i) {
          const double d = (px - sites[i][0]) * (px - sites[i][0]) + (py - sites[i][1]) * (py - sites[i][1]);
          if (d < best_d) {
            best_d = d;
            best = i;
          }
        }
        color = cell_color[best];
        const double lambert = std::max(
            0.0, plane_normal[0] * light[0] + plane_normal[1] * light[1] + plane_normal[2] * light[2]);
        const double r2 = (px - spot_x) * (px - spot_x) + (py - spot_y) * (py - spot_y);
        s_val = opt.ambient + k * lambert * (0.35 + 0.65 * std::exp(-r2 / (2 * spot_sigma * spot_sigma)));
      }
      refl.set_pixel(y, x, color);
      shading(y, x) = s_val;
    }

  // Gray-world balance of the rendered image, applied to reflectance.
  std::array<double, 3> mean{0, 0, 0};
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c) mean[c] += shading(y, x) * refl(y, x, c);
  const double gray = (mean[0] + mean[1] + mean[2]) / 3.0;
  double peak = 0.0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        refl(y, x, c) *= gray / mean[c];
        peak = std::max(peak, refl(y, x, c));
      }
  if (peak > 1.0) {
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        for (std::size_t c = 0; c < 3; ++c) refl(y, x, c) /= peak;
        shading(y, x) *= peak;
      }
  }

  SyntheticSample out;
  char name[32];
  std::snprintf(name, sizeof name, "synth_%04zu", index);
  out.name = name;
  out.image = hadamard(gray_to_rgb(shading), refl);
  out.reflectance = std::move(refl);
  out.shading = std::move(shading);
  return out;
}

struct SyntheticLayout {
  std::filesystem::path train_dir, heldout_dir, mit_dir;
};

inline SyntheticLayout synthetic_layout(const std::filesystem::path& root) {
  return {root / "train", root / "heldout", root / "mit"};
}

/// Writes train/ and heldout/ image directories plus mit/<name>/ triples
/// (original, reflectance, shading) for the held-out scenes.
inline SyntheticLayout write_synthetic_dataset(const std::filesystem::path& root, std::size_t train_count,
                                               std::size_t heldout_count, std::uint64_t seed,
                                               const SyntheticOptions& opt = {}) {
  const auto layout = synthetic_layout(root);
  std::filesystem::create_directories(layout.train_dir);
  std::filesystem::create_directories(layout.heldout_dir);
  std::filesystem::create_directories(layout.mit_dir);
  for (std::size_t i = 0; i < train_count + heldout_count; ++i) {
    const auto s = make_synthetic_sample(seed, i, opt);
    if (i < train_count) {
      write_pfm(layout.train_dir / (s.name + ".pfm"), s.image);
      continue;
    }
    write_pfm(layout.heldout_dir / (s.name + ".pfm"), s.image);
    const auto dir = layout.mit_dir / s.name;
    std::filesystem::create_directories(dir);
    write_pfm(dir / "original.pfm", s.image);
    write_pfm(dir / "reflectance.pfm", s.reflectance);
    write_pfm(dir / "shading.pfm", s.shading);
  }
  return layout;
}

}  // namespace iidnet
