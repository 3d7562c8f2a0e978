// Image comparison metrics (MSE, PSNR, DSSIM, LMSE) and the per-condition
// consistency tables built from them.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <nlohmann/json.hpp>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "iidnet/errors.hpp"
#include "iidnet/illum_sim.hpp"
#include "iidnet/image.hpp"

namespace iidnet {

/// PSNR of two identical images. Excluded from means and counted instead.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

inline bool is_identical_psnr(double psnr) { return std::isinf(psnr) && psnr > 0; }

namespace detail {

/// Non-owning view of an H x W x C interleaved raster.
struct Raster {
  std::size_t height, width, channels;
  std::span<const double> data;

  double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }
};

inline Raster raster(const LinearImage& img) { return {img.height(), img.width(), 3, img.data()}; }
inline Raster raster(const GrayMap& img) { return {img.height(), img.width(), 1, img.data()}; }

inline void require_same(const Raster& a, const Raster& b, const char* op) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw StructuralError(std::string(op) + ": dimension mismatch (" + std::to_string(a.height) + "x" +
                          std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                          std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                          std::to_string(b.channels) + ")");
  if (a.data.empty()) throw StructuralError(std::string(op) + ": empty image");
}

inline double mse(const Raster& a, const Raster& b, double lo, double hi, bool clip) {
  require_same(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double x = a.data[i], y = b.data[i];
    if (clip) {
      x = std::clamp(x, lo, hi);
      y = std::clamp(y, lo, hi);
    }
    s += (x - y) * (x - y);
  }
  return s / static_cast<double>(a.data.size());
}

inline double psnr_from_mse(double m, double peak) {
  if (m == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(peak * peak / m);
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

/// "Valid" separable filtering of one channel.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                        const std::vector<double>& taps) {
  const std::size_t k = taps.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += taps[i] * img[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += taps[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

inline double ssim_channel(const Raster& a, const Raster& b, std::size_t c, std::size_t window, double sigma,
                           double peak) {
  const std::size_t h = a.height, w = a.width;
  std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    x[i] = std::clamp(a.data[i * a.channels + c], 0.0, peak);
    y[i] = std::clamp(b.data[i * b.channels + c], 0.0, peak);
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto taps = gaussian_taps(window, sigma);
  const auto mx = filter_valid(x, h, w, taps), my = filter_valid(y, h, w, taps);
  const auto sxx = filter_valid(xx, h, w, taps), syy = filter_valid(yy, h, w, taps),
             sxy = filter_valid(xy, h, w, taps);
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

inline double ssim(const Raster& a, const Raster& b, double peak) {
  require_same(a, b, "ssim");
  // Images smaller than the 11x11 window use the largest odd window that fits.
  std::size_t window = std::min<std::size_t>({11, a.height, a.width});
  if (window % 2 == 0) --window;
  double s = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) s += ssim_channel(a, b, c, window, 1.5, peak);
  return s / static_cast<double>(a.channels);
}

}  // namespace detail

/// Mean squared difference over all pixels and channels (no clipping).
inline double mse(const LinearImage& a, const LinearImage& b) {
  return detail::mse(detail::raster(a), detail::raster(b), 0, 0, false);
}
inline double mse(const GrayMap& a, const GrayMap& b) {
  return detail::mse(detail::raster(a), detail::raster(b), 0, 0, false);
}

/// 10 log10(peak^2 / mse) on inputs clipped to [0, peak]; kPsnrIdentical
/// when the clipped images agree exactly.
inline double psnr(const LinearImage& a, const LinearImage& b, double peak = 1.0) {
  return detail::psnr_from_mse(detail::mse(detail::raster(a), detail::raster(b), 0.0, peak, true), peak);
}
inline double psnr(const GrayMap& a, const GrayMap& b, double peak = 1.0) {
  return detail::psnr_from_mse(detail::mse(detail::raster(a), detail::raster(b), 0.0, peak, true), peak);
}
inline double psnr_from_mse(double mse_value, double peak = 1.0) { return detail::psnr_from_mse(mse_value, peak); }

/// (1 - SSIM) / 2 with an 11x11 Gaussian window (sigma 1.5), per channel and
/// averaged, on inputs clipped to [0, 1].
inline double dssim(const LinearImage& a, const LinearImage& b) {
  return (1.0 - detail::ssim(detail::raster(a), detail::raster(b), 1.0)) / 2.0;
}
inline double dssim(const GrayMap& a, const GrayMap& b) {
  return (1.0 - detail::ssim(detail::raster(a), detail::raster(b), 1.0)) / 2.0;
}

// ---------------------------------------------------------------------------
// LMSE

struct LmseConfig {
  std::size_t window_size = 20;
  std::size_t step = 10;
};

namespace detail {

/// Window origins along one axis: 0, step, 2 step, ... plus a final window
/// flush with the far edge when the regular grid leaves a remainder.
inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window, std::size_t step) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p + window <= extent; p += step) out.push_back(p);
  if (out.back() + window < extent) out.push_back(extent - window);
  return out;
}

struct LmseSums {
  double error = 0.0;
  double energy = 0.0;
};

inline LmseSums lmse_sums(const Raster& est, const Raster& gt, const LmseConfig& cfg) {
  require_same(est, gt, "lmse");
  if (cfg.window_size == 0 || cfg.step == 0 || cfg.step > cfg.window_size)
    throw StructuralError("lmse: need 0 < step <= window_size");
  if (cfg.window_size > est.height || cfg.window_size > est.width)
    throw StructuralError("lmse: " + std::to_string(cfg.window_size) + "px window does not fit a " +
                          std::to_string(est.height) + "x" + std::to_string(est.width) + " image");
  const std::size_t k = cfg.window_size;
  LmseSums s;
  for (std::size_t y0 : window_starts(est.height, k, cfg.step))
    for (std::size_t x0 : window_starts(est.width, k, cfg.step)) {
      double eg = 0.0, ee = 0.0;
      for (std::size_t y = y0; y < y0 + k; ++y)
        for (std::size_t x = x0; x < x0 + k; ++x)
          for (std::size_t c = 0; c < est.channels; ++c) {
            eg += est.at(y, x, c) * gt.at(y, x, c);
            ee += est.at(y, x, c) * est.at(y, x, c);
          }
      const double a = ee > 0.0 ? eg / ee : 0.0;
      for (std::size_t y = y0; y < y0 + k; ++y)
        for (std::size_t x = x0; x < x0 + k; ++x)
          for (std::size_t c = 0; c < est.channels; ++c) {
            const double d = a * est.at(y, x, c) - gt.at(y, x, c);
            s.error += d * d;
            s.energy += gt.at(y, x, c) * gt.at(y, x, c);
          }
    }
  return s;
}

inline double lmse_score(const Raster& est, const Raster& gt, const LmseConfig& cfg) {
  const auto s = lmse_sums(est, gt, cfg);
  if (s.energy == 0.0) throw DegenerateInputError("lmse: ground truth is identically zero");
  return s.error / s.energy;
}

}  // namespace detail

/// Scale-invariant local error of one map: each window's estimate is scaled by
/// its least-squares factor before comparison; RGB windows fit one factor
/// across all three channels.
inline double lmse(const LinearImage& est, const LinearImage& gt, const LmseConfig& cfg = {}) {
  return detail::lmse_score(detail::raster(est), detail::raster(gt), cfg);
}
inline double lmse(const GrayMap& est, const GrayMap& gt, const LmseConfig& cfg = {}) {
  return detail::lmse_score(detail::raster(est), detail::raster(gt), cfg);
}

struct LmseResult {
  double reflectance = 0.0;
  double shading = 0.0;
  double score = 0.0;  // mean of the two
};

inline LmseResult lmse_decomposition(const LinearImage& refl_est, const GrayMap& shad_est,
                                     const LinearImage& refl_gt, const GrayMap& shad_gt,
                                     const LmseConfig& cfg = {}) {
  LmseResult r;
  r.reflectance = lmse(refl_est, refl_gt, cfg);
  r.shading = lmse(shad_est, shad_gt, cfg);
  r.score = 0.5 * (r.reflectance + r.shading);
  return r;
}

// ---------------------------------------------------------------------------
// Consistency reports

struct MetricRow {
  std::string label;
  double psnr = 0.0;
  double mse = 0.0;
  double dssim = 0.0;
};

/// Metrics of one image set. When reference_index is set, that condition has
/// no row and renders as "--".
struct ConsistencyReport {
  std::string title;
  std::vector<MetricRow> rows;
  std::optional<std::size_t> reference_index;
  std::string reference_label;
};

inline MetricRow compare(const std::string& label, const LinearImage& a, const LinearImage& b) {
  return {label, psnr(a, b), mse(a, b), dssim(a, b)};
}

/// Reflectance of every grid condition against the reference condition.
/// reflectances must follow the evaluation grid order.
inline ConsistencyReport consistency_report(const std::vector<LinearImage>& reflectances,
                                            std::size_t reference = kGridReference,
                                            const std::string& title = "Reflectance consistency") {
  if (reflectances.size() != 9)
    throw StructuralError("consistency_report: expected 9 views, got " + std::to_string(reflectances.size()));
  if (reference >= 9) throw StructuralError("consistency_report: reference index out of range");
  ConsistencyReport r;
  r.title = title;
  r.reference_index = reference;
  r.reference_label = condition_label(reference);
  for (std::size_t i = 0; i < 9; ++i)
    if (i != reference) r.rows.push_back(compare(condition_label(i), reflectances[i], reflectances[reference]));
  return r;
}

/// Each input against its own reconstruction.
inline ConsistencyReport reconstruction_report(const std::vector<LinearImage>& inputs,
                                               const std::vector<LinearImage>& reconstructions,
                                               const std::string& title = "Reconstruction") {
  if (inputs.size() != 9 || reconstructions.size() != 9)
    throw StructuralError("reconstruction_report: expected 9 inputs and 9 reconstructions");
  ConsistencyReport r;
  r.title = title;
  for (std::size_t i = 0; i < 9; ++i) r.rows.push_back(compare(condition_label(i), inputs[i], reconstructions[i]));
  return r;
}

struct AggregateRow {
  std::string label;
  double psnr = 0.0;            // mean over sets with finite PSNR
  std::size_t identical = 0;    // sets with identical images
  double mse = 0.0;
  double dssim = 0.0;
};

struct AggregateReport {
  std::string title;
  std::vector<AggregateRow> rows;
  std::optional<std::size_t> reference_index;
  std::string reference_label;
  std::size_t sets = 0;
};

/// Arithmetic mean of each row over image sets with identical layouts.
inline AggregateReport aggregate(const std::vector<ConsistencyReport>& reports) {
  if (reports.empty()) throw StructuralError("aggregate: no reports");
  AggregateReport out;
  const auto& first = reports.front();
  out.title = first.title;
  out.reference_index = first.reference_index;
  out.reference_label = first.reference_label;
  out.sets = reports.size();
  for (const auto& row : first.rows) out.rows.push_back({row.label});
  std::vector<std::size_t> finite(first.rows.size(), 0);
  for (const auto& rep : reports) {
    if (rep.rows.size() != first.rows.size()) throw StructuralError("aggregate: reports differ in layout");
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
      if (rep.rows[i].label != first.rows[i].label) throw StructuralError("aggregate: row labels differ");
      auto& a = out.rows[i];
      if (is_identical_psnr(rep.rows[i].psnr)) {
        ++a.identical;
      } else {
        a.psnr += rep.rows[i].psnr;
        ++finite[i];
      }
      a.mse += rep.rows[i].mse;
      a.dssim += rep.rows[i].dssim;
    }
  }
  const double n = static_cast<double>(reports.size());
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    auto& a = out.rows[i];
    a.psnr = finite[i] > 0 ? a.psnr / static_cast<double>(finite[i]) : kPsnrIdentical;
    a.mse /= n;
    a.dssim /= n;
  }
  return out;
}

inline AggregateReport aggregate(const ConsistencyReport& single) { return aggregate(std::vector{single}); }

namespace detail {

inline std::string fmt(double v, int precision) {
  if (is_identical_psnr(v)) return "identical";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

inline std::string psnr_cell(const AggregateRow& r, std::size_t sets) {
  std::string s = fmt(r.psnr, 2);
  if (r.identical > 0 && r.identical < sets)
    s += " (" + std::to_string(r.identical) + "/" + std::to_string(sets) + " identical)";
  return s;
}

/// Rows of an aggregate report in display order, with the reference slot
/// re-inserted as a "--" row.
inline std::vector<std::array<std::string, 4>> display_rows(const AggregateReport& r) {
  std::vector<std::array<std::string, 4>> rows;
  std::size_t k = 0;
  const std::size_t total = r.rows.size() + (r.reference_index ? 1 : 0);
  for (std::size_t i = 0; i < total; ++i) {
    if (r.reference_index && *r.reference_index == i) {
      rows.push_back({r.reference_label, "--", "--", "--"});
      continue;
    }
    const auto& row = r.rows[k++];
    rows.push_back({row.label, psnr_cell(row, r.sets), fmt(row.mse, 6), fmt(row.dssim, 6)});
  }
  return rows;
}

}  // namespace detail

inline std::string to_csv(const AggregateReport& r) {
  std::ostringstream os;
  os << "condition,psnr_db,identical_sets,mse,dssim,sets\n";
  std::size_t k = 0;
  const std::size_t total = r.rows.size() + (r.reference_index ? 1 : 0);
  for (std::size_t i = 0; i < total; ++i) {
    if (r.reference_index && *r.reference_index == i) {
      os << '"' << r.reference_label << "\",--,,--,--," << r.sets << "\n";
      continue;
    }
    const auto& row = r.rows[k++];
    os << '"' << row.label << "\"," << (is_identical_psnr(row.psnr) ? "identical" : detail::fmt(row.psnr, 6))
       << ',' << row.identical << ',' << detail::fmt(row.mse, 9) << ',' << detail::fmt(row.dssim, 9) << ','
       << r.sets << "\n";
  }
  return os.str();
}

inline std::string to_text(const AggregateReport& r) {
  const std::array<std::string, 4> header{"Condition", "PSNR [dB]", "MSE", "DSSIM"};
  auto rows = detail::display_rows(r);
  std::array<std::size_t, 4> width{};
  for (std::size_t c = 0; c < 4; ++c) {
    width[c] = header[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  os << r.title << " (" << r.sets << (r.sets == 1 ? " image set" : " image sets") << ")\n";
  auto line = [&](const std::array<std::string, 4>& cells) {
    for (std::size_t c = 0; c < 4; ++c) {
      if (c == 0)
        os << cells[c] << std::string(width[c] - cells[c].size(), ' ');
      else
        os << "  " << std::string(width[c] - cells[c].size(), ' ') << cells[c];
    }
    os << "\n";
  };
  line(header);
  std::size_t rule = 6;
  for (auto w : width) rule += w;
  os << std::string(rule, '-') << "\n";
  for (const auto& row : rows) line(row);
  return os.str();
}

inline nlohmann::json to_json(const AggregateReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"condition", row.label},
                    {"psnr_db", is_identical_psnr(row.psnr) ? nlohmann::json("identical") : nlohmann::json(row.psnr)},
                    {"identical_sets", row.identical},
                    {"mse", row.mse},
                    {"dssim", row.dssim}});
  nlohmann::json j{{"title", r.title}, {"sets", r.sets}, {"rows", rows}};
  if (r.reference_index) j["reference"] = r.reference_label;
  return j;
}

// ---------------------------------------------------------------------------
// LMSE table: one row per image plus the mean.

struct LmseRow {
  std::string name;
  LmseResult result;
};

struct LmseTable {
  std::vector<LmseRow> rows;
  LmseResult mean;
};

inline LmseTable make_lmse_table(std::vector<LmseRow> rows) {
  LmseTable t;
  t.rows = std::move(rows);
  if (t.rows.empty()) return t;
  for (const auto& r : t.rows) {
    t.mean.reflectance += r.result.reflectance;
    t.mean.shading += r.result.shading;
    t.mean.score += r.result.score;
  }
  const double n = static_cast<double>(t.rows.size());
  t.mean.reflectance /= n;
  t.mean.shading /= n;
  t.mean.score /= n;
  return t;
}

inline std::string to_text(const LmseTable& t) {
  std::size_t name_w = 5;  // "Image"
  for (const auto& r : t.rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream os;
  auto line = [&](const std::string& name, const std::string& a, const std::string& b, const std::string& c) {
    os << name << std::string(name_w - name.size(), ' ') << "  " << std::string(11 - std::min<std::size_t>(11, a.size()), ' ')
       << a << "  " << std::string(9 - std::min<std::size_t>(9, b.size()), ' ') << b << "  "
       << std::string(5 - std::min<std::size_t>(5, c.size()), ' ') << c << "\n";
  };
  line("Image", "Reflectance", "Shading", "LMSE");
  os << std::string(name_w + 2 + 11 + 2 + 9 + 2 + 5, '-') << "\n";
  for (const auto& r : t.rows)
    line(r.name, detail::fmt(r.result.reflectance, 3), detail::fmt(r.result.shading, 3),
         detail::fmt(r.result.score, 3));
  os << std::string(name_w + 2 + 11 + 2 + 9 + 2 + 5, '-') << "\n";
  line("Mean", detail::fmt(t.mean.reflectance, 3), detail::fmt(t.mean.shading, 3), detail::fmt(t.mean.score, 3));
  return os.str();
}

inline std::string to_csv(const LmseTable& t) {
  std::ostringstream os;
  os << "image,lmse_reflectance,lmse_shading,lmse\n";
  for (const auto& r : t.rows)
    os << '"' << r.name << "\"," << detail::fmt(r.result.reflectance, 9) << ','
       << detail::fmt(r.result.shading, 9) << ',' << detail::fmt(r.result.score, 9) << "\n";
  os << "mean," << detail::fmt(t.mean.reflectance, 9) << ',' << detail::fmt(t.mean.shading, 9) << ','
     << detail::fmt(t.mean.score, 9) << "\n";
  return os.str();
}

}  // namespace iidnet
