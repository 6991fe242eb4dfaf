#pragma once

// Static PNG plots: training-loss curves from a run's losses.csv and DSC bars
// from an ablation report. No text rendering; colours identify series.

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>

#include <png.h>

#include "dualseg/experiment.hpp"

namespace dualseg {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr std::array<Rgb, 6> kPalette{{
    {31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}, {140, 86, 75}}};

class Canvas {
 public:
  Canvas(int w, int h, Rgb bg = {255, 255, 255}) : w_(w), h_(h), px_(std::size_t(w) * h, bg) {}

  int width() const { return w_; }
  int height() const { return h_; }

  void set(int x, int y, Rgb c) {
    if (x >= 0 && y >= 0 && x < w_ && y < h_) px_[std::size_t(y) * w_ + x] = c;
  }
  Rgb at(int x, int y) const { return px_[std::size_t(y) * w_ + x]; }

  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void write_png(const fs::path& path) const {
    fs::path tmp = path;
    tmp += ".tmp";
    std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(tmp.string().c_str(), "wb"), &std::fclose);
    if (!f) throw Error(Errc::io, "cannot open " + tmp.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, nullptr);
      throw Error(Errc::io, "libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw Error(Errc::io, "libpng failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, png_uint_32(w_), png_uint_32(h_), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h_; ++y) {
      png_write_row(png, reinterpret_cast<png_const_bytep>(px_.data() + std::size_t(y) * w_));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    f.reset();
    fs::rename(tmp, path);
  }

 private:
  int w_, h_;
  std::vector<Rgb> px_;
};

struct Series {
  std::vector<double> y;
};

/// Line plot of several series sharing the x axis (index) and a y range.
inline Canvas plot_lines(const std::vector<Series>& series, int w = 640, int h = 400) {
  Canvas c(w, h);
  const int l = 40, r = w - 10, t = 10, b = h - 30;
  double lo = 0.0, hi = 1e-12;
  std::size_t n = 1;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, s.y.size());
  }
  c.line(l, b, r, b, {0, 0, 0});
  c.line(l, t, l, b, {0, 0, 0});
  for (int i = 1; i <= 4; ++i) {
    const int y = b - (b - t) * i / 4;
    c.line(l, y, r, y, {225, 225, 225});
  }
  auto px = [&](std::size_t i) { return l + int(double(r - l) * double(i) / double(std::max<std::size_t>(n - 1, 1))); };
  auto py = [&](double v) { return b - int(double(b - t) * (v - lo) / (hi - lo)); };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Rgb col = kPalette[k % kPalette.size()];
    const auto& y = series[k].y;
    for (std::size_t i = 1; i < y.size(); ++i) {
      if (std::isfinite(y[i - 1]) && std::isfinite(y[i])) c.line(px(i - 1), py(y[i - 1]), px(i), py(y[i]), col);
    }
  }
  return c;
}

/// Grouped bar chart: groups[g][k] is bar k of group g, values in [0, 1].
inline Canvas plot_bars(const std::vector<std::vector<double>>& groups, int w = 640, int h = 400) {
  Canvas c(w, h);
  const int l = 40, r = w - 10, t = 10, b = h - 30;
  c.line(l, b, r, b, {0, 0, 0});
  c.line(l, t, l, b, {0, 0, 0});
  for (int i = 1; i <= 10; ++i) {
    const int y = b - (b - t) * i / 10;
    c.line(l, y, r, y, {225, 225, 225});
  }
  if (groups.empty()) return c;
  const int gw = (r - l) / int(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const int nb = std::max<int>(1, int(groups[g].size()));
    const int bw = std::max(2, (gw - 16) / nb);
    for (std::size_t k = 0; k < groups[g].size(); ++k) {
      const double v = std::clamp(groups[g][k], 0.0, 1.0);
      const int x0 = l + int(g) * gw + 8 + int(k) * bw;
      c.fill_rect(x0, b - 1, x0 + bw - 2, b - int(double(b - t) * v), kPalette[k % kPalette.size()]);
    }
  }
  return c;
}

/// Per-stage total-loss curves, smoothed with a per-epoch mean.
inline std::vector<Series> loss_curves(const fs::path& losses_csv) {
  std::istringstream in(read_file_text(losses_csv));
  std::string line;
  std::getline(in, line);
  if (line != kLossHeader) throw Error(Errc::format, losses_csv.string() + ": unexpected header");
  std::map<std::string, std::map<int, std::pair<double, int>>> acc;
  std::vector<std::string> order;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 12) throw Error(Errc::format, losses_csv.string() + ": bad row");
    if (!acc.contains(f[0])) order.push_back(f[0]);
    auto& e = acc[f[0]][std::stoi(f[1])];
    e.first += std::stod(f[5]);
    e.second += 1;
  }
  std::vector<Series> out;
  for (const auto& stage : order) {
    Series s;
    for (const auto& [epoch, v] : acc[stage]) s.y.push_back(v.first / v.second);
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes loss_curves.png for a run directory; returns the path.
inline fs::path report_run(const RunDir& run) {
  if (!fs::exists(run.losses())) throw Error(Errc::dependency, "no loss log at " + run.losses().string());
  fs::create_directories(run.reports());
  const auto path = run.reports() / "loss_curves.png";
  plot_lines(loss_curves(run.losses())).write_png(path);
  return path;
}

/// Writes dsc_bars.png from an ablation.csv: one group per test source, one
/// bar per variant (seed means).
inline fs::path report_ablation(const fs::path& ablation_csv_path) {
  std::istringstream in(read_file_text(ablation_csv_path));
  std::string line;
  std::getline(in, line);
  std::map<std::string, std::vector<double>> groups;
  while (std::getline(in, line)) {
    const auto f = split_csv_line(line);
    if (f.size() == 7 && f[1] == "mean") groups[f[2]].push_back(std::stod(f[4]));
  }
  std::vector<std::vector<double>> g;
  for (auto& [k, v] : groups) g.push_back(v);
  const auto path = ablation_csv_path.parent_path() / "dsc_bars.png";
  plot_bars(g).write_png(path);
  return path;
}

}  // namespace dualseg
