#include "diffdenoise/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "diffdenoise/error.hpp"

namespace diffdenoise {

double psnr(const ImagePatch& reference, const ImagePatch& test, double data_range) {
  require_same_shape(reference, test, "psnr");
  if (!(data_range > 0.0)) throw ConfigError("psnr data_range must be > 0");
  auto a = reference.values();
  auto b = test.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrInfinite;
  return 10.0 * std::log10(data_range * data_range / mse);
}

namespace {

constexpr int kSsimRadius = 5;
constexpr double kSsimSigma = 1.5;

std::vector<double> ssim_window() {
  std::vector<double> w(2 * kSsimRadius + 1);
  double total = 0.0;
  for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
    w[static_cast<std::size_t>(i + kSsimRadius)] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
    total += w[static_cast<std::size_t>(i + kSsimRadius)];
  }
  for (double& v : w) v /= total;
  return w;
}

/// Separable "valid" filtering of a double field.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int ow = w - n + 1;
  const int oh = h - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * src[static_cast<std::size_t>(r) * w + c + i];
      tmp[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(r + i) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const ImagePatch& reference, const ImagePatch& test, double data_range) {
  require_same_shape(reference, test, "ssim");
  const int win = 2 * kSsimRadius + 1;
  if (reference.height() < win || reference.width() < win) throw ShapeError("ssim requires images of at least 11x11");
  if (!(data_range > 0.0)) throw ConfigError("ssim data_range must be > 0");
  const int h = reference.height();
  const int w = reference.width();
  const std::size_t n = reference.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  auto a = reference.values();
  auto b = test.values();
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a[i];
    y[i] = b[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto k = ssim_window();
  const auto mx = filter_valid(x, h, w, k);
  const auto my = filter_valid(y, h, w, k);
  const auto mxx = filter_valid(xx, h, w, k);
  const auto myy = filter_valid(yy, h, w, k);
  const auto mxy = filter_valid(xy, h, w, k);
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
    total += num / den;
  }
  return total / static_cast<double>(mx.size());
}

double paired_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired_test: score lists differ in length");
  if (a.size() < 5) throw ConfigError("paired_test requires at least 5 pairs");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    if (diff != 0.0) d.push_back(diff);
  }
  const std::size_t n = d.size();
  if (n == 0) return 1.0;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::fabs(d[i]) < std::fabs(d[j]); });
  std::vector<double> rank(n);
  double tie_term = 0.0;
  bool ties = false;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::fabs(d[order[j + 1]]) == std::fabs(d[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    if (t > 1.0) {
      ties = true;
      tie_term += t * t * t - t;
    }
    i = j + 1;
  }
  double w_plus = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > 0.0) w_plus += rank[i];
  }
  const double nn = static_cast<double>(n);

  if (n <= 50 && !ties) {
    // counts[s] = number of sign assignments whose positive-rank sum is s.
    const std::size_t max_sum = n * (n + 1) / 2;
    std::vector<double> counts(max_sum + 1, 0.0);
    counts[0] = 1.0;
    for (std::size_t r = 1; r <= n; ++r) {
      for (std::size_t s = max_sum; s >= r; --s) counts[s] += counts[s - r];
    }
    const double total = std::ldexp(1.0, static_cast<int>(n));
    const auto w = static_cast<std::size_t>(std::llround(w_plus));
    double lower = 0.0;
    for (std::size_t s = 0; s <= w; ++s) lower += counts[s];
    double upper = 0.0;
    for (std::size_t s = w; s <= max_sum; ++s) upper += counts[s];
    return std::min(1.0, 2.0 * std::min(lower, upper) / total);
  }

  const double mean = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
  if (!(var > 0.0)) return 1.0;
  const double z = (w_plus - mean) / std::sqrt(var);
  return std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

void MetricReport::add_method(const std::string& method, std::vector<double> psnr, std::vector<double> ssim) {
  if (psnr.size() != image_ids_.size() || ssim.size() != image_ids_.size()) {
    throw ShapeError("metric column '" + method + "' length differs from image count");
  }
  if (!has_method(method)) methods_.push_back(method);
  psnr_[method] = std::move(psnr);
  ssim_[method] = std::move(ssim);
}

const std::vector<double>& MetricReport::psnr_of(const std::string& method) const {
  auto it = psnr_.find(method);
  if (it == psnr_.end()) throw ConfigError("no metric column '" + method + "'");
  return it->second;
}

const std::vector<double>& MetricReport::ssim_of(const std::string& method) const {
  auto it = ssim_.find(method);
  if (it == ssim_.end()) throw ConfigError("no metric column '" + method + "'");
  return it->second;
}

double MetricReport::mean_psnr(const std::string& method) const { return mean_of(psnr_of(method)); }
double MetricReport::mean_ssim(const std::string& method) const { return mean_of(ssim_of(method)); }

double MetricReport::psnr_p_value(const std::string& a, const std::string& b) const {
  return paired_test(psnr_of(a), psnr_of(b));
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string MetricReport::to_csv() const {
  std::string out = "image_id";
  for (const auto& m : methods_) out += "," + m + "_psnr," + m + "_ssim";
  out += '\n';
  for (std::size_t i = 0; i < image_ids_.size(); ++i) {
    out += image_ids_[i];
    for (const auto& m : methods_) {
      out += "," + format_double(psnr_.at(m)[i]) + "," + format_double(ssim_.at(m)[i]);
    }
    out += '\n';
  }
  return out;
}

MetricReport MetricReport::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty metrics csv");
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "image_id" || header.size() % 2 != 1) throw FormatError("bad metrics csv header");
  std::vector<std::string> methods;
  for (std::size_t c = 1; c < header.size(); c += 2) {
    const std::string& h = header[c];
    if (h.size() < 6 || h.substr(h.size() - 5) != "_psnr") throw FormatError("bad metrics csv column " + h);
    methods.push_back(h.substr(0, h.size() - 5));
  }
  std::vector<std::string> ids;
  std::vector<std::vector<double>> cols(header.size() - 1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw FormatError("metrics csv row has wrong cell count");
    ids.push_back(cells[0]);
    for (std::size_t c = 1; c < cells.size(); ++c) cols[c - 1].push_back(std::stod(cells[c]));
  }
  MetricReport report(ids);
  for (std::size_t m = 0; m < methods.size(); ++m) report.add_method(methods[m], cols[2 * m], cols[2 * m + 1]);
  return report;
}

void MetricReport::save_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << to_csv();
}

MetricReport MetricReport::load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

std::string MetricReport::summary() const {
  std::string best;
  for (const auto& m : methods_) {
    if (best.empty() || mean_psnr(m) > mean_psnr(best)) best = m;
  }
  std::string out = "method            psnr_mean  psnr_std  ssim_mean  p_vs_best\n";
  char buf[160];
  for (const auto& m : methods_) {
    const double p = (m == best || image_ids_.size() < 5) ? 1.0 : psnr_p_value(m, best);
    std::snprintf(buf, sizeof(buf), "%-16s  %9.3f  %8.3f  %9.4f  %9.3g\n", m.c_str(), mean_psnr(m),
                  stddev_of(psnr_of(m)), mean_ssim(m), p);
    out += buf;
  }
  return out;
}

}  // namespace diffdenoise
