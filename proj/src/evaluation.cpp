// SPDX-License-Identifier: Apache-2.0
#include "repiln/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace repiln {

namespace {

constexpr double kTimeTol = 1e-9;

double norm2(Vec2 a) { return a[0] * a[0] + a[1] * a[1]; }
Vec2 minus(Vec2 a, Vec2 b) { return {a[0] - b[0], a[1] - b[1]}; }

// Ground-truth indices inside the prediction's span.
std::pair<std::size_t, std::size_t> overlap(const Trajectory& pred, const Trajectory& gt) {
  const double lo = pred.time.front() - kTimeTol, hi = pred.time.back() + kTimeTol;
  const auto b = std::lower_bound(gt.time.begin(), gt.time.end(), lo);
  const auto e = std::upper_bound(gt.time.begin(), gt.time.end(), hi);
  return {static_cast<std::size_t>(b - gt.time.begin()), static_cast<std::size_t>(e - gt.time.begin())};
}

}  // namespace

void Trajectory::validate(const char* what) const {
  if (time.size() != pos.size())
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(time.size()) + " timestamps but " +
                                std::to_string(pos.size()) + " positions");
  if (time.size() < 2) throw std::invalid_argument(std::string(what) + ": needs at least two samples");
  for (std::size_t i = 1; i < time.size(); ++i)
    if (!(time[i] > time[i - 1]))
      throw std::invalid_argument(std::string(what) + ": timestamps not strictly increasing at index " +
                                  std::to_string(i));
}

Vec2 Trajectory::at(double t) const {
  if (t <= time.front()) return pos.front();
  if (t >= time.back()) return pos.back();
  const std::size_t hi = static_cast<std::size_t>(std::upper_bound(time.begin(), time.end(), t) - time.begin());
  const std::size_t lo = hi - 1;
  const double w = (t - time[lo]) / (time[hi] - time[lo]);
  return {pos[lo][0] + w * (pos[hi][0] - pos[lo][0]), pos[lo][1] + w * (pos[hi][1] - pos[lo][1])};
}

double Trajectory::length() const {
  double s = 0;
  for (std::size_t i = 1; i < pos.size(); ++i) s += std::sqrt(norm2(minus(pos[i], pos[i - 1])));
  return s;
}

Trajectory integrate_trajectory(const std::vector<double>& time, const std::vector<Vec2>& velocity, Vec2 p0) {
  if (time.size() != velocity.size())
    throw std::invalid_argument("integrate_trajectory: timestamps and velocities differ in length");
  if (time.empty()) throw std::invalid_argument("integrate_trajectory: no samples");
  Trajectory out;
  out.time = time;
  out.pos.resize(time.size());
  out.pos[0] = p0;
  for (std::size_t k = 0; k + 1 < time.size(); ++k) {
    const double dt = time[k + 1] - time[k];
    if (!(dt > 0)) throw std::invalid_argument("integrate_trajectory: timestamps unordered at index " + std::to_string(k + 1));
    out.pos[k + 1] = {out.pos[k][0] + velocity[k][0] * dt, out.pos[k][1] + velocity[k][1] * dt};
  }
  return out;
}

double ate(const Trajectory& pred, const Trajectory& gt) {
  pred.validate("prediction");
  gt.validate("ground truth");
  const auto [b, e] = overlap(pred, gt);
  if (b >= e) throw std::invalid_argument("ate: prediction and ground truth do not overlap in time");
  double sq = 0;
  for (std::size_t i = b; i < e; ++i) sq += norm2(minus(pred.at(gt.time[i]), gt.pos[i]));
  return std::sqrt(sq / static_cast<double>(e - b));
}

double rte(const Trajectory& pred, const Trajectory& gt, double interval) {
  if (!(interval > 0)) throw std::invalid_argument("rte: interval must be positive");
  pred.validate("prediction");
  gt.validate("ground truth");
  const auto [b, e] = overlap(pred, gt);
  if (b >= e) throw std::invalid_argument("rte: prediction and ground truth do not overlap in time");
  if (e - b < 2) throw std::invalid_argument("rte: a single overlapping sample cannot form a comparison");
  const double end = std::min(pred.time.back(), gt.time[e - 1]);

  auto error = [&](double t0, double t1) {
    const Vec2 dp = minus(pred.at(t1), pred.at(t0));
    const Vec2 dg = minus(gt.at(t1), gt.at(t0));
    return std::sqrt(norm2(minus(dp, dg)));
  };

  double sq = 0;
  std::size_t n = 0;
  for (std::size_t i = b; i < e && gt.time[i] + interval <= end + kTimeTol; ++i) {
    const double t1 = std::min(gt.time[i] + interval, end);
    const double err = error(gt.time[i], t1);
    sq += err * err;
    ++n;
  }
  if (n > 0) return std::sqrt(sq / static_cast<double>(n));

  // Shorter than one interval: full span, scaled up.
  const double t0 = gt.time[b], t1 = gt.time[e - 1];
  return error(t0, t1) * interval / (t1 - t0);
}

double EvalReport::mean_ate() const {
  if (sequences.empty()) return 0;
  double s = 0;
  for (const auto& m : sequences) s += m.ate;
  return s / static_cast<double>(sequences.size());
}

double EvalReport::mean_rte() const {
  if (sequences.empty()) return 0;
  double s = 0;
  for (const auto& m : sequences) s += m.rte;
  return s / static_cast<double>(sequences.size());
}

std::vector<std::pair<double, double>> empirical_cdf(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  std::vector<std::pair<double, double>> out;
  const auto n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out.emplace_back(values[i], static_cast<double>(i + 1) / n);
  return out;
}

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

void write_cdf(const fs::path& p, std::vector<double> values) {
  auto os = open_out(p);
  os << "value,cumulative_fraction\n";
  for (const auto& [v, f] : empirical_cdf(std::move(values))) os << format_double(v) << ',' << format_double(f) << '\n';
}

void write_svg(const fs::path& p, const SequenceMetrics& m) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto* tr : {&m.gt, &m.pred})
    for (const auto& q : tr->pos) {
      x0 = std::min(x0, q[0]), x1 = std::max(x1, q[0]);
      y0 = std::min(y0, q[1]), y1 = std::max(y1, q[1]);
    }
  const double span = std::max({x1 - x0, y1 - y0, 1e-6});
  constexpr double size = 600, margin = 50;
  const double s = (size - 2 * margin) / span;
  auto px = [&](double x) { return format_double(margin + (x - x0) * s); };
  auto py = [&](double y) { return format_double(size - margin - (y - y0) * s); };

  auto os = open_out(p);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\" viewBox=\"0 0 600 600\">\n";
  os << "<title>" << m.name << " (m)</title>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << size - margin << "\" x2=\"" << size - margin << "\" y2=\""
     << size - margin << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\"" << size - margin
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << margin << "\" y=\"" << size - margin + 20 << "\" font-size=\"12\">x " << format_double(x0)
     << " m</text>\n";
  os << "<text x=\"" << size - margin - 80 << "\" y=\"" << size - margin + 20 << "\" font-size=\"12\">"
     << format_double(x0 + span) << " m</text>\n";
  os << "<text x=\"5\" y=\"" << size - margin << "\" font-size=\"12\">y " << format_double(y0) << " m</text>\n";
  os << "<text x=\"5\" y=\"" << margin - 5 << "\" font-size=\"12\">" << format_double(y0 + span) << " m</text>\n";
  auto poly = [&](const Trajectory& tr, const char* color, const char* label) {
    os << "<polyline class=\"" << label << "\" fill=\"none\" stroke=\"" << color << "\" points=\"";
    for (std::size_t i = 0; i < tr.pos.size(); ++i) os << (i ? " " : "") << px(tr.pos[i][0]) << ',' << py(tr.pos[i][1]);
    os << "\"/>\n";
  };
  poly(m.gt, "black", "ground-truth");
  poly(m.pred, "red", "prediction");
  os << "</svg>\n";
}

}  // namespace

void emit_report(const EvalReport& report, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir + ": " + ec.message());
  {
    auto os = open_out(fs::path(out_dir) / "metrics.csv");
    os << "name,ate,rte,length\n";
    for (const auto& m : report.sequences)
      os << m.name << ',' << format_double(m.ate) << ',' << format_double(m.rte) << ',' << format_double(m.length)
         << '\n';
  }
  std::vector<double> ates, rtes;
  for (const auto& m : report.sequences) ates.push_back(m.ate), rtes.push_back(m.rte);
  write_cdf(fs::path(out_dir) / "cdf_ate.csv", ates);
  write_cdf(fs::path(out_dir) / "cdf_rte.csv", rtes);
  for (const auto& m : report.sequences)
    if (!m.gt.pos.empty() && !m.pred.pos.empty()) write_svg(fs::path(out_dir) / ("trajectory_" + m.name + ".svg"), m);
}

}  // namespace repiln
