// SPDX-License-Identifier: Apache-2.0
#include "repiln/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "repiln/random.hpp"

namespace fs = std::filesystem;

namespace repiln {

void SequenceRecord::validate(double nominal_rate) const {
  auto fail = [&](const std::string& why) { throw DatasetError("sequence '" + name + "': " + why); };
  if (time.rank() != 1) fail("time must be a vector, got " + shape_str(time.shape()));
  const std::size_t n = time.size();
  if (n < 2) fail("time needs at least two samples");
  auto check = [&](const char* what, const Tensor<double>& t, Shape want) {
    if (t.shape() != want) fail(std::string(what) + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(want));
    if (!t.all_finite()) fail(std::string(what) + " contains non-finite values");
  };
  check("gyro", gyro, {3, n});
  check("accel", accel, {3, n});
  check("gt_pos", gt_pos, {2, n});
  if (gt_yaw) check("gt_yaw", *gt_yaw, {n});
  for (std::size_t i = 1; i < n; ++i)
    if (!(time[i] > time[i - 1])) fail("time is not strictly increasing at index " + std::to_string(i));
  const double rate = static_cast<double>(n - 1) / duration();
  if (std::abs(rate - nominal_rate) > 0.01 * nominal_rate)
    fail("sample rate " + std::to_string(rate) + " Hz is not within 1% of " + std::to_string(nominal_rate) + " Hz");
}

// ---------------------------------------------------------------------------
// on-disk layout

SequenceRecord load_sequence(const std::string& dir, const std::string& name, double nominal_rate) {
  SequenceRecord rec;
  rec.name = name;
  auto load = [&](const char* file) {
    const fs::path p = fs::path(dir) / file;
    if (!fs::exists(p)) throw DatasetError("sequence '" + name + "': missing file " + p.string());
    return load_tensor<double>(p.string());
  };
  rec.time = load("time");
  rec.gyro = load("gyro");
  rec.accel = load("accel");
  rec.gt_pos = load("gt_pos");
  if (fs::exists(fs::path(dir) / "gt_yaw")) rec.gt_yaw = load("gt_yaw");
  rec.validate(nominal_rate);
  return rec;
}

std::vector<SequenceRecord> load_dataset(const std::string& root, double nominal_rate) {
  const fs::path manifest = fs::path(root) / "manifest.txt";
  std::ifstream is(manifest);
  if (!is) throw DatasetError("missing manifest: " + manifest.string());
  std::vector<SequenceRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(load_sequence((fs::path(root) / line).string(), line, nominal_rate));
  }
  return out;
}

void save_sequence(const std::string& dir, const SequenceRecord& record) {
  fs::create_directories(dir);
  save_tensor((fs::path(dir) / "time").string(), record.time);
  save_tensor((fs::path(dir) / "gyro").string(), record.gyro);
  save_tensor((fs::path(dir) / "accel").string(), record.accel);
  save_tensor((fs::path(dir) / "gt_pos").string(), record.gt_pos);
  if (record.gt_yaw) save_tensor((fs::path(dir) / "gt_yaw").string(), *record.gt_yaw);
}

void save_dataset(const std::string& root, const std::vector<SequenceRecord>& records) {
  fs::create_directories(root);
  std::ofstream manifest(fs::path(root) / "manifest.txt", std::ios::binary | std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + root);
  for (const auto& r : records) {
    if (r.name.empty() || r.name.find('/') != std::string::npos || r.name.find('\n') != std::string::npos)
      throw DatasetError("invalid sequence name '" + r.name + "'");
    manifest << r.name << '\n';
    save_sequence((fs::path(root) / r.name).string(), r);
  }
}

// ---------------------------------------------------------------------------
// windows

template <typename T>
std::vector<WindowSample<T>> make_windows(const SequenceRecord& rec, std::size_t length, std::size_t stride) {
  const std::size_t n = rec.size();
  if (length == 0 || stride == 0) throw std::invalid_argument("window length and stride must be positive");
  if (length > n)
    throw std::invalid_argument("window length " + std::to_string(length) + " exceeds sequence '" + rec.name +
                                "' of " + std::to_string(n) + " samples");
  std::vector<WindowSample<T>> out;
  for (std::size_t off = 0; off + length <= n; off += stride) {
    WindowSample<T> w;
    w.imu = Tensor<T>(Shape{6, length});
    for (std::size_t t = 0; t < length; ++t)
      for (std::size_t c = 0; c < 3; ++c) {
        w.imu.at(c, t) = static_cast<T>(rec.gyro.at(c, off + t));
        w.imu.at(c + 3, t) = static_cast<T>(rec.accel.at(c, off + t));
      }
    const std::size_t last = off + length - 1;
    w.t_start = rec.time[off];
    w.t_end = rec.time[last];
    const double dt = w.t_end - w.t_start;
    for (std::size_t k = 0; k < 2; ++k) w.target_velocity[k] = (rec.gt_pos.at(k, last) - rec.gt_pos.at(k, off)) / dt;
    out.push_back(std::move(w));
  }
  return out;
}

DatasetSplit split_sequences(std::vector<SequenceRecord> records, std::uint64_t seed) {
  Rng rng(seed);
  std::shuffle(records.begin(), records.end(), rng);
  const std::size_t n = records.size();
  std::size_t n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) / 10.0));
  std::size_t n_test = n_val;
  if (n >= 3) {
    n_val = std::max<std::size_t>(n_val, 1);
    n_test = std::max<std::size_t>(n_test, 1);
  } else {
    n_val = n == 2 ? 1 : 0;
    n_test = 0;
  }
  DatasetSplit s;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n - n_val - n_test ? s.train : (i < n - n_test ? s.val : s.test);
    dst.push_back(std::move(records[i]));
  }
  return s;
}

// ---------------------------------------------------------------------------
// synthetic generator

std::string to_string(Motion m) {
  switch (m) {
    case Motion::Straight: return "straight";
    case Motion::Circle: return "circle";
    case Motion::RandomTurn: return "random-turn";
  }
  return "?";
}

Motion parse_motion(const std::string& s) {
  if (s == "straight") return Motion::Straight;
  if (s == "circle") return Motion::Circle;
  if (s == "random-turn") return Motion::RandomTurn;
  throw std::invalid_argument("unknown motion: " + s);
}

void SynthSpec::validate() const {
  if (!(duration > 0)) throw std::invalid_argument("synthetic duration must be positive");
  if (!(rate > 0)) throw std::invalid_argument("synthetic rate must be positive");
  if (!(speed >= 0)) throw std::invalid_argument("synthetic speed must be non-negative");
  if (motion == Motion::Circle && !(radius > 0)) throw std::invalid_argument("circle radius must be positive");
  if (motion == Motion::RandomTurn && !(segment_duration > 0))
    throw std::invalid_argument("segment duration must be positive");
  if (!(gyro_noise >= 0 && accel_noise >= 0)) throw std::invalid_argument("noise sigmas must be non-negative");
  if (duration * rate < 1) throw std::invalid_argument("synthetic sequence would have fewer than two samples");
}

namespace {

// Piece of constant yaw rate starting at `t0` with heading `yaw0` at `p0`.
struct Segment {
  double t0, yaw0, rate;
  std::array<double, 2> p0;
};

std::array<double, 2> advance(const Segment& s, double speed, double tau) {
  const double yaw = s.yaw0 + s.rate * tau;
  if (std::abs(s.rate) < 1e-12)
    return {s.p0[0] + speed * tau * std::cos(s.yaw0), s.p0[1] + speed * tau * std::sin(s.yaw0)};
  const double r = speed / s.rate;
  return {s.p0[0] + r * (std::sin(yaw) - std::sin(s.yaw0)), s.p0[1] + r * (std::cos(s.yaw0) - std::cos(yaw))};
}

}  // namespace

SequenceRecord synth_generate(const SynthSpec& spec, std::uint64_t seed, const std::string& name) {
  spec.validate();
  Rng path_rng(mix_seed(seed, 1));
  Rng noise_rng(mix_seed(seed, 2));

  std::vector<Segment> segments;
  switch (spec.motion) {
    case Motion::Straight:
      segments.push_back({0.0, spec.initial_yaw, 0.0, {0, 0}});
      break;
    case Motion::Circle:
      segments.push_back({0.0, spec.initial_yaw, spec.speed / spec.radius, {0, 0}});
      break;
    case Motion::RandomTurn: {
      std::uniform_real_distribution<double> turn(-spec.max_turn_rate, spec.max_turn_rate);
      Segment s{0.0, spec.initial_yaw, 0.0, {0, 0}};
      for (std::size_t k = 0; s.t0 <= spec.duration; ++k) {
        s.rate = k % 2 ? turn(path_rng) : 0.0;  // straight legs between turns
        segments.push_back(s);
        const Segment next{s.t0 + spec.segment_duration, s.yaw0 + s.rate * spec.segment_duration, 0.0,
                           advance(s, spec.speed, spec.segment_duration)};
        s = next;
      }
      break;
    }
  }

  const auto n = static_cast<std::size_t>(std::floor(spec.duration * spec.rate)) + 1;
  SequenceRecord rec;
  rec.name = name;
  rec.time = Tensor<double>(Shape{n});
  rec.gyro = Tensor<double>(Shape{3, n});
  rec.accel = Tensor<double>(Shape{3, n});
  rec.gt_pos = Tensor<double>(Shape{2, n});
  rec.gt_yaw = Tensor<double>(Shape{n});
  std::normal_distribution<double> gyro_noise(0.0, 1.0), accel_noise(0.0, 1.0);

  std::size_t seg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / spec.rate;
    while (seg + 1 < segments.size() && segments[seg + 1].t0 <= t) ++seg;
    const Segment& s = segments[seg];
    const double tau = t - s.t0;
    const double yaw = s.yaw0 + s.rate * tau;
    const auto p = advance(s, spec.speed, tau);

    // Constant speed: world acceleration is purely centripetal.
    const double aw_x = -spec.speed * s.rate * std::sin(yaw);
    const double aw_y = spec.speed * s.rate * std::cos(yaw);
    // Body = R(yaw)^T * world; z carries the gravity reaction.
    const double ab_x = std::cos(yaw) * aw_x + std::sin(yaw) * aw_y;
    const double ab_y = -std::sin(yaw) * aw_x + std::cos(yaw) * aw_y;
    const std::array<double, 3> gyro{0.0, 0.0, s.rate};
    const std::array<double, 3> accel{ab_x, ab_y, kGravity};

    rec.time[i] = t;
    rec.gt_pos.at(0, i) = p[0];
    rec.gt_pos.at(1, i) = p[1];
    (*rec.gt_yaw)[i] = yaw;
    for (std::size_t c = 0; c < 3; ++c) {
      double g = gyro[c] + spec.gyro_bias[c];
      double a = accel[c] + spec.accel_bias[c];
      if (spec.gyro_noise > 0) g += spec.gyro_noise * gyro_noise(noise_rng);
      if (spec.accel_noise > 0) a += spec.accel_noise * accel_noise(noise_rng);
      rec.gyro.at(c, i) = g;
      rec.accel.at(c, i) = a;
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// normalization

template <typename T>
NormalizationStats compute_stats(const std::vector<WindowSample<T>>& windows) {
  if (windows.empty()) throw std::invalid_argument("cannot compute statistics of zero windows");
  NormalizationStats s;
  std::array<double, 6> sum{}, sq{};
  std::size_t count = 0;
  for (const auto& w : windows) {
    const std::size_t L = w.imu.dim(1);
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t t = 0; t < L; ++t) sum[c] += w.imu.at(c, t);
    count += L;
  }
  for (std::size_t c = 0; c < 6; ++c) s.mean[c] = sum[c] / static_cast<double>(count);
  for (const auto& w : windows)
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t t = 0; t < w.imu.dim(1); ++t) {
        const double d = w.imu.at(c, t) - s.mean[c];
        sq[c] += d * d;
      }
  for (std::size_t c = 0; c < 6; ++c) s.std[c] = std::sqrt(sq[c] / static_cast<double>(count));
  return s;
}

template <typename T>
Tensor<T> normalize_input(const Tensor<T>& imu, const NormalizationStats& stats) {
  const std::size_t r = imu.rank();
  if ((r != 2 && r != 3) || imu.dim(r - 2) != 6)
    throw ShapeError("normalize_input expects [6, L] or [B, 6, L], got " + shape_str(imu.shape()));
  for (std::size_t c = 0; c < 6; ++c)
    if (!(stats.std[c] > 0)) throw std::domain_error("channel " + std::to_string(c) + " has zero standard deviation");
  Tensor<T> out = imu;
  const std::size_t L = imu.dim(r - 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / L) % 6;
    out[i] = static_cast<T>((imu[i] - stats.mean[c]) / stats.std[c]);
  }
  return out;
}

template <typename T>
void normalize(std::vector<WindowSample<T>>& windows, const NormalizationStats& stats) {
  for (const auto& w : windows)
    if (w.normalized) throw std::logic_error("window is already normalized");
  for (auto& w : windows) {
    w.imu = normalize_input(w.imu, stats);
    w.normalized = true;
  }
}

#define REPILN_INSTANTIATE(T)                                                                            \
  template std::vector<WindowSample<T>> make_windows(const SequenceRecord&, std::size_t, std::size_t);  \
  template NormalizationStats compute_stats(const std::vector<WindowSample<T>>&);                       \
  template void normalize(std::vector<WindowSample<T>>&, const NormalizationStats&);                    \
  template Tensor<T> normalize_input(const Tensor<T>&, const NormalizationStats&);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
