// SPDX-License-Identifier: Apache-2.0
// repiln: synthesize data, train, fuse, evaluate and inspect models.
//
// Exit codes: 0 success, 2 usage or input error, 3 divergence or corrupted
// numerics.
#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "repiln/pipeline.hpp"
#include "repiln/random.hpp"
#include "repiln/training.hpp"

using namespace repiln;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kUsage = 2, kDiverged = 3;

/// Raised for numerics that make a result meaningless (non-finite weights).
class CorruptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void banner(const std::string& command, std::uint64_t seed, const std::string& config) {
  std::cout << "command=" << command << "\nseed=" << seed << "\n";
  std::istringstream is(config);
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) std::cout << "config." << line << "\n";
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

template <typename T>
void require_finite(Model<T>& m, const std::string& what) {
  bool ok = true;
  m.visit([&](const std::string&, Parameter<T>& p) { ok = ok && p.value.all_finite(); },
          [&](const std::string&, Tensor<T>& t) { ok = ok && t.all_finite(); });
  if (!ok) throw CorruptError(what + " contains non-finite values");
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string out;
  std::size_t sequences = 1;
  std::string motion = "straight";
  std::uint64_t seed = 0;
  SynthSpec spec;
};

int cmd_synth(SynthOptions& o) {
  o.spec.motion = parse_motion(o.motion);
  o.spec.validate();
  if (o.sequences == 0) throw std::invalid_argument("--sequences must be at least 1");
  std::ostringstream cfg;
  cfg << "sequences=" << o.sequences << "\nmotion=" << to_string(o.spec.motion)
      << "\nduration=" << format_double(o.spec.duration) << "\nrate=" << format_double(o.spec.rate)
      << "\nspeed=" << format_double(o.spec.speed) << "\nradius=" << format_double(o.spec.radius)
      << "\ngyro_noise=" << format_double(o.spec.gyro_noise) << "\naccel_noise=" << format_double(o.spec.accel_noise)
      << "\n";
  banner("synth", o.seed, cfg.str());

  std::vector<SequenceRecord> recs;
  Rng heading(mix_seed(o.seed, 0));
  std::uniform_real_distribution<double> yaw(-M_PI, M_PI);
  for (std::size_t i = 0; i < o.sequences; ++i) {
    SynthSpec s = o.spec;
    // circles and turns start at a random heading; straight lines keep --yaw
    if (s.motion != Motion::Straight) s.initial_yaw = yaw(heading);
    char name[32];
    std::snprintf(name, sizeof name, "seq%03zu", i);
    recs.push_back(synth_generate(s, mix_seed(o.seed, i + 1), name));
  }
  save_dataset(o.out, recs);
  std::cout << "wrote " << recs.size() << " sequences of " << recs.front().size() << " samples to " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string data, out, config, history;
  std::uint64_t seed = 0;
  bool resume = false;
};

int cmd_train(const TrainOptions& o) {
  if (o.resume) throw std::invalid_argument("--resume is not supported; training always starts from scratch");
  if (!fs::is_directory(o.data)) throw std::invalid_argument("data directory not found: " + o.data);
  ModelConfig mc;
  TrainConfig tc;
  if (!o.config.empty())
    for (const auto& [k, v] : parse_key_values(read_file(o.config)))
      if (!mc.apply(k, v) && !tc.apply(k, v)) throw std::invalid_argument("unknown config key '" + k + "'");
  tc.seed = o.seed;
  mc.validate();
  tc.validate();
  banner("train", o.seed, mc.to_text() + tc.to_text());

  auto records = load_dataset(o.data);
  if (records.size() < 2) throw std::invalid_argument("training needs at least two sequences, found " +
                                                      std::to_string(records.size()));
  auto split = split_sequences(std::move(records), mix_seed(o.seed, 0x5E7));
  std::cout << "split: " << split.train.size() << " train, " << split.val.size() << " val, " << split.test.size()
            << " test sequences\n";
  auto tr = windows_of<float>(split.train, mc.window_length, tc.window_stride);
  auto va = windows_of<float>(split.val, mc.window_length, mc.window_length);
  const auto stats = compute_stats(tr);
  normalize(tr, stats);
  normalize(va, stats);
  auto model = Model<float>::init(mc, o.seed);
  set_input_stats(model, stats);
  std::cout << "windows: " << tr.size() << " train, " << va.size() << " val; parameters " << model.param_count()
            << "\n";

  auto res = train(model, tr, va, tc, [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " train_loss " << format_double(r.train_loss) << " val_loss "
              << format_double(r.val_loss) << " lr " << format_double(r.lr) << std::endl;
  });
  require_finite(res.best, "trained model");
  save_checkpoint(res.best, o.out);
  const std::string history = o.history.empty() ? o.out + ".history.csv" : o.history;
  write_history(history, res.history);
  std::cout << "best epoch " << res.best_epoch << "; initial train_loss "
            << format_double(res.history.front().train_loss) << ", final train_loss "
            << format_double(res.history.back().train_loss) << "\nwrote " << o.out << " and " << history << "\n";
  if (!split.test.empty()) {
    const auto rep = evaluate_model(res.best, split.test);
    std::cout << "test: mean ATE " << format_double(rep.mean_ate()) << " m, mean RTE "
              << format_double(rep.mean_rte()) << " m over " << rep.sequences.size() << " sequences\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// fuse

int cmd_fuse(const std::string& in, const std::string& out, std::uint64_t seed) {
  auto model = load_checkpoint<float>(in, ModelForm::Train);
  banner("fuse", seed, model.config().to_text());
  require_finite(model, "checkpoint");
  const auto fused = model.fused();
  const auto before = model.param_count(), after = fused.param_count();
  // probe: one random window through both forms
  Rng rng(mix_seed(seed, 0xF05E));
  const auto& c = model.config();
  auto probe = normal_tensor<float>({1, c.in_channels, c.window_length}, 1.0, rng);
  const double dev = max_abs_diff(model.predict(probe), fused.predict(probe));
  save_checkpoint(fused, out);
  std::cout << "parameters: train " << before << ", deploy " << after << ", reduction "
            << format_double(100.0 * (1.0 - double(after) / double(before))) << "%\n"
            << "probe window max deviation " << format_double(dev) << "\nwrote " << out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval / predict

int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& out, double interval,
             std::uint64_t seed) {
  auto model = load_checkpoint<float>(ckpt);
  banner("eval", seed, model.config().to_text() + "rte_interval=" + format_double(interval) + "\n");
  require_finite(model, "checkpoint");
  if (!fs::is_directory(data)) throw std::invalid_argument("data directory not found: " + data);
  const auto records = load_dataset(data);
  if (records.empty()) throw std::invalid_argument("dataset is empty: " + data);
  for (const auto& r : records)
    if (r.size() < model.config().window_length)
      throw std::invalid_argument("sequence '" + r.name + "' has " + std::to_string(r.size()) +
                                  " samples, fewer than the model window length " +
                                  std::to_string(model.config().window_length));
  auto rep = evaluate_model(model, records, interval);
  emit_report(rep, out);
  std::cout << "form " << to_string(model.form()) << ", parameters " << rep.params << ", MACs/window " << rep.macs
            << "\n";
  for (const auto& s : rep.sequences)
    std::cout << s.name << " ATE " << format_double(s.ate) << " m, RTE " << format_double(s.rte) << " m, length "
              << format_double(s.length) << " m\n";
  std::cout << "mean ATE " << format_double(rep.mean_ate()) << " m, mean RTE " << format_double(rep.mean_rte())
            << " m\nwrote report to " << out << "\n";
  return kOk;
}

int cmd_predict(const std::string& sequence, const std::string& ckpt, const std::string& out,
                std::string trajectory, std::size_t stride, std::uint64_t seed) {
  auto model = load_checkpoint<float>(ckpt);
  banner("predict", seed, model.config().to_text() + "stride=" + std::to_string(stride) + "\n");
  require_finite(model, "checkpoint");
  const fs::path dir(sequence);
  const auto rec = load_sequence(dir.string(), dir.filename().string());
  const auto p = predict_sequence(model, rec, stride);

  std::ofstream vel(out, std::ios::binary | std::ios::trunc);
  if (!vel) throw std::invalid_argument("cannot write " + out);
  vel << "t_start,t_end,vx,vy\n";
  for (std::size_t i = 0; i < p.velocity.size(); ++i)
    vel << format_double(p.window_start[i]) << ',' << format_double(p.window_end[i]) << ','
        << format_double(p.velocity[i][0]) << ',' << format_double(p.velocity[i][1]) << '\n';

  if (trajectory.empty()) trajectory = (fs::path(out).parent_path() / (fs::path(out).stem().string() + "_trajectory.csv")).string();
  std::ofstream tr(trajectory, std::ios::binary | std::ios::trunc);
  if (!tr) throw std::invalid_argument("cannot write " + trajectory);
  tr << "time,x,y\n";
  for (std::size_t i = 0; i < p.pred.size(); ++i)
    tr << format_double(p.pred.time[i]) << ',' << format_double(p.pred.pos[i][0]) << ','
       << format_double(p.pred.pos[i][1]) << '\n';
  std::cout << p.velocity.size() << " windows; wrote " << out << " and " << trajectory << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// info

int cmd_info(const std::string& ckpt, std::uint64_t seed) {
  auto model = load_checkpoint<float>(ckpt);
  banner("info", seed, model.config().to_text());
  const std::size_t L = model.config().window_length;
  std::cout << "form " << to_string(model.form()) << "\nparameters " << model.param_count() << "\nmacs@" << L << ' '
            << model.macs(L) << "\nmacs@" << 2 * L << ' ' << model.macs(2 * L) << "\nnormalization "
            << (model.input_mean ? "stored" : "none") << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inertial localization with reparameterized convolutions and sparse temporal attention"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("--out", so.out, "Output dataset directory")->required();
  synth->add_option("--sequences", so.sequences, "Number of sequences");
  synth->add_option("--duration", so.spec.duration, "Seconds per sequence");
  synth->add_option("--motion", so.motion, "straight, circle or random-turn");
  synth->add_option("--rate", so.spec.rate, "Sample rate, Hz");
  synth->add_option("--speed", so.spec.speed, "m/s");
  synth->add_option("--radius", so.spec.radius, "Circle radius, m");
  synth->add_option("--yaw", so.spec.initial_yaw, "Heading of straight lines, rad");
  synth->add_option("--turn-rate", so.spec.max_turn_rate, "Largest random-turn yaw rate, rad/s");
  synth->add_option("--segment", so.spec.segment_duration, "Random-turn leg duration, s");
  synth->add_option("--gyro-noise", so.spec.gyro_noise, "Gyro noise sigma, rad/s");
  synth->add_option("--accel-noise", so.spec.accel_noise, "Accelerometer noise sigma, m/s^2");
  synth->add_option("--gyro-bias", so.spec.gyro_bias, "Gyro bias x y z")->expected(3);
  synth->add_option("--accel-bias", so.spec.accel_bias, "Accelerometer bias x y z")->expected(3);
  synth->add_option("--seed", so.seed, "Random seed");

  TrainOptions to;
  auto* trn = app.add_subcommand("train", "Train on a dataset and write the best checkpoint");
  trn->add_option("--data", to.data, "Dataset directory")->required();
  trn->add_option("--out", to.out, "Checkpoint path")->required();
  trn->add_option("--config", to.config, "key=value file with model and training settings");
  trn->add_option("--history", to.history, "History file (default: <out>.history.csv)");
  trn->add_option("--seed", to.seed, "Random seed");
  trn->add_flag("--resume", to.resume, "Not supported; rejected");

  std::string fin, fout;
  auto* fuse = app.add_subcommand("fuse", "Convert a train-form checkpoint to deploy form");
  fuse->add_option("--in", fin, "Train-form checkpoint")->required();
  fuse->add_option("--out", fout, "Deploy-form checkpoint")->required();
  fuse->add_option("--seed", seed, "Seed of the probe window");

  std::string edata, eckpt, eout;
  double interval = 60.0;
  auto* ev = app.add_subcommand("eval", "ATE/RTE report over a dataset");
  ev->add_option("--data", edata, "Dataset directory")->required();
  ev->add_option("--ckpt", eckpt, "Checkpoint")->required();
  ev->add_option("--out", eout, "Report directory")->required();
  ev->add_option("--rte-interval", interval, "RTE interval, s");
  ev->add_option("--seed", seed, "Unused; printed for the record");

  std::string pseq, pckpt, pout, ptraj;
  std::size_t stride = 0;
  auto* pred = app.add_subcommand("predict", "Per-window velocities and the integrated trajectory");
  pred->add_option("--sequence", pseq, "Sequence directory")->required();
  pred->add_option("--ckpt", pckpt, "Checkpoint")->required();
  pred->add_option("--out", pout, "Velocity CSV")->required();
  pred->add_option("--trajectory", ptraj, "Trajectory CSV (default: <out>_trajectory.csv)");
  pred->add_option("--stride", stride, "Window stride in samples (default: window length)");
  pred->add_option("--seed", seed, "Unused; printed for the record");

  std::string ickpt;
  auto* info = app.add_subcommand("info", "Checkpoint form, config, parameter and MAC counts");
  info->add_option("--ckpt", ickpt, "Checkpoint")->required();
  info->add_option("--seed", seed, "Unused; printed for the record");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(so);
    if (*trn) return cmd_train(to);
    if (*fuse) return cmd_fuse(fin, fout, seed);
    if (*ev) return cmd_eval(edata, eckpt, eout, interval, seed);
    if (*pred) return cmd_predict(pseq, pckpt, pout, ptraj, stride, seed);
    if (*info) return cmd_info(ickpt, seed);
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const CorruptError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
