// SPDX-License-Identifier: Apache-2.0
#include "repiln/model.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace repiln {

// ---------------------------------------------------------------------------
// config text

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw std::invalid_argument("config " + key + ": not a number: '" + v + "'");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw std::invalid_argument("config " + key + ": not a non-negative integer: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("config " + key + ": not a boolean: '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
  return out;
}

std::string join(const std::vector<std::size_t>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

bool ModelConfig::apply(const std::string& key, const std::string& v) {
  if (key == "in_channels") in_channels = parse_size(key, v);
  else if (key == "window_length") window_length = parse_size(key, v);
  else if (key == "stage_channels") stage_channels = parse_list(key, v);
  else if (key == "blocks_per_stage") blocks_per_stage = parse_list(key, v);
  else if (key == "stage_strides") stage_strides = parse_list(key, v);
  else if (key == "tssa_e") tssa_e = parse_double(key, v);
  else if (key == "alpha") alpha = parse_double(key, v);
  else if (key == "head_hidden") head_hidden = parse_list(key, v);
  else if (key == "out_dim") out_dim = parse_size(key, v);
  else if (key == "norm_enabled") norm_enabled = parse_bool(key, v);
  else if (key == "gate_activation") gate_activation = parse_activation(v);
  else if (key == "block_activation") block_activation = parse_activation(v);
  else if (key == "expansion_ratio") expansion_ratio = parse_double(key, v);
  else if (key == "gcu_pre_norm") gcu_pre_norm = parse_bool(key, v);
  else return false;
  return true;
}

void ModelConfig::apply_text(const std::string& text, bool ignore_unknown) {
  for (const auto& [k, v] : parse_key_values(text))
    if (!apply(k, v) && !ignore_unknown) throw std::invalid_argument("unknown model config key: " + k);
}

std::string ModelConfig::to_text() const {
  std::string s;
  s += "in_channels=" + std::to_string(in_channels) + "\n";
  s += "window_length=" + std::to_string(window_length) + "\n";
  s += "stage_channels=" + join(stage_channels) + "\n";
  s += "blocks_per_stage=" + join(blocks_per_stage) + "\n";
  s += "stage_strides=" + join(stage_strides) + "\n";
  s += "tssa_e=" + format_double(tssa_e) + "\n";
  s += "alpha=" + format_double(alpha) + "\n";
  s += "head_hidden=" + join(head_hidden) + "\n";
  s += "out_dim=" + std::to_string(out_dim) + "\n";
  s += std::string("norm_enabled=") + (norm_enabled ? "true" : "false") + "\n";
  s += "gate_activation=" + to_string(gate_activation) + "\n";
  s += "block_activation=" + to_string(block_activation) + "\n";
  s += "expansion_ratio=" + format_double(expansion_ratio) + "\n";
  s += std::string("gcu_pre_norm=") + (gcu_pre_norm ? "true" : "false") + "\n";
  return s;
}

void ModelConfig::validate() const {
  if (in_channels == 0 || out_dim == 0) throw std::invalid_argument("channel counts must be positive");
  const std::size_t stages = stage_channels.size();
  if (stages == 0 || blocks_per_stage.size() != stages || stage_strides.size() != stages)
    throw std::invalid_argument("stage_channels, blocks_per_stage and stage_strides must have equal, non-zero length");
  std::size_t total_stride = 1;
  for (std::size_t s = 0; s < stages; ++s) {
    if (stage_channels[s] == 0) throw std::invalid_argument("stage channels must be positive");
    if (blocks_per_stage[s] == 0) throw std::invalid_argument("every stage needs at least one block");
    if (stage_strides[s] != 1 && stage_strides[s] != 2) throw std::invalid_argument("stage strides must be 1 or 2");
    total_stride *= stage_strides[s];
  }
  if (window_length == 0 || window_length % total_stride)
    throw std::invalid_argument("window_length " + std::to_string(window_length) +
                                " must be a positive multiple of the total stride " + std::to_string(total_stride));
  if (!(tssa_e > 0 && tssa_e <= 100)) throw std::invalid_argument("tssa_e must lie in (0, 100]");
  if (!(expansion_ratio > 0)) throw std::invalid_argument("expansion_ratio must be positive");
  for (auto h : head_hidden)
    if (h == 0) throw std::invalid_argument("head widths must be positive");
}

std::vector<std::size_t> ModelConfig::stage_lengths(std::size_t length) const {
  std::vector<std::size_t> out;
  for (auto s : stage_strides) {
    length = conv1d_output_length(length, 3, {s, 1, 1});
    out.push_back(length);
  }
  return out;
}

std::string to_string(ModelForm f) { return f == ModelForm::Train ? "train" : "deploy"; }

// ---------------------------------------------------------------------------
// model

template <typename T>
Model<T> Model<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model m;
  m.config_ = config;
  const bool norm = config.norm_enabled;
  auto rep = [&](std::size_t cin, std::size_t cout, std::size_t stride) {
    return RepBlock<T>{RepBlockTrainParams<T>::init(cin, cout, stride, norm, rng), config.block_activation};
  };
  std::size_t width = config.stage_channels.front();
  m.stem = rep(config.in_channels, width, 1);
  for (std::size_t s = 0; s < config.stage_channels.size(); ++s) {
    for (std::size_t j = 0; j < config.blocks_per_stage[s]; ++j) {
      const bool last = j + 1 == config.blocks_per_stage[s];
      const std::size_t out = last ? config.stage_channels[s] : width;
      const std::size_t stride = last ? config.stage_strides[s] : 1;
      RepILNBlock<T> b{rep(width, out, stride),
                       GcuParams<T>::init(out, config.expansion_ratio, config.tssa_e, config.alpha,
                                          config.gate_activation, config.gcu_pre_norm, rng),
                       width == out && stride == 1};
      m.blocks.push_back(std::move(b));
      width = out;
    }
  }
  m.tail = rep(width, width, 1);
  std::size_t features = width;
  for (auto h : config.head_hidden) {
    m.head.push_back(LinearLayer<T>::init(features, h, rng));
    features = h;
  }
  m.head.push_back(LinearLayer<T>::init(features, config.out_dim, rng));
  return m;
}

template <typename T>
Var<T> Model<T>::forward_core(Tape<T>& tape, Var<T> x, Model* mut) const {
  const auto& shape = x.shape();
  if (shape.size() != 2 && shape.size() != 3)
    throw ShapeError("model input must be [C,L] or [B,C,L], got " + shape_str(shape));
  if (shape[shape.size() - 2] != config_.in_channels)
    throw ShapeError("model expects " + std::to_string(config_.in_channels) + " input channels, got " + shape_str(shape));
  const bool training = mut != nullptr;

  auto run_rep = [&](const RepBlock<T>& cb, RepBlock<T>* mb, Var<T> in) {
    return training ? mb->forward(tape, in, true) : cb.forward(tape, in);
  };
  Var<T> h = run_rep(stem, training ? &mut->stem : nullptr, x);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    RepILNBlock<T>* mb = training ? &mut->blocks[i] : nullptr;
    Var<T> xp = run_rep(b.rep, training ? &mb->rep : nullptr, h);
    Var<T> g = training ? sa_gcu_forward_batch(tape, mb->gcu, xp) : sa_gcu_forward(tape, b.gcu, xp);
    Var<T> xpp = ops::add(xp, g);
    h = b.outer_skip ? ops::add(xpp, h) : xpp;
  }
  h = run_rep(tail, training ? &mut->tail : nullptr, h);
  h.value().check_finite("backbone activations");
  Var<T> z = ops::mean_last(h);
  for (std::size_t i = 0; i < head.size(); ++i) {
    z = head[i].forward(tape, z);
    if (i + 1 < head.size()) z = ops::activation(z, Activation::ReLU);
  }
  return z;
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, Var<T> x, bool training) {
  if (training && form_ == ModelForm::Train) return forward_core(tape, x, this);
  return forward_core(tape, x, nullptr);
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, Var<T> x) const {
  return forward_core(tape, x, nullptr);
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& x) const {
  Tape<T> tape(false);
  return forward(tape, tape.constant(x)).value();
}

template <typename T>
Model<T> Model<T>::fused() const {
  if (form_ == ModelForm::Deploy) throw std::logic_error("model is already in deploy form");
  Model m = *this;
  m.stem.fuse_in_place();
  for (auto& b : m.blocks) b.rep.fuse_in_place();
  m.tail.fuse_in_place();
  m.form_ = ModelForm::Deploy;
  return m;
}

template <typename T>
std::size_t Model<T>::param_count() const {
  std::size_t n = stem.param_count() + tail.param_count();
  for (const auto& b : blocks) n += b.rep.param_count() + b.gcu.param_count();
  for (const auto& l : head) n += l.param_count();
  return n;
}

namespace {

template <typename T>
std::size_t rep_macs(const RepBlock<T>& r, std::size_t out_length) {
  const std::size_t ci = r.in_channels(), co = r.out_channels();
  if (r.is_fused()) return co * ci * 3 * out_length;
  const auto& p = std::get<RepBlockTrainParams<T>>(r.params);
  std::size_t n = co * ci * 4 * out_length;  // kernel-3 and kernel-1 branches
  std::size_t norms = (p.norm3 ? 1 : 0) + (p.norm1 ? 1 : 0) + (p.norm_id ? 1 : 0);
  n += norms * co * out_length;  // one scale-and-shift per element
  return n;
}

}  // namespace

template <typename T>
std::size_t Model<T>::macs(std::size_t length) const {
  std::size_t n = rep_macs(stem, length);
  for (const auto& b : blocks) {
    length = conv1d_output_length(length, 3, {b.rep.stride(), 1, 1});
    n += rep_macs(b.rep, length);
    n += sa_gcu_macs(b.gcu.channels, b.gcu.hidden_channels, length);
    if (b.gcu.pre_norm) n += b.gcu.channels * length;
  }
  n += rep_macs(tail, length);
  for (const auto& l : head) n += l.in_features() * l.out_features();
  return n;
}

template <typename T>
void Model<T>::visit(const ParamVisitor& on_param, const BufferVisitor& on_buffer) {
  auto norm = [&](const std::string& prefix, std::optional<BranchNorm<T>>& n) {
    if (!n) return;
    on_param(prefix + ".gamma", n->gamma);
    on_param(prefix + ".beta", n->beta);
    on_buffer(prefix + ".running_mean", n->running_mean);
    on_buffer(prefix + ".running_var", n->running_var);
  };
  auto conv = [&](const std::string& prefix, Conv1dLayer<T>& c) {
    on_param(prefix + ".w", c.w);
    on_param(prefix + ".b", c.b);
  };
  auto rep = [&](const std::string& prefix, RepBlock<T>& r) {
    if (auto* f = std::get_if<RepBlockFusedParams<T>>(&r.params)) {
      on_param(prefix + ".w", f->w);
      on_param(prefix + ".b", f->b);
      return;
    }
    auto& p = std::get<RepBlockTrainParams<T>>(r.params);
    on_param(prefix + ".w3", p.w3);
    on_param(prefix + ".b3", p.b3);
    on_param(prefix + ".w1", p.w1);
    on_param(prefix + ".b1", p.b1);
    norm(prefix + ".norm3", p.norm3);
    norm(prefix + ".norm1", p.norm1);
    norm(prefix + ".norm_id", p.norm_id);
  };
  rep("stem", stem);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string pre = "blocks." + std::to_string(i);
    rep(pre + ".rep", blocks[i].rep);
    auto& g = blocks[i].gcu;
    norm(pre + ".gcu.pre_norm", g.pre_norm);
    conv(pre + ".gcu.pre_gate", g.pre_gate);
    conv(pre + ".gcu.gate_dw", g.gate_depthwise);
    conv(pre + ".gcu.pre_value", g.pre_value);
    for (auto [name, pd] : {std::pair{"q", &g.tssa.q}, std::pair{"k", &g.tssa.k}, std::pair{"v", &g.tssa.v}}) {
      conv(pre + ".gcu.tssa." + name + ".point", pd->point);
      conv(pre + ".gcu.tssa." + name + ".depth", pd->depth);
    }
    conv(pre + ".gcu.out", g.out);
  }
  rep("tail", tail);
  for (std::size_t i = 0; i < head.size(); ++i) {
    on_param("head." + std::to_string(i) + ".w", head[i].w);
    on_param("head." + std::to_string(i) + ".b", head[i].b);
  }
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  visit([&](const std::string&, Parameter<T>& p) { out.push_back(&p); }, [](const std::string&, Tensor<T>&) {});
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'P', 'L', 'N'};

template <typename U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path) : path_(path), is_(path, std::ios::binary) {
    if (!is_) throw CheckpointError("cannot open checkpoint: " + path);
  }

  std::size_t offset() { return static_cast<std::size_t>(is_.tellg()); }
  std::istream& stream() { return is_; }

  void read(char* dst, std::size_t n, const char* what) {
    const std::size_t at = offset();
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw FormatError(path_ + ": truncated checkpoint reading " + what + " at offset " + std::to_string(at));
  }
  template <typename U>
  U get_le(const char* what) {
    unsigned char buf[sizeof(U)];
    read(reinterpret_cast<char*>(buf), sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
  }
  std::string get_string(const char* what) {
    const auto n = get_le<std::uint32_t>(what);
    std::string s(n, '\0');
    if (n) read(s.data(), n, what);
    return s;
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream is_;
};

struct ParsedHeader {
  ModelForm form = ModelForm::Train;
  ModelConfig config;
  std::uint32_t entries = 0;
};

ParsedHeader read_header(CheckpointReader& r) {
  char magic[4];
  r.read(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kCheckpointMagic))
    throw FormatError(r.path() + ": bad checkpoint magic at offset 0");
  const auto version = r.get_le<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(r.path() + ": unsupported checkpoint version " + std::to_string(version) + " at offset 4");
  const std::size_t text_at = r.offset();
  const std::string text = r.get_string("config");
  ParsedHeader h;
  bool saw_form = false;
  try {
    for (const auto& [k, v] : parse_key_values(text)) {
      if (k == "form") {
        if (v == "train") h.form = ModelForm::Train;
        else if (v == "deploy") h.form = ModelForm::Deploy;
        else throw std::invalid_argument("unknown form '" + v + "'");
        saw_form = true;
      } else if (k == "dtype") {
        if (v != "f32" && v != "f64") throw std::invalid_argument("unknown dtype '" + v + "'");
      } else if (!h.config.apply(k, v)) {
        throw std::invalid_argument("unknown key '" + k + "'");
      }
    }
    if (!saw_form) throw std::invalid_argument("missing form");
    h.config.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(r.path() + ": bad config block at offset " + std::to_string(text_at) + ": " + e.what());
  }
  h.entries = r.get_le<std::uint32_t>("entry count");
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open for writing: " + path);
  auto& m = const_cast<Model<T>&>(model);  // visit() does not modify
  std::vector<std::pair<std::string, const Tensor<T>*>> entries;
  m.visit([&](const std::string& n, Parameter<T>& p) { entries.emplace_back(n, &p.value); },
          [&](const std::string& n, Tensor<T>& t) { entries.emplace_back(n, &t); });
  if (model.input_mean) entries.emplace_back("input.mean", &*model.input_mean);
  if (model.input_std) entries.emplace_back("input.std", &*model.input_std);

  os.write(kCheckpointMagic, 4);
  put_le<std::uint16_t>(os, kCheckpointVersion);
  std::string text = "form=" + to_string(model.form()) + "\n";
  text += std::string("dtype=") + (dtype_of<T>() == DType::F32 ? "f32" : "f64") + "\n";
  text += model.config().to_text();
  put_string(os, text);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_string(os, name);
    write_tensor(os, *t);
  }
  if (!os) throw CheckpointError("write failed: " + path);
}

CheckpointHeader read_checkpoint_header(const std::string& path) {
  CheckpointReader r(path);
  const ParsedHeader h = read_header(r);
  return {h.form, h.config, h.entries};
}

template <typename T>
Model<T> load_checkpoint(const std::string& path, std::optional<ModelForm> expected) {
  CheckpointReader r(path);
  const ParsedHeader h = read_header(r);
  if (expected && *expected != h.form)
    throw CheckpointError(path + ": checkpoint holds a " + to_string(h.form) + "-form model, " +
                          to_string(*expected) + " form requested");
  std::map<std::string, Tensor<T>> entries;
  for (std::uint32_t i = 0; i < h.entries; ++i) {
    std::string name = r.get_string("entry name");
    const std::size_t at = r.offset();
    try {
      entries.emplace(std::move(name), read_tensor<T>(r.stream(), at));
    } catch (const FormatError& e) {
      throw FormatError(path + ": " + e.what());
    }
  }

  Model<T> m = Model<T>::init(h.config, 0);
  if (h.form == ModelForm::Deploy) m = m.fused();
  auto take = [&](const std::string& name, Tensor<T>& dst) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError(path + ": missing entry " + name);
    if (it->second.shape() != dst.shape())
      throw CheckpointError(path + ": entry " + name + " has shape " + shape_str(it->second.shape()) +
                            ", config implies " + shape_str(dst.shape()));
    dst = std::move(it->second);
    entries.erase(it);
  };
  m.visit([&](const std::string& n, Parameter<T>& p) {
            take(n, p.value);
            p.zero_grad();
          },
          [&](const std::string& n, Tensor<T>& t) { take(n, t); });
  for (auto [name, slot] : {std::pair{"input.mean", &m.input_mean}, std::pair{"input.std", &m.input_std}}) {
    auto it = entries.find(name);
    if (it == entries.end()) continue;
    if (it->second.shape() != Shape{h.config.in_channels})
      throw CheckpointError(path + ": entry " + name + " does not match in_channels");
    *slot = std::move(it->second);
    entries.erase(it);
  }
  if (!entries.empty()) throw CheckpointError(path + ": unexpected entry " + entries.begin()->first);
  return m;
}

#define REPILN_INSTANTIATE(T)                                                       \
  template class Model<T>;                                                          \
  template void save_checkpoint(const Model<T>&, const std::string&);               \
  template Model<T> load_checkpoint(const std::string&, std::optional<ModelForm>);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
