// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "repiln/rep_block.hpp"
#include "repiln/sa_gcu.hpp"

namespace repiln {

/// Network hyper-parameters. Serialized as key=value text, which is also the
/// CLI config-file format.
struct ModelConfig {
  std::size_t in_channels = 6;
  std::size_t window_length = 200;
  std::vector<std::size_t> stage_channels{64, 128, 192, 256};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  std::vector<std::size_t> stage_strides{1, 2, 2, 2};  // applied in each stage's final block
  double tssa_e = 50.0;
  double alpha = 0.0;  // <= 0 selects sqrt(channels)
  std::vector<std::size_t> head_hidden{512};
  std::size_t out_dim = 2;
  bool norm_enabled = true;
  Activation gate_activation = Activation::Sigmoid;
  Activation block_activation = Activation::ReLU;
  double expansion_ratio = 1.0;
  bool gcu_pre_norm = false;

  void validate() const;
  /// Temporal length after each stage.
  std::vector<std::size_t> stage_lengths(std::size_t length) const;

  std::string to_text() const;
  /// Applies key=value lines on top of the current values. Unknown keys are
  /// rejected unless `ignore_unknown` is set.
  void apply_text(const std::string& text, bool ignore_unknown = false);
  /// Applies a single key; returns false if the key is not a model key.
  bool apply(const std::string& key, const std::string& value);
};

/// Parses "key=value" lines, skipping blanks and '#' comments.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

template <typename T>
struct RepILNBlock {
  RepBlock<T> rep;
  GcuParams<T> gcu;
  /// Identity residual around the whole block, present when input and
  /// output shapes agree.
  bool outer_skip = false;
};

enum class ModelForm { Train, Deploy };
std::string to_string(ModelForm f);

/// Stem RepBlock, stacked RepILN blocks, tail RepBlock, pooled MLP head.
template <typename T>
class Model {
 public:
  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelForm form() const { return form_; }

  /// x is [in_channels, L] or [B, in_channels, L]; output [out_dim] or
  /// [B, out_dim]. `training` switches norms to batch statistics (train
  /// form only) and updates their running averages.
  Var<T> forward(Tape<T>& tape, Var<T> x, bool training);
  Var<T> forward(Tape<T>& tape, Var<T> x) const;
  /// Gradient-free inference.
  Tensor<T> predict(const Tensor<T>& x) const;

  /// Deploy-form copy; throws if already fused.
  Model fused() const;

  std::size_t param_count() const;
  /// Analytic multiply-accumulate count of one forward pass over a window of
  /// the given length.
  std::size_t macs(std::size_t length) const;

  using ParamVisitor = std::function<void(const std::string&, Parameter<T>&)>;
  using BufferVisitor = std::function<void(const std::string&, Tensor<T>&)>;
  void visit(const ParamVisitor& on_param, const BufferVisitor& on_buffer);
  std::vector<Parameter<T>*> parameters();
  void zero_grad();

  // Input standardization carried with the weights.
  std::optional<Tensor<T>> input_mean;
  std::optional<Tensor<T>> input_std;

  RepBlock<T> stem;
  std::vector<RepILNBlock<T>> blocks;
  RepBlock<T> tail;
  std::vector<LinearLayer<T>> head;

 private:
  // `mut` is this model when running with batch statistics, else null.
  Var<T> forward_core(Tape<T>& tape, Var<T> x, Model* mut) const;

  ModelConfig config_;
  ModelForm form_ = ModelForm::Train;
};

/// Raised when a checkpoint cannot be used as requested.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Container: "RPLN", u16 version, u32-length config text, u32 entry count,
// then entries of (u32-length name, serialized tensor). All LE.
constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path);

/// `expected` rejects a checkpoint of the other form.
template <typename T>
Model<T> load_checkpoint(const std::string& path, std::optional<ModelForm> expected = std::nullopt);

/// Form and config of a checkpoint without building the model.
struct CheckpointHeader {
  ModelForm form;
  ModelConfig config;
  std::size_t entries;
};
CheckpointHeader read_checkpoint_header(const std::string& path);

}  // namespace repiln
