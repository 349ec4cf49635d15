#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "nnm/layers.hpp"

namespace nnm {

struct BlockSpec {
  std::size_t expansion = 6;
  std::size_t out_channels = 16;
  std::size_t repeats = 1;
  std::size_t first_stride = 1;  // later repeats use stride 1
  bool se = true;
  int dropout_position = 3;  // 0 = none
  double dropout_rate = 0.2;
};

enum class BlockKind { ilrb, plain_residual };

const char* to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& name);

struct ModelConfig {
  std::size_t stem_channels = 32;
  double width_multiplier = 1.0;
  std::vector<BlockSpec> blocks;
  std::size_t head_channels = 1280;
  std::size_t num_classes = 5;
  ActivationKind activation = ActivationKind::relu6;
  BlockKind block_kind = BlockKind::ilrb;
  std::size_t se_reduction = 12;
  ActivationKind se_activation = ActivationKind::relu6;
  DropoutMode dropout_mode = DropoutMode::spatial;
  double head_dropout = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected. Missing keys keep their defaults, except
  // `table`, which seeds `blocks` from a named default table first.
  static ModelConfig from_json(const nlohmann::json& j);
  // FNV-1a of the canonical JSON; checkpoints must match it on load.
  std::uint64_t hash() const;
};

// Nearest multiple of 8, never below 8.
std::size_t round_channels(double channels);

// "mbv2" or "rexnet-lin".
std::vector<BlockSpec> default_table(const std::string& name);
ModelConfig default_model_config(const std::string& table, std::size_t num_classes);

/// stem (3x3 stride 2) -> blocks -> 1x1 head -> GAP -> dropout -> linear.
template <typename T>
class Model : public Module<T> {
 public:
  Model(const ModelConfig& config, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng);
  // Head activation map before pooling.
  Tensor<T> features(const Tensor<T>& x, Mode mode, Rng& rng);

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;
  std::vector<NamedTensor<T>> parameters();
  std::vector<NamedTensor<T>> buffers();

  const ModelConfig& config() const { return config_; }
  const std::vector<std::unique_ptr<Block<T>>>& blocks() const { return blocks_; }

  Conv2d<T> stem_conv;
  BatchNorm2d<T> stem_bn;
  Activation<T> stem_act;
  Conv2d<T> head_conv;
  BatchNorm2d<T> head_bn;
  Activation<T> head_act;
  Dropout<T> head_dropout;
  Linear<T> classifier;

 private:
  ModelConfig config_;
  std::vector<std::unique_ptr<Block<T>>> blocks_;
};

template <typename T>
std::size_t count_params(Module<T>& module);

extern template class Model<float>;
extern template class Model<double>;

// ---- checkpoints ---------------------------------------------------------------

/// Named f32 tensors in file order plus a JSON metadata block.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const Tensor<float>* find(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[4] = {'N', 'N', 'M', 'N'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

// Written to a temporary file first and renamed into place.
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
// FormatError on bad magic, version or truncation.
Checkpoint load_checkpoint(const std::string& path);

// Model parameters and buffers, by name.
Checkpoint model_state(Model<float>& model);
// Copies every model tensor from `checkpoint` after checking names, shapes
// and the config hash. Nothing is modified when a check fails.
void load_model_state(Model<float>& model, const Checkpoint& checkpoint);

std::uint64_t fnv1a(const std::string& text);

}  // namespace nnm
