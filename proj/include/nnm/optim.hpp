#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nnm/layers.hpp"

namespace nnm {

enum class OptimizerKind { adamp, adamw, adam, sgd };

const char* to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct OptimizerHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double delta = 0.1;     // adamp projection threshold
  double wd_ratio = 0.1;  // adamp decay damping when projecting
  double momentum = 0.9;  // sgd
  bool nesterov = false;
};

// What the projection test saw for one parameter on one step.
struct ProjectionInfo {
  bool fired = false;
  bool channel_view = false;  // false: whole-tensor view was used
  double max_cos = 0.0;       // max over rows of the view that decided
  double threshold = 0.0;
};

namespace adamp {

// |<w,g>| / (|w||g| + eps) per row, rows of length row_dim.
template <typename T>
std::vector<double> row_cosines(std::span<const T> w, std::span<const T> g, std::size_t row_dim, double eps);

// Applies the channel-then-layer projection to `p` in place. `dims` are the
// parameter extents; rank-1 parameters are never projected.
template <typename T>
ProjectionInfo project(std::span<const T> w, std::span<const T> g, std::span<T> p, const Shape& dims,
                       double delta, double eps);

}  // namespace adamp

// Per-parameter optimizer state.
template <typename T>
struct ParamState {
  std::vector<T> m;  // first moment (sgd: momentum buffer)
  std::vector<T> v;  // second moment (adam family)
};

// One update of a single tensor. `t` is the step number after increment (>= 1).
template <typename T>
ProjectionInfo update_tensor(OptimizerKind kind, const OptimizerHyper& hp, double lr, bool decay,
                             std::uint64_t t, const Shape& dims, std::span<T> w, std::span<const T> g,
                             ParamState<T>& state);

/// Steps every parameter from its accumulated gradient.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, OptimizerHyper hyper, std::vector<NamedTensor<T>> params);

  // Throws NumericalError, leaving parameters and state untouched, when any
  // gradient is non-finite. Parameters without a gradient are skipped.
  void step(double lr);
  void zero_grad();

  OptimizerKind kind() const { return kind_; }
  const OptimizerHyper& hyper() const { return hyper_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<NamedTensor<T>>& params() { return params_; }
  std::vector<ParamState<T>>& state() { return state_; }
  const std::vector<ProjectionInfo>& last_projection() const { return last_; }

 private:
  OptimizerKind kind_;
  OptimizerHyper hyper_;
  std::vector<NamedTensor<T>> params_;
  std::vector<ParamState<T>> state_;
  std::vector<ProjectionInfo> last_;
  std::uint64_t t_ = 0;
};

/// Per-epoch learning rate: linear warmup then cosine decay to min_lr.
struct Schedule {
  double base_lr = 0.001;
  int warmup_epochs = 20;
  int total_epochs = 1000;
  double min_lr = 0.0;

  void validate() const;
};

// Valid for 0 <= epoch <= total_epochs; epoch == total_epochs is the end of
// the cosine and returns min_lr exactly.
double lr_at(const Schedule& schedule, int epoch);

}  // namespace nnm
