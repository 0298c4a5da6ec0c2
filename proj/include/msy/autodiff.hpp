#pragma once

#include <functional>
#include <span>
#include <vector>

#include "msy/tensor.hpp"

namespace msy {

// Reverse-mode tape. Ops append nodes in execution order; backward() replays
// them once in reverse. A tape is single-threaded and single-shot: re-running
// backward without re-recording is a usage error.
template <typename T>
class Tape {
 public:
  void record(std::vector<Tensor<T>> inputs, Tensor<T> output, std::function<void()> fn) {
    if (consumed_) throw UsageError("tape already consumed by backward; re-record the graph");
    output.mark_tracked();
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void run_backward(const Tensor<T>& output);

 private:
  struct Node {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// True when any input participates in the given tape's recording.
template <typename T>
inline bool should_record(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tape) return false;
  for (const Tensor<T>* t : inputs)
    if (t && t->defined() && t->tracked()) return true;
  return false;
}

enum class PoolKind { max, avg, global_avg, x_avg, y_avg };

// ---- forward kernels (tape == nullptr runs inference-only) ----

// Grouped cross-correlation. weight is (Cout, Cin/groups, kH, kW); optional
// bias is (1, Cout, 1, 1). Zero padding, floor output sizing.
template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 int stride, int padding, int groups);

// max/avg use kernel/stride/padding (max pads with -inf semantics, avg
// requires padding 0); global_avg -> (N,C,1,1), x_avg -> (N,C,H,1),
// y_avg -> (N,C,1,W). Sums run in 64-bit accumulators.
template <typename T>
Tensor<T> pool(Tape<T>* tape, const Tensor<T>& x, PoolKind kind, int kernel = 0, int stride = 0,
               int padding = 0);

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x);

template <typename T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& x);

// Max-subtracted softmax along axis (1=C, 2=H, 3=W).
template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, int axis);

// Batch normalization. Training mode normalizes with batch statistics and
// updates running stats in place; inference mode uses the stored ones.
template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& scale,
                     const Tensor<T>& shift, Tensor<T>& running_mean, Tensor<T>& running_var,
                     bool training, double momentum, double eps);

template <typename T>
Tensor<T> group_norm(Tape<T>* tape, const Tensor<T>& x, int groups, const Tensor<T>& scale,
                     const Tensor<T>& shift, double eps);

template <typename T>
Tensor<T> concat(Tape<T>* tape, std::span<const Tensor<T>> xs, int axis);

template <typename T>
std::vector<Tensor<T>> split(Tape<T>* tape, const Tensor<T>& x, std::span<const int64_t> sizes,
                             int axis);

template <typename T>
Tensor<T> upsample_nearest_2x(Tape<T>* tape, const Tensor<T>& x);

// Metadata-only reinterpretation of the contiguous buffer. Covers the
// group fold/unfold between batch and channel axes, which is a pure reshape
// in row-major NCHW.
template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape target);

template <typename T>
Tensor<T> transpose_hw(Tape<T>* tape, const Tensor<T>& x);

// Elementwise with size-1 broadcasting on any axis.
template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, double factor);

// Batched matmul over flattened spatial axes: (N,1,P,K) x (N,1,K,Q) -> (N,1,P,Q).
template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x);

// Accumulates gradients for every tracked tensor reachable from the scalar
// output. Gradients of watched-but-unused leaves read as zeros.
template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& scalar_output);

// ---- numeric gradient verification ----

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int64_t elements_checked = 0;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-4;
  // 0 checks every element; otherwise a deterministic per-parameter sample
  // of this size, drawn from sample_seed. Large graphs stay tractable while
  // samples differ across seeds.
  int64_t max_elements_per_param = 0;
  uint64_t sample_seed = 0;
};

// Compares analytic gradients of `params` against central finite differences
// of the scalar built by `build` (64-bit throughout). Relative error uses a
// 1e-3 denominator floor so near-zero gradients compare absolutely.
GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>*)>& build,
                           std::span<const Tensor<double>> params, const GradCheckOptions& opts);

GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>*)>& build,
                           std::span<const Tensor<double>> params, double tolerance,
                           double step = 1e-4);

}  // namespace msy
