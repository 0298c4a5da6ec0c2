#pragma once

#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msy/autodiff.hpp"
#include "msy/tensor.hpp"

namespace msy {

// Rounds a scaled channel count up to the given multiple.
int64_t make_divisible(double value, int64_t divisor = 8);

enum class Init { conv_uniform, zeros, ones, constant };

// Named parameter tensors in deterministic insertion order. The key set and
// order are a function of the owning block structure alone, which is what the
// weights file format relies on.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string key;
    Tensor<T> tensor;
    bool trainable;
  };

  explicit ParamStore(uint64_t init_seed = 0) : rng_(init_seed) {}

  // `arg` is the fan-in for conv_uniform and the fill value for constant.
  Tensor<T>& create(const std::string& key, Shape shape, Init init, double arg, bool trainable);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries_mut() { return entries_; }
  Tensor<T>* find(const std::string& key);
  const Tensor<T>* find(const std::string& key) const;

  int64_t trainable_count() const;
  int64_t total_count() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
  Rng rng_;
};

struct ModuleStats {
  std::vector<Shape> out;
  double flops = 0.0;  // at the batch size of the given input shapes
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                         bool training) = 0;
  virtual ModuleStats stats(std::span<const Shape> in) const = 0;
  virtual std::string kind() const = 0;

  Tensor<T> forward1(Tape<T>* tape, const Tensor<T>& x, bool training) {
    std::vector<Tensor<T>> in{x};
    auto out = forward(tape, in, training);
    return out.at(0);
  }
};

enum class BlockKind {
  conv_bn_silu,
  bottleneck,
  dual_conv,
  dual_bottleneck,
  c2f,
  c2f_dual,
  sppf,
  ema,
  scdd,
  detect_head,
};

struct BlockSpec {
  BlockKind kind = BlockKind::conv_bn_silu;
  int64_t c_in = 0;
  int64_t c_out = 0;
  int n = 1;        // bottleneck repeats (c2f family)
  int groups = 1;   // dual-conv G or ema g
  int kernel = 3;
  int stride = 1;
  bool shortcut = true;
  int num_classes = 80;                 // detect_head
  int reg_max = 16;                     // detect_head
  std::vector<int64_t> head_channels;   // detect_head inputs, strides 8/16/32
  bool light_cls = false;               // detect_head, v10-style
};

struct ParamCount {
  int64_t trainable = 0;
  int64_t total = 0;  // trainable plus batch-norm running statistics
};

// Closed-form parameter count per block kind; the constructed store must
// match it exactly.
ParamCount analytic_param_count(const BlockSpec& spec);

// Validates divisibility constraints and constructs the block, registering
// its parameters under `prefix`.
template <typename T>
std::unique_ptr<Module<T>> make_block(ParamStore<T>& store, const std::string& prefix,
                                      const BlockSpec& spec);

// ---- concrete blocks (used directly by model assembly) ----

template <typename T>
class ConvBNSiLU : public Module<T> {
 public:
  ConvBNSiLU(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out,
             int kernel, int stride, int padding, int groups = 1, bool act = true);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return "conv_bn_silu"; }

 private:
  Tensor<T> weight_, bn_scale_, bn_shift_, bn_rmean_, bn_rvar_;
  int64_t c_in_, c_out_;
  int kernel_, stride_, padding_, groups_;
  bool act_;
};

template <typename T>
class DualConv : public Module<T> {
 public:
  DualConv(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out,
           int groups);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return "dual_conv"; }

 private:
  Tensor<T> gc_weight_, pw_weight_, bn_scale_, bn_shift_, bn_rmean_, bn_rvar_;
  int64_t c_in_, c_out_;
  int groups_;
};

template <typename T>
class Bottleneck : public Module<T> {
 public:
  Bottleneck(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out,
             bool shortcut, bool dual, int dual_groups);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return dual_ ? "dual_bottleneck" : "bottleneck"; }

 private:
  std::unique_ptr<Module<T>> cv1_, cv2_;
  bool residual_, dual_;
};

template <typename T>
class C2f : public Module<T> {
 public:
  C2f(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out, int n,
      bool shortcut, bool dual, int dual_groups);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return dual_ ? "c2f_dual" : "c2f"; }

 private:
  std::unique_ptr<ConvBNSiLU<T>> cv1_, cv2_;
  std::vector<std::unique_ptr<Bottleneck<T>>> m_;
  int64_t hidden_;
  bool dual_;
};

template <typename T>
class SPPF : public Module<T> {
 public:
  SPPF(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out,
       int pool_kernel = 5);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return "sppf"; }

 private:
  std::unique_ptr<ConvBNSiLU<T>> cv1_, cv2_;
  int pool_kernel_;
};

// Grouped parallel attention: a 1x1 branch over directional global pooling
// and a 3x3 branch, fused by cross softmax-matmul interaction into a
// spatial sigmoid gate on the input.
template <typename T>
class EMA : public Module<T> {
 public:
  EMA(ParamStore<T>& store, const std::string& prefix, int64_t channels, int groups);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return "ema"; }

 private:
  Tensor<T> w1x1_, b1x1_, w3x3_, b3x3_, gn_scale_, gn_shift_;
  int64_t channels_;
  int groups_;
};

// Pointwise channel adjustment followed by depthwise stride-2 downsampling.
template <typename T>
class SCDD : public Module<T> {
 public:
  SCDD(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return "scdd"; }

 private:
  std::unique_ptr<ConvBNSiLU<T>> pw_, dw_;
};

// Decoupled anchor-free head over three scales. Per scale, two conv stacks
// produce class logits (nc channels) and per-side distance distributions
// (4*reg_max channels). Outputs are ordered cls0, box0, cls1, box1, cls2, box2.
template <typename T>
class DetectHead : public Module<T> {
 public:
  DetectHead(ParamStore<T>& store, const std::string& prefix, int num_classes, int reg_max,
             std::span<const int64_t> channels, bool light_cls = false);
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                 bool training) override;
  ModuleStats stats(std::span<const Shape> in) const override;
  std::string kind() const override { return "detect_head"; }

  int num_classes() const { return nc_; }
  int reg_max() const { return reg_max_; }

 private:
  struct Branch {
    std::vector<std::unique_ptr<Module<T>>> stack;
    Tensor<T> proj_w, proj_b;
    int64_t proj_in = 0, proj_out = 0;
  };
  Branch make_branch(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_mid,
                     int64_t c_out, bool light);
  Tensor<T> run_branch(Branch& br, Tape<T>* tape, const Tensor<T>& x, bool training);
  double branch_flops(const Branch& br, Shape in, Shape* out) const;

  std::vector<Branch> cls_, box_;
  int nc_, reg_max_;
  bool light_cls_;
};

// Parameterless graph plumbing.
template <typename T>
class Upsample2x : public Module<T> {
 public:
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in, bool) override {
    return {upsample_nearest_2x<T>(tape, in[0])};
  }
  ModuleStats stats(std::span<const Shape> in) const override {
    return {{Shape{in[0].n, in[0].c, in[0].h * 2, in[0].w * 2}}, 0.0};
  }
  std::string kind() const override { return "upsample2x"; }
};

template <typename T>
class ConcatChannels : public Module<T> {
 public:
  std::vector<Tensor<T>> forward(Tape<T>* tape, std::span<const Tensor<T>> in, bool) override {
    return {concat<T>(tape, in, 1)};
  }
  ModuleStats stats(std::span<const Shape> in) const override {
    Shape s = in[0];
    for (size_t i = 1; i < in.size(); ++i) s.c += in[i].c;
    return {{s}, 0.0};
  }
  std::string kind() const override { return "concat"; }
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class ConvBNSiLU<float>;
extern template class ConvBNSiLU<double>;
extern template class DualConv<float>;
extern template class DualConv<double>;
extern template class Bottleneck<float>;
extern template class Bottleneck<double>;
extern template class C2f<float>;
extern template class C2f<double>;
extern template class SPPF<float>;
extern template class SPPF<double>;
extern template class EMA<float>;
extern template class EMA<double>;
extern template class SCDD<float>;
extern template class SCDD<double>;
extern template class DetectHead<float>;
extern template class DetectHead<double>;
extern template std::unique_ptr<Module<float>> make_block<float>(ParamStore<float>&,
                                                                 const std::string&,
                                                                 const BlockSpec&);
extern template std::unique_ptr<Module<double>> make_block<double>(ParamStore<double>&,
                                                                   const std::string&,
                                                                   const BlockSpec&);

}  // namespace msy
