#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "msy/blocks.hpp"

namespace msy {

enum class Variant {
  yolov8n_like,
  yolov10n_like,
  midstate,
  midstate_dualconv,
  midstate_ema,
  midstate_ed,
};

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

// Published reference totals for this detector family at 200 classes and
// 640px input; the params/flops tools report deviation against them.
namespace reference {
inline constexpr int64_t kParamsYolov8nLike = 3371024;
inline constexpr int64_t kParamsMidstate = 3405456;
inline constexpr int64_t kParamsMidstateDualconv = 3251856;
inline constexpr int64_t kParamsMidstateEma = 3408928;
inline constexpr int64_t kParamsMidstateEd = 3288096;
inline constexpr int64_t kParamsYolov10nLikeLow = 2885888;    // as listed in one source
inline constexpr int64_t kParamsYolov10nLikeHigh = 28858888;  // as listed in another
inline constexpr double kGflopsYolov8nLike = 9.8;
inline constexpr double kGflopsMidstate = 9.8;
inline constexpr double kGflopsMidstateDualconv = 9.4;
inline constexpr double kGflopsMidstateEma = 9.9;
inline constexpr double kGflopsMidstateEd = 9.6;
}  // namespace reference

struct ModelConfig {
  Variant variant = Variant::midstate_ed;
  int num_classes = 200;
  double width_mult = 0.25;
  double depth_mult = 0.33;
  int input_size = 640;
  int reg_max = 16;
  int dualconv_groups = 2;
  int ema_groups = 16;

  bool use_dualconv() const {
    return variant == Variant::midstate_dualconv || variant == Variant::midstate_ed;
  }
  bool use_ema() const {
    return variant == Variant::midstate_ema || variant == Variant::midstate_ed;
  }
  bool use_scdd() const { return variant == Variant::yolov10n_like; }
  bool use_light_cls() const { return variant == Variant::yolov10n_like; }

  void validate() const;
  int64_t channels(int base) const;  // width-scaled, rounded to multiples of 8
  int repeats(int base) const;       // depth-scaled, at least 1

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

template <typename T>
struct HeadOutputs {
  std::array<Tensor<T>, 3> cls;  // (N, nc, Hs, Ws) per scale
  std::array<Tensor<T>, 3> box;  // (N, 4*reg_max, Hs, Ws) per scale
  std::array<int, 3> strides{8, 16, 32};
};

// A built detector: an ordered layer list with explicit skip/concat topology
// feeding a three-scale detection head, plus the parameter store.
template <typename T>
class Model {
 public:
  struct Layer {
    std::string name;
    std::vector<int> from;  // input layer indices, -1 meaning the previous layer
    std::unique_ptr<Module<T>> module;
  };

  explicit Model(ModelConfig config) : config_(std::move(config)), store_(0) {}
  Model(ModelConfig config, uint64_t init_seed) : config_(std::move(config)), store_(init_seed) {}

  // Assembly hook; the last added layer is treated as the output layer.
  void add_layer(std::string name, std::vector<int> from, std::unique_ptr<Module<T>> module);

  HeadOutputs<T> forward(const Tensor<T>& image, Tape<T>* tape = nullptr, bool training = false);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const DetectHead<T>* head() const;

  // Shape/flop propagation at the given input size; flops are totals for the
  // given batch (convention: 2 ops per conv MAC, 1 op per normalization /
  // activation / pooling / elementwise output element, 2mnk per matmul).
  double flops(int input_size, int batch = 1) const;

 private:
  ModelConfig config_;
  ParamStore<T> store_;
  std::vector<Layer> layers_;
};

template <typename T>
Model<T> build_model(const ModelConfig& config, uint64_t init_seed = 0);

struct ParamReport {
  int64_t trainable = 0;
  int64_t total = 0;  // including batch-norm running statistics
  std::vector<std::pair<std::string, int64_t>> per_layer;  // trainable, by layer
};

template <typename T>
ParamReport count_params(const Model<T>& model);

template <typename T>
double count_flops(const Model<T>& model, int input_size, int batch = 1);  // GFLOPs

// Binary weights file: magic MSYW, u32 version, config echo, then per-tensor
// records keyed by parameter path (little-endian f32 payload).
class WeightsError : public DataError {
 public:
  enum class Kind { bad_magic, bad_version, key_set_mismatch, truncated };
  WeightsError(Kind kind, const std::string& msg) : DataError(msg), kind(kind) {}
  Kind kind;
};

template <typename T>
void save_weights(const Model<T>& model, const std::string& path);

template <typename T>
void load_weights(Model<T>& model, const std::string& path);

// Reads just the config echo, so a weights file is self-describing.
ModelConfig peek_weights_config(const std::string& path);

// Human-readable comparison of structural counts against the published
// reference totals, including the closed-form ablation deltas and both
// readings of the dual-conv swap scope.
std::string reconciliation_report(int num_classes = 200, int input_size = 640);

extern template class Model<float>;
extern template class Model<double>;
extern template Model<float> build_model<float>(const ModelConfig&, uint64_t);
extern template Model<double> build_model<double>(const ModelConfig&, uint64_t);
extern template ParamReport count_params<float>(const Model<float>&);
extern template ParamReport count_params<double>(const Model<double>&);
extern template double count_flops<float>(const Model<float>&, int, int);
extern template double count_flops<double>(const Model<double>&, int, int);
extern template void save_weights<float>(const Model<float>&, const std::string&);
extern template void save_weights<double>(const Model<double>&, const std::string&);
extern template void load_weights<float>(Model<float>&, const std::string&);
extern template void load_weights<double>(Model<double>&, const std::string&);

}  // namespace msy
