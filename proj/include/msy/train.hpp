#pragma once

#include <array>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "msy/datasynth.hpp"
#include "msy/metrics.hpp"
#include "msy/model.hpp"

namespace msy {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.937;
  double weight_decay = 0.0005;
  int batch_size = 8;     // desk-scale default; full-scale reference uses 32
  int image_size = 160;   // desk-scale default; full-scale reference uses 640
  int epochs = 25;
  uint64_t seed = 0;
  double w_cls = 0.5, w_box = 7.5, w_dfl = 1.5;
  std::string eval_split = "val";
  int eval_every = 1;        // epochs between evaluations (0 disables)
  double stop_map50 = -1.0;  // early-stop target on the eval split, <0 disables
  double eval_conf = 0.001;  // decode confidence during evaluation
  double nms_iou = 0.45;

  void validate() const;
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
};

struct TrainBox {
  BBox box;  // pixels at the training image size
  int class_id = 0;
};

// Per-scale cell ownership: gt_index[cell] is the index of the assigned box
// or -1. A cell belongs to the smallest-area ground truth containing its
// center; each ground truth keeps at most its 9 closest cells across scales.
struct ScaleAssignment {
  int stride = 0;
  int64_t cells_h = 0, cells_w = 0;
  std::vector<int32_t> gt_index;
};

struct Assignments {
  std::array<ScaleAssignment, 3> scales;
  int64_t positive_count = 0;
};

Assignments assign_targets(const std::vector<TrainBox>& gts, int image_size,
                           std::array<int, 3> strides = {8, 16, 32});

struct LossBreakdown {
  double cls = 0, box = 0, dfl = 0, total = 0;
};

struct LossWeights {
  double cls = 0.5, box = 7.5, dfl = 1.5;
};

struct BatchTargets {
  std::vector<std::vector<TrainBox>> boxes;  // per image
  std::vector<Assignments> assign;           // per image
};

// Composite detection loss: sigmoid BCE over every cell/class, complete-IoU
// and distributional (two-bin cross-entropy) regression over positive cells,
// each term divided by the clamped positive count. The op is fused: forward
// computes the breakdown and closed-form gradients for all six head tensors,
// verified against finite differences.
template <typename T>
std::pair<Tensor<T>, LossBreakdown> detection_loss(Tape<T>* tape, const HeadOutputs<T>& head,
                                                   const BatchTargets& targets,
                                                   const LossWeights& weights, int reg_max,
                                                   int image_size);

// Classic coupled-decay SGD: v <- momentum*v + g + wd*p; p <- p - lr*v.
template <typename T>
struct SgdState {
  std::map<std::string, std::vector<T>> velocity;
};

template <typename T>
void sgd_step(ParamStore<T>& store, SgdState<T>& state, double lr, double momentum,
              double weight_decay);

void save_sgd_state(const SgdState<float>& state, const std::string& path);
SgdState<float> load_sgd_state(const std::string& path);

struct EpochLog {
  int epoch = 0;
  LossBreakdown loss;
  double precision = -1, recall = -1, map50 = -1, map5095 = -1;  // -1 = not evaluated
};

struct TrainResult {
  std::vector<EpochLog> history;
  int epochs_run = 0;
  double final_map50 = -1;
  bool reached_target = false;
};

// Deterministic SGD loop over a generated dataset: seeded per-epoch shuffle,
// fused loss, per-epoch checkpoint (weights + optimizer state + progress),
// CSV metric log, optional early stop on the eval-split mAP@0.5 target.
TrainResult train_loop(const TrainConfig& config, Model<float>& model,
                       const std::string& dataset_root, const std::string& out_dir,
                       bool resume = false, std::ostream* progress = nullptr);

// Runs the detector over one split: forward, decode, NMS per image.
EvalReport evaluate_model(Model<float>& model, const std::string& dataset_root,
                          const std::string& split, double conf, double nms_iou,
                          std::vector<EvalDetection>* collected = nullptr);

std::vector<Detection> predict_image(Model<float>& model, const ImageU8& image, double conf,
                                     double nms_iou);

extern template std::pair<Tensor<float>, LossBreakdown> detection_loss<float>(
    Tape<float>*, const HeadOutputs<float>&, const BatchTargets&, const LossWeights&, int, int);
extern template std::pair<Tensor<double>, LossBreakdown> detection_loss<double>(
    Tape<double>*, const HeadOutputs<double>&, const BatchTargets&, const LossWeights&, int, int);
extern template void sgd_step<float>(ParamStore<float>&, SgdState<float>&, double, double, double);
extern template void sgd_step<double>(ParamStore<double>&, SgdState<double>&, double, double,
                                      double);

}  // namespace msy
