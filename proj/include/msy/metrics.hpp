#pragma once

#include <string>
#include <vector>

#include "msy/postprocess.hpp"

namespace msy {

struct GroundTruth {
  std::string image_id;
  BBox bbox;
  int class_id = 0;
};

struct EvalDetection {
  std::string image_id;
  BBox bbox;
  int class_id = 0;
  double score = 0.0;
};

// Stable total order used before matching so ties resolve identically for
// any input permutation: score desc, then image, class, coordinates.
bool eval_detection_order(const EvalDetection& a, const EvalDetection& b);

struct MatchCounts {
  int64_t tp = 0, fp = 0, fn = 0;
};

// Greedy matching over one image and class: detections in descending score
// order claim the unmatched ground truth with the highest IoU at or above
// the threshold (lowest index on exact IoU ties). Returns per-detection
// true-positive flags aligned with the sorted order.
std::vector<char> greedy_match(const std::vector<EvalDetection>& sorted_dets,
                               const std::vector<GroundTruth>& gts, double iou_thresh);

// Eq.-style precision/recall in percent; empty denominators go to 0.
struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};
PrecisionRecall precision_recall(int64_t tp, int64_t fp, int64_t fn);

// Area under the monotone-envelope PR curve from a score-ordered TP/FP
// sequence. total_gt must be positive.
double average_precision(const std::vector<char>& tp_flags, int64_t total_gt);

struct ClassEval {
  int class_id = 0;
  int64_t gt_count = 0;
  double ap50 = 0.0;
  MatchCounts counts50;  // at IoU 0.5 and the operating confidence
};

struct EvalReport {
  std::vector<ClassEval> per_class;       // ascending class id, evaluable classes only
  std::vector<int> skipped_classes;       // detected classes with zero ground truth
  double map50 = 0.0;
  double map5095 = 0.0;
  double precision = 0.0;                 // percent, pooled at operating confidence
  double recall = 0.0;
  double operating_conf = 0.25;
  double precision_maxf1 = 0.0;           // percent, at the max-F1 score threshold
  double recall_maxf1 = 0.0;
  double maxf1_conf = 0.0;
  int64_t params_trainable = 0;           // echoed from the model when available
  double gflops = 0.0;

  std::string to_text() const;
  std::string to_json() const;
};

struct EvalOptions {
  double operating_conf = 0.25;
};

// Full evaluation: per-class AP@0.5, the 0.50:0.95 sweep, pooled P/R at the
// operating confidence and at the max-F1 point.
EvalReport evaluate(const std::vector<EvalDetection>& dets, const std::vector<GroundTruth>& gts,
                    const EvalOptions& opts = {});

// Results file surface: JSON lines, one detection object per line.
std::vector<EvalDetection> read_results_jsonl(const std::string& path);
void write_results_jsonl(const std::vector<EvalDetection>& dets, const std::string& path);

}  // namespace msy
