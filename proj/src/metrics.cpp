#include "msy/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace msy {

bool eval_detection_order(const EvalDetection& a, const EvalDetection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.bbox.x1 != b.bbox.x1) return a.bbox.x1 < b.bbox.x1;
  if (a.bbox.y1 != b.bbox.y1) return a.bbox.y1 < b.bbox.y1;
  if (a.bbox.x2 != b.bbox.x2) return a.bbox.x2 < b.bbox.x2;
  return a.bbox.y2 < b.bbox.y2;
}

std::vector<char> greedy_match(const std::vector<EvalDetection>& sorted_dets,
                               const std::vector<GroundTruth>& gts, double iou_thresh) {
  std::vector<char> tp(sorted_dets.size(), 0);
  std::vector<char> taken(gts.size(), 0);
  for (size_t d = 0; d < sorted_dets.size(); ++d) {
    double best_iou = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      if (gts[g].class_id != sorted_dets[d].class_id) continue;
      if (gts[g].image_id != sorted_dets[d].image_id) continue;
      const double v = iou(sorted_dets[d].bbox, gts[g].bbox);
      if (v >= iou_thresh && v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      tp[d] = 1;
      taken[best_gt] = 1;
    }
  }
  return tp;
}

PrecisionRecall precision_recall(int64_t tp, int64_t fp, int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw UsageError("negative match counts");
  PrecisionRecall pr;
  pr.precision = tp + fp == 0 ? 0.0 : 100.0 * static_cast<double>(tp) / (tp + fp);
  pr.recall = tp + fn == 0 ? 0.0 : 100.0 * static_cast<double>(tp) / (tp + fn);
  return pr;
}

double average_precision(const std::vector<char>& tp_flags, int64_t total_gt) {
  if (total_gt <= 0) throw UsageError("average_precision needs positive ground-truth count");
  const size_t n = tp_flags.size();
  if (n == 0) return 0.0;
  std::vector<double> recall(n), precision(n);
  int64_t tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    recall[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // monotone envelope: precision at recall r is the best precision at >= r
  std::vector<double> env(precision);
  for (size_t i = n - 1; i-- > 0;) env[i] = std::max(env[i], env[i + 1]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * env[i];
    prev_recall = recall[i];
  }
  return ap;
}

namespace {

struct ClassData {
  std::vector<EvalDetection> dets;  // sorted by eval_detection_order
  std::vector<GroundTruth> gts;
};

std::map<int, ClassData> bucket_by_class(const std::vector<EvalDetection>& dets,
                                         const std::vector<GroundTruth>& gts) {
  std::map<int, ClassData> buckets;
  for (const auto& d : dets) buckets[d.class_id].dets.push_back(d);
  for (const auto& g : gts) buckets[g.class_id].gts.push_back(g);
  for (auto& [_, data] : buckets)
    std::sort(data.dets.begin(), data.dets.end(), eval_detection_order);
  return buckets;
}

}  // namespace

EvalReport evaluate(const std::vector<EvalDetection>& dets, const std::vector<GroundTruth>& gts,
                    const EvalOptions& opts) {
  auto buckets = bucket_by_class(dets, gts);
  EvalReport report;
  report.operating_conf = opts.operating_conf;

  int evaluable = 0;
  double map50_sum = 0.0;
  double sweep_sum = 0.0;
  for (auto& [class_id, data] : buckets) {
    if (data.gts.empty()) {
      report.skipped_classes.push_back(class_id);
      continue;
    }
    ++evaluable;
    ClassEval ce;
    ce.class_id = class_id;
    ce.gt_count = static_cast<int64_t>(data.gts.size());

    double sweep_class = 0.0;
    for (int step = 0; step < 10; ++step) {
      const double t = 0.5 + 0.05 * step;
      auto tp = greedy_match(data.dets, data.gts, t);
      const double ap = average_precision(tp, ce.gt_count);
      if (step == 0) {
        ce.ap50 = ap;
        // operating-confidence counts at IoU 0.5
        std::vector<EvalDetection> conf_dets;
        for (const auto& d : data.dets)
          if (d.score >= opts.operating_conf) conf_dets.push_back(d);
        auto conf_tp = greedy_match(conf_dets, data.gts, t);
        for (char flag : conf_tp) (flag ? ce.counts50.tp : ce.counts50.fp) += 1;
        ce.counts50.fn = ce.gt_count - ce.counts50.tp;
      }
      sweep_class += ap;
    }
    map50_sum += ce.ap50;
    sweep_sum += sweep_class / 10.0;
    report.per_class.push_back(ce);
  }
  if (evaluable == 0) throw DataError("no evaluable classes: every class has zero ground truth");
  report.map50 = map50_sum / evaluable;
  report.map5095 = sweep_sum / evaluable;

  int64_t tp = 0, fp = 0, fn = 0;
  for (const auto& ce : report.per_class) {
    tp += ce.counts50.tp;
    fp += ce.counts50.fp;
    fn += ce.counts50.fn;
  }
  // detections of classes with no ground truth still count against precision
  for (int class_id : report.skipped_classes)
    for (const auto& d : buckets[class_id].dets)
      if (d.score >= opts.operating_conf) ++fp;
  const auto pr = precision_recall(tp, fp, fn);
  report.precision = pr.precision;
  report.recall = pr.recall;

  // max-F1 sweep over candidate score thresholds at IoU 0.5 (pooled)
  {
    std::vector<std::pair<double, char>> scored;  // (score, tp flag)
    int64_t total_gt = 0;
    for (auto& [class_id, data] : buckets) {
      if (data.gts.empty()) {
        for (const auto& d : data.dets) scored.push_back({d.score, 0});
        continue;
      }
      total_gt += static_cast<int64_t>(data.gts.size());
      auto tp_flags = greedy_match(data.dets, data.gts, 0.5);
      for (size_t i = 0; i < data.dets.size(); ++i)
        scored.push_back({data.dets[i].score, tp_flags[i]});
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    double best_f1 = -1.0;
    int64_t ctp = 0, cfp = 0;
    for (size_t i = 0; i < scored.size(); ++i) {
      (scored[i].second ? ctp : cfp) += 1;
      if (i + 1 < scored.size() && scored[i + 1].first == scored[i].first) continue;
      const auto p = precision_recall(ctp, cfp, total_gt - ctp);
      const double f1 = p.precision + p.recall == 0
                            ? 0.0
                            : 2.0 * p.precision * p.recall / (p.precision + p.recall);
      if (f1 > best_f1) {
        best_f1 = f1;
        report.precision_maxf1 = p.precision;
        report.recall_maxf1 = p.recall;
        report.maxf1_conf = scored[i].first;
      }
    }
  }
  return report;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  char line[256];
  out << "evaluation report (AP: all-point monotone envelope; P/R in percent)\n";
  std::snprintf(line, sizeof(line), "%8s %8s %10s %8s %8s %8s\n", "class", "gt", "AP@0.5", "TP",
                "FP", "FN");
  out << line;
  for (const auto& ce : per_class) {
    std::snprintf(line, sizeof(line), "%8d %8lld %10.4f %8lld %8lld %8lld\n", ce.class_id,
                  static_cast<long long>(ce.gt_count), ce.ap50,
                  static_cast<long long>(ce.counts50.tp), static_cast<long long>(ce.counts50.fp),
                  static_cast<long long>(ce.counts50.fn));
    out << line;
  }
  if (!skipped_classes.empty()) {
    out << "skipped (no ground truth):";
    for (int c : skipped_classes) out << " " << c;
    out << "\n";
  }
  std::snprintf(line, sizeof(line), "mAP@0.5 %.4f  mAP@0.5:0.95 %.4f\n", map50, map5095);
  out << line;
  std::snprintf(line, sizeof(line), "P %.2f%%  R %.2f%% at conf %.2f; max-F1 point: P %.2f%%  R %.2f%% at conf %.3f\n",
                precision, recall, operating_conf, precision_maxf1, recall_maxf1, maxf1_conf);
  out << line;
  if (params_trainable > 0) {
    std::snprintf(line, sizeof(line), "params %lld  GFLOPs %.2f\n",
                  static_cast<long long>(params_trainable), gflops);
    out << line;
  }
  return out.str();
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["map50"] = map50;
  j["map50_95"] = map5095;
  j["precision"] = precision;
  j["recall"] = recall;
  j["operating_conf"] = operating_conf;
  j["precision_maxf1"] = precision_maxf1;
  j["recall_maxf1"] = recall_maxf1;
  j["maxf1_conf"] = maxf1_conf;
  if (params_trainable > 0) {
    j["params_trainable"] = params_trainable;
    j["gflops"] = gflops;
  }
  j["per_class"] = nlohmann::json::array();
  for (const auto& ce : per_class) {
    nlohmann::json jc;
    jc["class_id"] = ce.class_id;
    jc["gt_count"] = ce.gt_count;
    jc["ap50"] = ce.ap50;
    jc["tp"] = ce.counts50.tp;
    jc["fp"] = ce.counts50.fp;
    jc["fn"] = ce.counts50.fn;
    j["per_class"].push_back(jc);
  }
  j["skipped_classes"] = skipped_classes;
  return j.dump(2);
}

std::vector<EvalDetection> read_results_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read results file " + path);
  std::vector<EvalDetection> dets;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      EvalDetection d;
      d.image_id = j.at("image_id").get<std::string>();
      d.class_id = j.at("class_id").get<int>();
      d.score = j.at("score").get<double>();
      d.bbox = BBox{j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(),
                    j.at("y2").get<double>()};
      dets.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return dets;
}

void write_results_jsonl(const std::vector<EvalDetection>& dets, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write results file " + path);
  for (const auto& d : dets) {
    nlohmann::json j;
    j["image_id"] = d.image_id;
    j["class_id"] = d.class_id;
    j["score"] = d.score;
    j["x1"] = d.bbox.x1;
    j["y1"] = d.bbox.y1;
    j["x2"] = d.bbox.x2;
    j["y2"] = d.bbox.y2;
    f << j.dump() << "\n";
  }
}

}  // namespace msy
