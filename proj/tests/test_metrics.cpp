#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "msy/metrics.hpp"

using namespace msy;

namespace {

// Exhaustive matching oracle: explicit IoU matrix, greedy in score order.
std::vector<char> match_reference(std::vector<EvalDetection> dets,
                                  const std::vector<GroundTruth>& gts, double thresh) {
  std::sort(dets.begin(), dets.end(), eval_detection_order);
  std::vector<std::vector<double>> mat(dets.size(), std::vector<double>(gts.size(), 0.0));
  for (size_t d = 0; d < dets.size(); ++d)
    for (size_t g = 0; g < gts.size(); ++g)
      if (dets[d].class_id == gts[g].class_id && dets[d].image_id == gts[g].image_id)
        mat[d][g] = iou(dets[d].bbox, gts[g].bbox);
  std::vector<char> used(gts.size(), 0), tp(dets.size(), 0);
  for (size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || mat[d][g] < thresh) continue;
      if (best < 0 || mat[d][g] > mat[d][best]) best = static_cast<int>(g);
    }
    if (best >= 0) {
      used[best] = 1;
      tp[d] = 1;
    }
  }
  return tp;
}

// Area-formula AP oracle: each true positive contributes the envelope
// precision at its recall level, found by a quadratic scan over prefixes.
double ap_reference(const std::vector<char>& tp_flags, int64_t total_gt) {
  const size_t n = tp_flags.size();
  std::vector<double> recall(n), precision(n);
  int64_t tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += tp_flags[i];
    recall[i] = double(tp) / double(total_gt);
    precision[i] = double(tp) / double(i + 1);
  }
  double ap = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (!tp_flags[i]) continue;
    double env = 0.0;
    for (size_t j = 0; j < n; ++j)
      if (recall[j] >= recall[i]) env = std::max(env, precision[j]);
    ap += env / double(total_gt);
  }
  return ap;
}

BBox box_at(double x, double y, double w = 10, double h = 10) { return {x, y, x + w, y + h}; }

std::vector<EvalDetection> tp_fp_sequence(const std::vector<GroundTruth>& gts,
                                          const std::vector<char>& make_tp, double score0) {
  // fabricate detections that hit gts[i] exactly when make_tp[i], with
  // strictly descending scores in sequence order
  std::vector<EvalDetection> dets;
  size_t gt_next = 0;
  for (size_t i = 0; i < make_tp.size(); ++i) {
    EvalDetection d;
    d.image_id = "img";
    d.score = score0 - 0.01 * static_cast<double>(i);
    if (make_tp[i] && gt_next < gts.size()) {
      d.class_id = gts[gt_next].class_id;
      d.bbox = gts[gt_next].bbox;
      ++gt_next;
    } else {
      d.class_id = 0;
      d.bbox = box_at(500 + 40.0 * static_cast<double>(i), 500);  // hits nothing
    }
    dets.push_back(d);
  }
  return dets;
}

std::pair<std::vector<EvalDetection>, std::vector<GroundTruth>> random_instance(Rng& rng,
                                                                                int n_dets,
                                                                                int n_gts,
                                                                                int classes) {
  std::vector<GroundTruth> gts;
  for (int g = 0; g < n_gts; ++g) {
    GroundTruth gt;
    gt.image_id = "img" + std::to_string(rng.uniform_int(0, 3));
    gt.class_id = static_cast<int>(rng.uniform_int(0, classes));
    const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
    gt.bbox = {x, y, x + rng.uniform(8, 25), y + rng.uniform(8, 25)};
    gts.push_back(gt);
  }
  std::vector<EvalDetection> dets;
  for (int d = 0; d < n_dets; ++d) {
    EvalDetection det;
    if (!gts.empty() && rng.uniform() < 0.7) {
      const auto& gt = gts[static_cast<size_t>(rng.uniform_int(0, gts.size()))];
      det.image_id = gt.image_id;
      det.class_id = gt.class_id;
      det.bbox = {gt.bbox.x1 + rng.uniform(-4, 4), gt.bbox.y1 + rng.uniform(-4, 4),
                  gt.bbox.x2 + rng.uniform(-4, 4), gt.bbox.y2 + rng.uniform(-4, 4)};
      if (det.bbox.x2 <= det.bbox.x1) det.bbox.x2 = det.bbox.x1 + 1;
      if (det.bbox.y2 <= det.bbox.y1) det.bbox.y2 = det.bbox.y1 + 1;
    } else {
      det.image_id = "img" + std::to_string(rng.uniform_int(0, 3));
      det.class_id = static_cast<int>(rng.uniform_int(0, classes));
      const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
      det.bbox = {x, y, x + rng.uniform(8, 25), y + rng.uniform(8, 25)};
    }
    det.score = rng.uniform(0.01, 1.0);
    dets.push_back(det);
  }
  return {dets, gts};
}

// From-scratch mAP@0.5: own sorting, matching and AP integration.
double map50_reference(const std::vector<EvalDetection>& dets,
                       const std::vector<GroundTruth>& gts) {
  std::map<int, std::vector<EvalDetection>> dets_by_class;
  std::map<int, std::vector<GroundTruth>> gts_by_class;
  for (const auto& d : dets) dets_by_class[d.class_id].push_back(d);
  for (const auto& g : gts) gts_by_class[g.class_id].push_back(g);
  double sum = 0.0;
  int classes = 0;
  for (auto& [class_id, class_gts] : gts_by_class) {
    ++classes;
    auto class_dets = dets_by_class[class_id];
    auto tp = match_reference(class_dets, class_gts, 0.5);
    sum += ap_reference(tp, static_cast<int64_t>(class_gts.size()));
  }
  return classes == 0 ? 0.0 : sum / classes;
}

}  // namespace

TEST_CASE("match fixtures") {
  std::vector<GroundTruth> gts = {{"img", box_at(0, 0), 0}};
  SUBCASE("single overlapping detection is a TP") {
    std::vector<EvalDetection> dets = {{"img", box_at(0.5, 0.5), 0, 0.9}};
    REQUIRE(iou(dets[0].bbox, gts[0].bbox) > 0.5);
    auto tp = greedy_match(dets, gts, 0.5);
    CHECK(tp[0] == 1);
  }
  SUBCASE("two detections on one ground truth: higher score wins") {
    std::vector<EvalDetection> dets = {{"img", box_at(0.2, 0.2), 0, 0.9},
                                       {"img", box_at(0.1, 0.1), 0, 0.8}};
    std::sort(dets.begin(), dets.end(), eval_detection_order);
    auto tp = greedy_match(dets, gts, 0.5);
    CHECK(tp[0] == 1);
    CHECK(tp[1] == 0);
  }
  SUBCASE("wrong class never matches") {
    std::vector<EvalDetection> dets = {{"img", box_at(0, 0), 1, 0.9}};
    auto tp = greedy_match(dets, gts, 0.5);
    CHECK(tp[0] == 0);
  }
}

TEST_CASE("matching equals the exhaustive oracle on random instances") {
  Rng rng(29);
  for (int trial = 0; trial < 120; ++trial) {
    auto [dets, gts] = random_instance(rng, 30, 10, 3);
    std::sort(dets.begin(), dets.end(), eval_detection_order);
    auto got = greedy_match(dets, gts, 0.5);
    auto want = match_reference(dets, gts, 0.5);
    CAPTURE(trial);
    CHECK(got == want);
  }
}

TEST_CASE("precision/recall fixtures") {
  auto pr = precision_recall(8, 2, 2);
  CHECK(pr.precision == doctest::Approx(80.0));
  CHECK(pr.recall == doctest::Approx(80.0));
  pr = precision_recall(0, 0, 5);
  CHECK(pr.precision == 0.0);
  CHECK(pr.recall == 0.0);
  pr = precision_recall(0, 3, 0);
  CHECK(pr.precision == 0.0);
  CHECK(pr.recall == 0.0);
}

TEST_CASE("average precision fixtures") {
  SUBCASE("perfect single detection") {
    CHECK(average_precision({1}, 1) == doctest::Approx(1.0));
  }
  SUBCASE("TP then trailing FP keeps AP 1.0 with one ground truth") {
    CHECK(average_precision({1, 0}, 1) == doctest::Approx(1.0));
  }
  SUBCASE("two ground truths, only one found") {
    CHECK(average_precision({1, 0}, 2) == doctest::Approx(0.5));
  }
  SUBCASE("all false positives") {
    CHECK(average_precision({0, 0, 0}, 2) == doctest::Approx(0.0));
  }
  SUBCASE("zero ground truth is an error") {
    CHECK_THROWS_AS(average_precision({1}, 0), UsageError);
  }
}

TEST_CASE("AP is input-order invariant because matching sorts by score") {
  std::vector<GroundTruth> gts = {{"img", box_at(0, 0), 0}};
  auto dets = tp_fp_sequence(gts, {1, 0}, 0.9);  // TP at higher score, FP lower
  auto reversed = dets;
  std::reverse(reversed.begin(), reversed.end());
  for (auto* input : {&dets, &reversed}) {
    auto sorted = *input;
    std::sort(sorted.begin(), sorted.end(), eval_detection_order);
    auto tp = greedy_match(sorted, gts, 0.5);
    CHECK(average_precision(tp, 1) == doctest::Approx(1.0));
  }
}

TEST_CASE("AP equals the area-formula oracle on random sequences") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 25));
    const int64_t gt_count = rng.uniform_int(1, 12);
    std::vector<char> flags(n);
    int64_t tp_total = 0;
    for (auto& f : flags) {
      f = rng.uniform() < 0.4 && tp_total < gt_count;
      tp_total += f;
    }
    CAPTURE(trial);
    CHECK(average_precision(flags, gt_count) ==
          doctest::Approx(ap_reference(flags, gt_count)).epsilon(1e-12));
  }
}

TEST_CASE("appending a trailing lowest-score FP never raises AP") {
  Rng rng(37);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 15));
    std::vector<char> flags(n);
    for (auto& f : flags) f = rng.uniform() < 0.5;
    const int64_t gt_count = std::max<int64_t>(1, std::count(flags.begin(), flags.end(), 1));
    const double before = average_precision(flags, gt_count);
    flags.push_back(0);
    const double after = average_precision(flags, gt_count);
    CHECK(after <= before + 1e-12);
  }
}

TEST_CASE("mAP is the mean of per-class APs") {
  // two classes: one perfect, one half-found
  std::vector<GroundTruth> gts = {
      {"img", box_at(0, 0), 0}, {"img", box_at(30, 30), 1}, {"img", box_at(60, 60), 1}};
  std::vector<EvalDetection> dets = {{"img", box_at(0, 0), 0, 0.9},
                                     {"img", box_at(30, 30), 1, 0.8}};
  auto report = evaluate(dets, gts);
  CHECK(report.per_class.size() == 2);
  CHECK(report.per_class[0].ap50 == doctest::Approx(1.0));
  CHECK(report.per_class[1].ap50 == doctest::Approx(0.5));
  CHECK(report.map50 == doctest::Approx(0.75));
}

TEST_CASE("single class mAP equals that class's AP") {
  std::vector<GroundTruth> gts = {{"img", box_at(0, 0), 4}};
  std::vector<EvalDetection> dets = {{"img", box_at(0.5, 0.5), 4, 0.9}};
  auto report = evaluate(dets, gts);
  CHECK(report.map50 == doctest::Approx(report.per_class[0].ap50));
}

TEST_CASE("classes without ground truth are excluded and flagged") {
  std::vector<GroundTruth> gts = {{"img", box_at(0, 0), 0}};
  std::vector<EvalDetection> dets = {{"img", box_at(0, 0), 0, 0.9},
                                     {"img", box_at(40, 40), 9, 0.8}};
  auto report = evaluate(dets, gts);
  CHECK(report.map50 == doctest::Approx(1.0));
  REQUIRE(report.skipped_classes.size() == 1);
  CHECK(report.skipped_classes[0] == 9);
  // but they still cost precision
  CHECK(report.precision == doctest::Approx(50.0));
}

TEST_CASE("zero evaluable classes is an error") {
  std::vector<GroundTruth> gts;
  std::vector<EvalDetection> dets = {{"img", box_at(0, 0), 0, 0.9}};
  CHECK_THROWS_AS(evaluate(dets, gts), DataError);
}

TEST_CASE("full evaluation equals an independent re-implementation") {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    auto [dets, gts] = random_instance(rng, 60, 20, 3);
    if (gts.empty()) continue;
    auto report = evaluate(dets, gts);
    CAPTURE(trial);
    CHECK(std::fabs(report.map50 - map50_reference(dets, gts)) < 1e-9);
  }
}

TEST_CASE("self-evaluation of ground truth is perfect") {
  Rng rng(43);
  auto [_, gts] = random_instance(rng, 0, 25, 4);
  std::vector<EvalDetection> dets;
  for (const auto& gt : gts) dets.push_back({gt.image_id, gt.bbox, gt.class_id, 1.0});
  auto report = evaluate(dets, gts);
  CHECK(report.precision == doctest::Approx(100.0));
  CHECK(report.recall == doctest::Approx(100.0));
  CHECK(report.map50 == doctest::Approx(1.0));
  CHECK(report.map5095 == doctest::Approx(1.0));
}

TEST_CASE("per-threshold mAP is non-increasing across the IoU sweep") {
  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    auto [dets, gts] = random_instance(rng, 40, 15, 2);
    if (gts.empty()) continue;
    std::map<int, std::vector<EvalDetection>> by_class;
    std::map<int, std::vector<GroundTruth>> gt_by_class;
    for (auto& d : dets) by_class[d.class_id].push_back(d);
    for (auto& g : gts) gt_by_class[g.class_id].push_back(g);
    double prev = 2.0;
    for (int step = 0; step < 10; ++step) {
      const double t = 0.5 + 0.05 * step;
      double sum = 0.0;
      int classes = 0;
      for (auto& [c, class_gts] : gt_by_class) {
        if (class_gts.empty()) continue;
        ++classes;
        auto class_dets = by_class[c];
        std::sort(class_dets.begin(), class_dets.end(), eval_detection_order);
        sum += average_precision(greedy_match(class_dets, class_gts, t),
                                 static_cast<int64_t>(class_gts.size()));
      }
      if (classes == 0) continue;
      const double cur = sum / classes;
      CHECK(cur <= prev + 1e-12);
      prev = cur;
    }
  }
}

TEST_CASE("AP invariant under permutation of equal-score detections") {
  std::vector<GroundTruth> gts = {{"img", box_at(0, 0), 0}, {"img", box_at(40, 40), 0}};
  std::vector<EvalDetection> dets = {{"img", box_at(0.5, 0.5), 0, 0.7},
                                     {"img", box_at(100, 100), 0, 0.7},
                                     {"img", box_at(40, 40), 0, 0.7}};
  auto eval_of = [&](std::vector<EvalDetection> input) {
    return evaluate(input, gts).map50;
  };
  const double base = eval_of(dets);
  std::vector<EvalDetection> perm = {dets[2], dets[0], dets[1]};
  CHECK(eval_of(perm) == doctest::Approx(base));
  std::vector<EvalDetection> perm2 = {dets[1], dets[2], dets[0]};
  CHECK(eval_of(perm2) == doctest::Approx(base));
}

TEST_CASE("results jsonl round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "msy_results";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "preds.jsonl").string();
  std::vector<EvalDetection> dets = {{"a", box_at(1, 2), 0, 0.5}, {"b", box_at(3, 4), 2, 0.25}};
  write_results_jsonl(dets, path);
  auto back = read_results_jsonl(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_id == "a");
  CHECK(back[1].class_id == 2);
  CHECK(back[1].bbox.x1 == doctest::Approx(3.0));
  std::ofstream f(path, std::ios::app);
  f << "not json\n";
  f.close();
  CHECK_THROWS_AS(read_results_jsonl(path), DataError);
  std::filesystem::remove_all(dir);
}
