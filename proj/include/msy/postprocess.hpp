#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msy/image.hpp"
#include "msy/model.hpp"

namespace msy {

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // pixels, x1<=x2, y1<=y2

  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
  BBox clipped(double w, double h) const;
};

// Intersection over union; disjoint or degenerate zero-area pairs give 0.
double iou(const BBox& a, const BBox& b);

struct Detection {
  BBox bbox;
  int class_id = 0;
  double score = 0.0;
};

// Total deterministic ordering: score desc, then class, then coordinates.
bool detection_order(const Detection& a, const Detection& b);

// Decodes one image's head outputs: per cell, class scores are sigmoids of
// the logits and each side distance is the expectation of the softmax over
// reg_max bins times the stride (channel layout: left, top, right, bottom).
// Boxes are cell-center +/- distances, clipped to the image.
template <typename T>
std::vector<Detection> decode(const HeadOutputs<T>& head, int reg_max, int image_size,
                              double conf_thresh);

// Class-wise greedy suppression in descending score order; a kept box
// suppresses later same-class boxes with IoU above the threshold. Output
// preserves the descending order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

// ---- checkout artifacts ----

struct CatalogEntry {
  int class_id = 0;
  std::string name;
  int64_t unit_price_minor = 0;              // integer minor currency units
  std::optional<double> threshold;           // per-class confidence override
};

class Catalog {
 public:
  static Catalog from_csv(const std::string& path);
  void add(CatalogEntry entry);
  const CatalogEntry* find(int class_id) const;
  const std::vector<CatalogEntry>& entries() const { return entries_; }

 private:
  std::vector<CatalogEntry> entries_;
};

struct ReceiptLine {
  int class_id = 0;
  std::string name;
  int64_t unit_price = 0;
  int64_t count = 0;
  int64_t line_total = 0;
  bool flagged = false;  // class missing from the catalog
};

struct Receipt {
  std::string image_id;
  std::vector<ReceiptLine> lines;  // ascending class_id
  int64_t total = 0;
  double threshold_used = 0.0;

  std::string to_json() const;
};

// Groups NMS-filtered detections by class, applies per-class catalog
// threshold overrides, counts and prices. Unknown classes become flagged
// zero-price lines rather than errors.
Receipt build_shopping_list(const std::vector<Detection>& dets, const Catalog& catalog,
                            const std::string& image_id, double threshold_used);

// Draws 1px rectangles (and, optionally, class:score labels) into a copy.
ImageU8 annotate(const ImageU8& image, const std::vector<Detection>& dets,
                 bool draw_labels = false);

extern template std::vector<Detection> decode<float>(const HeadOutputs<float>&, int, int, double);
extern template std::vector<Detection> decode<double>(const HeadOutputs<double>&, int, int,
                                                      double);

}  // namespace msy
