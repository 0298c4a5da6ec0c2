#include "msy/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace msy {

BBox BBox::clipped(double w, double h) const {
  BBox out;
  out.x1 = std::clamp(x1, 0.0, w);
  out.y1 = std::clamp(y1, 0.0, h);
  out.x2 = std::clamp(x2, 0.0, w);
  out.y2 = std::clamp(y2, 0.0, h);
  return out;
}

double iou(const BBox& a, const BBox& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

bool detection_order(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.bbox.x1 != b.bbox.x1) return a.bbox.x1 < b.bbox.x1;
  if (a.bbox.y1 != b.bbox.y1) return a.bbox.y1 < b.bbox.y1;
  if (a.bbox.x2 != b.bbox.x2) return a.bbox.x2 < b.bbox.x2;
  return a.bbox.y2 < b.bbox.y2;
}

template <typename T>
std::vector<Detection> decode(const HeadOutputs<T>& head, int reg_max, int image_size,
                              double conf_thresh) {
  if (conf_thresh <= 0 || conf_thresh >= 1) throw UsageError("conf_thresh must be in (0,1)");
  std::vector<Detection> out;
  for (int s = 0; s < 3; ++s) {
    const auto& cls = head.cls[s];
    const auto& box = head.box[s];
    const Shape cs = cls.shape(), bs = box.shape();
    if (cs.n != 1 || bs.n != 1) throw DimensionError("decode expects single-image outputs");
    const int stride = head.strides[s];
    if (bs.c != 4 * reg_max || bs.h != cs.h || bs.w != cs.w ||
        cs.h * stride != image_size)
      throw DimensionError("decode: head output shapes do not match strides");
    for (int64_t i = 0; i < cs.h; ++i)
      for (int64_t j = 0; j < cs.w; ++j) {
        int best = 0;
        T best_logit = cls.at(0, 0, i, j);
        for (int64_t c = 1; c < cs.c; ++c) {
          const T v = cls.at(0, c, i, j);
          if (v > best_logit) {
            best_logit = v;
            best = static_cast<int>(c);
          }
        }
        const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(best_logit)));
        if (score < conf_thresh) continue;

        double dist[4];
        for (int side = 0; side < 4; ++side) {
          double mx = -1e300;
          for (int b = 0; b < reg_max; ++b)
            mx = std::max(mx, static_cast<double>(box.at(0, side * reg_max + b, i, j)));
          double denom = 0.0, expect = 0.0;
          for (int b = 0; b < reg_max; ++b) {
            const double e = std::exp(static_cast<double>(box.at(0, side * reg_max + b, i, j)) - mx);
            denom += e;
            expect += e * b;
          }
          dist[side] = expect / denom * stride;
        }
        const double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
        Detection det;
        det.bbox = BBox{cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]}.clipped(
            image_size, image_size);
        det.class_id = best;
        det.score = score;
        out.push_back(det);
      }
  }
  std::sort(out.begin(), out.end(), detection_order);
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  if (iou_thresh <= 0 || iou_thresh >= 1) throw UsageError("iou_thresh must be in (0,1)");
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<char> suppressed(dets.size(), 0);
  std::vector<Detection> kept;
  for (size_t i = 0; i < dets.size(); ++i) {
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    for (size_t j = i + 1; j < dets.size(); ++j) {
      if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
      if (iou(dets[i].bbox, dets[j].bbox) > iou_thresh) suppressed[j] = 1;
    }
  }
  return kept;
}

// ---- catalog / receipt ----

Catalog Catalog::from_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read catalog " + path);
  Catalog catalog;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line.rfind("class_id,", 0) != 0)
        throw DataError(path + ": expected header class_id,name,unit_price_minor,threshold");
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() < 3)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected at least 3 fields");
    CatalogEntry e;
    try {
      e.class_id = std::stoi(fields[0]);
      e.name = fields[1];
      e.unit_price_minor = std::stoll(fields[2]);
      if (fields.size() > 3 && !fields[3].empty()) e.threshold = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed field");
    }
    if (e.unit_price_minor < 0)
      throw DataError(path + ":" + std::to_string(lineno) + ": negative price");
    catalog.add(std::move(e));
  }
  return catalog;
}

void Catalog::add(CatalogEntry entry) {
  if (find(entry.class_id))
    throw DataError("duplicate catalog class_id " + std::to_string(entry.class_id));
  entries_.push_back(std::move(entry));
}

const CatalogEntry* Catalog::find(int class_id) const {
  for (const auto& e : entries_)
    if (e.class_id == class_id) return &e;
  return nullptr;
}

Receipt build_shopping_list(const std::vector<Detection>& dets, const Catalog& catalog,
                            const std::string& image_id, double threshold_used) {
  std::map<int, int64_t> counts;
  for (const auto& det : dets) {
    const CatalogEntry* entry = catalog.find(det.class_id);
    const double needed = entry && entry->threshold ? *entry->threshold : 0.0;
    if (det.score < needed) continue;
    counts[det.class_id] += 1;
  }
  Receipt receipt;
  receipt.image_id = image_id;
  receipt.threshold_used = threshold_used;
  for (const auto& [class_id, count] : counts) {
    const CatalogEntry* entry = catalog.find(class_id);
    ReceiptLine line;
    line.class_id = class_id;
    line.count = count;
    if (entry) {
      line.name = entry->name;
      line.unit_price = entry->unit_price_minor;
    } else {
      line.name = "unknown";
      line.unit_price = 0;
      line.flagged = true;
    }
    line.line_total = line.unit_price * line.count;
    receipt.total += line.line_total;
    receipt.lines.push_back(std::move(line));
  }
  return receipt;
}

std::string Receipt::to_json() const {
  nlohmann::json j;
  j["image_id"] = image_id;
  j["lines"] = nlohmann::json::array();
  for (const auto& line : lines) {
    nlohmann::json jl;
    jl["class_id"] = line.class_id;
    jl["name"] = line.name;
    jl["unit_price"] = line.unit_price;
    jl["count"] = line.count;
    jl["line_total"] = line.line_total;
    if (line.flagged) jl["flagged"] = true;
    j["lines"].push_back(jl);
  }
  j["total"] = total;
  j["threshold_used"] = threshold_used;
  return j.dump(2);
}

ImageU8 annotate(const ImageU8& image, const std::vector<Detection>& dets, bool draw_labels) {
  ImageU8 out = image;
  for (const auto& det : dets) {
    const auto color = class_color(det.class_id);
    const int x1 = static_cast<int>(std::lround(det.bbox.x1));
    const int y1 = static_cast<int>(std::lround(det.bbox.y1));
    const int x2 = static_cast<int>(std::lround(det.bbox.x2));
    const int y2 = static_cast<int>(std::lround(det.bbox.y2));
    draw_rect(out, x1, y1, x2, y2, color);
    if (draw_labels) {
      char label[32];
      std::snprintf(label, sizeof(label), "%d:%.2f", det.class_id, det.score);
      draw_text_3x5(out, x1 + 2, y1 + 2, label, color);
    }
  }
  return out;
}

template std::vector<Detection> decode<float>(const HeadOutputs<float>&, int, int, double);
template std::vector<Detection> decode<double>(const HeadOutputs<double>&, int, int, double);

}  // namespace msy
