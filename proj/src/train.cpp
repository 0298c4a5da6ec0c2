#include "msy/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace msy {

namespace {

constexpr char kOptimMagic[4] = {'M', 'S', 'Y', 'O'};

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  size_t e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

// stable binary cross-entropy from a logit; returns loss, writes dloss/dlogit
inline double bce_with_logit(double x, double t, double* grad) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  *grad = s - t;
  return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x)));
}

struct CiouResult {
  double loss = 0;
  double dx[4] = {0, 0, 0, 0};  // dloss / d(x1,y1,x2,y2) of the prediction
};

// Complete-IoU loss with full analytic gradient (the aspect-term coupling
// through alpha is differentiated too, so finite differences agree tightly).
CiouResult ciou_loss(const std::array<double, 4>& p, const std::array<double, 4>& g) {
  constexpr double eps = 1e-9;
  constexpr double k4pi2 = 4.0 / (M_PI * M_PI);
  CiouResult out;

  const double w = p[2] - p[0], h = p[3] - p[1];
  const double gw = g[2] - g[0], gh = g[3] - g[1];
  const double ix1 = std::max(p[0], g[0]), iy1 = std::max(p[1], g[1]);
  const double ix2 = std::min(p[2], g[2]), iy2 = std::min(p[3], g[3]);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  const bool overlaps = iw > 0 && ih > 0;
  const double inter = overlaps ? iw * ih : 0.0;
  const double uni = w * h + gw * gh - inter + eps;
  const double iou_v = inter / uni;

  const double ex = std::max(p[2], g[2]) - std::min(p[0], g[0]);
  const double ey = std::max(p[3], g[3]) - std::min(p[1], g[1]);
  const double c2 = ex * ex + ey * ey + eps;
  const double dcx = (p[0] + p[2]) / 2 - (g[0] + g[2]) / 2;
  const double dcy = (p[1] + p[3]) / 2 - (g[1] + g[3]) / 2;
  const double rho2 = dcx * dcx + dcy * dcy;

  const double theta = std::atan2(gw, gh) - std::atan2(w, h);
  const double v = k4pi2 * theta * theta;
  const double S = 1.0 - iou_v + v + eps;

  out.loss = 1.0 - (iou_v - rho2 / c2 - v * v / S);

  const double dciou_diou = 1.0 - v * v / (S * S);
  const double dciou_dv = -(2.0 * v / S - v * v / (S * S));
  const double dciou_drho2 = -1.0 / c2;
  const double dciou_dc2 = rho2 / (c2 * c2);

  const double wh2 = w * w + h * h + eps;
  const double dv_dw = -k4pi2 * 2.0 * theta * h / wh2;
  const double dv_dh = k4pi2 * 2.0 * theta * w / wh2;

  for (int q = 0; q < 4; ++q) {
    // d inter / dq
    double dinter = 0.0;
    if (overlaps) {
      if (q == 0 && p[0] > g[0]) dinter = -ih;
      if (q == 2 && p[2] < g[2]) dinter = ih;
      if (q == 1 && p[1] > g[1]) dinter = -iw;
      if (q == 3 && p[3] < g[3]) dinter = iw;
    }
    const double darea = q == 0 ? -h : q == 2 ? h : q == 1 ? -w : w;
    const double duni = darea - dinter;
    const double diou = (dinter * uni - inter * duni) / (uni * uni);

    double dc2 = 0.0;
    if (q == 0 && p[0] < g[0]) dc2 = -2.0 * ex;
    if (q == 2 && p[2] > g[2]) dc2 = 2.0 * ex;
    if (q == 1 && p[1] < g[1]) dc2 = -2.0 * ey;
    if (q == 3 && p[3] > g[3]) dc2 = 2.0 * ey;

    const double drho2 = (q == 0 || q == 2) ? dcx : dcy;
    const double dv = q == 0 ? -dv_dw : q == 2 ? dv_dw : q == 1 ? -dv_dh : dv_dh;

    const double dciou =
        diou * dciou_diou + dv * dciou_dv + drho2 * dciou_drho2 + dc2 * dciou_dc2;
    out.dx[q] = -dciou;
  }
  return out;
}

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

}  // namespace

// ---- config ----

void TrainConfig::validate() const {
  if (lr < 0 || momentum < 0 || momentum >= 1 || weight_decay < 0)
    throw DataError("bad optimizer settings");
  if (batch_size < 1 || epochs < 1) throw DataError("batch_size and epochs must be positive");
  if (image_size < 32 || image_size % 32) throw DataError("image_size must be a multiple of 32");
  if (eval_conf <= 0 || eval_conf >= 1 || nms_iou <= 0 || nms_iou >= 1)
    throw DataError("eval thresholds must be in (0,1)");
  if (eval_split != "train" && eval_split != "val" && eval_split != "test")
    throw DataError("eval_split must be train, val or test");
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << "lr=" << lr << "\n";
  out << "momentum=" << momentum << "\n";
  out << "weight_decay=" << weight_decay << "\n";
  out << "batch_size=" << batch_size << "\n";
  out << "image_size=" << image_size << "\n";
  out << "epochs=" << epochs << "\n";
  out << "seed=" << seed << "\n";
  out << "w_cls=" << w_cls << "\n";
  out << "w_box=" << w_box << "\n";
  out << "w_dfl=" << w_dfl << "\n";
  out << "eval_split=" << eval_split << "\n";
  out << "eval_every=" << eval_every << "\n";
  out << "stop_map50=" << stop_map50 << "\n";
  out << "eval_conf=" << eval_conf << "\n";
  out << "nms_iou=" << nms_iou << "\n";
  return out.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw DataError("train config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    try {
      if (key == "lr") cfg.lr = std::stod(value);
      else if (key == "momentum") cfg.momentum = std::stod(value);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
      else if (key == "batch_size") cfg.batch_size = std::stoi(value);
      else if (key == "image_size") cfg.image_size = std::stoi(value);
      else if (key == "epochs") cfg.epochs = std::stoi(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "w_cls") cfg.w_cls = std::stod(value);
      else if (key == "w_box") cfg.w_box = std::stod(value);
      else if (key == "w_dfl") cfg.w_dfl = std::stod(value);
      else if (key == "eval_split") cfg.eval_split = value;
      else if (key == "eval_every") cfg.eval_every = std::stoi(value);
      else if (key == "stop_map50") cfg.stop_map50 = std::stod(value);
      else if (key == "eval_conf") cfg.eval_conf = std::stod(value);
      else if (key == "nms_iou") cfg.nms_iou = std::stod(value);
      else
        throw DataError("train config line " + std::to_string(lineno) + ": unknown key '" + key +
                        "'");
    } catch (const std::invalid_argument&) {
      throw DataError("train config line " + std::to_string(lineno) + ": bad value for " + key);
    }
  }
  return cfg;
}

// ---- target assignment ----

Assignments assign_targets(const std::vector<TrainBox>& gts, int image_size,
                           std::array<int, 3> strides) {
  Assignments out;
  struct Candidate {
    double dist2;
    int scale;
    int64_t cell;
  };
  std::vector<std::vector<Candidate>> per_gt(gts.size());

  for (int s = 0; s < 3; ++s) {
    auto& scale = out.scales[s];
    scale.stride = strides[s];
    scale.cells_h = image_size / strides[s];
    scale.cells_w = image_size / strides[s];
    scale.gt_index.assign(static_cast<size_t>(scale.cells_h * scale.cells_w), -1);
    for (int64_t i = 0; i < scale.cells_h; ++i)
      for (int64_t j = 0; j < scale.cells_w; ++j) {
        const double cx = (j + 0.5) * strides[s];
        const double cy = (i + 0.5) * strides[s];
        // owner: smallest-area box containing the center (left/top edge
        // inclusive), lowest index on area ties
        int owner = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
          const BBox& b = gts[g].box;
          if (cx < b.x1 || cx >= b.x2 || cy < b.y1 || cy >= b.y2) continue;
          if (owner < 0 || b.area() < gts[owner].box.area()) owner = static_cast<int>(g);
        }
        if (owner < 0) continue;
        const int64_t cell = i * scale.cells_w + j;
        scale.gt_index[static_cast<size_t>(cell)] = owner;
        const BBox& b = gts[static_cast<size_t>(owner)].box;
        const double gcx = (b.x1 + b.x2) / 2, gcy = (b.y1 + b.y2) / 2;
        per_gt[static_cast<size_t>(owner)].push_back(
            {(cx - gcx) * (cx - gcx) + (cy - gcy) * (cy - gcy), s, cell});
      }
  }

  // keep only the 9 closest cells per ground truth
  for (auto& cells : per_gt) {
    if (cells.size() <= 9) continue;
    std::sort(cells.begin(), cells.end(), [](const Candidate& a, const Candidate& b) {
      if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
      if (a.scale != b.scale) return a.scale < b.scale;
      return a.cell < b.cell;
    });
    for (size_t i = 9; i < cells.size(); ++i)
      out.scales[cells[i].scale].gt_index[static_cast<size_t>(cells[i].cell)] = -1;
  }
  for (const auto& scale : out.scales)
    for (int32_t g : scale.gt_index) out.positive_count += g >= 0 ? 1 : 0;
  return out;
}

// ---- fused detection loss ----

template <typename T>
std::pair<Tensor<T>, LossBreakdown> detection_loss(Tape<T>* tape, const HeadOutputs<T>& head,
                                                   const BatchTargets& targets,
                                                   const LossWeights& weights, int reg_max,
                                                   int image_size) {
  const int64_t batch = head.cls[0].shape().n;
  if (static_cast<int64_t>(targets.boxes.size()) != batch ||
      static_cast<int64_t>(targets.assign.size()) != batch)
    throw DimensionError("detection_loss: targets do not match the batch size");
  const int64_t nc = head.cls[0].shape().c;
  const int R = reg_max;
  if (R < 2 || R > 64) throw DimensionError("detection_loss: reg_max out of range");

  int64_t n_pos = 0;
  for (const auto& a : targets.assign) n_pos += a.positive_count;
  const double norm = static_cast<double>(std::max<int64_t>(1, n_pos));

  double cls_sum = 0, box_sum = 0, dfl_sum = 0;
  // closed-form gradients of the weighted total wrt each head tensor
  std::array<std::shared_ptr<std::vector<T>>, 3> gcls, gbox;
  for (int s = 0; s < 3; ++s) {
    gcls[s] = std::make_shared<std::vector<T>>(head.cls[s].numel(), T(0));
    gbox[s] = std::make_shared<std::vector<T>>(head.box[s].numel(), T(0));
  }

  const double cls_coeff = weights.cls / norm;
  const double box_coeff = weights.box / norm;
  const double dfl_coeff = weights.dfl / (norm * 4.0);

  std::vector<double> prob(static_cast<size_t>(R));
  for (int s = 0; s < 3; ++s) {
    const auto& cls_t = head.cls[s];
    const auto& box_t = head.box[s];
    const int64_t ch = cls_t.shape().h, cw = cls_t.shape().w;
    const int stride = head.strides[s];
    if (ch * stride != image_size)
      throw DimensionError("detection_loss: head shapes do not match the image size");
    for (int64_t n = 0; n < batch; ++n) {
      const auto& assign = targets.assign[static_cast<size_t>(n)].scales[s];
      const auto& boxes = targets.boxes[static_cast<size_t>(n)];
      for (int64_t i = 0; i < ch; ++i)
        for (int64_t j = 0; j < cw; ++j) {
          const int32_t gi = assign.gt_index[static_cast<size_t>(i * cw + j)];
          // classification: one-vs-all over every cell
          for (int64_t c = 0; c < nc; ++c) {
            const int64_t idx = ((n * nc + c) * ch + i) * cw + j;
            const double target =
                gi >= 0 && boxes[static_cast<size_t>(gi)].class_id == c ? 1.0 : 0.0;
            double grad;
            cls_sum += bce_with_logit(static_cast<double>(cls_t.data()[idx]), target, &grad);
            (*gcls[s])[static_cast<size_t>(idx)] = static_cast<T>(grad * cls_coeff);
          }
          if (gi < 0) continue;

          // regression terms over the positive cell
          const BBox& g = boxes[static_cast<size_t>(gi)].box;
          const double cxn = j + 0.5, cyn = i + 0.5;
          const std::array<double, 4> gt_box = {g.x1 / stride, g.y1 / stride, g.x2 / stride,
                                                g.y2 / stride};
          // per-side softmax expectations
          std::array<double, 4> expect;
          std::array<std::array<double, 64>, 4> probs_store;
          for (int side = 0; side < 4; ++side) {
            double mx = -1e300;
            for (int k = 0; k < R; ++k)
              mx = std::max(mx, static_cast<double>(
                                    box_t.at(n, side * R + k, i, j)));
            double denom = 0, num = 0;
            for (int k = 0; k < R; ++k) {
              const double e =
                  std::exp(static_cast<double>(box_t.at(n, side * R + k, i, j)) - mx);
              prob[static_cast<size_t>(k)] = e;
              denom += e;
              num += e * k;
            }
            for (int k = 0; k < R; ++k) probs_store[side][static_cast<size_t>(k)] =
                prob[static_cast<size_t>(k)] / denom;
            expect[side] = num / denom;
          }
          const std::array<double, 4> pred_box = {cxn - expect[0], cyn - expect[1],
                                                  cxn + expect[2], cyn + expect[3]};
          const CiouResult ciou = ciou_loss(pred_box, gt_box);
          box_sum += ciou.loss;
          const std::array<double, 4> dloss_dE = {-ciou.dx[0], -ciou.dx[1], ciou.dx[2],
                                                  ciou.dx[3]};

          // distributional targets: distances clamped into the bin range
          const std::array<double, 4> raw_t = {cxn - gt_box[0], cyn - gt_box[1], gt_box[2] - cxn,
                                               gt_box[3] - cyn};
          double cell_dfl = 0;
          for (int side = 0; side < 4; ++side) {
            const double t = std::clamp(raw_t[side], 0.0, R - 1 - 1e-3);
            const int fl = static_cast<int>(t);
            const int fr = fl + 1;
            const double wl = fr - t, wr = t - fl;
            const double pl = probs_store[side][static_cast<size_t>(fl)];
            const double pr = probs_store[side][static_cast<size_t>(fr)];
            cell_dfl += -(wl * std::log(std::max(pl, 1e-12)) +
                          wr * std::log(std::max(pr, 1e-12)));
            for (int k = 0; k < R; ++k) {
              const double pk = probs_store[side][static_cast<size_t>(k)];
              const double dfl_grad = pk - (k == fl ? wl : 0.0) - (k == fr ? wr : 0.0);
              const double exp_grad = pk * (k - expect[side]) * dloss_dE[side];
              const int64_t idx = ((n * 4 * R + side * R + k) * ch + i) * cw + j;
              (*gbox[s])[static_cast<size_t>(idx)] =
                  static_cast<T>(box_coeff * exp_grad + dfl_coeff * dfl_grad);
            }
          }
          dfl_sum += cell_dfl / 4.0;
        }
    }
  }

  LossBreakdown breakdown;
  breakdown.cls = cls_sum / norm;
  breakdown.box = n_pos > 0 ? box_sum / norm : 0.0;
  breakdown.dfl = n_pos > 0 ? dfl_sum / norm : 0.0;
  breakdown.total =
      weights.cls * breakdown.cls + weights.box * breakdown.box + weights.dfl * breakdown.dfl;
  if (!std::isfinite(breakdown.cls))
    throw NumericError("detection_loss: non-finite cls term");
  if (!std::isfinite(breakdown.box))
    throw NumericError("detection_loss: non-finite box term");
  if (!std::isfinite(breakdown.dfl))
    throw NumericError("detection_loss: non-finite dfl term");

  Tensor<T> total = Tensor<T>::filled({1, 1, 1, 1}, static_cast<T>(breakdown.total));
  bool tracked = false;
  for (int s = 0; s < 3; ++s) tracked = tracked || head.cls[s].tracked() || head.box[s].tracked();
  if (tape && tracked) {
    std::vector<Tensor<T>> inputs;
    std::array<std::shared_ptr<detail::Storage<T>>, 3> cls_stores, box_stores;
    for (int s = 0; s < 3; ++s) {
      inputs.push_back(head.cls[s]);
      inputs.push_back(head.box[s]);
      cls_stores[s] = head.cls[s].storage();
      box_stores[s] = head.box[s].storage();
    }
    auto out_store = total.storage();
    tape->record(std::move(inputs), total, [cls_stores, box_stores, gcls, gbox, out_store] {
      if (out_store->grad.empty()) return;
      const T g = out_store->grad[0];
      for (int s = 0; s < 3; ++s) {
        if (cls_stores[s]->tracked) {
          cls_stores[s]->ensure_grad();
          auto& dst = cls_stores[s]->grad;
          const auto& src = *gcls[s];
          for (size_t i = 0; i < src.size(); ++i) dst[i] += g * src[i];
        }
        if (box_stores[s]->tracked) {
          box_stores[s]->ensure_grad();
          auto& dst = box_stores[s]->grad;
          const auto& src = *gbox[s];
          for (size_t i = 0; i < src.size(); ++i) dst[i] += g * src[i];
        }
      }
    });
  }
  return {total, breakdown};
}

// ---- SGD ----

template <typename T>
void sgd_step(ParamStore<T>& store, SgdState<T>& state, double lr, double momentum,
              double weight_decay) {
  for (auto& e : store.entries_mut()) {
    if (!e.trainable) continue;
    auto& v = state.velocity[e.key];
    if (v.empty()) v.assign(static_cast<size_t>(e.tensor.numel()), T(0));
    auto p = e.tensor.data();
    auto g = e.tensor.grad();
    for (size_t i = 0; i < p.size(); ++i) {
      v[i] = static_cast<T>(momentum * v[i] + g[i] + weight_decay * p[i]);
      p[i] -= static_cast<T>(lr) * v[i];
    }
  }
}

void save_sgd_state(const SgdState<float>& state, const std::string& path) {
  std::string out;
  out.append(kOptimMagic, 4);
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(state.velocity.size()));
  for (const auto& [key, values] : state.velocity) {
    put_u16(out, static_cast<uint16_t>(key.size()));
    out += key;
    put_u32(out, static_cast<uint32_t>(values.size()));
    for (float v : values) put_f32(out, v);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot rename " + tmp);
}

SgdState<float> load_sgd_state(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read optimizer state " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > buf.size()) throw DataError(path + ": truncated optimizer state");
  };
  auto u16 = [&]() {
    need(2);
    const uint16_t v = static_cast<uint8_t>(buf[pos]) |
                       (static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8);
    pos += 2;
    return v;
  };
  auto u32 = [&]() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(buf.data(), kOptimMagic, 4) != 0)
    throw DataError(path + ": not an optimizer state file");
  pos = 4;
  if (u32() != 1) throw DataError(path + ": unsupported optimizer state version");
  const uint32_t count = u32();
  SgdState<float> state;
  for (uint32_t r = 0; r < count; ++r) {
    const uint16_t key_len = u16();
    need(key_len);
    const std::string key = buf.substr(pos, key_len);
    pos += key_len;
    const uint32_t n = u32();
    std::vector<float> values(n);
    for (uint32_t i = 0; i < n; ++i) {
      const uint32_t bits = u32();
      std::memcpy(&values[i], &bits, 4);
    }
    state.velocity[key] = std::move(values);
  }
  return state;
}

// ---- evaluation plumbing ----

std::vector<Detection> predict_image(Model<float>& model, const ImageU8& image, double conf,
                                     double nms_iou) {
  const int size = model.config().input_size;
  const bool needs_resize = image.w != size || image.h != size;
  ImageU8 holder;
  const ImageU8* src = &image;
  if (needs_resize) {
    holder = resize_nearest(image, size, size);
    src = &holder;
  }
  auto head = model.forward(image_to_tensor(*src));
  auto dets = nms(decode<float>(head, model.config().reg_max, size, conf), nms_iou);
  if (needs_resize) {
    const double sx = static_cast<double>(image.w) / size;
    const double sy = static_cast<double>(image.h) / size;
    for (auto& d : dets) {
      d.bbox.x1 *= sx;
      d.bbox.x2 *= sx;
      d.bbox.y1 *= sy;
      d.bbox.y2 *= sy;
    }
  }
  return dets;
}

EvalReport evaluate_model(Model<float>& model, const std::string& dataset_root,
                          const std::string& split, double conf, double nms_iou,
                          std::vector<EvalDetection>* collected) {
  auto manifest = DatasetManifest::load(dataset_root);
  auto images = manifest.split_images(split);
  if (images.empty()) throw DataError("split '" + split + "' has no images");

  std::vector<EvalDetection> dets;
  std::vector<GroundTruth> gts;
  for (const auto* entry : images) {
    const ImageU8 img = read_ppm(image_path(dataset_root, *entry));
    for (const auto& det : predict_image(model, img, conf, nms_iou))
      dets.push_back({entry->id, det.bbox, det.class_id, det.score});
    for (const auto& label : read_labels(label_path(dataset_root, *entry)))
      gts.push_back({entry->id, to_pixels(label, entry->width, entry->height), label.class_id});
  }
  auto report = evaluate(dets, gts);
  report.params_trainable = count_params(model).trainable;
  report.gflops = count_flops(model, model.config().input_size);
  if (collected) *collected = std::move(dets);
  return report;
}

// ---- training loop ----

namespace {

struct ProgressState {
  int epochs_done = 0;
  double best_map50 = -1;
  bool reached_target = false;
};

ProgressState read_progress(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path);
  nlohmann::json j;
  f >> j;
  ProgressState st;
  st.epochs_done = j.at("epochs_done").get<int>();
  st.best_map50 = j.value("best_map50", -1.0);
  st.reached_target = j.value("reached_target", false);
  return st;
}

void write_progress(const ProgressState& st, const std::string& path) {
  nlohmann::json j;
  j["epochs_done"] = st.epochs_done;
  j["best_map50"] = st.best_map50;
  j["reached_target"] = st.reached_target;
  std::ofstream f(path, std::ios::trunc);
  f << j.dump(2) << "\n";
}

}  // namespace

TrainResult train_loop(const TrainConfig& config, Model<float>& model,
                       const std::string& dataset_root, const std::string& out_dir, bool resume,
                       std::ostream* progress) {
  config.validate();
  if (model.config().input_size != config.image_size)
    throw DataError("model input_size and train image_size differ");
  auto manifest = DatasetManifest::load(dataset_root);
  auto train_images = manifest.split_images("train");
  if (train_images.empty()) throw DataError("dataset has no train images");

  fs::create_directories(out_dir);
  const std::string weights_path = out_dir + "/last.msyw";
  const std::string optim_path = out_dir + "/optim.msyo";
  const std::string state_path = out_dir + "/state.json";
  const std::string csv_path = out_dir + "/metrics.csv";

  ProgressState st;
  SgdState<float> optim;
  if (resume) {
    st = read_progress(state_path);
    load_weights(model, weights_path);
    optim = load_sgd_state(optim_path);
  } else {
    std::ofstream csv(csv_path, std::ios::trunc);
    csv << "epoch,loss_total,loss_cls,loss_box,loss_dfl,P,R,mAP50,mAP5095\n";
  }

  // desk-scale datasets fit in memory; cache decoded tensors and boxes
  std::map<std::string, Tensor<float>> image_cache;
  std::map<std::string, std::vector<TrainBox>> box_cache;
  for (const auto* entry : train_images) {
    ImageU8 img = read_ppm(image_path(dataset_root, *entry));
    if (img.w != config.image_size || img.h != config.image_size)
      img = resize_nearest(img, config.image_size, config.image_size);
    image_cache[entry->id] = image_to_tensor(img);
    std::vector<TrainBox> boxes;
    for (const auto& label : read_labels(label_path(dataset_root, *entry)))
      boxes.push_back({to_pixels(label, config.image_size, config.image_size), label.class_id});
    box_cache[entry->id] = std::move(boxes);
  }
  std::vector<std::string> ids;
  for (const auto* entry : train_images) ids.push_back(entry->id);
  std::sort(ids.begin(), ids.end());

  const LossWeights weights{config.w_cls, config.w_box, config.w_dfl};
  TrainResult result;
  result.epochs_run = st.epochs_done;

  for (int epoch = st.epochs_done; epoch < config.epochs; ++epoch) {
    // seeded per-epoch order so runs and resumes replay identically
    std::vector<std::string> order = ids;
    Rng shuffle_rng(Rng::mix(config.seed, static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i)))]);

    LossBreakdown epoch_loss;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += config.batch_size) {
      const size_t end = std::min(order.size(), start + config.batch_size);
      const int64_t bsz = static_cast<int64_t>(end - start);
      Tensor<float> batch =
          Tensor<float>::zeros({bsz, 3, config.image_size, config.image_size});
      BatchTargets targets;
      for (size_t b = start; b < end; ++b) {
        const auto& img = image_cache[order[b]];
        std::copy(img.data().begin(), img.data().end(),
                  batch.data().begin() + static_cast<int64_t>(b - start) * img.numel());
        targets.boxes.push_back(box_cache[order[b]]);
        targets.assign.push_back(assign_targets(box_cache[order[b]], config.image_size));
      }

      Tape<float> tape;
      auto head = model.forward(batch, &tape, true);
      auto [total, breakdown] = detection_loss<float>(&tape, head, targets, weights,
                                                      model.config().reg_max, config.image_size);
      if (!std::isfinite(breakdown.total))
        throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batches));
      for (auto& e : model.store().entries_mut())
        if (e.trainable) e.tensor.zero_grad();
      backward(tape, total);
      sgd_step(model.store(), optim, config.lr, config.momentum, config.weight_decay);

      epoch_loss.cls += breakdown.cls;
      epoch_loss.box += breakdown.box;
      epoch_loss.dfl += breakdown.dfl;
      epoch_loss.total += breakdown.total;
      ++batches;
    }
    epoch_loss.cls /= batches;
    epoch_loss.box /= batches;
    epoch_loss.dfl /= batches;
    epoch_loss.total /= batches;

    EpochLog log;
    log.epoch = epoch;
    log.loss = epoch_loss;
    const bool eval_now = config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 ||
                                                    epoch + 1 == config.epochs);
    if (eval_now) {
      auto report = evaluate_model(model, dataset_root, config.eval_split, config.eval_conf,
                                   config.nms_iou);
      log.precision = report.precision;
      log.recall = report.recall;
      log.map50 = report.map50;
      log.map5095 = report.map5095;
      st.best_map50 = std::max(st.best_map50, report.map50);
      result.final_map50 = report.map50;
    }

    {
      std::ofstream csv(csv_path, std::ios::app);
      csv << epoch << "," << epoch_loss.total << "," << epoch_loss.cls << "," << epoch_loss.box
          << "," << epoch_loss.dfl << ",";
      if (log.map50 >= 0)
        csv << log.precision << "," << log.recall << "," << log.map50 << "," << log.map5095;
      else
        csv << ",,,";
      csv << "\n";
    }
    if (progress)
      (*progress) << "epoch " << epoch << " loss " << epoch_loss.total
                  << (log.map50 >= 0 ? " mAP50 " + std::to_string(log.map50) : "") << "\n";

    save_weights(model, weights_path);
    save_sgd_state(optim, optim_path);
    st.epochs_done = epoch + 1;
    result.history.push_back(log);
    result.epochs_run = epoch + 1;
    if (config.stop_map50 > 0 && log.map50 >= config.stop_map50) {
      st.reached_target = true;
      result.reached_target = true;
      write_progress(st, state_path);
      break;
    }
    write_progress(st, state_path);
  }
  return result;
}

template std::pair<Tensor<float>, LossBreakdown> detection_loss<float>(Tape<float>*,
                                                                       const HeadOutputs<float>&,
                                                                       const BatchTargets&,
                                                                       const LossWeights&, int,
                                                                       int);
template std::pair<Tensor<double>, LossBreakdown> detection_loss<double>(
    Tape<double>*, const HeadOutputs<double>&, const BatchTargets&, const LossWeights&, int, int);
template void sgd_step<float>(ParamStore<float>&, SgdState<float>&, double, double, double);
template void sgd_step<double>(ParamStore<double>&, SgdState<double>&, double, double, double);

}  // namespace msy
