#include "msy/blocks.hpp"

#include <algorithm>
#include <cmath>

namespace msy {

namespace {

constexpr double kBnEps = 1e-3;
constexpr double kBnMomentum = 0.03;
constexpr double kGnEps = 1e-5;

// class-prior bias for the detection head, referenced to a 640px image
double cls_prior_bias(int num_classes, int stride) {
  return std::log(5.0 / num_classes / ((640.0 / stride) * (640.0 / stride)));
}

double conv_flops(int64_t c_in, int64_t c_out, int kh, int kw, int groups, const Shape& out) {
  return 2.0 * kh * kw * static_cast<double>(c_in / groups) * static_cast<double>(c_out) *
         static_cast<double>(out.n * out.h * out.w);
}

double elems(const Shape& s) { return static_cast<double>(s.numel()); }

Shape conv_out_shape(const Shape& in, int64_t c_out, int kernel, int stride, int padding) {
  return Shape{in.n, c_out, (in.h + 2 * padding - kernel) / stride + 1,
               (in.w + 2 * padding - kernel) / stride + 1};
}

int64_t head_mid_box(std::span<const int64_t> ch, int reg_max) {
  return std::max<int64_t>({16, ch[0] / 4, static_cast<int64_t>(4 * reg_max)});
}

int64_t head_mid_cls(std::span<const int64_t> ch, int num_classes) {
  return std::max<int64_t>(ch[0], std::min<int64_t>(num_classes, 100));
}

}  // namespace

int64_t make_divisible(double value, int64_t divisor) {
  int64_t v = static_cast<int64_t>(std::ceil(value / static_cast<double>(divisor))) * divisor;
  return std::max<int64_t>(v, divisor);
}

// ---- ParamStore ----

template <typename T>
Tensor<T>& ParamStore<T>::create(const std::string& key, Shape shape, Init init, double arg,
                                 bool trainable) {
  if (index_.count(key)) throw UsageError("duplicate parameter key " + key);
  Tensor<T> t = Tensor<T>::zeros(shape);
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(t.data().begin(), t.data().end(), T(1));
      break;
    case Init::constant:
      std::fill(t.data().begin(), t.data().end(), static_cast<T>(arg));
      break;
    case Init::conv_uniform: {
      const double bound = 1.0 / std::sqrt(std::max(1.0, arg));
      for (auto& v : t.data()) v = static_cast<T>(rng_.uniform(-bound, bound));
      break;
    }
  }
  if (trainable) t.set_requires_grad(true);
  index_[key] = entries_.size();
  entries_.push_back(Entry{key, t, trainable});
  return entries_.back().tensor;
}

template <typename T>
Tensor<T>* ParamStore<T>::find(const std::string& key) {
  auto it = index_.find(key);
  return it == index_.end() ? nullptr : &entries_[it->second].tensor;
}

template <typename T>
const Tensor<T>* ParamStore<T>::find(const std::string& key) const {
  auto it = index_.find(key);
  return it == index_.end() ? nullptr : &entries_[it->second].tensor;
}

template <typename T>
int64_t ParamStore<T>::trainable_count() const {
  int64_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

template <typename T>
int64_t ParamStore<T>::total_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

// ---- ConvBNSiLU ----

template <typename T>
ConvBNSiLU<T>::ConvBNSiLU(ParamStore<T>& store, const std::string& prefix, int64_t c_in,
                          int64_t c_out, int kernel, int stride, int padding, int groups, bool act)
    : c_in_(c_in), c_out_(c_out), kernel_(kernel), stride_(stride), padding_(padding),
      groups_(groups), act_(act) {
  if (c_in % groups || c_out % groups)
    throw DimensionError(prefix + ": channels not divisible by groups");
  const double fan_in = static_cast<double>(c_in / groups) * kernel * kernel;
  weight_ = store.create(prefix + ".conv.weight", {c_out, c_in / groups, kernel, kernel},
                         Init::conv_uniform, fan_in, true);
  bn_scale_ = store.create(prefix + ".bn.scale", {1, c_out, 1, 1}, Init::ones, 0, true);
  bn_shift_ = store.create(prefix + ".bn.shift", {1, c_out, 1, 1}, Init::zeros, 0, true);
  bn_rmean_ = store.create(prefix + ".bn.rmean", {1, c_out, 1, 1}, Init::zeros, 0, false);
  bn_rvar_ = store.create(prefix + ".bn.rvar", {1, c_out, 1, 1}, Init::ones, 0, false);
}

template <typename T>
std::vector<Tensor<T>> ConvBNSiLU<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                              bool training) {
  auto y = conv2d<T>(tape, in[0], weight_, nullptr, stride_, padding_, groups_);
  y = batch_norm<T>(tape, y, bn_scale_, bn_shift_, bn_rmean_, bn_rvar_, training, kBnMomentum,
                    kBnEps);
  if (act_) y = silu<T>(tape, y);
  return {y};
}

template <typename T>
ModuleStats ConvBNSiLU<T>::stats(std::span<const Shape> in) const {
  Shape out = conv_out_shape(in[0], c_out_, kernel_, stride_, padding_);
  double f = conv_flops(c_in_, c_out_, kernel_, kernel_, groups_, out) + elems(out);
  if (act_) f += elems(out);
  return {{out}, f};
}

// ---- DualConv ----

template <typename T>
DualConv<T>::DualConv(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out,
                      int groups)
    : c_in_(c_in), c_out_(c_out), groups_(groups) {
  if (c_in % groups || c_out % groups)
    throw DimensionError(prefix + ": dual_conv channels not divisible by groups");
  gc_weight_ = store.create(prefix + ".gc.weight", {c_out, c_in / groups, 3, 3},
                            Init::conv_uniform, static_cast<double>(c_in / groups) * 9, true);
  pw_weight_ = store.create(prefix + ".pw.weight", {c_out, c_in, 1, 1}, Init::conv_uniform,
                            static_cast<double>(c_in), true);
  bn_scale_ = store.create(prefix + ".bn.scale", {1, c_out, 1, 1}, Init::ones, 0, true);
  bn_shift_ = store.create(prefix + ".bn.shift", {1, c_out, 1, 1}, Init::zeros, 0, true);
  bn_rmean_ = store.create(prefix + ".bn.rmean", {1, c_out, 1, 1}, Init::zeros, 0, false);
  bn_rvar_ = store.create(prefix + ".bn.rvar", {1, c_out, 1, 1}, Init::ones, 0, false);
}

template <typename T>
std::vector<Tensor<T>> DualConv<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                            bool training) {
  // both branches see the full input; merged by elementwise sum
  auto spatial = conv2d<T>(tape, in[0], gc_weight_, nullptr, 1, 1, groups_);
  auto point = conv2d<T>(tape, in[0], pw_weight_, nullptr, 1, 0, 1);
  auto y = add<T>(tape, spatial, point);
  y = batch_norm<T>(tape, y, bn_scale_, bn_shift_, bn_rmean_, bn_rvar_, training, kBnMomentum,
                    kBnEps);
  return {silu<T>(tape, y)};
}

template <typename T>
ModuleStats DualConv<T>::stats(std::span<const Shape> in) const {
  Shape out{in[0].n, c_out_, in[0].h, in[0].w};
  double f = conv_flops(c_in_, c_out_, 3, 3, groups_, out) +
             conv_flops(c_in_, c_out_, 1, 1, 1, out) + 3.0 * elems(out);  // add + bn + silu
  return {{out}, f};
}

// ---- Bottleneck ----

template <typename T>
Bottleneck<T>::Bottleneck(ParamStore<T>& store, const std::string& prefix, int64_t c_in,
                          int64_t c_out, bool shortcut, bool dual, int dual_groups)
    : residual_(shortcut && c_in == c_out), dual_(dual) {
  if (dual) {
    cv1_ = std::make_unique<DualConv<T>>(store, prefix + ".cv1", c_in, c_out, dual_groups);
    cv2_ = std::make_unique<DualConv<T>>(store, prefix + ".cv2", c_out, c_out, dual_groups);
  } else {
    cv1_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv1", c_in, c_out, 3, 1, 1);
    cv2_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv2", c_out, c_out, 3, 1, 1);
  }
}

template <typename T>
std::vector<Tensor<T>> Bottleneck<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                              bool training) {
  auto y = cv2_->forward1(tape, cv1_->forward1(tape, in[0], training), training);
  if (residual_) y = add<T>(tape, in[0], y);
  return {y};
}

template <typename T>
ModuleStats Bottleneck<T>::stats(std::span<const Shape> in) const {
  auto s1 = cv1_->stats(in);
  auto s2 = cv2_->stats(s1.out);
  double f = s1.flops + s2.flops;
  if (residual_) f += elems(s2.out[0]);
  return {s2.out, f};
}

// ---- C2f ----

template <typename T>
C2f<T>::C2f(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out, int n,
            bool shortcut, bool dual, int dual_groups)
    : hidden_(c_out / 2), dual_(dual) {
  if (c_out % 2) throw DimensionError(prefix + ": c2f output channels must be even");
  if (n < 1) throw DimensionError(prefix + ": c2f requires at least one bottleneck");
  cv1_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv1", c_in, 2 * hidden_, 1, 1, 0);
  for (int i = 0; i < n; ++i)
    m_.push_back(std::make_unique<Bottleneck<T>>(store, prefix + ".m" + std::to_string(i),
                                                 hidden_, hidden_, shortcut, dual, dual_groups));
  cv2_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv2",
                                         static_cast<int64_t>(2 + n) * hidden_, c_out, 1, 1, 0);
}

template <typename T>
std::vector<Tensor<T>> C2f<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                       bool training) {
  auto y = cv1_->forward1(tape, in[0], training);
  std::vector<int64_t> halves{hidden_, hidden_};
  auto pieces = split<T>(tape, y, halves, 1);
  std::vector<Tensor<T>> branches{pieces[0], pieces[1]};
  for (auto& m : m_) branches.push_back(m->forward1(tape, branches.back(), training));
  auto cat = concat<T>(tape, branches, 1);
  return {cv2_->forward1(tape, cat, training)};
}

template <typename T>
ModuleStats C2f<T>::stats(std::span<const Shape> in) const {
  auto s1 = cv1_->stats(in);
  double f = s1.flops;
  Shape half{s1.out[0].n, hidden_, s1.out[0].h, s1.out[0].w};
  std::vector<Shape> cur{half};
  for (auto& m : m_) {
    auto sm = m->stats(cur);
    f += sm.flops;
    cur = sm.out;
  }
  Shape cat{half.n, static_cast<int64_t>(2 + m_.size()) * hidden_, half.h, half.w};
  auto s2 = cv2_->stats(std::vector<Shape>{cat});
  return {s2.out, f + s2.flops};
}

// ---- SPPF ----

template <typename T>
SPPF<T>::SPPF(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out,
              int pool_kernel)
    : pool_kernel_(pool_kernel) {
  if (c_in % 2) throw DimensionError(prefix + ": sppf input channels must be even");
  cv1_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv1", c_in, c_in / 2, 1, 1, 0);
  cv2_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv2", 2 * c_in, c_out, 1, 1, 0);
}

template <typename T>
std::vector<Tensor<T>> SPPF<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                        bool training) {
  auto x = cv1_->forward1(tape, in[0], training);
  auto p1 = pool<T>(tape, x, PoolKind::max, pool_kernel_, 1, pool_kernel_ / 2);
  auto p2 = pool<T>(tape, p1, PoolKind::max, pool_kernel_, 1, pool_kernel_ / 2);
  auto p3 = pool<T>(tape, p2, PoolKind::max, pool_kernel_, 1, pool_kernel_ / 2);
  std::vector<Tensor<T>> stages{x, p1, p2, p3};
  return {cv2_->forward1(tape, concat<T>(tape, stages, 1), training)};
}

template <typename T>
ModuleStats SPPF<T>::stats(std::span<const Shape> in) const {
  auto s1 = cv1_->stats(in);
  double f = s1.flops + 3.0 * elems(s1.out[0]);  // three serial max pools
  Shape cat{s1.out[0].n, s1.out[0].c * 4, s1.out[0].h, s1.out[0].w};
  auto s2 = cv2_->stats(std::vector<Shape>{cat});
  return {s2.out, f + s2.flops};
}

// ---- EMA ----

template <typename T>
EMA<T>::EMA(ParamStore<T>& store, const std::string& prefix, int64_t channels, int groups)
    : channels_(channels), groups_(groups) {
  if (groups < 1 || channels % groups)
    throw DimensionError(prefix + ": ema channels not divisible by groups");
  const int64_t cpg = channels / groups;
  w1x1_ = store.create(prefix + ".conv1x1.weight", {cpg, cpg, 1, 1}, Init::conv_uniform,
                       static_cast<double>(cpg), true);
  b1x1_ = store.create(prefix + ".conv1x1.bias", {1, cpg, 1, 1}, Init::conv_uniform,
                       static_cast<double>(cpg), true);
  w3x3_ = store.create(prefix + ".conv3x3.weight", {cpg, cpg, 3, 3}, Init::conv_uniform,
                       static_cast<double>(cpg) * 9, true);
  b3x3_ = store.create(prefix + ".conv3x3.bias", {1, cpg, 1, 1}, Init::conv_uniform,
                       static_cast<double>(cpg) * 9, true);
  gn_scale_ = store.create(prefix + ".gn.scale", {1, cpg, 1, 1}, Init::ones, 0, true);
  gn_shift_ = store.create(prefix + ".gn.shift", {1, cpg, 1, 1}, Init::zeros, 0, true);
}

template <typename T>
std::vector<Tensor<T>> EMA<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in, bool) {
  const Shape s = in[0].shape();
  if (s.c != channels_) throw DimensionError("ema: expected " + std::to_string(channels_) +
                                             " channels, got " + std::to_string(s.c));
  const int64_t g = groups_;
  const int64_t cpg = channels_ / g;
  const int64_t b = s.n * g;

  auto folded = reshape<T>(tape, in[0], {b, cpg, s.h, s.w});

  // 1x1 branch: directional context, shared conv, per-direction sigmoid gates
  auto xh = pool<T>(tape, folded, PoolKind::x_avg);                       // (b,cpg,H,1)
  auto yw = transpose_hw<T>(tape, pool<T>(tape, folded, PoolKind::y_avg));  // (b,cpg,W,1)
  std::vector<Tensor<T>> dirs{xh, yw};
  auto joint = conv2d<T>(tape, concat<T>(tape, dirs, 2), w1x1_, &b1x1_, 1, 0, 1);
  std::vector<int64_t> hw_sizes{s.h, s.w};
  auto pieces = split<T>(tape, joint, hw_sizes, 2);
  auto gate_h = sigmoid<T>(tape, pieces[0]);
  auto gate_w = sigmoid<T>(tape, transpose_hw<T>(tape, pieces[1]));
  auto gated = mul<T>(tape, mul<T>(tape, folded, gate_h), gate_w);
  auto x1 = group_norm<T>(tape, gated, static_cast<int>(cpg), gn_scale_, gn_shift_, kGnEps);

  // 3x3 branch: local feature extraction
  auto x2 = conv2d<T>(tape, folded, w3x3_, &b3x3_, 1, 1, 1);

  // cross interaction: channel-softmax summaries attend over the other
  // branch's spatial map
  auto attend = [&](const Tensor<T>& summary_src, const Tensor<T>& field) {
    auto pooled = reshape<T>(tape, pool<T>(tape, summary_src, PoolKind::global_avg),
                             {b, 1, 1, cpg});
    auto weights = softmax<T>(tape, pooled, 3);
    auto flat = reshape<T>(tape, field, {b, 1, cpg, s.h * s.w});
    return matmul<T>(tape, weights, flat);  // (b,1,1,HW)
  };
  auto fused = add<T>(tape, attend(x1, x2), attend(x2, x1));
  auto gate = sigmoid<T>(tape, reshape<T>(tape, fused, {b, 1, s.h, s.w}));
  auto out = mul<T>(tape, folded, gate);
  return {reshape<T>(tape, out, s)};
}

template <typename T>
ModuleStats EMA<T>::stats(std::span<const Shape> in) const {
  const Shape s = in[0];
  const int64_t g = groups_, cpg = channels_ / g, b = s.n * g;
  const Shape folded{b, cpg, s.h, s.w};
  double f = 0.0;
  f += elems(folded) * 2.0;                                     // x/y directional pools
  const Shape joint{b, cpg, s.h + s.w, 1};
  f += conv_flops(cpg, cpg, 1, 1, 1, joint);
  f += elems(joint);                                            // sigmoid gates
  f += elems(folded) * 2.0;                                     // two gating muls
  f += elems(folded);                                           // group norm
  f += conv_flops(cpg, cpg, 3, 3, 1, folded);                   // 3x3 branch
  f += elems(folded) * 2.0 + 2.0 * static_cast<double>(b * cpg);  // pools + softmaxes
  f += 2.0 * 2.0 * static_cast<double>(b) * cpg * s.h * s.w;    // two matmuls
  f += static_cast<double>(b * s.h * s.w);                      // fuse add
  f += static_cast<double>(b * s.h * s.w);                      // sigmoid
  f += elems(folded);                                           // final gate mul
  return {{s}, f};
}

// ---- SCDD ----

template <typename T>
SCDD<T>::SCDD(ParamStore<T>& store, const std::string& prefix, int64_t c_in, int64_t c_out) {
  pw_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".pw", c_in, c_out, 1, 1, 0);
  dw_ = std::make_unique<ConvBNSiLU<T>>(store, prefix + ".dw", c_out, c_out, 3, 2, 1,
                                        static_cast<int>(c_out), /*act=*/false);
}

template <typename T>
std::vector<Tensor<T>> SCDD<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                        bool training) {
  const Shape s = in[0].shape();
  if (s.h % 2 || s.w % 2)
    throw DimensionError("scdd: spatial size must be even, got " + s.str());
  return {dw_->forward1(tape, pw_->forward1(tape, in[0], training), training)};
}

template <typename T>
ModuleStats SCDD<T>::stats(std::span<const Shape> in) const {
  auto s1 = pw_->stats(in);
  auto s2 = dw_->stats(s1.out);
  return {s2.out, s1.flops + s2.flops};
}

// ---- DetectHead ----

template <typename T>
typename DetectHead<T>::Branch DetectHead<T>::make_branch(ParamStore<T>& store,
                                                          const std::string& prefix, int64_t c_in,
                                                          int64_t c_mid, int64_t c_out,
                                                          bool light) {
  Branch br;
  if (light) {
    br.stack.push_back(std::make_unique<ConvBNSiLU<T>>(store, prefix + ".dw1", c_in, c_in, 3, 1, 1,
                                                       static_cast<int>(c_in)));
    br.stack.push_back(std::make_unique<ConvBNSiLU<T>>(store, prefix + ".pw1", c_in, c_mid, 1, 1, 0));
    br.stack.push_back(std::make_unique<ConvBNSiLU<T>>(store, prefix + ".dw2", c_mid, c_mid, 3, 1,
                                                       1, static_cast<int>(c_mid)));
    br.stack.push_back(std::make_unique<ConvBNSiLU<T>>(store, prefix + ".pw2", c_mid, c_mid, 1, 1, 0));
  } else {
    br.stack.push_back(std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv1", c_in, c_mid, 3, 1, 1));
    br.stack.push_back(std::make_unique<ConvBNSiLU<T>>(store, prefix + ".cv2", c_mid, c_mid, 3, 1, 1));
  }
  br.proj_in = c_mid;
  br.proj_out = c_out;
  br.proj_w = store.create(prefix + ".proj.weight", {c_out, c_mid, 1, 1}, Init::conv_uniform,
                           static_cast<double>(c_mid), true);
  br.proj_b = store.create(prefix + ".proj.bias", {1, c_out, 1, 1}, Init::zeros, 0, true);
  return br;
}

template <typename T>
DetectHead<T>::DetectHead(ParamStore<T>& store, const std::string& prefix, int num_classes,
                          int reg_max, std::span<const int64_t> channels, bool light_cls)
    : nc_(num_classes), reg_max_(reg_max), light_cls_(light_cls) {
  if (channels.size() != 3) throw DimensionError(prefix + ": detect head expects three scales");
  const int64_t c_box = head_mid_box(channels, reg_max);
  const int64_t c_cls = head_mid_cls(channels, num_classes);
  for (size_t i = 0; i < 3; ++i) {
    const std::string si = std::to_string(i);
    box_.push_back(make_branch(store, prefix + ".box" + si, channels[i], c_box,
                               static_cast<int64_t>(4 * reg_max), false));
    cls_.push_back(make_branch(store, prefix + ".cls" + si, channels[i], c_cls, nc_, light_cls));
    // stride-aware output priors: boxes start wide, class logits start rare
    const int stride = 8 << i;
    std::fill(box_.back().proj_b.data().begin(), box_.back().proj_b.data().end(), T(1));
    std::fill(cls_.back().proj_b.data().begin(), cls_.back().proj_b.data().end(),
              static_cast<T>(cls_prior_bias(nc_, stride)));
  }
}

template <typename T>
Tensor<T> DetectHead<T>::run_branch(Branch& br, Tape<T>* tape, const Tensor<T>& x, bool training) {
  Tensor<T> cur = x;
  for (auto& m : br.stack) cur = m->forward1(tape, cur, training);
  return conv2d<T>(tape, cur, br.proj_w, &br.proj_b, 1, 0, 1);
}

template <typename T>
std::vector<Tensor<T>> DetectHead<T>::forward(Tape<T>* tape, std::span<const Tensor<T>> in,
                                              bool training) {
  if (in.size() != 3) throw DimensionError("detect head expects three feature maps");
  std::vector<Tensor<T>> out;
  for (size_t i = 0; i < 3; ++i) {
    out.push_back(run_branch(cls_[i], tape, in[i], training));
    out.push_back(run_branch(box_[i], tape, in[i], training));
  }
  return out;
}

template <typename T>
double DetectHead<T>::branch_flops(const Branch& br, Shape in, Shape* out) const {
  double f = 0.0;
  std::vector<Shape> cur{in};
  for (const auto& m : br.stack) {
    auto s = m->stats(cur);
    f += s.flops;
    cur = s.out;
  }
  Shape proj_out{cur[0].n, br.proj_out, cur[0].h, cur[0].w};
  f += conv_flops(br.proj_in, br.proj_out, 1, 1, 1, proj_out);
  if (out) *out = proj_out;
  return f;
}

template <typename T>
ModuleStats DetectHead<T>::stats(std::span<const Shape> in) const {
  if (in.size() != 3) throw DimensionError("detect head expects three feature maps");
  ModuleStats st;
  for (size_t i = 0; i < 3; ++i) {
    Shape cls_out, box_out;
    st.flops += branch_flops(cls_[i], in[i], &cls_out);
    st.flops += branch_flops(box_[i], in[i], &box_out);
    st.out.push_back(cls_out);
    st.out.push_back(box_out);
  }
  return st;
}

// ---- spec factory + closed-form counts ----

ParamCount analytic_param_count(const BlockSpec& spec) {
  auto conv_bn = [](int64_t cin, int64_t cout, int k, int groups) {
    return ParamCount{k * k * (cin / groups) * cout + 2 * cout, k * k * (cin / groups) * cout + 4 * cout};
  };
  auto dual = [](int64_t cin, int64_t cout, int groups) {
    const int64_t t = 9 * cin * cout / groups + cin * cout + 2 * cout;
    return ParamCount{t, t + 2 * cout};
  };
  auto acc = [](ParamCount a, ParamCount b) {
    return ParamCount{a.trainable + b.trainable, a.total + b.total};
  };
  auto bottleneck = [&](int64_t cin, int64_t cout, bool is_dual, int groups) {
    return is_dual ? acc(dual(cin, cout, groups), dual(cout, cout, groups))
                   : acc(conv_bn(cin, cout, 3, 1), conv_bn(cout, cout, 3, 1));
  };
  auto c2f = [&](int64_t cin, int64_t cout, int n, bool is_dual, int groups) {
    const int64_t c = cout / 2;
    ParamCount p = conv_bn(cin, 2 * c, 1, 1);
    for (int i = 0; i < n; ++i) p = acc(p, bottleneck(c, c, is_dual, groups));
    return acc(p, conv_bn((2 + n) * c, cout, 1, 1));
  };

  switch (spec.kind) {
    case BlockKind::conv_bn_silu:
      return conv_bn(spec.c_in, spec.c_out, spec.kernel, spec.groups);
    case BlockKind::dual_conv:
      return dual(spec.c_in, spec.c_out, spec.groups);
    case BlockKind::bottleneck:
      return bottleneck(spec.c_in, spec.c_out, false, 1);
    case BlockKind::dual_bottleneck:
      return bottleneck(spec.c_in, spec.c_out, true, spec.groups);
    case BlockKind::c2f:
      return c2f(spec.c_in, spec.c_out, spec.n, false, 1);
    case BlockKind::c2f_dual:
      return c2f(spec.c_in, spec.c_out, spec.n, true, spec.groups);
    case BlockKind::sppf:
      return acc(conv_bn(spec.c_in, spec.c_in / 2, 1, 1), conv_bn(2 * spec.c_in, spec.c_out, 1, 1));
    case BlockKind::ema: {
      const int64_t cpg = spec.c_in / spec.groups;
      const int64_t t = 10 * cpg * cpg + 4 * cpg;
      return ParamCount{t, t};
    }
    case BlockKind::scdd:
      return acc(conv_bn(spec.c_in, spec.c_out, 1, 1),
                 conv_bn(spec.c_out, spec.c_out, 3, static_cast<int>(spec.c_out)));
    case BlockKind::detect_head: {
      const auto& ch = spec.head_channels;
      const int64_t c2 = head_mid_box(ch, spec.reg_max);
      const int64_t c3 = head_mid_cls(ch, spec.num_classes);
      ParamCount p{0, 0};
      for (int64_t c : ch) {
        // box branch
        p = acc(p, conv_bn(c, c2, 3, 1));
        p = acc(p, conv_bn(c2, c2, 3, 1));
        const int64_t box_proj = c2 * 4 * spec.reg_max + 4 * spec.reg_max;
        p = acc(p, ParamCount{box_proj, box_proj});
        // cls branch
        if (spec.light_cls) {
          p = acc(p, conv_bn(c, c, 3, static_cast<int>(c)));
          p = acc(p, conv_bn(c, c3, 1, 1));
          p = acc(p, conv_bn(c3, c3, 3, static_cast<int>(c3)));
          p = acc(p, conv_bn(c3, c3, 1, 1));
        } else {
          p = acc(p, conv_bn(c, c3, 3, 1));
          p = acc(p, conv_bn(c3, c3, 3, 1));
        }
        const int64_t cls_proj = c3 * spec.num_classes + spec.num_classes;
        p = acc(p, ParamCount{cls_proj, cls_proj});
      }
      return p;
    }
  }
  throw UsageError("unknown block kind");
}

template <typename T>
std::unique_ptr<Module<T>> make_block(ParamStore<T>& store, const std::string& prefix,
                                      const BlockSpec& spec) {
  switch (spec.kind) {
    case BlockKind::conv_bn_silu:
      return std::make_unique<ConvBNSiLU<T>>(store, prefix, spec.c_in, spec.c_out, spec.kernel,
                                             spec.stride, spec.kernel / 2, spec.groups);
    case BlockKind::dual_conv:
      return std::make_unique<DualConv<T>>(store, prefix, spec.c_in, spec.c_out, spec.groups);
    case BlockKind::bottleneck:
      return std::make_unique<Bottleneck<T>>(store, prefix, spec.c_in, spec.c_out, spec.shortcut,
                                             false, 1);
    case BlockKind::dual_bottleneck:
      return std::make_unique<Bottleneck<T>>(store, prefix, spec.c_in, spec.c_out, spec.shortcut,
                                             true, spec.groups);
    case BlockKind::c2f:
      return std::make_unique<C2f<T>>(store, prefix, spec.c_in, spec.c_out, spec.n, spec.shortcut,
                                      false, 1);
    case BlockKind::c2f_dual:
      return std::make_unique<C2f<T>>(store, prefix, spec.c_in, spec.c_out, spec.n, spec.shortcut,
                                      true, spec.groups);
    case BlockKind::sppf:
      return std::make_unique<SPPF<T>>(store, prefix, spec.c_in, spec.c_out);
    case BlockKind::ema:
      return std::make_unique<EMA<T>>(store, prefix, spec.c_in, spec.groups);
    case BlockKind::scdd:
      return std::make_unique<SCDD<T>>(store, prefix, spec.c_in, spec.c_out);
    case BlockKind::detect_head:
      return std::make_unique<DetectHead<T>>(store, prefix, spec.num_classes, spec.reg_max,
                                             spec.head_channels, spec.light_cls);
  }
  throw UsageError("unknown block kind");
}

template class ParamStore<float>;
template class ParamStore<double>;
template class ConvBNSiLU<float>;
template class ConvBNSiLU<double>;
template class DualConv<float>;
template class DualConv<double>;
template class Bottleneck<float>;
template class Bottleneck<double>;
template class C2f<float>;
template class C2f<double>;
template class SPPF<float>;
template class SPPF<double>;
template class EMA<float>;
template class EMA<double>;
template class SCDD<float>;
template class SCDD<double>;
template class DetectHead<float>;
template class DetectHead<double>;
template std::unique_ptr<Module<float>> make_block<float>(ParamStore<float>&, const std::string&,
                                                          const BlockSpec&);
template std::unique_ptr<Module<double>> make_block<double>(ParamStore<double>&,
                                                            const std::string&, const BlockSpec&);

}  // namespace msy
