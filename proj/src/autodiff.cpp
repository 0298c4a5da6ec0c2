#include "msy/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

namespace msy {

namespace {

template <typename T>
detail::Storage<T>* st(const Tensor<T>& t) {
  return t.storage().get();
}

// Output-side gradient; nullptr when backward never reached this value.
template <typename T>
const T* out_grad(detail::Storage<T>* s) {
  return s->grad.empty() ? nullptr : s->grad.data();
}

template <typename T>
T* acc_grad(detail::Storage<T>* s) {
  s->ensure_grad();
  return s->grad.data();
}

int64_t conv_out_extent(int64_t in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

struct ConvGeom {
  int64_t n, cin, h, w, cout, cpg, kh, kw, ho, wo;
  int stride, padding, groups;
  int64_t cout_per_group;
};

template <typename T>
ConvGeom conv_geom(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding, int groups) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (stride < 1) throw DimensionError("conv2d: stride must be positive");
  if (padding < 0) throw DimensionError("conv2d: negative padding");
  if (groups < 1) throw DimensionError("conv2d: groups must be positive");
  if (xs.c % groups != 0 || ws.n % groups != 0)
    throw DimensionError("conv2d: channels " + std::to_string(xs.c) + "->" + std::to_string(ws.n) +
                         " not divisible by groups " + std::to_string(groups));
  if (ws.c != xs.c / groups)
    throw DimensionError("conv2d: weight expects " + std::to_string(ws.c * groups) +
                         " input channels, got " + std::to_string(xs.c));
  ConvGeom g;
  g.n = xs.n;
  g.cin = xs.c;
  g.h = xs.h;
  g.w = xs.w;
  g.cout = ws.n;
  g.cpg = ws.c;
  g.kh = ws.h;
  g.kw = ws.w;
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  g.ho = conv_out_extent(xs.h, static_cast<int>(ws.h), stride, padding);
  g.wo = conv_out_extent(xs.w, static_cast<int>(ws.w), stride, padding);
  g.cout_per_group = ws.n / groups;
  if (g.ho < 1 || g.wo < 1)
    throw DimensionError("conv2d: kernel " + std::to_string(ws.h) + "x" + std::to_string(ws.w) +
                         " does not fit input " + xs.str());
  return g;
}

// Valid output-column range for a kernel column: iw = ow*stride + kw - padding in [0, W).
inline void ow_range(int64_t w, int64_t wo, int stride, int padding, int64_t kw, int64_t& lo,
                     int64_t& hi) {
  int64_t num = padding - kw;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  int64_t top = w - 1 + padding - kw;
  hi = top < 0 ? -1 : std::min<int64_t>(wo - 1, top / stride);
}

template <typename T>
void conv2d_forward_kernel(const ConvGeom& g, const T* x, const T* w, const T* bias, T* out) {
  const int64_t plane_jobs = g.n * g.cout;
  parallel_for(plane_jobs, [&](int64_t job_begin, int64_t job_end) {
    for (int64_t job = job_begin; job < job_end; ++job) {
      const int64_t n = job / g.cout;
      const int64_t co = job % g.cout;
      const int64_t grp = co / g.cout_per_group;
      const int64_t ci0 = grp * g.cpg;
      T* oplane = out + (n * g.cout + co) * g.ho * g.wo;
      const T b = bias ? bias[co] : T(0);
      for (int64_t oh = 0; oh < g.ho; ++oh) {
        T* orow = oplane + oh * g.wo;
        std::fill(orow, orow + g.wo, b);
        for (int64_t cl = 0; cl < g.cpg; ++cl) {
          const T* iplane = x + (n * g.cin + ci0 + cl) * g.h * g.w;
          const T* wrow0 = w + (co * g.cpg + cl) * g.kh * g.kw;
          for (int64_t kh = 0; kh < g.kh; ++kh) {
            const int64_t ih = oh * g.stride - g.padding + kh;
            if (ih < 0 || ih >= g.h) continue;
            const T* irow = iplane + ih * g.w;
            const T* wrow = wrow0 + kh * g.kw;
            for (int64_t kw = 0; kw < g.kw; ++kw) {
              const T wv = wrow[kw];
              int64_t lo, hi;
              ow_range(g.w, g.wo, g.stride, g.padding, kw, lo, hi);
              if (g.stride == 1) {
                const T* ib = irow + lo + kw - g.padding;
                for (int64_t ow = lo; ow <= hi; ++ow) orow[ow] += wv * ib[ow - lo];
              } else {
                for (int64_t ow = lo; ow <= hi; ++ow)
                  orow[ow] += wv * irow[ow * g.stride + kw - g.padding];
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv2d_backward_input(const ConvGeom& g, const T* go, const T* w, T* dx) {
  parallel_for(g.n, [&](int64_t nb, int64_t ne) {
    for (int64_t n = nb; n < ne; ++n) {
      for (int64_t co = 0; co < g.cout; ++co) {
        const int64_t grp = co / g.cout_per_group;
        const int64_t ci0 = grp * g.cpg;
        const T* gplane = go + (n * g.cout + co) * g.ho * g.wo;
        for (int64_t cl = 0; cl < g.cpg; ++cl) {
          T* dplane = dx + (n * g.cin + ci0 + cl) * g.h * g.w;
          const T* wrow0 = w + (co * g.cpg + cl) * g.kh * g.kw;
          for (int64_t oh = 0; oh < g.ho; ++oh) {
            const T* grow = gplane + oh * g.wo;
            for (int64_t kh = 0; kh < g.kh; ++kh) {
              const int64_t ih = oh * g.stride - g.padding + kh;
              if (ih < 0 || ih >= g.h) continue;
              T* drow = dplane + ih * g.w;
              const T* wrow = wrow0 + kh * g.kw;
              for (int64_t kw = 0; kw < g.kw; ++kw) {
                const T wv = wrow[kw];
                int64_t lo, hi;
                ow_range(g.w, g.wo, g.stride, g.padding, kw, lo, hi);
                if (g.stride == 1) {
                  T* db = drow + lo + kw - g.padding;
                  for (int64_t ow = lo; ow <= hi; ++ow) db[ow - lo] += wv * grow[ow];
                } else {
                  for (int64_t ow = lo; ow <= hi; ++ow)
                    drow[ow * g.stride + kw - g.padding] += wv * grow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv2d_backward_weight(const ConvGeom& g, const T* go, const T* x, T* dw) {
  parallel_for(g.cout, [&](int64_t cb, int64_t ce) {
    for (int64_t co = cb; co < ce; ++co) {
      const int64_t grp = co / g.cout_per_group;
      const int64_t ci0 = grp * g.cpg;
      T* wrow0 = dw + co * g.cpg * g.kh * g.kw;
      for (int64_t n = 0; n < g.n; ++n) {
        const T* gplane = go + (n * g.cout + co) * g.ho * g.wo;
        for (int64_t cl = 0; cl < g.cpg; ++cl) {
          const T* iplane = x + (n * g.cin + ci0 + cl) * g.h * g.w;
          for (int64_t kh = 0; kh < g.kh; ++kh) {
            for (int64_t kw = 0; kw < g.kw; ++kw) {
              double acc = 0.0;
              for (int64_t oh = 0; oh < g.ho; ++oh) {
                const int64_t ih = oh * g.stride - g.padding + kh;
                if (ih < 0 || ih >= g.h) continue;
                const T* grow = gplane + oh * g.wo;
                const T* irow = iplane + ih * g.w;
                int64_t lo, hi;
                ow_range(g.w, g.wo, g.stride, g.padding, kw, lo, hi);
                if (g.stride == 1) {
                  const T* ib = irow + lo + kw - g.padding;
                  for (int64_t ow = lo; ow <= hi; ++ow)
                    acc += static_cast<double>(grow[ow]) * static_cast<double>(ib[ow - lo]);
                } else {
                  for (int64_t ow = lo; ow <= hi; ++ow)
                    acc += static_cast<double>(grow[ow]) *
                           static_cast<double>(irow[ow * g.stride + kw - g.padding]);
                }
              }
              wrow0[(cl * g.kh + kh) * g.kw + kw] += static_cast<T>(acc);
            }
          }
        }
      }
    }
  });
}

// Broadcast helpers: an axis may either match or be 1 in each operand.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  auto pick = [&](int64_t x, int64_t y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.str() + " vs " + b.str());
  };
  return Shape{pick(a.n, b.n), pick(a.c, b.c), pick(a.h, b.h), pick(a.w, b.w)};
}

inline int64_t wrap_index(const Shape& s, int64_t n, int64_t c, int64_t h, int64_t w) {
  n = s.n == 1 ? 0 : n;
  c = s.c == 1 ? 0 : c;
  h = s.h == 1 ? 0 : h;
  w = s.w == 1 ? 0 : w;
  return ((n * s.c + c) * s.h + h) * s.w + w;
}

}  // namespace

template <typename T>
void Tape<T>::run_backward(const Tensor<T>& output) {
  if (consumed_) throw UsageError("backward already ran on this tape");
  if (!output.defined() || !output.tracked())
    throw UsageError("backward target is detached from the tape");
  if (!(output.shape() == Shape{1, 1, 1, 1}))
    throw UsageError("backward target must be a scalar, got " + output.shape().str());
  consumed_ = true;
  output.storage()->ensure_grad();
  output.storage()->grad[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& scalar_output) {
  tape.run_backward(scalar_output);
}

// ---- conv2d ----

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 int stride, int padding, int groups) {
  ConvGeom g = conv_geom(x, weight, stride, padding, groups);
  if (bias && bias->defined() && bias->numel() != g.cout)
    throw DimensionError("conv2d: bias length mismatch");
  const Tensor<T>* b = (bias && bias->defined()) ? bias : nullptr;

  Tensor<T> out = Tensor<T>::zeros({g.n, g.cout, g.ho, g.wo});
  conv2d_forward_kernel(g, x.data().data(), weight.data().data(), b ? b->data().data() : nullptr,
                        out.data().data());
  check_finite(out, "conv2d");

  if (should_record(tape, {&x, &weight, b})) {
    std::vector<Tensor<T>> inputs{x, weight};
    if (b) inputs.push_back(*b);
    auto xs = x.storage();
    auto ws = weight.storage();
    auto bs = b ? b->storage() : nullptr;
    auto os = out.storage();
    tape->record(std::move(inputs), out, [g, xs, ws, bs, os] {
      const T* go = out_grad(os.get());
      if (!go) return;
      if (xs->tracked) conv2d_backward_input(g, go, ws->data.data(), acc_grad(xs.get()));
      if (ws->tracked) conv2d_backward_weight(g, go, xs->data.data(), acc_grad(ws.get()));
      if (bs && bs->tracked) {
        T* db = acc_grad(bs.get());
        for (int64_t n = 0; n < g.n; ++n)
          for (int64_t co = 0; co < g.cout; ++co) {
            const T* gplane = go + (n * g.cout + co) * g.ho * g.wo;
            double acc = 0.0;
            for (int64_t i = 0; i < g.ho * g.wo; ++i) acc += static_cast<double>(gplane[i]);
            db[co] += static_cast<T>(acc);
          }
      }
    });
  }
  return out;
}

// ---- pooling ----

template <typename T>
Tensor<T> pool(Tape<T>* tape, const Tensor<T>& x, PoolKind kind, int kernel, int stride,
               int padding) {
  const Shape s = x.shape();
  const bool rec = should_record(tape, {&x});
  auto xs = x.storage();

  if (kind == PoolKind::global_avg || kind == PoolKind::x_avg || kind == PoolKind::y_avg) {
    Shape os = kind == PoolKind::global_avg ? Shape{s.n, s.c, 1, 1}
               : kind == PoolKind::x_avg    ? Shape{s.n, s.c, s.h, 1}
                                            : Shape{s.n, s.c, 1, s.w};
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* in = x.data().data();
    T* o = out.data().data();
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t c = 0; c < s.c; ++c) {
        const T* plane = in + (n * s.c + c) * s.h * s.w;
        T* oplane = o + (n * s.c + c) * os.h * os.w;
        if (kind == PoolKind::global_avg) {
          double acc = 0.0;
          for (int64_t i = 0; i < s.h * s.w; ++i) acc += static_cast<double>(plane[i]);
          oplane[0] = static_cast<T>(acc / static_cast<double>(s.h * s.w));
        } else if (kind == PoolKind::x_avg) {
          for (int64_t h = 0; h < s.h; ++h) {
            double acc = 0.0;
            for (int64_t w = 0; w < s.w; ++w) acc += static_cast<double>(plane[h * s.w + w]);
            oplane[h] = static_cast<T>(acc / static_cast<double>(s.w));
          }
        } else {
          for (int64_t w = 0; w < s.w; ++w) {
            double acc = 0.0;
            for (int64_t h = 0; h < s.h; ++h) acc += static_cast<double>(plane[h * s.w + w]);
            oplane[w] = static_cast<T>(acc / static_cast<double>(s.h));
          }
        }
      }
    if (rec) {
      auto os_ptr = out.storage();
      tape->record({x}, out, [kind, s, xs, os_ptr] {
        const T* go = out_grad(os_ptr.get());
        if (!go || !xs->tracked) return;
        T* dx = acc_grad(xs.get());
        for (int64_t n = 0; n < s.n; ++n)
          for (int64_t c = 0; c < s.c; ++c) {
            T* dplane = dx + (n * s.c + c) * s.h * s.w;
            int64_t oc = (n * s.c + c);
            if (kind == PoolKind::global_avg) {
              const T v = go[oc] / static_cast<T>(s.h * s.w);
              for (int64_t i = 0; i < s.h * s.w; ++i) dplane[i] += v;
            } else if (kind == PoolKind::x_avg) {
              for (int64_t h = 0; h < s.h; ++h) {
                const T v = go[oc * s.h + h] / static_cast<T>(s.w);
                for (int64_t w = 0; w < s.w; ++w) dplane[h * s.w + w] += v;
              }
            } else {
              for (int64_t w = 0; w < s.w; ++w) {
                const T v = go[oc * s.w + w] / static_cast<T>(s.h);
                for (int64_t h = 0; h < s.h; ++h) dplane[h * s.w + w] += v;
              }
            }
          }
      });
    }
    return out;
  }

  if (kernel < 1 || stride < 1) throw DimensionError("pool: kernel and stride must be positive");
  if (padding < 0 || padding > kernel / 2) throw DimensionError("pool: invalid padding");
  if (kind == PoolKind::avg && padding != 0)
    throw DimensionError("pool: avg pooling does not support padding");
  const int64_t ho = conv_out_extent(s.h, kernel, stride, padding);
  const int64_t wo = conv_out_extent(s.w, kernel, stride, padding);
  if (ho < 1 || wo < 1)
    throw DimensionError("pool: kernel " + std::to_string(kernel) + " larger than padded input " +
                         s.str());

  Tensor<T> out = Tensor<T>::zeros({s.n, s.c, ho, wo});
  const T* in = x.data().data();
  T* o = out.data().data();
  // argmax indices for max-pool backward
  auto argmax = kind == PoolKind::max
                    ? std::make_shared<std::vector<int32_t>>(static_cast<size_t>(out.numel()))
                    : nullptr;

  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      const T* plane = in + (n * s.c + c) * s.h * s.w;
      T* oplane = o + (n * s.c + c) * ho * wo;
      int32_t* aplane = argmax ? argmax->data() + (n * s.c + c) * ho * wo : nullptr;
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          const int64_t h0 = oh * stride - padding, w0 = ow * stride - padding;
          const int64_t h1 = std::max<int64_t>(0, h0), w1 = std::max<int64_t>(0, w0);
          const int64_t h2 = std::min<int64_t>(s.h, h0 + kernel),
                        w2 = std::min<int64_t>(s.w, w0 + kernel);
          if (kind == PoolKind::max) {
            T best = plane[h1 * s.w + w1];
            int64_t besti = h1 * s.w + w1;
            for (int64_t h = h1; h < h2; ++h)
              for (int64_t w = w1; w < w2; ++w) {
                const T v = plane[h * s.w + w];
                if (v > best) {
                  best = v;
                  besti = h * s.w + w;
                }
              }
            oplane[oh * wo + ow] = best;
            aplane[oh * wo + ow] = static_cast<int32_t>(besti);
          } else {
            double acc = 0.0;
            for (int64_t h = h1; h < h2; ++h)
              for (int64_t w = w1; w < w2; ++w) acc += static_cast<double>(plane[h * s.w + w]);
            oplane[oh * wo + ow] = static_cast<T>(acc / static_cast<double>((h2 - h1) * (w2 - w1)));
          }
        }
    }

  if (rec) {
    auto os_ptr = out.storage();
    const int k = kernel, st_ = stride, pd = padding;
    tape->record({x}, out, [kind, s, ho, wo, k, st_, pd, xs, os_ptr, argmax] {
      const T* go = out_grad(os_ptr.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
          T* dplane = dx + (n * s.c + c) * s.h * s.w;
          const T* gplane = go + (n * s.c + c) * ho * wo;
          const int32_t* aplane = argmax ? argmax->data() + (n * s.c + c) * ho * wo : nullptr;
          for (int64_t oh = 0; oh < ho; ++oh)
            for (int64_t ow = 0; ow < wo; ++ow) {
              const T g = gplane[oh * wo + ow];
              if (kind == PoolKind::max) {
                dplane[aplane[oh * wo + ow]] += g;
              } else {
                const int64_t h0 = oh * st_ - pd, w0 = ow * st_ - pd;
                const int64_t h1 = std::max<int64_t>(0, h0), w1 = std::max<int64_t>(0, w0);
                const int64_t h2 = std::min<int64_t>(s.h, h0 + k),
                              w2 = std::min<int64_t>(s.w, w0 + k);
                const T v = g / static_cast<T>((h2 - h1) * (w2 - w1));
                for (int64_t h = h1; h < h2; ++h)
                  for (int64_t w = w1; w < w2; ++w) dplane[h * s.w + w] += v;
              }
            }
        }
    });
  }
  return out;
}

// ---- activations ----

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* in = x.data().data();
  T* o = out.data().data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = T(1) / (T(1) + std::exp(-in[i]));
  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [xs, os, n] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      const T* y = os->data.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += go[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* in = x.data().data();
  T* o = out.data().data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-in[i]));
    o[i] = in[i] * s;
  }
  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [xs, os, n] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      const T* in = xs->data.data();
      for (int64_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-in[i]));
        dx[i] += go[i] * s * (T(1) + in[i] * (T(1) - s));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, int axis) {
  if (axis < 1 || axis > 3) throw DimensionError("softmax: axis must be 1, 2 or 3");
  const Shape s = x.shape();
  const int64_t extent = axis == 1 ? s.c : axis == 2 ? s.h : s.w;

  // iterate all lanes along `axis`
  Tensor<T> out = Tensor<T>::zeros(s);
  const T* in = x.data().data();
  T* o = out.data().data();
  const int64_t lane_stride = axis == 1 ? s.h * s.w : axis == 2 ? s.w : 1;
  const int64_t outer = s.numel() / extent;

  for (int64_t lane = 0; lane < outer; ++lane) {
    // decompose lane id into the base offset of this lane
    int64_t base;
    if (axis == 3) {
      base = lane * s.w;
    } else if (axis == 2) {
      const int64_t nc = lane / s.w, w = lane % s.w;
      base = nc * s.h * s.w + w;
    } else {
      const int64_t n = lane / (s.h * s.w), hw = lane % (s.h * s.w);
      base = n * s.c * s.h * s.w + hw;
    }
    T mx = in[base];
    for (int64_t i = 1; i < extent; ++i) mx = std::max(mx, in[base + i * lane_stride]);
    double denom = 0.0;
    for (int64_t i = 0; i < extent; ++i) {
      const T e = std::exp(in[base + i * lane_stride] - mx);
      o[base + i * lane_stride] = e;
      denom += static_cast<double>(e);
    }
    for (int64_t i = 0; i < extent; ++i)
      o[base + i * lane_stride] = static_cast<T>(o[base + i * lane_stride] / denom);
  }
  check_finite(out, "softmax");

  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [xs, os, s, axis, extent, lane_stride, outer] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      const T* y = os->data.data();
      for (int64_t lane = 0; lane < outer; ++lane) {
        int64_t base;
        if (axis == 3) {
          base = lane * s.w;
        } else if (axis == 2) {
          const int64_t nc = lane / s.w, w = lane % s.w;
          base = nc * s.h * s.w + w;
        } else {
          const int64_t n = lane / (s.h * s.w), hw = lane % (s.h * s.w);
          base = n * s.c * s.h * s.w + hw;
        }
        double dot = 0.0;
        for (int64_t i = 0; i < extent; ++i) {
          const int64_t idx = base + i * lane_stride;
          dot += static_cast<double>(go[idx]) * static_cast<double>(y[idx]);
        }
        for (int64_t i = 0; i < extent; ++i) {
          const int64_t idx = base + i * lane_stride;
          dx[idx] += y[idx] * (go[idx] - static_cast<T>(dot));
        }
      }
    });
  }
  return out;
}

// ---- normalization ----

template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& scale,
                     const Tensor<T>& shift, Tensor<T>& running_mean, Tensor<T>& running_var,
                     bool training, double momentum, double eps) {
  const Shape s = x.shape();
  if (scale.numel() != s.c || shift.numel() != s.c || running_mean.numel() != s.c ||
      running_var.numel() != s.c)
    throw DimensionError("batch_norm: affine/running parameters must have C elements");

  const int64_t m = s.n * s.h * s.w;  // elements per channel
  std::vector<double> mean(s.c), var(s.c);
  const T* in = x.data().data();
  if (training) {
    for (int64_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (int64_t n = 0; n < s.n; ++n) {
        const T* plane = in + (n * s.c + c) * s.h * s.w;
        for (int64_t i = 0; i < s.h * s.w; ++i) acc += static_cast<double>(plane[i]);
      }
      mean[c] = acc / static_cast<double>(m);
      double acc2 = 0.0;
      for (int64_t n = 0; n < s.n; ++n) {
        const T* plane = in + (n * s.c + c) * s.h * s.w;
        for (int64_t i = 0; i < s.h * s.w; ++i) {
          const double d = static_cast<double>(plane[i]) - mean[c];
          acc2 += d * d;
        }
      }
      var[c] = acc2 / static_cast<double>(m);
      // running stats keep the unbiased variance estimate
      const double unbiased = m > 1 ? acc2 / static_cast<double>(m - 1) : 0.0;
      running_mean.data()[c] = static_cast<T>((1.0 - momentum) *
                                                  static_cast<double>(running_mean.data()[c]) +
                                              momentum * mean[c]);
      running_var.data()[c] = static_cast<T>((1.0 - momentum) *
                                                 static_cast<double>(running_var.data()[c]) +
                                             momentum * unbiased);
    }
  } else {
    for (int64_t c = 0; c < s.c; ++c) {
      mean[c] = static_cast<double>(running_mean.data()[c]);
      var[c] = static_cast<double>(running_var.data()[c]);
    }
  }

  auto invstd = std::make_shared<std::vector<double>>(s.c);
  for (int64_t c = 0; c < s.c; ++c) (*invstd)[c] = 1.0 / std::sqrt(var[c] + eps);

  Tensor<T> out = Tensor<T>::zeros(s);
  T* o = out.data().data();
  const T* sc = scale.data().data();
  const T* sh = shift.data().data();
  auto mean_saved = std::make_shared<std::vector<double>>(std::move(mean));
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      const T* plane = in + (n * s.c + c) * s.h * s.w;
      T* oplane = o + (n * s.c + c) * s.h * s.w;
      const double mu = (*mean_saved)[c], is = (*invstd)[c];
      const double a = static_cast<double>(sc[c]) * is;
      const double b = static_cast<double>(sh[c]) - a * mu;
      for (int64_t i = 0; i < s.h * s.w; ++i)
        oplane[i] = static_cast<T>(a * static_cast<double>(plane[i]) + b);
    }
  check_finite(out, "batch_norm");

  if (should_record(tape, {&x, &scale, &shift})) {
    auto xs = x.storage();
    auto scs = scale.storage();
    auto shs = shift.storage();
    auto os = out.storage();
    tape->record({x, scale, shift}, out, [s, m, training, xs, scs, shs, os, mean_saved, invstd] {
      const T* go = out_grad(os.get());
      if (!go) return;
      const T* in = xs->data.data();
      const T* sc = scs->data.data();
      // per-channel reductions
      std::vector<double> sum_go(s.c, 0.0), sum_go_xhat(s.c, 0.0);
      for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
          const int64_t off = (n * s.c + c) * s.h * s.w;
          const double mu = (*mean_saved)[c], is = (*invstd)[c];
          for (int64_t i = 0; i < s.h * s.w; ++i) {
            const double g = static_cast<double>(go[off + i]);
            sum_go[c] += g;
            sum_go_xhat[c] += g * (static_cast<double>(in[off + i]) - mu) * is;
          }
        }
      if (shs->tracked) {
        T* d = acc_grad(shs.get());
        for (int64_t c = 0; c < s.c; ++c) d[c] += static_cast<T>(sum_go[c]);
      }
      if (scs->tracked) {
        T* d = acc_grad(scs.get());
        for (int64_t c = 0; c < s.c; ++c) d[c] += static_cast<T>(sum_go_xhat[c]);
      }
      if (xs->tracked) {
        T* dx = acc_grad(xs.get());
        for (int64_t n = 0; n < s.n; ++n)
          for (int64_t c = 0; c < s.c; ++c) {
            const int64_t off = (n * s.c + c) * s.h * s.w;
            const double mu = (*mean_saved)[c], is = (*invstd)[c];
            const double g_scale = static_cast<double>(sc[c]) * is;
            for (int64_t i = 0; i < s.h * s.w; ++i) {
              const double g = static_cast<double>(go[off + i]);
              if (training) {
                const double xhat = (static_cast<double>(in[off + i]) - mu) * is;
                dx[off + i] += static_cast<T>(
                    g_scale * (g - sum_go[c] / static_cast<double>(m) -
                               xhat * sum_go_xhat[c] / static_cast<double>(m)));
              } else {
                dx[off + i] += static_cast<T>(g_scale * g);
              }
            }
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> group_norm(Tape<T>* tape, const Tensor<T>& x, int groups, const Tensor<T>& scale,
                     const Tensor<T>& shift, double eps) {
  const Shape s = x.shape();
  if (groups < 1 || s.c % groups != 0)
    throw DimensionError("group_norm: C=" + std::to_string(s.c) + " not divisible by groups " +
                         std::to_string(groups));
  if (scale.numel() != s.c || shift.numel() != s.c)
    throw DimensionError("group_norm: affine parameters must have C elements");
  const int64_t cpg = s.c / groups;
  const int64_t m = cpg * s.h * s.w;  // elements per (sample, group)

  auto mean = std::make_shared<std::vector<double>>(s.n * groups);
  auto invstd = std::make_shared<std::vector<double>>(s.n * groups);
  const T* in = x.data().data();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t g = 0; g < groups; ++g) {
      double acc = 0.0;
      for (int64_t cl = 0; cl < cpg; ++cl) {
        const T* plane = in + (n * s.c + g * cpg + cl) * s.h * s.w;
        for (int64_t i = 0; i < s.h * s.w; ++i) acc += static_cast<double>(plane[i]);
      }
      const double mu = acc / static_cast<double>(m);
      double acc2 = 0.0;
      for (int64_t cl = 0; cl < cpg; ++cl) {
        const T* plane = in + (n * s.c + g * cpg + cl) * s.h * s.w;
        for (int64_t i = 0; i < s.h * s.w; ++i) {
          const double d = static_cast<double>(plane[i]) - mu;
          acc2 += d * d;
        }
      }
      (*mean)[n * groups + g] = mu;
      (*invstd)[n * groups + g] = 1.0 / std::sqrt(acc2 / static_cast<double>(m) + eps);
    }

  Tensor<T> out = Tensor<T>::zeros(s);
  T* o = out.data().data();
  const T* sc = scale.data().data();
  const T* sh = shift.data().data();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      const int64_t g = c / cpg;
      const double mu = (*mean)[n * groups + g], is = (*invstd)[n * groups + g];
      const double a = static_cast<double>(sc[c]) * is;
      const double b = static_cast<double>(sh[c]) - a * mu;
      const T* plane = in + (n * s.c + c) * s.h * s.w;
      T* oplane = o + (n * s.c + c) * s.h * s.w;
      for (int64_t i = 0; i < s.h * s.w; ++i)
        oplane[i] = static_cast<T>(a * static_cast<double>(plane[i]) + b);
    }
  check_finite(out, "group_norm");

  if (should_record(tape, {&x, &scale, &shift})) {
    auto xs = x.storage();
    auto scs = scale.storage();
    auto shs = shift.storage();
    auto os = out.storage();
    const int64_t G = groups;
    tape->record({x, scale, shift}, out, [s, cpg, m, G, xs, scs, shs, os, mean, invstd] {
      const T* go = out_grad(os.get());
      if (!go) return;
      const T* in = xs->data.data();
      const T* sc = scs->data.data();
      if (shs->tracked || scs->tracked) {
        T* dshift = shs->tracked ? acc_grad(shs.get()) : nullptr;
        T* dscale = scs->tracked ? acc_grad(scs.get()) : nullptr;
        for (int64_t n = 0; n < s.n; ++n)
          for (int64_t c = 0; c < s.c; ++c) {
            const int64_t off = (n * s.c + c) * s.h * s.w;
            const int64_t g = c / cpg;
            const double mu = (*mean)[n * G + g], is = (*invstd)[n * G + g];
            double a = 0.0, b = 0.0;
            for (int64_t i = 0; i < s.h * s.w; ++i) {
              const double gv = static_cast<double>(go[off + i]);
              a += gv;
              b += gv * (static_cast<double>(in[off + i]) - mu) * is;
            }
            if (dshift) dshift[c] += static_cast<T>(a);
            if (dscale) dscale[c] += static_cast<T>(b);
          }
      }
      if (xs->tracked) {
        T* dx = acc_grad(xs.get());
        for (int64_t n = 0; n < s.n; ++n)
          for (int64_t g = 0; g < G; ++g) {
            const double mu = (*mean)[n * G + g], is = (*invstd)[n * G + g];
            // reductions over the (sample, group) slice of scale-weighted grads
            double sum_gs = 0.0, sum_gs_xhat = 0.0;
            for (int64_t cl = 0; cl < cpg; ++cl) {
              const int64_t c = g * cpg + cl;
              const int64_t off = (n * s.c + c) * s.h * s.w;
              for (int64_t i = 0; i < s.h * s.w; ++i) {
                const double gv = static_cast<double>(go[off + i]) * static_cast<double>(sc[c]);
                sum_gs += gv;
                sum_gs_xhat += gv * (static_cast<double>(in[off + i]) - mu) * is;
              }
            }
            for (int64_t cl = 0; cl < cpg; ++cl) {
              const int64_t c = g * cpg + cl;
              const int64_t off = (n * s.c + c) * s.h * s.w;
              for (int64_t i = 0; i < s.h * s.w; ++i) {
                const double gv = static_cast<double>(go[off + i]) * static_cast<double>(sc[c]);
                const double xhat = (static_cast<double>(in[off + i]) - mu) * is;
                dx[off + i] += static_cast<T>(
                    is * (gv - sum_gs / static_cast<double>(m) -
                          xhat * sum_gs_xhat / static_cast<double>(m)));
              }
            }
          }
      }
    });
  }
  return out;
}

// ---- shape ops ----

template <typename T>
Tensor<T> concat(Tape<T>* tape, std::span<const Tensor<T>> xs, int axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  if (axis < 1 || axis > 3) throw DimensionError("concat: axis must be 1, 2 or 3");
  Shape s0 = xs[0].shape();
  int64_t total = 0;
  for (const auto& t : xs) {
    Shape s = t.shape();
    Shape a = s, b = s0;
    (axis == 1 ? a.c : axis == 2 ? a.h : a.w) = 0;
    (axis == 1 ? b.c : axis == 2 ? b.h : b.w) = 0;
    if (!(a == b)) throw DimensionError("concat: shapes differ off-axis: " + s.str() + " vs " + s0.str());
    total += axis == 1 ? s.c : axis == 2 ? s.h : s.w;
  }
  Shape os = s0;
  (axis == 1 ? os.c : axis == 2 ? os.h : os.w) = total;
  Tensor<T> out = Tensor<T>::zeros(os);

  // copy block-wise: treat layout as (outer, axis_extent, inner)
  {
    int64_t offset = 0;
    for (const auto& t : xs) {
      const Shape s = t.shape();
      const int64_t extent = axis == 1 ? s.c : axis == 2 ? s.h : s.w;
      const int64_t inner = axis == 1 ? s.h * s.w : axis == 2 ? s.w : 1;
      const int64_t outer = s.numel() / (extent * inner);
      for (int64_t ot = 0; ot < outer; ++ot) {
        const T* src = t.data().data() + ot * extent * inner;
        T* dst = out.data().data() + (ot * total + offset) * inner;
        std::memcpy(dst, src, sizeof(T) * extent * inner);
      }
      offset += extent;
    }
  }

  if (tape) {
    bool any = false;
    for (const auto& t : xs) any = any || t.tracked();
    if (any) {
      std::vector<Tensor<T>> inputs(xs.begin(), xs.end());
      auto os_ptr = out.storage();
      std::vector<std::shared_ptr<detail::Storage<T>>> stores;
      for (const auto& t : xs) stores.push_back(t.storage());
      tape->record(inputs, out, [axis, total, os_ptr, stores] {
        const T* go = out_grad(os_ptr.get());
        if (!go) return;
        int64_t offset = 0;
        for (auto& sp : stores) {
          const Shape s = sp->shape;
          const int64_t extent = axis == 1 ? s.c : axis == 2 ? s.h : s.w;
          const int64_t inner = axis == 1 ? s.h * s.w : axis == 2 ? s.w : 1;
          const int64_t outer = s.numel() / (extent * inner);
          if (sp->tracked) {
            T* dx = acc_grad(sp.get());
            for (int64_t ot = 0; ot < outer; ++ot) {
              const T* src = go + (ot * total + offset) * inner;
              T* dst = dx + ot * extent * inner;
              for (int64_t i = 0; i < extent * inner; ++i) dst[i] += src[i];
            }
          }
          offset += extent;
        }
      });
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(Tape<T>* tape, const Tensor<T>& x, std::span<const int64_t> sizes,
                             int axis) {
  if (axis < 1 || axis > 3) throw DimensionError("split: axis must be 1, 2 or 3");
  const Shape s = x.shape();
  const int64_t extent = axis == 1 ? s.c : axis == 2 ? s.h : s.w;
  int64_t total = 0;
  for (int64_t v : sizes) {
    if (v <= 0) throw DimensionError("split: non-positive piece size");
    total += v;
  }
  if (total != extent)
    throw DimensionError("split: sizes sum to " + std::to_string(total) + ", axis extent is " +
                         std::to_string(extent));
  const int64_t inner = axis == 1 ? s.h * s.w : axis == 2 ? s.w : 1;
  const int64_t outer = s.numel() / (extent * inner);

  std::vector<Tensor<T>> outs;
  int64_t offset = 0;
  for (int64_t v : sizes) {
    Shape os = s;
    (axis == 1 ? os.c : axis == 2 ? os.h : os.w) = v;
    Tensor<T> piece = Tensor<T>::zeros(os);
    for (int64_t ot = 0; ot < outer; ++ot) {
      const T* src = x.data().data() + (ot * extent + offset) * inner;
      std::memcpy(piece.data().data() + ot * v * inner, src, sizeof(T) * v * inner);
    }
    if (should_record(tape, {&x})) {
      auto xs = x.storage();
      auto ps = piece.storage();
      const int64_t off = offset, ext = extent, inn = inner, outr = outer, vv = v;
      tape->record({x}, piece, [xs, ps, off, ext, inn, outr, vv] {
        const T* go = out_grad(ps.get());
        if (!go || !xs->tracked) return;
        T* dx = acc_grad(xs.get());
        for (int64_t ot = 0; ot < outr; ++ot) {
          T* dst = dx + (ot * ext + off) * inn;
          const T* src = go + ot * vv * inn;
          for (int64_t i = 0; i < vv * inn; ++i) dst[i] += src[i];
        }
      });
    }
    outs.push_back(std::move(piece));
    offset += v;
  }
  return outs;
}

template <typename T>
Tensor<T> upsample_nearest_2x(Tape<T>* tape, const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out = Tensor<T>::zeros({s.n, s.c, s.h * 2, s.w * 2});
  const T* in = x.data().data();
  T* o = out.data().data();
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* plane = in + nc * s.h * s.w;
    T* oplane = o + nc * s.h * s.w * 4;
    for (int64_t h = 0; h < s.h; ++h)
      for (int64_t w = 0; w < s.w; ++w) {
        const T v = plane[h * s.w + w];
        T* base = oplane + (2 * h) * (2 * s.w) + 2 * w;
        base[0] = v;
        base[1] = v;
        base[2 * s.w] = v;
        base[2 * s.w + 1] = v;
      }
  }
  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [s, xs, os] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        T* dplane = dx + nc * s.h * s.w;
        const T* gplane = go + nc * s.h * s.w * 4;
        for (int64_t h = 0; h < s.h; ++h)
          for (int64_t w = 0; w < s.w; ++w) {
            const T* base = gplane + (2 * h) * (2 * s.w) + 2 * w;
            dplane[h * s.w + w] += base[0] + base[1] + base[2 * s.w] + base[2 * s.w + 1];
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape target) {
  if (target.numel() != x.numel())
    throw DimensionError("reshape: element count mismatch " + x.shape().str() + " -> " +
                         target.str());
  Tensor<T> out = Tensor<T>::from(target, std::vector<T>(x.data().begin(), x.data().end()));
  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [xs, os] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      for (size_t i = 0; i < os->grad.size(); ++i) dx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_hw(Tape<T>* tape, const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out = Tensor<T>::zeros({s.n, s.c, s.w, s.h});
  const T* in = x.data().data();
  T* o = out.data().data();
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* plane = in + nc * s.h * s.w;
    T* oplane = o + nc * s.h * s.w;
    for (int64_t h = 0; h < s.h; ++h)
      for (int64_t w = 0; w < s.w; ++w) oplane[w * s.h + h] = plane[h * s.w + w];
  }
  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [s, xs, os] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        T* dplane = dx + nc * s.h * s.w;
        const T* gplane = go + nc * s.h * s.w;
        for (int64_t h = 0; h < s.h; ++h)
          for (int64_t w = 0; w < s.w; ++w) dplane[h * s.w + w] += gplane[w * s.h + h];
      }
    });
  }
  return out;
}

namespace {

template <typename T, typename F>
Tensor<T> binary_broadcast(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, const char* name,
                           F&& combine, bool is_mul) {
  const Shape os = broadcast_shape(a.shape(), b.shape(), name);
  Tensor<T> out = Tensor<T>::zeros(os);
  const Shape sa = a.shape(), sb = b.shape();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* o = out.data().data();
  int64_t idx = 0;
  for (int64_t n = 0; n < os.n; ++n)
    for (int64_t c = 0; c < os.c; ++c)
      for (int64_t h = 0; h < os.h; ++h)
        for (int64_t w = 0; w < os.w; ++w, ++idx)
          o[idx] = combine(pa[wrap_index(sa, n, c, h, w)], pb[wrap_index(sb, n, c, h, w)]);

  if (should_record(tape, {&a, &b})) {
    auto as = a.storage();
    auto bs = b.storage();
    auto ost = out.storage();
    tape->record({a, b}, out, [os, sa, sb, as, bs, ost, is_mul] {
      const T* go = out_grad(ost.get());
      if (!go) return;
      const T* pa = as->data.data();
      const T* pb = bs->data.data();
      T* da = as->tracked ? acc_grad(as.get()) : nullptr;
      T* db = bs->tracked ? acc_grad(bs.get()) : nullptr;
      int64_t idx = 0;
      for (int64_t n = 0; n < os.n; ++n)
        for (int64_t c = 0; c < os.c; ++c)
          for (int64_t h = 0; h < os.h; ++h)
            for (int64_t w = 0; w < os.w; ++w, ++idx) {
              const T g = go[idx];
              if (da)
                da[wrap_index(sa, n, c, h, w)] +=
                    is_mul ? g * pb[wrap_index(sb, n, c, h, w)] : g;
              if (db)
                db[wrap_index(sb, n, c, h, w)] +=
                    is_mul ? g * pa[wrap_index(sa, n, c, h, w)] : g;
            }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(tape, a, b, "add", [](T x, T y) { return x + y; }, false);
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(tape, a, b, "mul", [](T x, T y) { return x * y; }, true);
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, double factor) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* in = x.data().data();
  T* o = out.data().data();
  const T f = static_cast<T>(factor);
  for (int64_t i = 0; i < x.numel(); ++i) o[i] = in[i] * f;
  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [xs, os, f] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      for (size_t i = 0; i < os->grad.size(); ++i) dx[i] += go[i] * f;
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.c != 1 || sb.c != 1 || sa.n != sb.n || sa.w != sb.h)
    throw DimensionError("matmul: expected (N,1,P,K) x (N,1,K,Q), got " + sa.str() + " x " +
                         sb.str());
  const int64_t N = sa.n, P = sa.h, K = sa.w, Q = sb.w;
  Tensor<T> out = Tensor<T>::zeros({N, 1, P, Q});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* o = out.data().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < P; ++p)
      for (int64_t q = 0; q < Q; ++q) {
        double acc = 0.0;
        for (int64_t k = 0; k < K; ++k)
          acc += static_cast<double>(pa[(n * P + p) * K + k]) *
                 static_cast<double>(pb[(n * K + k) * Q + q]);
        o[(n * P + p) * Q + q] = static_cast<T>(acc);
      }
  check_finite(out, "matmul");

  if (should_record(tape, {&a, &b})) {
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    tape->record({a, b}, out, [N, P, K, Q, as, bs, os] {
      const T* go = out_grad(os.get());
      if (!go) return;
      const T* pa = as->data.data();
      const T* pb = bs->data.data();
      if (as->tracked) {
        T* da = acc_grad(as.get());
        for (int64_t n = 0; n < N; ++n)
          for (int64_t p = 0; p < P; ++p)
            for (int64_t k = 0; k < K; ++k) {
              double acc = 0.0;
              for (int64_t q = 0; q < Q; ++q)
                acc += static_cast<double>(go[(n * P + p) * Q + q]) *
                       static_cast<double>(pb[(n * K + k) * Q + q]);
              da[(n * P + p) * K + k] += static_cast<T>(acc);
            }
      }
      if (bs->tracked) {
        T* db = acc_grad(bs.get());
        for (int64_t n = 0; n < N; ++n)
          for (int64_t k = 0; k < K; ++k)
            for (int64_t q = 0; q < Q; ++q) {
              double acc = 0.0;
              for (int64_t p = 0; p < P; ++p)
                acc += static_cast<double>(pa[(n * P + p) * K + k]) *
                       static_cast<double>(go[(n * P + p) * Q + q]);
              db[(n * K + k) * Q + q] += static_cast<T>(acc);
            }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::filled({1, 1, 1, 1}, static_cast<T>(acc));
  if (should_record(tape, {&x})) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record({x}, out, [xs, os] {
      const T* go = out_grad(os.get());
      if (!go || !xs->tracked) return;
      T* dx = acc_grad(xs.get());
      const T g = go[0];
      for (size_t i = 0; i < xs->data.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

// ---- grad check ----

GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>*)>& build,
                           std::span<const Tensor<double>> params, const GradCheckOptions& opts) {
  // analytic pass
  {
    for (const auto& p : params) const_cast<Tensor<double>&>(p).zero_grad();
    Tape<double> tape;
    Tensor<double> out = build(&tape);
    backward(tape, out);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  auto eval = [&]() -> double {
    Tensor<double> out = build(nullptr);
    if (!(out.shape() == Shape{1, 1, 1, 1})) throw UsageError("grad_check: output must be scalar");
    return out.data()[0];
  };

  GradCheckReport report;
  report.max_rel_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = const_cast<Tensor<double>&>(params[pi]);
    auto data = p.data();
    std::vector<size_t> indices;
    if (opts.max_elements_per_param > 0 &&
        static_cast<int64_t>(data.size()) > opts.max_elements_per_param) {
      // deterministic distinct sample via partial Fisher-Yates
      std::vector<size_t> all(data.size());
      for (size_t i = 0; i < all.size(); ++i) all[i] = i;
      Rng rng(Rng::mix(opts.sample_seed, pi));
      for (int64_t i = 0; i < opts.max_elements_per_param; ++i) {
        const size_t j =
            static_cast<size_t>(rng.uniform_int(i, static_cast<int64_t>(all.size())));
        std::swap(all[static_cast<size_t>(i)], all[j]);
      }
      indices.assign(all.begin(), all.begin() + opts.max_elements_per_param);
    } else {
      indices.resize(data.size());
      for (size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    }
    for (size_t i : indices) {
      const double orig = data[i];
      data[i] = orig + opts.step;
      const double fp = eval();
      data[i] = orig - opts.step;
      const double fm = eval();
      data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: non-finite objective during finite differences");
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double a = analytic[pi][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      report.max_rel_err = std::max(report.max_rel_err, std::fabs(a - numeric) / denom);
      ++report.elements_checked;
    }
  }
  report.pass = report.max_rel_err < opts.tolerance;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>*)>& build,
                           std::span<const Tensor<double>> params, double tolerance, double step) {
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.step = step;
  return grad_check(build, params, opts);
}

// ---- explicit instantiations ----

#define MSY_INSTANTIATE_OPS(T)                                                                     \
  template class Tape<T>;                                                                          \
  template void backward<T>(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> conv2d<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,    \
                               int, int, int);                                                     \
  template Tensor<T> pool<T>(Tape<T>*, const Tensor<T>&, PoolKind, int, int, int);                 \
  template Tensor<T> sigmoid<T>(Tape<T>*, const Tensor<T>&);                                       \
  template Tensor<T> silu<T>(Tape<T>*, const Tensor<T>&);                                          \
  template Tensor<T> softmax<T>(Tape<T>*, const Tensor<T>&, int);                                  \
  template Tensor<T> batch_norm<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                   Tensor<T>&, Tensor<T>&, bool, double, double);                  \
  template Tensor<T> group_norm<T>(Tape<T>*, const Tensor<T>&, int, const Tensor<T>&,              \
                                   const Tensor<T>&, double);                                      \
  template Tensor<T> concat<T>(Tape<T>*, std::span<const Tensor<T>>, int);                         \
  template std::vector<Tensor<T>> split<T>(Tape<T>*, const Tensor<T>&, std::span<const int64_t>,   \
                                           int);                                                   \
  template Tensor<T> upsample_nearest_2x<T>(Tape<T>*, const Tensor<T>&);                           \
  template Tensor<T> reshape<T>(Tape<T>*, const Tensor<T>&, Shape);                                \
  template Tensor<T> transpose_hw<T>(Tape<T>*, const Tensor<T>&);                                  \
  template Tensor<T> add<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> mul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale<T>(Tape<T>*, const Tensor<T>&, double);                                 \
  template Tensor<T> matmul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> sum_all<T>(Tape<T>*, const Tensor<T>&);

MSY_INSTANTIATE_OPS(float)
MSY_INSTANTIATE_OPS(double)

#undef MSY_INSTANTIATE_OPS

}  // namespace msy
