#include <cmath>
#include <memory>
#include <vector>

#include "doctest.h"
#include "msy/blocks.hpp"
#include "oracles.hpp"

using namespace msy;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  std::vector<T> v(static_cast<size_t>(s.numel()));
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return Tensor<T>::from(s, std::move(v));
}

template <typename T>
std::vector<Tensor<T>> trainable_params(ParamStore<T>& store) {
  std::vector<Tensor<T>> out;
  for (const auto& e : store.entries())
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

GradCheckReport block_grad_check(const BlockSpec& spec, Shape in_shape, uint64_t seed,
                                 double tolerance) {
  ParamStore<double> store(seed);
  auto block = make_block<double>(store, "b", spec);
  Rng rng(Rng::mix(seed, 1));
  std::vector<Tensor<double>> inputs;
  if (spec.kind == BlockKind::detect_head) {
    for (int i = 0; i < 3; ++i)
      inputs.push_back(random_tensor<double>(
          {in_shape.n, spec.head_channels[i], in_shape.h >> i, in_shape.w >> i}, rng));
  } else {
    inputs.push_back(random_tensor<double>(in_shape, rng));
  }
  auto params = trainable_params(store);
  auto build = [&](Tape<double>* tape) {
    auto outs = block->forward(tape, inputs, true);
    Tensor<double> total;
    for (auto& o : outs) {
      auto s = sum_all<double>(tape, mul<double>(tape, o, o));
      total = total.defined() ? add<double>(tape, total, s) : s;
    }
    return total;
  };
  return grad_check(build, params, tolerance);
}

}  // namespace

TEST_CASE("conv_bn_silu shape and parameter count") {
  ParamStore<float> store(3);
  ConvBNSiLU<float> block(store, "b0", 3, 16, 3, 1, 1);
  Rng rng(5);
  auto x = random_tensor<float>({1, 3, 8, 8}, rng);
  auto y = block.forward1(nullptr, x, false);
  CHECK(y.shape() == Shape{1, 16, 8, 8});
  CHECK(store.trainable_count() == 464);  // 3*16*9 + 2*16
  CHECK(store.total_count() == 464 + 32);  // plus running stats
}

TEST_CASE("conv_bn_silu zero input gives silu(shift) per channel") {
  ParamStore<float> store(7);
  ConvBNSiLU<float> block(store, "b0", 2, 4, 3, 1, 1);
  auto* shift = store.find("b0.bn.shift");
  REQUIRE(shift != nullptr);
  std::vector<float> shifts = {0.5f, -1.0f, 2.0f, 0.0f};
  std::copy(shifts.begin(), shifts.end(), shift->data().begin());
  auto x = Tensor<float>::zeros({2, 2, 5, 5});
  auto y = block.forward1(nullptr, x, true);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 4; ++c) {
      const float want = shifts[c] / (1.0f + std::exp(-shifts[c]));
      for (int64_t h = 0; h < 5; ++h)
        for (int64_t w = 0; w < 5; ++w)
          CHECK(y.at(n, c, h, w) == doctest::Approx(want).epsilon(1e-4));
    }
}

TEST_CASE("dual_conv with G=1 equals composed dense 3x3 plus 1x1") {
  ParamStore<float> store(11);
  DualConv<float> block(store, "d", 8, 8, 1);
  Rng rng(13);
  auto x = random_tensor<float>({2, 8, 6, 6}, rng);
  auto y = block.forward1(nullptr, x, false);

  auto gc = *store.find("d.gc.weight");
  auto pw = *store.find("d.pw.weight");
  auto spatial = conv2d<float>(nullptr, x, gc, nullptr, 1, 1, 1);
  auto point = conv2d<float>(nullptr, x, pw, nullptr, 1, 0, 1);
  auto sum = add<float>(nullptr, spatial, point);
  auto rmean = store.find("d.bn.rmean")->clone();
  auto rvar = store.find("d.bn.rvar")->clone();
  auto normed = batch_norm<float>(nullptr, sum, *store.find("d.bn.scale"),
                                  *store.find("d.bn.shift"), rmean, rvar, false, 0.03, 1e-3);
  auto want = silu<float>(nullptr, normed);
  CHECK(oracle::max_abs_diff(y, want) < 1e-6);
}

TEST_CASE("dual_conv weight count shows the grouped reduction") {
  ParamStore<float> store(17);
  DualConv<float> block(store, "d", 64, 64, 2);
  const int64_t gc = store.find("d.gc.weight")->numel();
  const int64_t pw = store.find("d.pw.weight")->numel();
  CHECK(gc + pw == 22528);  // 9*64*64/2 + 64*64, vs 36864 for a dense 3x3
  CHECK(gc + pw < 36864);
  const double reduction = 1.0 - static_cast<double>(gc + pw) / 36864.0;
  CHECK(reduction == doctest::Approx(0.389).epsilon(0.01));
}

TEST_CASE("dual_conv grouped branch matches block-diagonal plus dense oracle") {
  ParamStore<float> store(19);
  DualConv<float> block(store, "d", 8, 8, 2);
  Rng rng(23);
  auto x = random_tensor<float>({2, 8, 6, 6}, rng);

  auto gc = *store.find("d.gc.weight");
  auto pw = *store.find("d.pw.weight");
  auto grouped = oracle::conv2d_loop<float>(x, gc, nullptr, 1, 1, 2);
  auto dense = oracle::conv2d_loop<float>(x, pw, nullptr, 1, 0, 1);
  std::vector<float> mix(static_cast<size_t>(grouped.numel()));
  for (size_t i = 0; i < mix.size(); ++i) mix[i] = grouped.data()[i] + dense.data()[i];
  auto want_sum = Tensor<float>::from(grouped.shape(), std::move(mix));

  auto spatial = conv2d<float>(nullptr, x, gc, nullptr, 1, 1, 2);
  auto point = conv2d<float>(nullptr, x, pw, nullptr, 1, 0, 1);
  auto got_sum = add<float>(nullptr, spatial, point);
  CHECK(oracle::max_abs_diff(got_sum, want_sum) < 1e-5);
}

TEST_CASE("dual_conv requires divisible channels") {
  ParamStore<float> store(29);
  CHECK_THROWS_AS(DualConv<float>(store, "d", 6, 6, 4), DimensionError);
}

TEST_CASE("c2f preserves shape") {
  ParamStore<float> store(31);
  C2f<float> block(store, "c", 64, 64, 1, true, false, 1);
  Rng rng(37);
  auto x = random_tensor<float>({1, 64, 16, 16}, rng);
  auto y = block.forward1(nullptr, x, false);
  CHECK(y.shape() == Shape{1, 64, 16, 16});
}

TEST_CASE("c2f closed-form parameter counts, plain vs dual") {
  BlockSpec plain{.kind = BlockKind::c2f, .c_in = 64, .c_out = 64, .n = 1, .shortcut = true};
  BlockSpec dualspec{.kind = BlockKind::c2f_dual, .c_in = 64, .c_out = 64, .n = 1, .groups = 2,
                     .shortcut = true};
  ParamStore<float> sp(1), sd(1);
  make_block<float>(sp, "c", plain);
  make_block<float>(sd, "c", dualspec);
  CHECK(sp.trainable_count() == analytic_param_count(plain).trainable);
  CHECK(sd.trainable_count() == analytic_param_count(dualspec).trainable);
  CHECK(sd.trainable_count() < sp.trainable_count());
  // each replaced 3x3 conv on 32 channels saves 3.5*32^2 weights at G=2
  CHECK(sp.trainable_count() - sd.trainable_count() == 2 * 3.5 * 32 * 32);
}

TEST_CASE("c2f dual variant passes gradient checks") {
  BlockSpec spec{.kind = BlockKind::c2f_dual, .c_in = 8, .c_out = 8, .n = 1, .groups = 2,
                 .shortcut = true};
  auto report = block_grad_check(spec, {2, 8, 5, 5}, 99, 1e-3);
  CHECK(report.pass);
}

TEST_CASE("serial k5 max pools equal parallel k5/k9/k13 pools") {
  Rng rng(41);
  auto x = random_tensor<float>({1, 4, 12, 12}, rng);
  auto p1 = pool<float>(nullptr, x, PoolKind::max, 5, 1, 2);
  auto p2 = pool<float>(nullptr, p1, PoolKind::max, 5, 1, 2);
  auto p3 = pool<float>(nullptr, p2, PoolKind::max, 5, 1, 2);
  auto q2 = pool<float>(nullptr, x, PoolKind::max, 9, 1, 4);
  auto q3 = pool<float>(nullptr, x, PoolKind::max, 13, 1, 6);
  CHECK(oracle::max_abs_diff(p2, q2) == 0.0);
  CHECK(oracle::max_abs_diff(p3, q3) == 0.0);
}

TEST_CASE("max pool of constant input stays constant") {
  auto x = Tensor<float>::filled({1, 3, 8, 8}, -1.25f);
  auto p = pool<float>(nullptr, x, PoolKind::max, 5, 1, 2);
  for (float v : p.data()) CHECK(v == -1.25f);
}

TEST_CASE("sppf preserves shape") {
  ParamStore<float> store(43);
  SPPF<float> block(store, "s", 64, 64);
  Rng rng(47);
  auto x = random_tensor<float>({1, 64, 20, 20}, rng);
  auto y = block.forward1(nullptr, x, false);
  CHECK(y.shape() == Shape{1, 64, 20, 20});
}

TEST_CASE("ema preserves shape for several group settings") {
  Rng rng(53);
  for (int groups : {1, 2, 4, 8}) {
    ParamStore<float> store(groups);
    EMA<float> block(store, "e", 16, groups);
    auto x = random_tensor<float>({2, 16, 6, 6}, rng);
    auto y = block.forward1(nullptr, x, false);
    CHECK(y.shape() == Shape{2, 16, 6, 6});
  }
}

TEST_CASE("ema divisibility violation errors") {
  ParamStore<float> store(59);
  CHECK_THROWS_AS(EMA<float>(store, "e", 6, 4), DimensionError);
}

TEST_CASE("ema is equivariant to channel-group permutation") {
  ParamStore<float> store(61);
  EMA<float> block(store, "e", 8, 2);  // two groups of four channels
  Rng rng(67);
  auto x = random_tensor<float>({1, 8, 5, 5}, rng);
  auto y = block.forward1(nullptr, x, false);

  // swap the two channel groups of the input
  auto xp = Tensor<float>::zeros({1, 8, 5, 5});
  for (int64_t c = 0; c < 8; ++c)
    for (int64_t h = 0; h < 5; ++h)
      for (int64_t w = 0; w < 5; ++w) xp.at(0, c, h, w) = x.at(0, (c + 4) % 8, h, w);
  auto yp = block.forward1(nullptr, xp, false);
  for (int64_t c = 0; c < 8; ++c)
    for (int64_t h = 0; h < 5; ++h)
      for (int64_t w = 0; w < 5; ++w)
        CHECK(yp.at(0, c, h, w) == y.at(0, (c + 4) % 8, h, w));  // exact
}

TEST_CASE("ema gating stays strictly inside (0,1)") {
  ParamStore<float> store(71);
  EMA<float> block(store, "e", 8, 2);
  Rng rng(73);
  // input bounded away from zero so the gate can be divided out
  auto x = Tensor<float>::zeros({1, 8, 6, 6});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  auto y = block.forward1(nullptr, x, false);
  for (int64_t i = 0; i < y.numel(); ++i) {
    const double gate = static_cast<double>(y.data()[i]) / static_cast<double>(x.data()[i]);
    CHECK(gate > 0.0);
    CHECK(gate < 1.0);
  }
}

TEST_CASE("ema with all parameters zeroed degenerates to uniform 0.5 gating") {
  ParamStore<float> store(79);
  EMA<float> block(store, "e", 8, 2);
  for (auto& e : store.entries_mut())
    std::fill(e.tensor.data().begin(), e.tensor.data().end(), 0.0f);
  Rng rng(83);
  auto x = random_tensor<float>({2, 8, 4, 4}, rng);
  auto y = block.forward1(nullptr, x, false);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(0.5f * x.data()[i]).epsilon(1e-6));
}

TEST_CASE("scdd halves spatial size and doubles channels") {
  ParamStore<float> store(89);
  SCDD<float> block(store, "s", 32, 64);
  Rng rng(97);
  auto x = random_tensor<float>({1, 32, 16, 16}, rng);
  auto y = block.forward1(nullptr, x, false);
  CHECK(y.shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("scdd is lighter than a plain 3x3 stride-2 conv") {
  BlockSpec scdd_spec{.kind = BlockKind::scdd, .c_in = 32, .c_out = 64};
  auto pc = analytic_param_count(scdd_spec);
  // 32*64 pointwise + 64*9 depthwise weights, norm affine on both stages
  CHECK(pc.trainable == 32 * 64 + 2 * 64 + 9 * 64 + 2 * 64);
  const int64_t plain = 9 * 32 * 64 + 2 * 64;
  CHECK(pc.trainable < plain);
  ParamStore<float> store(101);
  make_block<float>(store, "s", scdd_spec);
  CHECK(store.trainable_count() == pc.trainable);
}

TEST_CASE("scdd zero input gives constant output and odd sizes error") {
  ParamStore<float> store(103);
  SCDD<float> block(store, "s", 4, 8);
  auto x = Tensor<float>::zeros({1, 4, 8, 8});
  auto y = block.forward1(nullptr, x, true);
  for (int64_t c = 0; c < 8; ++c) {
    const float first = y.at(0, c, 0, 0);
    for (int64_t h = 0; h < 4; ++h)
      for (int64_t w = 0; w < 4; ++w) CHECK(y.at(0, c, h, w) == doctest::Approx(first));
  }
  auto odd = Tensor<float>::zeros({1, 4, 7, 7});
  CHECK_THROWS_AS(block.forward1(nullptr, odd, false), DimensionError);
}

TEST_CASE("detect head output shapes at 160px strides") {
  ParamStore<float> store(107);
  std::vector<int64_t> ch = {64, 128, 256};
  DetectHead<float> head(store, "h", 200, 16, ch);
  Rng rng(109);
  std::vector<Tensor<float>> feats = {
      random_tensor<float>({1, 64, 20, 20}, rng),
      random_tensor<float>({1, 128, 10, 10}, rng),
      random_tensor<float>({1, 256, 5, 5}, rng),
  };
  auto out = head.forward(nullptr, feats, false);
  REQUIRE(out.size() == 6);
  CHECK(out[0].shape() == Shape{1, 200, 20, 20});
  CHECK(out[1].shape() == Shape{1, 64, 20, 20});
  CHECK(out[2].shape() == Shape{1, 200, 10, 10});
  CHECK(out[3].shape() == Shape{1, 64, 10, 10});
  CHECK(out[4].shape() == Shape{1, 200, 5, 5});
  CHECK(out[5].shape() == Shape{1, 64, 5, 5});
}

TEST_CASE("detect head degenerate single class") {
  ParamStore<float> store(113);
  std::vector<int64_t> ch = {8, 16, 32};
  DetectHead<float> head(store, "h", 1, 4, ch);
  Rng rng(127);
  std::vector<Tensor<float>> feats = {
      random_tensor<float>({1, 8, 8, 8}, rng),
      random_tensor<float>({1, 16, 4, 4}, rng),
      random_tensor<float>({1, 32, 2, 2}, rng),
  };
  auto out = head.forward(nullptr, feats, false);
  CHECK(out[0].shape().c == 1);
  CHECK(out[1].shape().c == 16);
}

TEST_CASE("detect head rejects wrong number of scales") {
  ParamStore<float> store(131);
  std::vector<int64_t> ch = {8, 16, 32};
  DetectHead<float> head(store, "h", 2, 4, ch);
  std::vector<Tensor<float>> feats = {Tensor<float>::zeros({1, 8, 8, 8})};
  CHECK_THROWS_AS(head.forward(nullptr, feats, false), DimensionError);
}

TEST_CASE("detect head passes gradient checks on a two-class toy") {
  BlockSpec spec{.kind = BlockKind::detect_head, .num_classes = 2, .reg_max = 4,
                 .head_channels = {8, 16, 32}};
  auto report = block_grad_check(spec, {1, 0, 8, 8}, 151, 1e-3);
  CHECK(report.pass);
}

TEST_CASE("all blocks pass gradient checks as standalone graphs") {
  std::vector<std::pair<BlockSpec, Shape>> cases = {
      {{.kind = BlockKind::conv_bn_silu, .c_in = 4, .c_out = 6, .kernel = 3}, {2, 4, 5, 5}},
      {{.kind = BlockKind::dual_conv, .c_in = 4, .c_out = 4, .groups = 2}, {2, 4, 5, 5}},
      {{.kind = BlockKind::bottleneck, .c_in = 4, .c_out = 4, .shortcut = true}, {1, 4, 5, 5}},
      {{.kind = BlockKind::dual_bottleneck, .c_in = 4, .c_out = 4, .groups = 2, .shortcut = true},
       {1, 4, 5, 5}},
      {{.kind = BlockKind::c2f, .c_in = 6, .c_out = 6, .n = 2, .shortcut = true}, {1, 6, 5, 5}},
      {{.kind = BlockKind::sppf, .c_in = 4, .c_out = 4}, {1, 4, 6, 6}},
      {{.kind = BlockKind::ema, .c_in = 8, .groups = 2}, {1, 8, 4, 4}},
      {{.kind = BlockKind::scdd, .c_in = 4, .c_out = 6}, {1, 4, 6, 6}},
  };
  for (size_t i = 0; i < cases.size(); ++i) {
    auto report = block_grad_check(cases[i].first, cases[i].second, 1000 + i, 1e-3);
    CAPTURE(i);
    CHECK(report.pass);
  }
}

TEST_CASE("analytic parameter count matches the store for random valid specs") {
  Rng rng(163);
  const std::vector<BlockKind> kinds = {
      BlockKind::conv_bn_silu, BlockKind::dual_conv, BlockKind::bottleneck,
      BlockKind::dual_bottleneck, BlockKind::c2f, BlockKind::c2f_dual, BlockKind::sppf,
      BlockKind::ema, BlockKind::scdd, BlockKind::detect_head};
  for (int trial = 0; trial < 50; ++trial) {
    BlockSpec spec;
    spec.kind = kinds[static_cast<size_t>(rng.uniform_int(0, kinds.size()))];
    spec.groups = static_cast<int>(rng.uniform_int(1, 4));  // 1..3 -> use powers below
    spec.groups = 1 << rng.uniform_int(0, 3);               // 1, 2 or 4
    const int64_t unit = 4 * spec.groups;
    spec.c_in = unit * rng.uniform_int(1, 5);
    spec.c_out = spec.kind == BlockKind::bottleneck || spec.kind == BlockKind::dual_bottleneck ||
                         spec.kind == BlockKind::ema
                     ? spec.c_in
                     : unit * rng.uniform_int(1, 5);
    spec.n = static_cast<int>(rng.uniform_int(1, 4));
    spec.kernel = rng.uniform_int(0, 2) == 0 ? 1 : 3;
    spec.shortcut = rng.uniform_int(0, 2) == 0;
    spec.num_classes = static_cast<int>(rng.uniform_int(1, 40));
    spec.reg_max = 4 * static_cast<int>(rng.uniform_int(1, 5));
    spec.head_channels = {spec.c_in, spec.c_in * 2, spec.c_in * 4};
    spec.light_cls = rng.uniform_int(0, 2) == 0;
    if (spec.kind == BlockKind::conv_bn_silu && spec.c_out % spec.groups) spec.groups = 1;

    ParamStore<float> store(trial);
    make_block<float>(store, "b", spec);
    auto want = analytic_param_count(spec);
    CAPTURE(trial);
    CHECK(store.trainable_count() == want.trainable);
    CHECK(store.total_count() == want.total);
  }
}

TEST_CASE("stride-1 blocks preserve batch and spatial dimensions") {
  Rng rng(167);
  std::vector<BlockSpec> specs = {
      {.kind = BlockKind::conv_bn_silu, .c_in = 8, .c_out = 12, .kernel = 3},
      {.kind = BlockKind::dual_conv, .c_in = 8, .c_out = 8, .groups = 2},
      {.kind = BlockKind::c2f, .c_in = 8, .c_out = 8, .n = 1, .shortcut = true},
      {.kind = BlockKind::c2f_dual, .c_in = 8, .c_out = 8, .n = 1, .groups = 2, .shortcut = true},
      {.kind = BlockKind::sppf, .c_in = 8, .c_out = 8},
      {.kind = BlockKind::ema, .c_in = 8, .groups = 4},
  };
  for (auto& spec : specs) {
    ParamStore<float> store(171);
    auto block = make_block<float>(store, "b", spec);
    auto x = random_tensor<float>({3, spec.c_in, 7, 9}, rng);
    auto y = block->forward1(nullptr, x, false);
    CHECK(y.shape().n == 3);
    CHECK(y.shape().h == 7);
    CHECK(y.shape().w == 9);
  }
}
