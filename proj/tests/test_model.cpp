#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "msy/model.hpp"

using namespace msy;

namespace {

ModelConfig config_for(Variant v, int nc = 200, double width = 0.25, int size = 640) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.num_classes = nc;
  cfg.width_mult = width;
  cfg.input_size = size;
  return cfg;
}

bool within_pct(double value, double target, double pct) {
  return std::fabs(value - target) <= pct / 100.0 * target;
}

Tensor<float> random_image(int size, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(static_cast<size_t>(3 * size * size));
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor<float>::from({1, 3, size, size}, std::move(v));
}

}  // namespace

TEST_CASE("parameter counts sit within the published bands") {
  auto v8 = build_model<float>(config_for(Variant::yolov8n_like));
  auto mid = build_model<float>(config_for(Variant::midstate));
  auto ed = build_model<float>(config_for(Variant::midstate_ed));
  const auto pc8 = count_params(v8), pcm = count_params(mid), pce = count_params(ed);
  CHECK(within_pct(pc8.trainable, reference::kParamsYolov8nLike, 5.0));
  CHECK(within_pct(pcm.trainable, reference::kParamsMidstate, 5.0));
  CHECK(within_pct(pce.trainable, reference::kParamsMidstateEd, 5.0));
}

TEST_CASE("ablation ordering of parameter counts") {
  const auto mid = count_params(build_model<float>(config_for(Variant::midstate))).trainable;
  const auto dual =
      count_params(build_model<float>(config_for(Variant::midstate_dualconv))).trainable;
  const auto ema = count_params(build_model<float>(config_for(Variant::midstate_ema))).trainable;
  CHECK(dual < mid);
  CHECK(mid < ema);
}

TEST_CASE("ema ablation delta equals the closed form") {
  ModelConfig cfg = config_for(Variant::midstate_ema);
  const auto mid = count_params(build_model<float>(config_for(Variant::midstate))).trainable;
  const auto ema = count_params(build_model<float>(cfg)).trainable;
  int64_t want = 0;
  for (int base : {256, 512, 1024}) {
    const int64_t cpg = cfg.channels(base) / cfg.ema_groups;
    want += 10 * cpg * cpg + 4 * cpg;
  }
  CHECK(ema - mid == want);
  CHECK(ema - mid == 3472);  // g=16 at channels 64/128/256
}

TEST_CASE("gflops at 640 sit within the published bands") {
  auto v8 = build_model<float>(config_for(Variant::yolov8n_like));
  auto ed = build_model<float>(config_for(Variant::midstate_ed));
  CHECK(within_pct(count_flops(v8, 640), reference::kGflopsYolov8nLike, 10.0));
  CHECK(within_pct(count_flops(ed, 640), reference::kGflopsMidstateEd, 10.0));
}

TEST_CASE("halving the input size scales flops by exactly one quarter") {
  auto model = build_model<float>(config_for(Variant::midstate));
  const double full = count_flops(model, 640);
  const double half = count_flops(model, 320);
  CHECK(half == doctest::Approx(full / 4.0).epsilon(1e-12));
}

TEST_CASE("flops are exactly linear in batch size") {
  auto model = build_model<float>(config_for(Variant::midstate_ed, 8, 0.125, 64));
  const double one = count_flops(model, 64, 1);
  const double five = count_flops(model, 64, 5);
  CHECK(five == doctest::Approx(5.0 * one).epsilon(1e-12));
}

TEST_CASE("single conv flop closed form") {
  ParamStore<float> store(0);
  ConvBNSiLU<float> conv(store, "b0", 3, 16, 3, 1, 1);
  std::vector<Shape> in = {Shape{1, 3, 640, 640}};
  auto st = conv.stats(in);
  const double conv_term = 2.0 * 9 * 3 * 16 * 640 * 640;
  CHECK(conv_term == doctest::Approx(0.3539e9).epsilon(1e-3));
  CHECK(st.flops == doctest::Approx(conv_term + 2.0 * 16 * 640 * 640));  // + norm + act
}

TEST_CASE("empty model counts zero parameters") {
  Model<float> model(config_for(Variant::midstate));
  CHECK(count_params(model).trainable == 0);
  CHECK(count_params(model).total == 0);
}

TEST_CASE("every variant builds and forwards with finite outputs at two widths") {
  for (auto variant : {Variant::yolov8n_like, Variant::yolov10n_like, Variant::midstate,
                       Variant::midstate_dualconv, Variant::midstate_ema, Variant::midstate_ed}) {
    for (double width : {0.125, 0.25}) {
      ModelConfig cfg = config_for(variant, 5, width, 64);
      auto model = build_model<float>(cfg, 42);
      auto out = model.forward(random_image(64, 7));
      for (int s = 0; s < 3; ++s) {
        const int stride = 8 << s;
        CHECK(out.cls[s].shape().h == 64 / stride);
        CHECK(out.cls[s].shape().c == 5);
        CHECK(out.box[s].shape().c == 4 * cfg.reg_max);
        for (float v : out.cls[s].data()) REQUIRE(std::isfinite(v));
        for (float v : out.box[s].data()) REQUIRE(std::isfinite(v));
      }
    }
  }
}

TEST_CASE("toy midstate with tiny classes builds per the stride rule") {
  ModelConfig cfg = config_for(Variant::midstate, 2, 0.125, 64);
  auto model = build_model<float>(cfg);
  auto out = model.forward(random_image(64, 3));
  CHECK(out.cls[0].shape() == Shape{1, 2, 8, 8});
  CHECK(out.cls[1].shape() == Shape{1, 2, 4, 4});
  CHECK(out.cls[2].shape() == Shape{1, 2, 2, 2});
}

TEST_CASE("weights round trip bitwise") {
  const auto dir = std::filesystem::temp_directory_path() / "msy_model_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "roundtrip.msyw").string();

  ModelConfig cfg = config_for(Variant::midstate_ed, 3, 0.125, 64);
  auto model = build_model<float>(cfg, 5);
  save_weights(model, path);
  auto loaded = build_model<float>(cfg, 999);  // different init, fully overwritten
  load_weights(loaded, path);
  const auto& a = model.store().entries();
  const auto& b = loaded.store().entries();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].key == b[i].key);
    auto da = a[i].tensor.data();
    auto db = b[i].tensor.data();
    for (size_t j = 0; j < da.size(); ++j) REQUIRE(da[j] == db[j]);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("weights load failure modes are distinct") {
  const auto dir = std::filesystem::temp_directory_path() / "msy_model_err";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "w.msyw").string();
  ModelConfig small = config_for(Variant::midstate, 2, 0.125, 64);
  auto model = build_model<float>(small, 5);
  save_weights(model, path);

  SUBCASE("class count mismatch is a key-set mismatch") {
    ModelConfig big = config_for(Variant::midstate, 7, 0.125, 64);
    auto target = build_model<float>(big);
    try {
      load_weights(target, path);
      FAIL("expected key-set mismatch");
    } catch (const WeightsError& e) {
      CHECK(e.kind == WeightsError::Kind::key_set_mismatch);
    }
  }
  SUBCASE("truncation") {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string buf = ss.str();
    buf.pop_back();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << buf;
    out.close();
    auto target = build_model<float>(small);
    try {
      load_weights(target, path);
      FAIL("expected truncation error");
    } catch (const WeightsError& e) {
      CHECK(e.kind == WeightsError::Kind::truncated);
    }
  }
  SUBCASE("bad magic") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE file";
    out.close();
    auto target = build_model<float>(small);
    try {
      load_weights(target, path);
      FAIL("expected bad magic error");
    } catch (const WeightsError& e) {
      CHECK(e.kind == WeightsError::Kind::bad_magic);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("config text round trips") {
  ModelConfig cfg = config_for(Variant::midstate_ed, 17, 0.125, 160);
  cfg.ema_groups = 8;
  auto parsed = ModelConfig::from_text(cfg.to_text());
  CHECK(parsed.variant == cfg.variant);
  CHECK(parsed.num_classes == cfg.num_classes);
  CHECK(parsed.width_mult == cfg.width_mult);
  CHECK(parsed.input_size == cfg.input_size);
  CHECK(parsed.ema_groups == cfg.ema_groups);
  CHECK_THROWS_AS(ModelConfig::from_text("nonsense=1\n"), DataError);
  CHECK_THROWS_AS(parse_variant("midstate-xl"), DataError);
}

TEST_CASE("invalid configs are rejected") {
  ModelConfig cfg = config_for(Variant::midstate_ed);
  cfg.input_size = 100;  // not a multiple of 32
  CHECK_THROWS_AS(build_model<float>(cfg), DataError);
  ModelConfig cfg2 = config_for(Variant::midstate_ed);
  cfg2.ema_groups = 48;  // 64 channels not divisible
  CHECK_THROWS_AS(build_model<float>(cfg2), DataError);
}

TEST_CASE("reconciliation report carries the key reference numbers") {
  const std::string report = reconciliation_report(200, 640);
  CHECK(report.find("3288096") != std::string::npos);
  CHECK(report.find("3472") != std::string::npos);
  CHECK(report.find("midstate-ed") != std::string::npos);
}
