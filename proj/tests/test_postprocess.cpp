#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>

#include "doctest.h"
#include "msy/postprocess.hpp"

using namespace msy;

namespace {

// Independent suppression oracle: a detection survives iff no surviving
// earlier detection of the same class overlaps it beyond the threshold,
// resolved by memoized recursion over the sorted order.
std::vector<Detection> nms_reference(std::vector<Detection> dets, double thresh) {
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<int> survives(dets.size(), -1);
  std::function<bool(size_t)> alive = [&](size_t i) -> bool {
    if (survives[i] >= 0) return survives[i] != 0;
    for (size_t j = 0; j < i; ++j) {
      if (dets[j].class_id != dets[i].class_id) continue;
      if (iou(dets[j].bbox, dets[i].bbox) > thresh && alive(j)) {
        survives[i] = 0;
        return false;
      }
    }
    survives[i] = 1;
    return true;
  };
  std::vector<Detection> kept;
  for (size_t i = 0; i < dets.size(); ++i)
    if (alive(i)) kept.push_back(dets[i]);
  return kept;
}

bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score) return false;
    if (a[i].bbox.x1 != b[i].bbox.x1 || a[i].bbox.y2 != b[i].bbox.y2) return false;
  }
  return true;
}

std::vector<Detection> random_detections(Rng& rng, int count, int classes, double size) {
  std::vector<Detection> dets;
  for (int i = 0; i < count; ++i) {
    Detection d;
    const double x = rng.uniform(0, size - 20), y = rng.uniform(0, size - 20);
    d.bbox = {x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)};
    d.class_id = static_cast<int>(rng.uniform_int(0, classes));
    d.score = rng.uniform(0.05, 1.0);
    dets.push_back(d);
  }
  return dets;
}

}  // namespace

TEST_CASE("iou fixtures") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  CHECK(iou({0, 0, 1, 1}, {5, 5, 6, 6}) == doctest::Approx(0.0));
  CHECK(iou({1, 1, 1, 3}, {1, 1, 1, 3}) == doctest::Approx(0.0));  // zero-area
}

TEST_CASE("iou is symmetric on random boxes") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    auto mk = [&]() {
      const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
      return BBox{x, y, x + rng.uniform(1, 30), y + rng.uniform(1, 30)};
    };
    const BBox a = mk(), b = mk();
    CHECK(iou(a, b) == doctest::Approx(iou(b, a)));
    CHECK(iou(a, a) == doctest::Approx(1.0));
  }
}

TEST_CASE("decode: one-hot box logits become exact pixel distances") {
  const int reg_max = 16, nc = 2, size = 64;
  HeadOutputs<float> head;
  for (int s = 0; s < 3; ++s) {
    const int stride = 8 << s;
    const int64_t cells = size / stride;
    head.cls[s] = Tensor<float>::filled({1, nc, cells, cells}, -20.0f);
    head.box[s] = Tensor<float>::filled({1, 4 * reg_max, cells, cells}, 0.0f);
  }
  // one confident cell at scale 0, cell (4,4); all four sides one-hot at bin 3
  head.cls[0].at(0, 1, 4, 4) = 10.0f;
  for (int side = 0; side < 4; ++side) {
    for (int b = 0; b < reg_max; ++b)
      head.box[0].at(0, side * reg_max + b, 4, 4) = b == 3 ? 40.0f : -40.0f;
  }
  auto dets = decode<float>(head, reg_max, size, 0.25);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 1);
  // center (36, 36), all side distances 3*8 = 24px
  CHECK(dets[0].bbox.x1 == doctest::Approx(36 - 24));
  CHECK(dets[0].bbox.y1 == doctest::Approx(36 - 24));
  CHECK(dets[0].bbox.x2 == doctest::Approx(36 + 24));
  CHECK(dets[0].bbox.y2 == doctest::Approx(36 + 24));
}

TEST_CASE("decode: uniform box logits give the mean-bin distance") {
  const int reg_max = 16, size = 32;
  HeadOutputs<float> head;
  for (int s = 0; s < 3; ++s) {
    const int stride = 8 << s;
    const int64_t cells = size / stride;
    head.cls[s] = Tensor<float>::filled({1, 1, cells, cells}, -20.0f);
    head.box[s] = Tensor<float>::filled({1, 4 * reg_max, cells, cells}, 0.7f);
  }
  head.cls[2].at(0, 0, 0, 0) = 5.0f;  // stride 32, cell (0,0): center (16,16)
  auto dets = decode<float>(head, reg_max, size, 0.5);
  REQUIRE(dets.size() == 1);
  // expectation of uniform over bins 0..15 is 7.5; 7.5*32 = 240, clipped to image
  CHECK(dets[0].bbox.x1 == 0.0);
  CHECK(dets[0].bbox.x2 == 32.0);
}

TEST_CASE("decode matches a scalar reference decoder on random logits") {
  Rng rng(11);
  const int reg_max = 8, nc = 3, size = 32;
  HeadOutputs<float> head;
  for (int s = 0; s < 3; ++s) {
    const int stride = 8 << s;
    const int64_t cells = size / stride;
    auto rand_tensor = [&](Shape shp) {
      std::vector<float> v(static_cast<size_t>(shp.numel()));
      for (auto& x : v) x = static_cast<float>(rng.normal());
      return Tensor<float>::from(shp, std::move(v));
    };
    head.cls[s] = rand_tensor({1, nc, cells, cells});
    head.box[s] = rand_tensor({1, 4 * reg_max, cells, cells});
  }
  const double conf = 0.3;
  auto dets = decode<float>(head, reg_max, size, conf);

  // plain-arithmetic per-cell reference
  std::vector<Detection> ref;
  for (int s = 0; s < 3; ++s) {
    const int stride = 8 << s;
    const int64_t cells = size / stride;
    for (int64_t i = 0; i < cells; ++i)
      for (int64_t j = 0; j < cells; ++j) {
        int best = 0;
        for (int c = 1; c < nc; ++c)
          if (head.cls[s].at(0, c, i, j) > head.cls[s].at(0, best, i, j)) best = c;
        const double score = 1.0 / (1.0 + std::exp(-head.cls[s].at(0, best, i, j)));
        if (score < conf) continue;
        double d[4];
        for (int side = 0; side < 4; ++side) {
          double denom = 0, num = 0;
          for (int b = 0; b < reg_max; ++b) {
            const double e = std::exp(head.box[s].at(0, side * reg_max + b, i, j));
            denom += e;
            num += e * b;
          }
          d[side] = num / denom * stride;
        }
        Detection det;
        det.class_id = best;
        det.score = score;
        det.bbox = BBox{(j + 0.5) * stride - d[0], (i + 0.5) * stride - d[1],
                        (j + 0.5) * stride + d[2], (i + 0.5) * stride + d[3]}
                       .clipped(size, size);
        ref.push_back(det);
      }
  }
  std::sort(ref.begin(), ref.end(), detection_order);
  REQUIRE(dets.size() == ref.size());
  for (size_t i = 0; i < dets.size(); ++i) {
    CHECK(dets[i].class_id == ref[i].class_id);
    CHECK(std::fabs(dets[i].bbox.x1 - ref[i].bbox.x1) < 1e-5);
    CHECK(std::fabs(dets[i].bbox.y2 - ref[i].bbox.y2) < 1e-5);
    CHECK(std::fabs(dets[i].score - ref[i].score) < 1e-7);
  }
}

TEST_CASE("decode/encode round trip stays within half a stride") {
  Rng rng(97);
  const int reg_max = 16, size = 160;
  for (int trial = 0; trial < 40; ++trial) {
    // synthesize a box, encode it as one-hot head outputs at a random scale
    const int s = static_cast<int>(rng.uniform_int(0, 3));
    const int stride = 8 << s;
    const int64_t cells = size / stride;
    const int64_t ci = rng.uniform_int(1, cells - 1), cj = rng.uniform_int(1, cells - 1);
    const double cx = (cj + 0.5) * stride, cy = (ci + 0.5) * stride;
    double dist[4];
    for (auto& d : dist) d = rng.uniform(0.5, std::min(6.0, reg_max - 1.0)) * stride;
    const BBox want = BBox{cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]}
                          .clipped(size, size);

    HeadOutputs<float> head;
    for (int k = 0; k < 3; ++k) {
      const int64_t n = size / (8 << k);
      head.cls[k] = Tensor<float>::filled({1, 1, n, n}, -30.0f);
      head.box[k] = Tensor<float>::filled({1, 4 * reg_max, n, n}, -30.0f);
    }
    head.cls[s].at(0, 0, ci, cj) = 8.0f;
    for (int side = 0; side < 4; ++side) {
      const int bin = std::min<int>(reg_max - 1,
                                    static_cast<int>(std::lround(dist[side] / stride)));
      head.box[s].at(0, side * reg_max + bin, ci, cj) = 30.0f;
    }
    auto dets = decode<float>(head, reg_max, size, 0.5);
    REQUIRE(dets.size() == 1);
    CAPTURE(trial);
    CHECK(std::fabs(dets[0].bbox.x1 - want.x1) <= 0.5 * stride + 1e-3);
    CHECK(std::fabs(dets[0].bbox.y1 - want.y1) <= 0.5 * stride + 1e-3);
    CHECK(std::fabs(dets[0].bbox.x2 - want.x2) <= 0.5 * stride + 1e-3);
    CHECK(std::fabs(dets[0].bbox.y2 - want.y2) <= 0.5 * stride + 1e-3);
  }
}

TEST_CASE("decode rejects inconsistent shapes") {
  HeadOutputs<float> head;
  for (int s = 0; s < 3; ++s) {
    const int64_t cells = 64 / (8 << s);
    head.cls[s] = Tensor<float>::zeros({1, 2, cells, cells});
    head.box[s] = Tensor<float>::zeros({1, 4 * 16, cells, cells});
  }
  CHECK_THROWS_AS(decode<float>(head, 16, 128, 0.25), DimensionError);  // wrong image size
  head.box[1] = Tensor<float>::zeros({1, 4 * 8, 4, 4});                 // wrong reg_max channels
  CHECK_THROWS_AS(decode<float>(head, 16, 64, 0.25), DimensionError);
}

TEST_CASE("nms pairwise fixtures") {
  Detection hi{{0, 0, 10, 10}, 0, 0.9};
  Detection lo{{0, 2.4, 10, 12.4}, 0, 0.8};  // IoU = 7.6/12.4 ~ 0.61
  REQUIRE(iou(hi.bbox, lo.bbox) > 0.5);
  SUBCASE("same class suppresses") {
    auto kept = nms({lo, hi}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
  }
  SUBCASE("different classes both survive") {
    lo.class_id = 1;
    auto kept = nms({lo, hi}, 0.5);
    CHECK(kept.size() == 2);
  }
}

TEST_CASE("nms matches the reference implementation on 200 random boxes") {
  Rng rng(13);
  for (uint64_t trial = 0; trial < 20; ++trial) {
    auto dets = random_detections(rng, 200, 4, 100.0);
    auto a = nms(dets, 0.45);
    auto b = nms_reference(dets, 0.45);
    CHECK(same_detections(a, b));
    // idempotence and subset-with-order
    auto again = nms(a, 0.45);
    CHECK(same_detections(a, again));
    CHECK(a.size() <= dets.size());
    CHECK(std::is_sorted(a.begin(), a.end(), detection_order));
  }
}

TEST_CASE("nms is invariant to input permutation") {
  Rng rng(17);
  auto dets = random_detections(rng, 60, 3, 64.0);
  // force score ties to exercise the tie-break order
  for (size_t i = 0; i + 1 < dets.size(); i += 2) dets[i + 1].score = dets[i].score;
  auto base = nms(dets, 0.5);
  for (int trial = 0; trial < 5; ++trial) {
    for (size_t i = dets.size(); i > 1; --i)
      std::swap(dets[i - 1], dets[static_cast<size_t>(rng.uniform_int(0, i))]);
    CHECK(same_detections(nms(dets, 0.5), base));
  }
}

TEST_CASE("shopping list counts and prices") {
  Catalog catalog;
  catalog.add({3, "tea", 150, std::nullopt});
  catalog.add({7, "cocoa", 299, std::nullopt});
  std::vector<Detection> dets = {
      {{0, 0, 10, 10}, 3, 0.9}, {{20, 20, 30, 30}, 3, 0.9}, {{40, 40, 50, 50}, 7, 0.8}};
  auto receipt = build_shopping_list(dets, catalog, "img0", 0.25);
  REQUIRE(receipt.lines.size() == 2);
  CHECK(receipt.lines[0].class_id == 3);
  CHECK(receipt.lines[0].count == 2);
  CHECK(receipt.lines[0].line_total == 300);
  CHECK(receipt.lines[1].class_id == 7);
  CHECK(receipt.lines[1].line_total == 299);
  CHECK(receipt.total == 599);
}

TEST_CASE("empty detections give an empty receipt") {
  Catalog catalog;
  catalog.add({0, "x", 100, std::nullopt});
  auto receipt = build_shopping_list({}, catalog, "img1", 0.25);
  CHECK(receipt.lines.empty());
  CHECK(receipt.total == 0);
  CHECK(receipt.to_json().find("\"total\": 0") != std::string::npos);
}

TEST_CASE("per-class catalog threshold excludes low-score detections") {
  Catalog catalog;
  catalog.add({1, "fragile", 500, 0.95});
  std::vector<Detection> dets = {{{0, 0, 5, 5}, 1, 0.9}};
  auto receipt = build_shopping_list(dets, catalog, "img2", 0.25);
  CHECK(receipt.lines.empty());
  CHECK(receipt.total == 0);
}

TEST_CASE("unknown classes become flagged zero-price lines") {
  Catalog catalog;
  catalog.add({0, "known", 100, std::nullopt});
  std::vector<Detection> dets = {{{0, 0, 5, 5}, 42, 0.9}};
  auto receipt = build_shopping_list(dets, catalog, "img3", 0.25);
  REQUIRE(receipt.lines.size() == 1);
  CHECK(receipt.lines[0].flagged);
  CHECK(receipt.lines[0].unit_price == 0);
  CHECK(receipt.total == 0);
}

TEST_CASE("catalog csv parsing") {
  const auto dir = std::filesystem::temp_directory_path() / "msy_catalog";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "catalog.csv").string();
  {
    std::ofstream f(path);
    f << "class_id,name,unit_price_minor,threshold\n";
    f << "0,apple,120,\n";
    f << "1,soap,349,0.6\n";
  }
  auto catalog = Catalog::from_csv(path);
  REQUIRE(catalog.entries().size() == 2);
  CHECK_FALSE(catalog.find(0)->threshold.has_value());
  CHECK(catalog.find(1)->threshold.value() == doctest::Approx(0.6));
  {
    std::ofstream f(path);
    f << "class_id,name,unit_price_minor,threshold\n0,apple,-5,\n";
  }
  CHECK_THROWS_AS(Catalog::from_csv(path), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("annotate with no detections copies the image bytes") {
  auto img = ImageU8::filled(16, 16, 30, 40, 50);
  auto out = annotate(img, {});
  CHECK(out == img);
}

TEST_CASE("annotate touches exactly the box perimeter") {
  auto img = ImageU8::filled(32, 32, 10, 10, 10);
  std::vector<Detection> dets = {{{4, 5, 12, 14}, 0, 0.9}};
  auto out = annotate(img, dets, /*draw_labels=*/false);
  int changed = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const bool differs = std::memcmp(out.px(x, y), img.px(x, y), 3) != 0;
      const bool on_perimeter =
          (x >= 4 && x <= 12 && (y == 5 || y == 14)) || (y >= 5 && y <= 14 && (x == 4 || x == 12));
      CHECK(differs == on_perimeter);
      changed += differs;
    }
  CHECK(changed == 2 * (12 - 4 + 1) + 2 * (14 - 5 + 1) - 4);
}

TEST_CASE("annotate labels add pixels inside the box") {
  auto img = ImageU8::filled(32, 32, 10, 10, 10);
  std::vector<Detection> dets = {{{2, 2, 30, 30}, 1, 0.5}};
  auto plain = annotate(img, dets, false);
  auto labeled = annotate(img, dets, true);
  CHECK_FALSE(plain == labeled);
}

TEST_CASE("annotate clips boxes partially outside the image") {
  auto img = ImageU8::filled(16, 16, 0, 0, 0);
  std::vector<Detection> dets = {{{-5, -5, 40, 8}, 2, 0.7}};
  auto out = annotate(img, dets);  // must not crash or write out of bounds
  CHECK(out.w == 16);
  bool any = false;
  for (size_t i = 0; i < out.rgb.size(); ++i) any = any || out.rgb[i] != 0;
  CHECK(any);
}

TEST_CASE("ppm round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "msy_ppm";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "img.ppm").string();
  Rng rng(23);
  auto img = ImageU8::filled(9, 7, 0, 0, 0);
  for (auto& v : img.rgb) v = static_cast<uint8_t>(rng.uniform_int(0, 256));
  write_ppm(img, path);
  auto back = read_ppm(path);
  CHECK(back == img);
  std::filesystem::remove_all(dir);
}
