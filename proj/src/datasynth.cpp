#include "msy/datasynth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace msy {

namespace {

constexpr const char* kGeneratorVersion = "1";
constexpr int kPlacementAttempts = 1000;

std::array<uint8_t, 3> sprite_palette(uint64_t texture_seed) {
  // reuse the well-separated class palette, darkened a little so sprites
  // never blend into the light counter background
  auto c = class_color(static_cast<int>(texture_seed % 4096));
  return {static_cast<uint8_t>(c[0] * 3 / 4), static_cast<uint8_t>(c[1] * 3 / 4),
          static_cast<uint8_t>(c[2] * 3 / 4)};
}

}  // namespace

ProductSprite sprite_for_class(int class_id) {
  ProductSprite s;
  s.class_id = class_id;
  s.texture_seed = Rng::mix(0x5eed50000ULL + static_cast<uint64_t>(class_id), 17);
  s.base_size = 20 + static_cast<int>(Rng::mix(s.texture_seed, 3) % 13);  // 20..32 px
  s.shape_family = class_id % 3;
  return s;
}

SpritePatch render_sprite(const ProductSprite& sprite, double scale, int rotation_quarters) {
  const int size = std::max(8, static_cast<int>(std::lround(sprite.base_size * scale)));
  std::vector<uint8_t> mask(static_cast<size_t>(size) * size, 0);
  std::vector<uint8_t> rgb(static_cast<size_t>(3) * size * size, 0);

  const auto base = sprite_palette(sprite.texture_seed);
  Rng rng(sprite.texture_seed);
  const int stripe = 3 + static_cast<int>(rng.next_u64() % 4);
  const bool stripes_vertical = rng.next_u64() % 2;
  const auto accent = sprite_palette(Rng::mix(sprite.texture_seed, 99));

  auto put = [&](int x, int y) {
    mask[static_cast<size_t>(y) * size + x] = 1;
    const bool on_stripe = ((stripes_vertical ? x : y) / stripe) % 2 == 0;
    const auto& c = on_stripe ? base : accent;
    uint8_t* p = rgb.data() + 3 * (static_cast<size_t>(y) * size + x);
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  };

  const double mid = (size - 1) / 2.0;
  if (sprite.shape_family == 0) {  // disc
    const double r = size / 2.0 - 0.5;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if ((x - mid) * (x - mid) + (y - mid) * (y - mid) <= r * r) put(x, y);
  } else if (sprite.shape_family == 1) {  // box
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) put(x, y);
  } else {  // bottle silhouette: narrow neck over a full-width body
    const int neck_top = 0, neck_bottom = size / 3;
    const int neck_left = size / 3, neck_right = size - size / 3;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const bool in_body = y >= neck_bottom;
        const bool in_neck = y >= neck_top && y < neck_bottom && x >= neck_left && x < neck_right;
        if (in_body || in_neck) put(x, y);
      }
  }

  // right-angle rotation keeps boxes axis-aligned and exact
  SpritePatch patch;
  for (int rot = 0; rot < (rotation_quarters % 4); ++rot) {
    std::vector<uint8_t> rmask(mask.size());
    std::vector<uint8_t> rrgb(rgb.size());
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const int nx = size - 1 - y, ny = x;  // 90 degrees clockwise
        rmask[static_cast<size_t>(ny) * size + nx] = mask[static_cast<size_t>(y) * size + x];
        std::copy_n(rgb.data() + 3 * (static_cast<size_t>(y) * size + x), 3,
                    rrgb.data() + 3 * (static_cast<size_t>(ny) * size + nx));
      }
    mask.swap(rmask);
    rgb.swap(rrgb);
  }

  // crop to the tight non-background bounding box
  int x1 = size, y1 = size, x2 = -1, y2 = -1;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (mask[static_cast<size_t>(y) * size + x]) {
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
  patch.w = x2 - x1 + 1;
  patch.h = y2 - y1 + 1;
  patch.rgb.resize(static_cast<size_t>(3) * patch.w * patch.h);
  patch.mask.resize(static_cast<size_t>(patch.w) * patch.h);
  for (int y = 0; y < patch.h; ++y)
    for (int x = 0; x < patch.w; ++x) {
      patch.mask[static_cast<size_t>(y) * patch.w + x] =
          mask[static_cast<size_t>(y + y1) * size + (x + x1)];
      std::copy_n(rgb.data() + 3 * (static_cast<size_t>(y + y1) * size + (x + x1)), 3,
                  patch.rgb.data() + 3 * (static_cast<size_t>(y) * patch.w + x));
    }
  return patch;
}

// ---- labels ----

std::vector<LabelBox> read_labels(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read labels " + path);
  std::vector<LabelBox> boxes;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    LabelBox box;
    std::istringstream row(line);
    if (!(row >> box.class_id >> box.cx >> box.cy >> box.w >> box.h))
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed label line");
    std::string extra;
    if (row >> extra)
      throw DataError(path + ":" + std::to_string(lineno) + ": trailing fields");
    const double eps = 1e-6;
    if (box.class_id < 0 || box.cx < -eps || box.cx > 1 + eps || box.cy < -eps ||
        box.cy > 1 + eps || box.w <= 0 || box.w > 1 + eps || box.h <= 0 || box.h > 1 + eps ||
        box.cx - box.w / 2 < -eps || box.cx + box.w / 2 > 1 + eps || box.cy - box.h / 2 < -eps ||
        box.cy + box.h / 2 > 1 + eps)
      throw DataError(path + ":" + std::to_string(lineno) + ": values out of range");
    boxes.push_back(box);
  }
  return boxes;
}

void write_labels(const std::string& path, const std::vector<LabelBox>& boxes) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write labels " + path);
  char line[128];
  for (const auto& b : boxes) {
    std::snprintf(line, sizeof(line), "%d %.6f %.6f %.6f %.6f\n", b.class_id, b.cx, b.cy, b.w,
                  b.h);
    f << line;
  }
}

LabelBox to_label(const BBox& box, int class_id, int image_w, int image_h) {
  LabelBox label;
  label.class_id = class_id;
  label.cx = (box.x1 + box.x2) / 2.0 / image_w;
  label.cy = (box.y1 + box.y2) / 2.0 / image_h;
  label.w = (box.x2 - box.x1) / image_w;
  label.h = (box.y2 - box.y1) / image_h;
  return label;
}

BBox to_pixels(const LabelBox& label, int image_w, int image_h) {
  return BBox{(label.cx - label.w / 2) * image_w, (label.cy - label.h / 2) * image_h,
              (label.cx + label.w / 2) * image_w, (label.cy + label.h / 2) * image_h};
}

// ---- manifest ----

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["num_classes"] = num_classes;
  j["seed"] = seed;
  j["generator_version"] = generator_version;
  j["scene"] = {{"image_size", scene.image_size}, {"kmin", scene.kmin},
                {"kmax", scene.kmax},           {"max_overlap", scene.max_overlap},
                {"background_seed", scene.background_seed}};
  j["notes"] = notes;
  j["images"] = nlohmann::json::array();
  for (const auto& img : images)
    j["images"].push_back({{"id", img.id},
                           {"split", img.split},
                           {"width", img.width},
                           {"height", img.height},
                           {"object_count", img.object_count}});
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  DatasetManifest m;
  try {
    auto j = nlohmann::json::parse(text);
    m.num_classes = j.at("num_classes").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    m.generator_version = j.at("generator_version").get<std::string>();
    m.scene.image_size = j.at("scene").at("image_size").get<int>();
    m.scene.kmin = j.at("scene").at("kmin").get<int>();
    m.scene.kmax = j.at("scene").at("kmax").get<int>();
    m.scene.max_overlap = j.at("scene").at("max_overlap").get<double>();
    m.scene.background_seed = j.at("scene").at("background_seed").get<uint64_t>();
    m.notes = j.value("notes", "");
    for (const auto& ji : j.at("images")) {
      ManifestImage img;
      img.id = ji.at("id").get<std::string>();
      img.split = ji.at("split").get<std::string>();
      img.width = ji.at("width").get<int>();
      img.height = ji.at("height").get<int>();
      img.object_count = ji.at("object_count").get<int>();
      m.images.push_back(std::move(img));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void DatasetManifest::save(const std::string& dataset_root) const {
  const std::string path = dataset_root + "/manifest.json";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << to_json() << "\n";
}

DatasetManifest DatasetManifest::load(const std::string& dataset_root) {
  const std::string path = dataset_root + "/manifest.json";
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path + " (not a dataset directory?)");
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

std::vector<const ManifestImage*> DatasetManifest::split_images(const std::string& split) const {
  std::vector<const ManifestImage*> out;
  for (const auto& img : images)
    if (img.split == split) out.push_back(&img);
  return out;
}

std::string image_path(const std::string& root, const ManifestImage& img) {
  return root + "/images/" + img.split + "/" + img.id + ".ppm";
}

std::string label_path(const std::string& root, const ManifestImage& img) {
  return root + "/labels/" + img.split + "/" + img.id + ".txt";
}

// ---- generation ----

DatasetManifest generate_dataset(const std::string& root, int n_images, int n_classes,
                                 const SceneSpec& scene, uint64_t seed) {
  if (n_images < 1 || n_classes < 1)
    throw DataError("generate_dataset needs at least one image and one class");
  if (scene.kmin < 1 || scene.kmax < scene.kmin)
    throw DataError("bad item count range");
  if (scene.max_overlap < 0 || scene.max_overlap >= 1)
    throw DataError("max_overlap must be in [0,1)");

  for (const char* split : {"train", "val", "test"}) {
    fs::create_directories(fs::path(root) / "images" / split);
    fs::create_directories(fs::path(root) / "labels" / split);
  }

  DatasetManifest manifest;
  manifest.num_classes = n_classes;
  manifest.seed = seed;
  manifest.generator_version = kGeneratorVersion;
  manifest.scene = scene;
  manifest.notes =
      "synthetic checkout configurations; evaluation numbers on this data are "
      "not comparable to results on real retail imagery; split is an "
      "unstratified seeded shuffle";

  const int size = scene.image_size;
  for (int index = 0; index < n_images; ++index) {
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(index)));

    // counter-style background: light gray with mild seeded speckle
    ImageU8 img = ImageU8::filled(size, size, 0, 0, 0);
    Rng bg(Rng::mix(scene.background_seed, Rng::mix(seed, static_cast<uint64_t>(index))));
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const int v = 196 + static_cast<int>(bg.next_u64() % 12);
        uint8_t* p = img.px(x, y);
        p[0] = static_cast<uint8_t>(v);
        p[1] = static_cast<uint8_t>(v);
        p[2] = static_cast<uint8_t>(v + 4);
      }

    const int k = static_cast<int>(rng.uniform_int(scene.kmin, scene.kmax + 1));
    std::vector<LabelBox> labels;
    std::vector<BBox> placed;
    for (int item = 0; item < k; ++item) {
      const int class_id = static_cast<int>(rng.uniform_int(0, n_classes));
      const double scale = rng.uniform(0.8, 1.2);
      const int rotation = static_cast<int>(rng.uniform_int(0, 4));
      const SpritePatch patch = render_sprite(sprite_for_class(class_id), scale, rotation);
      if (patch.w >= size || patch.h >= size) continue;

      bool placed_ok = false;
      for (int attempt = 0; attempt < kPlacementAttempts && !placed_ok; ++attempt) {
        const int x = static_cast<int>(rng.uniform_int(0, size - patch.w));
        const int y = static_cast<int>(rng.uniform_int(0, size - patch.h));
        const BBox candidate{static_cast<double>(x), static_cast<double>(y),
                             static_cast<double>(x + patch.w), static_cast<double>(y + patch.h)};
        bool ok = true;
        for (const auto& other : placed) {
          const double ix = std::min(candidate.x2, other.x2) - std::max(candidate.x1, other.x1);
          const double iy = std::min(candidate.y2, other.y2) - std::max(candidate.y1, other.y1);
          const double inter = std::max(0.0, ix) * std::max(0.0, iy);
          const double smaller = std::min(candidate.area(), other.area());
          if (inter > scene.max_overlap * smaller) {
            ok = false;
            break;
          }
        }
        if (!ok) continue;
        // blit masked pixels
        for (int py = 0; py < patch.h; ++py)
          for (int px_ = 0; px_ < patch.w; ++px_)
            if (patch.mask[static_cast<size_t>(py) * patch.w + px_])
              std::copy_n(patch.rgb.data() + 3 * (static_cast<size_t>(py) * patch.w + px_), 3,
                          img.px(x + px_, y + py));
        placed.push_back(candidate);
        labels.push_back(to_label(candidate, class_id, size, size));
        placed_ok = true;
      }
      if (!placed_ok)
        std::fprintf(stderr, "gen-data: image %d: dropped an item after %d placement attempts\n",
                     index, kPlacementAttempts);
    }

    char id[16];
    std::snprintf(id, sizeof(id), "%06d", index);
    ManifestImage entry;
    entry.id = id;
    entry.split = "train";
    entry.width = size;
    entry.height = size;
    entry.object_count = static_cast<int>(labels.size());
    write_ppm(img, image_path(root, entry));
    write_labels(label_path(root, entry), labels);
    manifest.images.push_back(std::move(entry));
  }
  manifest.save(root);
  return manifest;
}

void split_dataset(const std::string& root, DatasetManifest& manifest, std::array<int, 3> ratios,
                   uint64_t seed) {
  if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0)
    throw DataError("split ratios must be positive");
  const int64_t n = static_cast<int64_t>(manifest.images.size());
  if (n < 3) throw DataError("fewer images than splits");

  std::vector<size_t> order(manifest.images.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)))]);

  const int64_t total = ratios[0] + ratios[1] + ratios[2];
  const int64_t n_val = n * ratios[1] / total;
  const int64_t n_test = n * ratios[2] / total;
  const int64_t n_train = n - n_val - n_test;  // remainders stay in train

  std::vector<std::pair<std::string, std::string>> moves;  // old path -> new path
  for (int64_t rank = 0; rank < n; ++rank) {
    auto& img = manifest.images[order[static_cast<size_t>(rank)]];
    const std::string new_split = rank < n_train ? "train" : rank < n_train + n_val ? "val" : "test";
    if (img.split == new_split) continue;
    ManifestImage moved = img;
    moved.split = new_split;
    moves.push_back({image_path(root, img), image_path(root, moved)});
    moves.push_back({label_path(root, img), label_path(root, moved)});
    img.split = new_split;
  }
  for (const auto& [from, to] : moves) {
    std::error_code ec;
    fs::rename(from, to, ec);
    if (ec) throw DataError("split: cannot move " + from + " to " + to + ": " + ec.message());
  }
  manifest.save(root);
}

}  // namespace msy
