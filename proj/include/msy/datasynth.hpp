#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msy/image.hpp"
#include "msy/postprocess.hpp"

namespace msy {

// Procedurally textured product stand-in. Sprites for distinct classes are
// visually distinct by construction: the palette seed is derived from the
// class id and the shape family cycles through three silhouettes.
struct ProductSprite {
  int class_id = 0;
  uint64_t texture_seed = 0;
  int base_size = 0;     // pixels, before scale jitter
  int shape_family = 0;  // 0 disc, 1 box, 2 bottle silhouette
};

ProductSprite sprite_for_class(int class_id);

struct SceneSpec {
  int image_size = 160;
  int kmin = 1;
  int kmax = 4;
  double max_overlap = 0.3;  // pairwise cap: intersection / smaller box area
  uint64_t background_seed = 0;
};

struct ManifestImage {
  std::string id;     // zero-padded index, e.g. 000017
  std::string split;  // train / val / test
  int width = 0, height = 0;
  int object_count = 0;
};

struct DatasetManifest {
  int num_classes = 0;
  uint64_t seed = 0;
  std::string generator_version;
  SceneSpec scene;
  std::vector<ManifestImage> images;
  std::string notes;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
  void save(const std::string& dataset_root) const;
  static DatasetManifest load(const std::string& dataset_root);

  std::vector<const ManifestImage*> split_images(const std::string& split) const;
};

// Label file surface: one `class_id cx cy w h` line per object, all four
// values normalized to [0,1], six decimal places.
struct LabelBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
};

std::vector<LabelBox> read_labels(const std::string& path);
void write_labels(const std::string& path, const std::vector<LabelBox>& boxes);

LabelBox to_label(const BBox& box, int class_id, int image_w, int image_h);
BBox to_pixels(const LabelBox& label, int image_w, int image_h);

// Renders one sprite instance; the returned patch is cropped to the tight
// bounding box of its non-background pixels.
struct SpritePatch {
  int w = 0, h = 0;
  std::vector<uint8_t> rgb;   // 3*w*h
  std::vector<uint8_t> mask;  // w*h, 1 = sprite pixel
};
SpritePatch render_sprite(const ProductSprite& sprite, double scale, int rotation_quarters);

// Generates images and labels under root/{images,labels}/train and writes
// the manifest. Byte-deterministic for fixed (parameters, seed, version):
// every image derives its own stream from the pair (seed, image index).
DatasetManifest generate_dataset(const std::string& root, int n_images, int n_classes,
                                 const SceneSpec& scene, uint64_t seed);

// Seeded shuffle then contiguous train/val/test slicing (remainders stay in
// train); retags the manifest, moves the image/label files accordingly and
// rewrites the manifest on disk.
void split_dataset(const std::string& root, DatasetManifest& manifest, std::array<int, 3> ratios,
                   uint64_t seed);

// Convenience paths within the canonical layout.
std::string image_path(const std::string& root, const ManifestImage& img);
std::string label_path(const std::string& root, const ManifestImage& img);

}  // namespace msy
