#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pan/layers.hpp"
#include "pan/tensor.hpp"

namespace pan {

enum class ShapeKind { disk = 1, rectangle = 2, triangle = 3 };

/// Geometry of one rasterized shape, in pixel coordinates (pixel centers at +0.5).
struct ShapeDesc {
  ShapeKind kind = ShapeKind::disk;
  std::int32_t label = 1;
  double cx = 0, cy = 0, radius = 0;                  // disk
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;              // rectangle [x0,x1) x [y0,y1)
  double tx[3] = {0, 0, 0}, ty[3] = {0, 0, 0};        // triangle vertices
};

/// Coverage test used by the rasterizer: does the pixel center (px+0.5, py+0.5) lie inside?
bool shape_covers(const ShapeDesc& shape, std::int64_t px, std::int64_t py);

struct Sample {
  Tensor image;       // [3,H,W] in [0,1]
  IntTensor label;    // [H,W], values in [0,K) or kIgnoreIndex
  std::int64_t id = 0;
  std::vector<ShapeDesc> shapes;  // drawing order; empty for samples read from disk
};

struct DatasetSpec {
  std::int64_t num_classes = 4;  // background + up to three shape classes
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t min_shapes = 1;
  std::int64_t max_shapes = 3;
  double noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Sample `index` of the dataset; a pure function of (spec, index).
Sample generate_sample(const DatasetSpec& spec, std::int64_t index);
std::vector<Sample> generate_dataset(const DatasetSpec& spec, std::int64_t count);

/// Forced choices for augment(); unset fields are drawn from the rng.
struct AugmentOptions {
  std::optional<bool> flip;
  std::optional<double> scale;
  double min_scale = 0.5;
  double max_scale = 2.0;
  bool random_flip = true;
};

/// Random mirror (p=0.5), random scale in [min,max] (bilinear image, nearest label), then a
/// crop x crop window; short sides are padded with image 0 and label kIgnoreIndex.
Sample augment(const Sample& sample, std::int64_t crop, Rng& rng, const AugmentOptions& options = {});

Sample flip_sample(const Sample& sample);
/// Nearest-neighbour label resize with half-pixel centers.
IntTensor resize_labels_nearest(const IntTensor& label, std::int64_t out_h, std::int64_t out_w);

/// Stack [3,H,W] images into [N,3,H,W] and labels into [N,H,W].
Tensor stack_images(const std::vector<const Sample*>& batch);
IntTensor stack_labels(const std::vector<const Sample*>& batch);

// Binary PPM (P6) / PGM (P5), maxval 255.

/// Image floats are quantized round-half-up to 8 bits.
void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const IntTensor& mask);
IntTensor read_mask(const std::filesystem::path& path);

std::string encode_ppm(const Tensor& image);
Tensor decode_ppm(const std::string& bytes);
std::string encode_pgm(const IntTensor& mask);
IntTensor decode_pgm(const std::string& bytes);

struct ManifestEntry {
  std::int64_t index = 0;
  std::string image_path;
  std::string mask_path;
};

/// Lines of "index<TAB>image_path<TAB>mask_path"; paths are relative to the manifest's directory.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
/// Load every sample listed in a manifest.
std::vector<Sample> load_dataset(const std::filesystem::path& manifest);

}  // namespace pan
