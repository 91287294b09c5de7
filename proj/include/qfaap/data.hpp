#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qfaap/grasp.hpp"
#include "qfaap/tensor.hpp"

namespace qfaap {

// Per-pixel object instance ids; 0 is background, i >= 1 is object i.
struct LabelImage {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> ids;

  LabelImage() = default;
  LabelImage(int r, int c) : rows(r), cols(c), ids(static_cast<std::size_t>(r) * c, 0) {}
  std::uint8_t operator()(int r, int c) const { return ids[static_cast<std::size_t>(r) * cols + c]; }
  void set(int r, int c, std::uint8_t v) { ids[static_cast<std::size_t>(r) * cols + c] = v; }
  Mask mask_of(std::uint8_t id) const;
  int max_id() const;
};

struct DatasetRecord {
  std::string id;
  Tensor rgb;                  // 3 x H x W in [0,1]
  std::optional<Tensor> depth;  // 1 x H x W metres, 0 = invalid
  std::vector<GraspCandidate2D> labels;
  std::optional<Mask> hand_mask;
  std::optional<LabelImage> objects;
  int best_object = 0;  // instance id of the tagged best object, 0 if none

  int rows() const { return rgb.rows(); }
  int cols() const { return rgb.cols(); }
};

using Dataset = std::vector<DatasetRecord>;

// Throws InvalidInput if rasters disagree in size or values leave [0,1].
void check_alignment(const DatasetRecord& r);

// ---- Cornell ---------------------------------------------------------------

// Maps original image coordinates onto the square model canvas: a centred
// square crop followed by a uniform resize.
struct CropTransform {
  double x0 = 0.0;
  double y0 = 0.0;
  double scale = 1.0;

  static CropTransform centre_square(int rows, int cols, int output_size);
  GraspCandidate2D apply(const GraspCandidate2D& g) const;
  GraspCandidate2D inverse(const GraspCandidate2D& g) const;
};

struct CornellReport {
  int records = 0;
  int skipped_records = 0;
  int skipped_rectangles = 0;
};

// Parses a `cpos` file (four "x y" corner lines per grasp). Rectangles with
// non-finite or degenerate corners are skipped and counted.
std::vector<GraspCandidate2D> parse_cornell_rectangles(const std::filesystem::path& path, int* skipped = nullptr);

Dataset load_cornell(const std::filesystem::path& dir, int output_size, CornellReport* report = nullptr);

// Format stubs for the larger datasets; they validate the layout and refuse.
Dataset load_jacquard(const std::filesystem::path& dir, int output_size);
Dataset load_ocid(const std::filesystem::path& dir, int output_size);

// ---- Splitting and augmentation ----------------------------------------------

std::pair<Dataset, Dataset> split_imagewise(const Dataset& records, double train_fraction, std::uint64_t seed);

struct AugmentParams {
  double zoom = 1.0;     // in [0.5, 1.0]; centre crop of zoom*size resized back
  int quarter_turns = 0;  // counter-clockwise rotation by quarter_turns * pi/2
};

AugmentParams sample_augmentation(std::mt19937_64& rng);
GraspCandidate2D transform_label(const GraspCandidate2D& g, const AugmentParams& p, int rows, int cols);
// Applies `p` to every raster and label; labels whose centres leave the canvas
// are dropped.
DatasetRecord apply_augmentation(const DatasetRecord& record, const AugmentParams& p);
// Random augmentation; resamples up to 5 times if every label would be lost,
// then falls back to the unaugmented record.
DatasetRecord augment(const DatasetRecord& record, std::uint64_t seed);

// ---- Synthetic scenes ---------------------------------------------------------

enum class ShapeKind { Bar, TShape, Disc };
enum class HandPlacement { None, NearBestObject, Random };

struct SyntheticSceneSpec {
  int canvas = 224;
  int min_objects = 2;
  int max_objects = 4;
  std::vector<ShapeKind> shapes{ShapeKind::Bar, ShapeKind::TShape, ShapeKind::Disc};
  HandPlacement hand = HandPlacement::None;
  double max_hand_overlap = 0.3;  // of any object's area
  int adjacency_px = 20;
  double table_depth_m = 0.6;
  std::uint64_t seed = 0;
};

DatasetRecord gen_scene(const SyntheticSceneSpec& spec, int index);
Dataset gen_synthetic(const SyntheticSceneSpec& spec, int n_scenes);

// Distance in pixels from (row, col) to the nearest set pixel of `mask`
// (infinity for an empty mask).
double distance_to_mask(const Mask& mask, double row, double col);

// scenes/<id>/{rgb.png, depth.png, mask.png, objects.png, grasps.csv, meta.json}
void save_scene(const std::filesystem::path& scenes_dir, const DatasetRecord& record);
void save_synthetic(const std::filesystem::path& root, const Dataset& records);
DatasetRecord load_scene(const std::filesystem::path& scene_dir);
Dataset load_synthetic(const std::filesystem::path& root);

// ---- Raster I/O ---------------------------------------------------------------

Tensor read_rgb_png(const std::filesystem::path& path);
void write_rgb_png(const std::filesystem::path& path, const Tensor& rgb);
Mask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
// 16-bit millimetres <-> metres
Tensor read_depth_png(const std::filesystem::path& path);
void write_depth_png(const std::filesystem::path& path, const Tensor& depth_m);

}  // namespace qfaap
