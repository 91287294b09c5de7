#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include "qfaap/tensor.hpp"

namespace qfaap {

inline constexpr double kPi = 3.14159265358979323846;

// Rotated grasp box in image coordinates. (j, k) is the (column, row) of the
// center; w spans the gripper-closing axis at angle theta from horizontal
// (counter-clockwise as seen on screen); h is only used for drawing/IoU.
struct GraspCandidate2D {
  double j = 0.0;
  double k = 0.0;
  double w = 1.0;
  double h = 1.0;
  double theta = 0.0;
  double quality = 0.0;

  bool operator==(const GraspCandidate2D&) const = default;
};

struct Point2 {
  double x = 0.0;  // column
  double y = 0.0;  // row
};

using Rectangle = std::array<Point2, 4>;

// Wraps any angle into [-pi/2, pi/2).
double wrap_half_pi(double theta);

// Throws InvalidInput unless w, h > 0, theta is in [-pi/2, pi/2) and quality
// is in [0, 1].
void validate(const GraspCandidate2D& g);

// Corners in drawing order: p0->p1 runs along the width axis.
Rectangle candidate_to_rectangle(const GraspCandidate2D& g);
GraspCandidate2D rectangle_to_candidate(const Rectangle& corners);

// True when the pixel centre (r + 0.5, c + 0.5) lies inside the box.
bool pixel_in_box(const GraspCandidate2D& g, int row, int col, double width_fraction = 1.0);

struct GraspMaps {
  Tensor quality;
  Tensor angle;
  Tensor width;

  GraspMaps() = default;
  GraspMaps(int rows, int cols)
      : quality(1, rows, cols), angle(1, rows, cols), width(1, rows, cols) {}

  int rows() const { return quality.rows(); }
  int cols() const { return quality.cols(); }
  bool well_formed() const {
    return quality.channels() == 1 && quality.same_shape(angle) && quality.same_shape(width);
  }
};

struct RectMetricConfig {
  double iou_threshold = 0.25;
  double angle_threshold = kPi / 6.0;
};

struct SelectionConfig {
  double smooth_sigma = 2.0;
};

// Quality is 1 over the central third (along width) of each label, 0 elsewhere;
// angle/width carry the label values over the same pixels. Later labels win.
GraspMaps rasterize_targets(const std::vector<GraspCandidate2D>& labels, int rows, int cols);

// Argmax over non-excluded pixels, ties resolved by smallest row-major index.
// Returns nullopt when every pixel is excluded.
std::optional<GraspCandidate2D> select_optimal_grasp(const GraspMaps& maps, const Mask* exclusion,
                                                     const SelectionConfig& cfg = {});

Tensor gaussian_smooth(const Tensor& map, double sigma);

// Exact convex-polygon intersection over union.
double rotated_iou(const GraspCandidate2D& a, const GraspCandidate2D& b);

// Absolute angle difference modulo pi, folded into [0, pi/2].
double angle_difference(double a, double b);

bool rectangle_match(const GraspCandidate2D& pred, const std::vector<GraspCandidate2D>& labels,
                     const RectMetricConfig& cfg = {});

// Label CSV: `cx,cy,w,h,theta_deg` per line.
std::vector<GraspCandidate2D> read_grasp_csv(const std::filesystem::path& path);
void write_grasp_csv(const std::filesystem::path& path, const std::vector<GraspCandidate2D>& labels);

}  // namespace qfaap
