#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "qfaap/aqp.hpp"
#include "qfaap/data.hpp"
#include "qfaap/grasp.hpp"
#include "qfaap/model.hpp"
#include "qfaap/pqgd.hpp"

namespace qfaap {

struct CameraIntrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 112.0;
  double cy = 112.0;

  void validate() const;
};

// Rigid camera -> end-effector transform. Construction checks R^T R = I
// (1e-9), det R = +1 and the (0,0,0,1) last row.
class HandEyeTransform {
 public:
  HandEyeTransform() : m_(Eigen::Matrix4d::Identity()) {}
  explicit HandEyeTransform(const Eigen::Matrix4d& m);
  static HandEyeTransform from_row_major(const std::array<double, 16>& v);

  const Eigen::Matrix4d& matrix() const { return m_; }
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const;
  HandEyeTransform compose(const HandEyeTransform& inner) const;  // this * inner

 private:
  Eigen::Matrix4d m_;
};

struct GripperProjection {
  double width_gain = 0.001;  // m per px
  double width_offset = 0.0;
  double width_min = 0.0;
  double width_max = 0.085;
  double angle_sign = 1.0;
  double angle_offset = 0.0;
  double theta_x = 0.0;
  double theta_y = 0.0;

  void validate() const;
};

struct RobotGrasp {
  double I = 0.0;
  double J = 0.0;
  double Z = 0.0;
  double W = 0.0;
  double Theta = 0.0;
  double Theta_x = 0.0;
  double Theta_y = 0.0;

  bool operator==(const RobotGrasp&) const = default;
};

struct CalibrationBundle {
  CameraIntrinsics intrinsics;
  HandEyeTransform hand_eye;
  GripperProjection gripper;
};

struct PolicyConfig {
  PqgdConfig pqgd{8.0 / 255.0, 0.008, 5};
  SelectionConfig selection{};
  int dilate_px = 0;
  double safety_height_m = 0.1;  // exported only
};

// Q (1 - M), with M optionally dilated by `dilate_px`.
Tensor zero_hand_quality(const Tensor& quality, const Mask& mask, int dilate_px = 0);

Eigen::Vector3d backproject(double u, double v, double depth_m, const CameraIntrinsics& k);
// Inverse of backproject: camera point -> (u, v).
std::array<double, 2> project(const Eigen::Vector3d& p, const CameraIntrinsics& k);
Eigen::Vector3d to_robot_frame(const Eigen::Vector3d& p_cam, const HandEyeTransform& t);
std::array<double, 2> gripper_map(double w_px, double theta, const GripperProjection& p);

// Depth at a pixel; invalid (<= 0 or non-finite) values fall back to the
// median of the valid entries in the 5x5 neighbourhood.
double depth_at(const Tensor& depth, int row, int col);

struct PolicyResult {
  std::optional<GraspCandidate2D> grasp;  // empty: no grasp
  std::optional<RobotGrasp> robot;
  Tensor composed;         // x'
  Tensor refined;          // x''
  Tensor quality;          // Q_t
  Tensor quality_zeroed;   // Q~_t^h
  GraspMaps maps;          // decoded maps of x''
};

// Compose -> PQGD -> forward -> zero hand -> argmax -> robot frame. A null
// patch skips composition; a null depth skips the robot transform.
PolicyResult run_policy(const Tensor& frame, const Tensor* depth, const Mask& mask, const Patch* patch,
                        const GraspModel& model, const PolicyConfig& cfg, const CalibrationBundle& calib);

// Plain model: forward + argmax, no hand handling.
std::optional<GraspCandidate2D> plain_grasp(const Tensor& frame, const GraspModel& model,
                                            const SelectionConfig& selection);

// Union of the instance masks of objects that come within `adjacency_px` of
// the hand.
Mask adjacent_objects(const LabelImage& objects, const Mask& hand, int adjacency_px);

// Grasp centre outside hand and adjacent objects; "no grasp" fails.
bool avoids_hand(const std::optional<GraspCandidate2D>& g, const Mask& hand, const Mask& adjacent);

struct NdScene {
  const DatasetRecord* record = nullptr;
  Mask adjacent;
};

using GraspPicker = std::function<std::optional<GraspCandidate2D>(const DatasetRecord&)>;

double eval_ndacc(const std::vector<NdScene>& scenes, const GraspPicker& pick);

// ---- JSON -----------------------------------------------------------------------

CameraIntrinsics intrinsics_from_json(const nlohmann::json& j);
HandEyeTransform hand_eye_from_json(const nlohmann::json& j);
GripperProjection gripper_from_json(const nlohmann::json& j);
CalibrationBundle load_calibration(const std::filesystem::path& intrinsics, const std::filesystem::path& hand_eye,
                                   const std::filesystem::path& gripper);
nlohmann::json grasp_to_json(const GraspCandidate2D& g, const RobotGrasp* robot, double safety_height_m);

}  // namespace qfaap
