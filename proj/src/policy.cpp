#include "qfaap/policy.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qfaap/io.hpp"

namespace qfaap {

void CameraIntrinsics::validate() const {
  if (!(fx > 0 && fy > 0) || !std::isfinite(fx) || !std::isfinite(fy)) throw InvalidInput("fx and fy must be > 0");
  if (!std::isfinite(cx) || !std::isfinite(cy)) throw InvalidInput("principal point must be finite");
}

HandEyeTransform::HandEyeTransform(const Eigen::Matrix4d& m) : m_(m) {
  if (!m.allFinite()) throw InvalidInput("hand-eye transform has non-finite entries");
  const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
    throw InvalidInput("hand-eye rotation is not orthonormal");
  }
  if (r.determinant() < 0) throw InvalidInput("hand-eye rotation has det -1");
  if (m(3, 0) != 0 || m(3, 1) != 0 || m(3, 2) != 0 || m(3, 3) != 1) {
    throw InvalidInput("hand-eye last row must be (0,0,0,1)");
  }
}

HandEyeTransform HandEyeTransform::from_row_major(const std::array<double, 16>& v) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = v[r * 4 + c];
  return HandEyeTransform(m);
}

Eigen::Vector3d HandEyeTransform::apply(const Eigen::Vector3d& p) const {
  return m_.topLeftCorner<3, 3>() * p + m_.topRightCorner<3, 1>();
}

HandEyeTransform HandEyeTransform::compose(const HandEyeTransform& inner) const {
  Eigen::Matrix4d m = m_ * inner.m_;
  m.row(3) << 0, 0, 0, 1;
  return HandEyeTransform(m);
}

void GripperProjection::validate() const {
  if (!(width_min <= width_max)) throw InvalidInput("gripper width_min must not exceed width_max");
  for (double v : {width_gain, width_offset, width_min, width_max, angle_sign, angle_offset, theta_x, theta_y})
    if (!std::isfinite(v)) throw InvalidInput("gripper projection has non-finite entries");
}

Tensor zero_hand_quality(const Tensor& quality, const Mask& mask, int dilate_px) {
  if (!mask.matches(quality)) throw InvalidInput("hand mask does not match the quality map");
  if (dilate_px < 0) throw InvalidInput("dilation must be >= 0");
  const Mask m = dilate_px > 0 ? mask.dilated(dilate_px) : mask;
  Tensor out = quality;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.flat(i)) out.values()[i] = 0.0;
  return out;
}

Eigen::Vector3d backproject(double u, double v, double d, const CameraIntrinsics& k) {
  k.validate();
  if (!(d > 0) || !std::isfinite(d)) throw InvalidInput("depth must be finite and > 0");
  return {(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d};
}

std::array<double, 2> project(const Eigen::Vector3d& p, const CameraIntrinsics& k) {
  k.validate();
  if (!(p.z() > 0)) throw InvalidInput("point behind the camera");
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

Eigen::Vector3d to_robot_frame(const Eigen::Vector3d& p_cam, const HandEyeTransform& t) { return t.apply(p_cam); }

std::array<double, 2> gripper_map(double w_px, double theta, const GripperProjection& p) {
  if (!(w_px >= 0)) throw InvalidInput("grasp width must be >= 0");
  const double w = std::clamp(p.width_gain * w_px + p.width_offset, p.width_min, p.width_max);
  return {w, p.angle_sign * theta + p.angle_offset};
}

double depth_at(const Tensor& depth, int row, int col) {
  if (row < 0 || col < 0 || row >= depth.rows() || col >= depth.cols()) throw InvalidInput("depth pixel out of range");
  auto valid = [](double d) { return std::isfinite(d) && d > 0; };
  const double d = depth.at(row, col);
  if (valid(d)) return d;
  std::vector<double> near;
  for (int r = row - 2; r <= row + 2; ++r)
    for (int c = col - 2; c <= col + 2; ++c)
      if (r >= 0 && c >= 0 && r < depth.rows() && c < depth.cols() && valid(depth.at(r, c))) {
        near.push_back(depth.at(r, c));
      }
  if (near.empty()) {
    throw InvalidInput("no valid depth within 5x5 of (" + std::to_string(row) + "," + std::to_string(col) + ")");
  }
  std::sort(near.begin(), near.end());
  const std::size_t n = near.size();
  return n % 2 ? near[n / 2] : 0.5 * (near[n / 2 - 1] + near[n / 2]);
}

PolicyResult run_policy(const Tensor& frame, const Tensor* depth, const Mask& mask, const Patch* patch,
                        const GraspModel& model, const PolicyConfig& cfg, const CalibrationBundle& calib) {
  if (!mask.matches(frame)) throw InvalidInput("hand mask does not match the frame");
  if (depth && !depth->same_extent(frame)) throw InvalidInput("depth does not match the frame");
  PolicyResult res;
  res.composed = patch ? compose_hand_patch(frame, *patch, mask) : frame;
  res.refined = pqgd_refine(model, res.composed, mask, cfg.pqgd);
  const HeadMaps heads = model.infer(res.refined);
  res.maps = decode(heads, model.width_scale());
  res.quality = res.maps.quality;
  res.quality_zeroed = zero_hand_quality(res.quality, mask, cfg.dilate_px);
  GraspMaps zeroed = res.maps;
  zeroed.quality = res.quality_zeroed;
  const Mask excluded = cfg.dilate_px > 0 ? mask.dilated(cfg.dilate_px) : mask;
  res.grasp = select_optimal_grasp(zeroed, &excluded, cfg.selection);
  if (res.grasp && depth) {
    const GraspCandidate2D& g = *res.grasp;
    const double d = depth_at(*depth, static_cast<int>(g.k), static_cast<int>(g.j));
    const Eigen::Vector3d p = to_robot_frame(backproject(g.j, g.k, d, calib.intrinsics), calib.hand_eye);
    const auto [w, th] = gripper_map(g.w, g.theta, calib.gripper);
    res.robot = RobotGrasp{p.x(), p.y(), p.z(), w, th, calib.gripper.theta_x, calib.gripper.theta_y};
  }
  return res;
}

std::optional<GraspCandidate2D> plain_grasp(const Tensor& frame, const GraspModel& model,
                                            const SelectionConfig& selection) {
  return select_optimal_grasp(model.predict(frame), nullptr, selection);
}

Mask adjacent_objects(const LabelImage& objects, const Mask& hand, int adjacency_px) {
  if (objects.rows != hand.rows() || objects.cols != hand.cols()) throw InvalidInput("object/hand shape mismatch");
  const Mask near = hand.dilated(adjacency_px);
  std::vector<bool> touching(256, false);
  for (std::size_t i = 0; i < near.size(); ++i)
    if (near.flat(i) && objects.ids[i] != 0) touching[objects.ids[i]] = true;
  Mask out(hand.rows(), hand.cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (touching[objects.ids[i]]) out.set_flat(i, true);
  return out;
}

bool avoids_hand(const std::optional<GraspCandidate2D>& g, const Mask& hand, const Mask& adjacent) {
  if (!g) return false;
  const int r = static_cast<int>(g->k), c = static_cast<int>(g->j);
  if (r < 0 || c < 0 || r >= hand.rows() || c >= hand.cols()) return false;
  return !hand(r, c) && !adjacent(r, c);
}

double eval_ndacc(const std::vector<NdScene>& scenes, const GraspPicker& pick) {
  if (scenes.empty()) throw InvalidInput("ND-ACC needs at least one scene");
  int ok = 0;
  for (const auto& s : scenes) {
    if (!s.record || !s.record->hand_mask) throw InvalidInput("ND-ACC scene without a hand mask");
    if (avoids_hand(pick(*s.record), *s.record->hand_mask, s.adjacent)) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(scenes.size());
}

// ---- JSON -----------------------------------------------------------------------

CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics k{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                     j.at("cy").get<double>()};
  k.validate();
  return k;
}

HandEyeTransform hand_eye_from_json(const nlohmann::json& j) {
  const nlohmann::json& m = j.is_object() ? j.at("T") : j;
  std::array<double, 16> v{};
  if (m.is_array() && m.size() == 4) {
    for (int r = 0; r < 4; ++r) {
      if (!m[r].is_array() || m[r].size() != 4) throw InvalidInput("hand-eye matrix must be 4x4");
      for (int c = 0; c < 4; ++c) v[r * 4 + c] = m[r][c].get<double>();
    }
  } else if (m.is_array() && m.size() == 16) {
    for (int i = 0; i < 16; ++i) v[i] = m[i].get<double>();
  } else {
    throw InvalidInput("hand-eye matrix must be 4x4 row-major");
  }
  return HandEyeTransform::from_row_major(v);
}

GripperProjection gripper_from_json(const nlohmann::json& j) {
  GripperProjection p;
  p.width_gain = j.value("width_gain", p.width_gain);
  p.width_offset = j.value("width_offset", p.width_offset);
  p.width_min = j.value("width_min", p.width_min);
  p.width_max = j.value("width_max", p.width_max);
  p.angle_sign = j.value("angle_sign", p.angle_sign);
  p.angle_offset = j.value("angle_offset", p.angle_offset);
  p.theta_x = j.value("theta_x", p.theta_x);
  p.theta_y = j.value("theta_y", p.theta_y);
  p.validate();
  return p;
}

CalibrationBundle load_calibration(const std::filesystem::path& intrinsics, const std::filesystem::path& hand_eye,
                                   const std::filesystem::path& gripper) {
  CalibrationBundle b;
  b.intrinsics = intrinsics_from_json(nlohmann::json::parse(read_file(intrinsics)));
  b.hand_eye = hand_eye_from_json(nlohmann::json::parse(read_file(hand_eye)));
  b.gripper = gripper_from_json(nlohmann::json::parse(read_file(gripper)));
  return b;
}

nlohmann::json grasp_to_json(const GraspCandidate2D& g, const RobotGrasp* robot, double safety_height_m) {
  nlohmann::json j{{"i", g.j}, {"j", g.k}, {"w_px", g.w}, {"h_px", g.h}, {"theta_rad", g.theta},
                   {"quality", g.quality}};
  if (robot) {
    j["I"] = robot->I;
    j["J"] = robot->J;
    j["Z"] = robot->Z;
    j["W"] = robot->W;
    j["Theta"] = robot->Theta;
    j["Theta_x"] = robot->Theta_x;
    j["Theta_y"] = robot->Theta_y;
    j["safety_height"] = safety_height_m;
  }
  return j;
}

}  // namespace qfaap
