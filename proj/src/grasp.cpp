#include "qfaap/grasp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <opencv2/imgproc.hpp>

namespace qfaap {
namespace {

using Polygon = std::vector<Point2>;

double signed_area(const Polygon& p) {
  double a = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Point2& u = p[i];
    const Point2& v = p[(i + 1) % p.size()];
    a += u.x * v.y - v.x * u.y;
  }
  return 0.5 * a;
}

Polygon ccw(const Rectangle& r) {
  Polygon p(r.begin(), r.end());
  if (signed_area(p) < 0) std::reverse(p.begin(), p.end());
  return p;
}

// Sutherland-Hodgman clip of `subject` against convex CCW `clip`.
Polygon clip_polygon(Polygon subject, const Polygon& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Point2 a = clip[e];
    const Point2 b = clip[(e + 1) % clip.size()];
    auto side = [&](const Point2& p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); };
    Polygon out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Point2 cur = subject[i];
      const Point2 nxt = subject[(i + 1) % subject.size()];
      const double sc = side(cur);
      const double sn = side(nxt);
      if (sc >= 0) out.push_back(cur);
      if ((sc >= 0) != (sn >= 0)) {
        const double t = sc / (sc - sn);
        out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

}  // namespace

double wrap_half_pi(double theta) {
  double t = std::fmod(theta + kPi / 2.0, kPi);
  if (t < 0) t += kPi;
  t -= kPi / 2.0;
  // fmod can land exactly on +pi/2 after rounding
  if (t >= kPi / 2.0) t -= kPi;
  return t;
}

void validate(const GraspCandidate2D& g) {
  if (!(g.w > 0) || !(g.h > 0)) throw InvalidInput("grasp extents must be positive");
  if (!(g.theta >= -kPi / 2.0 && g.theta < kPi / 2.0)) throw InvalidInput("grasp angle outside [-pi/2, pi/2)");
  if (!(g.quality >= 0.0 && g.quality <= 1.0)) throw InvalidInput("grasp quality outside [0, 1]");
  if (!std::isfinite(g.j) || !std::isfinite(g.k)) throw InvalidInput("grasp centre not finite");
}

Rectangle candidate_to_rectangle(const GraspCandidate2D& g) {
  const double ux = std::cos(g.theta), uy = -std::sin(g.theta);
  const double vx = -uy, vy = ux;
  const double hw = g.w / 2.0, hh = g.h / 2.0;
  return {Point2{g.j - hw * ux - hh * vx, g.k - hw * uy - hh * vy},
          Point2{g.j + hw * ux - hh * vx, g.k + hw * uy - hh * vy},
          Point2{g.j + hw * ux + hh * vx, g.k + hw * uy + hh * vy},
          Point2{g.j - hw * ux + hh * vx, g.k - hw * uy + hh * vy}};
}

GraspCandidate2D rectangle_to_candidate(const Rectangle& c) {
  GraspCandidate2D g;
  g.j = (c[0].x + c[1].x + c[2].x + c[3].x) / 4.0;
  g.k = (c[0].y + c[1].y + c[2].y + c[3].y) / 4.0;
  const double dx = c[1].x - c[0].x;
  const double dy = c[1].y - c[0].y;
  g.w = std::hypot(dx, dy);
  g.h = std::hypot(c[2].x - c[1].x, c[2].y - c[1].y);
  g.theta = wrap_half_pi(std::atan2(-dy, dx));
  g.quality = 1.0;
  return g;
}

bool pixel_in_box(const GraspCandidate2D& g, int row, int col, double width_fraction) {
  const double px = col + 0.5 - g.j;
  const double py = row + 0.5 - g.k;
  const double ux = std::cos(g.theta), uy = -std::sin(g.theta);
  const double along = px * ux + py * uy;
  const double across = -px * uy + py * ux;
  return std::abs(along) <= g.w * width_fraction / 2.0 && std::abs(across) <= g.h / 2.0;
}

GraspMaps rasterize_targets(const std::vector<GraspCandidate2D>& labels, int rows, int cols) {
  GraspMaps maps(rows, cols);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& g = labels[i];
    try {
      validate(g);
    } catch (const InvalidInput& e) {
      throw InvalidInput("label " + std::to_string(i) + ": " + e.what());
    }
    if (!(g.j >= 0 && g.j < cols && g.k >= 0 && g.k < rows)) {
      throw InvalidInput("label " + std::to_string(i) + " lies outside the " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " canvas");
    }
    const double reach = 0.5 * std::hypot(g.w, g.h) + 1.0;
    const int r0 = std::max(0, static_cast<int>(std::floor(g.k - reach)));
    const int r1 = std::min(rows - 1, static_cast<int>(std::ceil(g.k + reach)));
    const int c0 = std::max(0, static_cast<int>(std::floor(g.j - reach)));
    const int c1 = std::min(cols - 1, static_cast<int>(std::ceil(g.j + reach)));
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        if (!pixel_in_box(g, r, c, 1.0 / 3.0)) continue;
        maps.quality.at(r, c) = 1.0;
        maps.angle.at(r, c) = g.theta;
        maps.width.at(r, c) = g.w;
      }
    }
  }
  return maps;
}

Tensor gaussian_smooth(const Tensor& map, double sigma) {
  if (sigma <= 0) return map;
  Tensor out(1, map.rows(), map.cols());
  cv::Mat src(map.rows(), map.cols(), CV_64F, const_cast<double*>(map.data()));
  cv::Mat dst(out.rows(), out.cols(), CV_64F, out.data());
  cv::GaussianBlur(src, dst, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  return out;
}

std::optional<GraspCandidate2D> select_optimal_grasp(const GraspMaps& maps, const Mask* exclusion,
                                                     const SelectionConfig& cfg) {
  if (!maps.well_formed()) throw InvalidInput("grasp maps are not well formed");
  if (exclusion && !exclusion->matches(maps.quality)) throw InvalidInput("exclusion mask shape mismatch");
  const Tensor scored = gaussian_smooth(maps.quality, cfg.smooth_sigma);
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (exclusion && exclusion->flat(i)) continue;
    if (!best || scored.values()[i] > scored.values()[*best]) best = i;
  }
  if (!best) return std::nullopt;
  const int r = static_cast<int>(*best / maps.cols());
  const int c = static_cast<int>(*best % maps.cols());
  GraspCandidate2D g;
  g.j = c;
  g.k = r;
  g.w = std::max(maps.width.at(r, c), 1e-6);
  g.h = g.w / 2.0;
  g.theta = wrap_half_pi(maps.angle.at(r, c));
  g.quality = std::clamp(scored.values()[*best], 0.0, 1.0);
  return g;
}

double rotated_iou(const GraspCandidate2D& a, const GraspCandidate2D& b) {
  const Polygon pa = ccw(candidate_to_rectangle(a));
  const Polygon pb = ccw(candidate_to_rectangle(b));
  const double area_a = std::abs(signed_area(pa));
  const double area_b = std::abs(signed_area(pb));
  const Polygon inter = clip_polygon(pa, pb);
  const double ai = inter.size() < 3 ? 0.0 : std::abs(signed_area(inter));
  const double uni = area_a + area_b - ai;
  if (uni <= 0) return 0.0;
  return std::clamp(ai / uni, 0.0, 1.0);
}

double angle_difference(double a, double b) {
  double d = std::fmod(std::abs(a - b), kPi);
  if (d > kPi / 2.0) d = kPi - d;
  return d;
}

bool rectangle_match(const GraspCandidate2D& pred, const std::vector<GraspCandidate2D>& labels,
                     const RectMetricConfig& cfg) {
  for (const auto& label : labels) {
    if (angle_difference(pred.theta, label.theta) >= cfg.angle_threshold) continue;
    if (rotated_iou(pred, label) > cfg.iou_threshold) return true;
  }
  return false;
}

std::vector<GraspCandidate2D> read_grasp_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open grasp file " + path.string());
  std::vector<GraspCandidate2D> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    GraspCandidate2D g;
    double deg = 0;
    if (!(ss >> g.j >> g.k >> g.w >> g.h >> deg)) {
      throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": malformed grasp line");
    }
    g.theta = wrap_half_pi(deg * kPi / 180.0);
    g.quality = 1.0;
    validate(g);
    out.push_back(g);
  }
  return out;
}

void write_grasp_csv(const std::filesystem::path& path, const std::vector<GraspCandidate2D>& labels) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write grasp file " + path.string());
  out.precision(17);
  for (const auto& g : labels) {
    out << g.j << ',' << g.k << ',' << g.w << ',' << g.h << ',' << g.theta * 180.0 / kPi << '\n';
  }
}

}  // namespace qfaap
