#include "qfaap/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "qfaap/io.hpp"

namespace qfaap {
namespace fs = std::filesystem;
using nlohmann::json;

// ---- LabelImage / alignment ----------------------------------------------------

Mask LabelImage::mask_of(std::uint8_t id) const {
  Mask m(rows, cols);
  for (std::size_t i = 0; i < ids.size(); ++i) m.set_flat(i, ids[i] == id);
  return m;
}

int LabelImage::max_id() const { return ids.empty() ? 0 : *std::max_element(ids.begin(), ids.end()); }

void check_alignment(const DatasetRecord& r) {
  if (r.rgb.channels() != 3) throw InvalidInput(r.id + ": rgb must have 3 channels");
  for (double v : r.rgb.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput(r.id + ": rgb values outside [0,1]");
  }
  if (r.depth && !r.depth->same_extent(r.rgb)) throw InvalidInput(r.id + ": depth size mismatch");
  if (r.hand_mask && !r.hand_mask->matches(r.rgb)) throw InvalidInput(r.id + ": hand mask size mismatch");
  if (r.objects && (r.objects->rows != r.rows() || r.objects->cols != r.cols())) {
    throw InvalidInput(r.id + ": object map size mismatch");
  }
}

// ---- Raster I/O ---------------------------------------------------------------

namespace {

std::vector<std::uint8_t> encode_png(const cv::Mat& m) {
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", m, buf, {cv::IMWRITE_PNG_COMPRESSION, 6})) throw InvalidInput("PNG encoding failed");
  return buf;
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

Tensor read_rgb_png(const fs::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw InvalidInput("cannot read image " + path.string());
  Tensor t(3, m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      const auto& px = m.at<cv::Vec3b>(r, c);
      for (int ch = 0; ch < 3; ++ch) t(ch, r, c) = px[2 - ch] / 255.0;
    }
  }
  return t;
}

void write_rgb_png(const fs::path& path, const Tensor& rgb) {
  if (rgb.channels() != 3) throw InvalidInput("write_rgb_png expects 3 channels");
  cv::Mat m(rgb.rows(), rgb.cols(), CV_8UC3);
  for (int r = 0; r < rgb.rows(); ++r)
    for (int c = 0; c < rgb.cols(); ++c)
      m.at<cv::Vec3b>(r, c) = cv::Vec3b(to_u8(rgb(2, r, c)), to_u8(rgb(1, r, c)), to_u8(rgb(0, r, c)));
  write_file_atomic(path, encode_png(m));
}

Mask read_mask_png(const fs::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw InvalidInput("cannot read mask " + path.string());
  Mask out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out.set(r, c, m.at<std::uint8_t>(r, c) >= 128);
  return out;
}

void write_mask_png(const fs::path& path, const Mask& mask) {
  cv::Mat m(mask.rows(), mask.cols(), CV_8UC1);
  for (int r = 0; r < mask.rows(); ++r)
    for (int c = 0; c < mask.cols(); ++c) m.at<std::uint8_t>(r, c) = mask(r, c) ? 255 : 0;
  write_file_atomic(path, encode_png(m));
}

Tensor read_depth_png(const fs::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_ANYDEPTH);
  if (m.empty() || m.type() != CV_16UC1) throw InvalidInput("cannot read 16-bit depth " + path.string());
  Tensor t(1, m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) t.at(r, c) = m.at<std::uint16_t>(r, c) / 1000.0;
  return t;
}

void write_depth_png(const fs::path& path, const Tensor& depth_m) {
  cv::Mat m(depth_m.rows(), depth_m.cols(), CV_16UC1);
  for (int r = 0; r < depth_m.rows(); ++r) {
    for (int c = 0; c < depth_m.cols(); ++c) {
      const double mm = std::isfinite(depth_m.at(r, c)) ? depth_m.at(r, c) * 1000.0 : 0.0;
      m.at<std::uint16_t>(r, c) = static_cast<std::uint16_t>(std::clamp(std::lround(mm), 0L, 65535L));
    }
  }
  write_file_atomic(path, encode_png(m));
}

// ---- Cornell ---------------------------------------------------------------

CropTransform CropTransform::centre_square(int rows, int cols, int output_size) {
  const int side = std::min(rows, cols);
  return {(cols - side) / 2.0, (rows - side) / 2.0, static_cast<double>(output_size) / side};
}

GraspCandidate2D CropTransform::apply(const GraspCandidate2D& g) const {
  GraspCandidate2D o = g;
  o.j = (g.j - x0) * scale;
  o.k = (g.k - y0) * scale;
  o.w = g.w * scale;
  o.h = g.h * scale;
  return o;
}

GraspCandidate2D CropTransform::inverse(const GraspCandidate2D& g) const {
  GraspCandidate2D o = g;
  o.j = g.j / scale + x0;
  o.k = g.k / scale + y0;
  o.w = g.w / scale;
  o.h = g.h / scale;
  return o;
}

std::vector<GraspCandidate2D> parse_cornell_rectangles(const fs::path& path, int* skipped) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::vector<Point2> pts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::string xs, ys;
    ss >> xs >> ys;
    Point2 p{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    try {
      p = {std::stod(xs), std::stod(ys)};
    } catch (const std::exception&) {
    }
    pts.push_back(p);
  }
  std::vector<GraspCandidate2D> out;
  int bad = 0;
  for (std::size_t i = 0; i + 3 < pts.size(); i += 4) {
    const Rectangle r{pts[i], pts[i + 1], pts[i + 2], pts[i + 3]};
    bool finite = true;
    for (const auto& p : r) finite = finite && std::isfinite(p.x) && std::isfinite(p.y);
    if (!finite) {
      ++bad;
      continue;
    }
    const GraspCandidate2D g = rectangle_to_candidate(r);
    if (!(g.w > 0.5) || !(g.h > 0.5)) {
      ++bad;
      continue;
    }
    out.push_back(g);
  }
  if (pts.size() % 4 != 0) ++bad;
  if (skipped) *skipped += bad;
  return out;
}

namespace {

// Depth from a Cornell ASCII PCD file: the last field of each point is the
// flat pixel index into the 640x480 image.
Tensor depth_from_pcd(const fs::path& path, int rows, int cols) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("DATA", 0) == 0) break;
  }
  Tensor depth(1, rows, cols, 0.0);
  std::vector<double> zs;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    double x, y, z, rgb, idx;
    if (!(ss >> x >> y >> z >> rgb >> idx)) continue;
    const long i = std::lround(idx);
    if (i < 0 || i >= static_cast<long>(rows) * cols || !std::isfinite(z)) continue;
    depth.values()[i] = z;
    zs.push_back(z);
  }
  if (!zs.empty()) {
    std::nth_element(zs.begin(), zs.begin() + zs.size() / 2, zs.end());
    if (zs[zs.size() / 2] > 10.0) {
      for (double& v : depth.values()) v /= 1000.0;
    }
  }
  return depth;
}

cv::Mat tensor_to_mat(const Tensor& t) {
  std::vector<cv::Mat> planes;
  for (int c = 0; c < t.channels(); ++c) {
    planes.emplace_back(t.rows(), t.cols(), CV_64F, const_cast<double*>(t.plane(c).data()));
  }
  cv::Mat out;
  cv::merge(planes, out);
  return out;
}

Tensor mat_to_tensor(const cv::Mat& m) {
  std::vector<cv::Mat> planes;
  cv::split(m, planes);
  Tensor t(static_cast<int>(planes.size()), m.rows, m.cols);
  for (int c = 0; c < t.channels(); ++c)
    for (int r = 0; r < m.rows; ++r)
      for (int k = 0; k < m.cols; ++k) t(c, r, k) = planes[c].at<double>(r, k);
  return t;
}

Tensor crop_resize(const Tensor& t, const CropTransform& ct, int size, int interp) {
  const int side = static_cast<int>(std::lround(size / ct.scale));
  const cv::Mat full = tensor_to_mat(t);
  const cv::Mat roi = full(cv::Rect(static_cast<int>(ct.x0), static_cast<int>(ct.y0), side, side));
  cv::Mat out;
  cv::resize(roi, out, cv::Size(size, size), 0, 0, interp);
  return mat_to_tensor(out);
}

}  // namespace

Dataset load_cornell(const fs::path& dir, int output_size, CornellReport* report) {
  if (!fs::is_directory(dir)) throw InvalidInput("Cornell directory not found: " + dir.string());
  std::vector<fs::path> images;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("pcd", 0) == 0 && name.size() > 5 &&
        name.compare(name.size() - 5, 5, "r.png") == 0) {
      images.push_back(e.path());
    }
  }
  std::sort(images.begin(), images.end());
  CornellReport rep;
  Dataset out;
  for (const auto& img : images) {
    const std::string stem = img.filename().string().substr(0, img.filename().string().size() - 5);
    const fs::path cpos = img.parent_path() / (stem + "cpos.txt");
    if (!fs::exists(cpos)) {
      ++rep.skipped_records;
      continue;
    }
    DatasetRecord rec;
    rec.id = stem;
    Tensor rgb;
    try {
      rgb = read_rgb_png(img);
    } catch (const InvalidInput&) {
      ++rep.skipped_records;
      continue;
    }
    const CropTransform ct = CropTransform::centre_square(rgb.rows(), rgb.cols(), output_size);
    rec.rgb = crop_resize(rgb, ct, output_size, cv::INTER_AREA);
    for (double& v : rec.rgb.values()) v = std::clamp(v, 0.0, 1.0);
    const fs::path tiff = img.parent_path() / (stem + "d.tiff");
    const fs::path pcd = img.parent_path() / (stem + ".txt");
    if (fs::exists(tiff)) {
      cv::Mat d = cv::imread(tiff.string(), cv::IMREAD_ANYDEPTH);
      if (!d.empty()) {
        d.convertTo(d, CV_64F);
        rec.depth = crop_resize(mat_to_tensor(d), ct, output_size, cv::INTER_NEAREST);
      }
    } else if (fs::exists(pcd)) {
      rec.depth = crop_resize(depth_from_pcd(pcd, rgb.rows(), rgb.cols()), ct, output_size, cv::INTER_NEAREST);
    }
    int bad = 0;
    for (const auto& g : parse_cornell_rectangles(cpos, &bad)) {
      const GraspCandidate2D t = ct.apply(g);
      if (t.j >= 0 && t.j < output_size && t.k >= 0 && t.k < output_size) rec.labels.push_back(t);
    }
    rep.skipped_rectangles += bad;
    if (rec.labels.empty()) {
      ++rep.skipped_records;
      continue;
    }
    out.push_back(std::move(rec));
  }
  rep.records = static_cast<int>(out.size());
  if (report) *report = rep;
  if (out.empty()) throw InvalidInput("no Cornell records found under " + dir.string());
  return out;
}

Dataset load_jacquard(const fs::path& dir, int) {
  if (!fs::is_directory(dir)) throw InvalidInput("Jacquard directory not found: " + dir.string());
  throw InvalidInput("Jacquard ingestion is not supported in this build; convert to the synthetic scene layout");
}

Dataset load_ocid(const fs::path& dir, int) {
  if (!fs::is_directory(dir)) throw InvalidInput("OCID directory not found: " + dir.string());
  throw InvalidInput("OCID ingestion is not supported in this build; convert to the synthetic scene layout");
}

// ---- Splitting and augmentation ----------------------------------------------

std::pair<Dataset, Dataset> split_imagewise(const Dataset& records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidInput("train fraction must lie in (0,1)");
  if (records.size() < 2) throw InvalidInput("splitting needs at least 2 records");
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(records.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, records.size() - 1);
  std::pair<Dataset, Dataset> out;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? out.first : out.second).push_back(records[idx[i]]);
  return out;
}

AugmentParams sample_augmentation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> zoom(0.5, 1.0);
  std::uniform_int_distribution<int> turns(0, 3);
  AugmentParams p;
  p.zoom = zoom(rng);
  p.quarter_turns = turns(rng);
  return p;
}

namespace {

Point2 rotate_point(Point2 p, int turns, int rows, int cols) {
  // counter-clockwise quarter turns on a y-down raster
  for (int t = 0; t < turns; ++t) {
    p = {p.y, static_cast<double>(cols) - p.x};
    std::swap(rows, cols);
  }
  return p;
}

Point2 unrotate_point(Point2 p, int turns, int rows, int cols) {
  // inverse of rotate_point; (rows, cols) are the dimensions after rotation
  for (int t = 0; t < turns; ++t) {
    p = {static_cast<double>(rows) - p.y, p.x};
    std::swap(rows, cols);
  }
  return p;
}

// Source position (continuous coordinates) of output pixel centre (r, c).
Point2 source_of(int r, int c, const AugmentParams& p, int src_rows, int src_cols, int out_rows, int out_cols) {
  const Point2 unrot = unrotate_point({c + 0.5, r + 0.5}, p.quarter_turns, out_rows, out_cols);
  const double cx = src_cols / 2.0, cy = src_rows / 2.0;
  return {(unrot.x - cx) * p.zoom + cx, (unrot.y - cy) * p.zoom + cy};
}

double sample_bilinear(const Tensor& t, int ch, double x, double y) {
  // pixel centres sit at integer + 0.5
  const double fx = std::clamp(x - 0.5, 0.0, t.cols() - 1.0);
  const double fy = std::clamp(y - 0.5, 0.0, t.rows() - 1.0);
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  const int x1 = std::min(x0 + 1, t.cols() - 1), y1 = std::min(y0 + 1, t.rows() - 1);
  const double ax = fx - x0, ay = fy - y0;
  return (1 - ay) * ((1 - ax) * t(ch, y0, x0) + ax * t(ch, y0, x1)) + ay * ((1 - ax) * t(ch, y1, x0) + ax * t(ch, y1, x1));
}

std::pair<int, int> nearest(double x, double y, int rows, int cols) {
  return {std::clamp(static_cast<int>(std::floor(y)), 0, rows - 1), std::clamp(static_cast<int>(std::floor(x)), 0, cols - 1)};
}

}  // namespace

GraspCandidate2D transform_label(const GraspCandidate2D& g, const AugmentParams& p, int rows, int cols) {
  const double cx = cols / 2.0, cy = rows / 2.0;
  GraspCandidate2D o = g;
  const Point2 z{(g.j - cx) / p.zoom + cx, (g.k - cy) / p.zoom + cy};
  const Point2 r = rotate_point(z, p.quarter_turns, rows, cols);
  o.j = r.x;
  o.k = r.y;
  o.w = g.w / p.zoom;
  o.h = g.h / p.zoom;
  o.theta = wrap_half_pi(g.theta + p.quarter_turns * kPi / 2.0);
  return o;
}

DatasetRecord apply_augmentation(const DatasetRecord& record, const AugmentParams& p) {
  if (!(p.zoom >= 0.5 && p.zoom <= 1.0)) throw InvalidInput("zoom must lie in [0.5, 1]");
  if (p.quarter_turns < 0 || p.quarter_turns > 3) throw InvalidInput("quarter turns must lie in [0, 3]");
  if (p.zoom == 1.0 && p.quarter_turns == 0) return record;
  const int rows = record.rows(), cols = record.cols();
  const bool odd = p.quarter_turns % 2 == 1;
  const int orows = odd ? cols : rows, ocols = odd ? rows : cols;
  DatasetRecord out;
  out.id = record.id;
  out.best_object = record.best_object;
  out.rgb = Tensor(3, orows, ocols);
  if (record.depth) out.depth = Tensor(1, orows, ocols);
  if (record.hand_mask) out.hand_mask = Mask(orows, ocols);
  if (record.objects) out.objects = LabelImage(orows, ocols);
  for (int r = 0; r < orows; ++r) {
    for (int c = 0; c < ocols; ++c) {
      const Point2 s = source_of(r, c, p, rows, cols, orows, ocols);
      for (int ch = 0; ch < 3; ++ch) out.rgb(ch, r, c) = sample_bilinear(record.rgb, ch, s.x, s.y);
      const auto [nr, nc] = nearest(s.x, s.y, rows, cols);
      if (record.depth) out.depth->at(r, c) = record.depth->at(nr, nc);
      if (record.hand_mask) out.hand_mask->set(r, c, (*record.hand_mask)(nr, nc));
      if (record.objects) out.objects->set(r, c, (*record.objects)(nr, nc));
    }
  }
  for (const auto& g : record.labels) {
    const GraspCandidate2D t = transform_label(g, p, rows, cols);
    if (t.j >= 0 && t.j < ocols && t.k >= 0 && t.k < orows) out.labels.push_back(t);
  }
  return out;
}

DatasetRecord augment(const DatasetRecord& record, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < 6; ++attempt) {
    const AugmentParams p = sample_augmentation(rng);
    DatasetRecord out = apply_augmentation(record, p);
    if (!out.labels.empty() || record.labels.empty()) return out;
  }
  return record;
}

// ---- Synthetic scenes ---------------------------------------------------------

double distance_to_mask(const Mask& mask, double row, double col) {
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < mask.rows(); ++r) {
    for (int c = 0; c < mask.cols(); ++c) {
      if (!mask(r, c)) continue;
      best = std::min(best, std::hypot(r - row, c - col));
    }
  }
  return best;
}

namespace {

struct Capsule {
  double ax, ay, bx, by, radius;
};

double segment_distance(double px, double py, const Capsule& s) {
  const double dx = s.bx - s.ax, dy = s.by - s.ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.ax) * dx + (py - s.ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (s.ax + t * dx), py - (s.ay + t * dy));
}

// Oriented rectangle centred at (cx, cy), long side `length` along angle phi.
struct Bar {
  double cx, cy, length, thickness, phi;
  bool contains(double x, double y) const {
    const double ux = std::cos(phi), uy = -std::sin(phi);
    const double dx = x - cx, dy = y - cy;
    return std::abs(dx * ux + dy * uy) <= length / 2 && std::abs(-dx * uy + dy * ux) <= thickness / 2;
  }
};

struct ObjectShape {
  ShapeKind kind;
  std::vector<Bar> bars;
  double disc_cx = 0, disc_cy = 0, disc_r = 0;
  double cx = 0, cy = 0, extent = 0;
  double height_m = 0.03;
  double color[3] = {0, 0, 0};

  bool contains(double x, double y) const {
    if (kind == ShapeKind::Disc) return std::hypot(x - disc_cx, y - disc_cy) <= disc_r;
    for (const auto& b : bars)
      if (b.contains(x, y)) return true;
    return false;
  }
};

struct HandShape {
  double palm_cx, palm_cy, palm_a, palm_b, palm_phi;
  std::vector<Capsule> fingers;
  double color[3];

  bool contains(double x, double y) const {
    const double c = std::cos(palm_phi), s = -std::sin(palm_phi);
    const double dx = x - palm_cx, dy = y - palm_cy;
    const double u = dx * c + dy * s, v = -dx * s + dy * c;
    if ((u * u) / (palm_a * palm_a) + (v * v) / (palm_b * palm_b) <= 1.0) return true;
    for (const auto& f : fingers)
      if (segment_distance(x, y, f) <= f.radius) return true;
    return false;
  }
};

void hsv_to_rgb(double h, double s, double v, double* out) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  out[0] = r + m;
  out[1] = g + m;
  out[2] = b + m;
}

double quantize8(double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

class SceneBuilder {
 public:
  SceneBuilder(const SyntheticSceneSpec& spec, int index)
      : spec_(spec), rng_(spec.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(index) * 0xBF58476D1CE4E5B9ull + 1) {}

  double uni(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); }
  int uni_int(int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng_); }

  ObjectShape make_object(ShapeKind kind) {
    ObjectShape o;
    o.kind = kind;
    const int n = spec_.canvas;
    const double s = n / 224.0;
    o.height_m = uni(0.02, 0.06);
    hsv_to_rgb(uni(0.0, 1.0), uni(0.55, 0.95), uni(0.35, 0.95), o.color);
    const double phi = uni(-kPi / 2, kPi / 2);
    switch (kind) {
      case ShapeKind::Bar: {
        const double len = uni(50, 85) * s, th = uni(13, 22) * s;
        o.bars.push_back({0, 0, len, th, phi});
        o.extent = len / 2 + th / 2;
        break;
      }
      case ShapeKind::TShape: {
        const double len = uni(40, 60) * s, th = uni(12, 18) * s, stem = uni(30, 45) * s;
        const double ux = std::cos(phi), uy = -std::sin(phi);
        const double vx = -uy, vy = ux;
        o.bars.push_back({0, 0, len, th, phi});
        o.bars.push_back({vx * (th / 2 + stem / 2), vy * (th / 2 + stem / 2), stem, th, phi + kPi / 2});
        o.extent = std::hypot(len / 2, th / 2 + stem);
        break;
      }
      case ShapeKind::Disc: {
        o.disc_r = uni(12, 20) * s;
        o.extent = o.disc_r;
        break;
      }
    }
    return o;
  }

  void place(ObjectShape& o, double cx, double cy) {
    for (auto& b : o.bars) {
      b.cx += cx;
      b.cy += cy;
    }
    o.disc_cx = cx;
    o.disc_cy = cy;
    o.cx = cx;
    o.cy = cy;
  }

  std::vector<GraspCandidate2D> labels_for(const ObjectShape& o) {
    std::vector<GraspCandidate2D> out;
    const double jaw = 10.0 * spec_.canvas / 224.0;
    auto bar_labels = [&](const Bar& b, double margin_frac) {
      const double usable = b.length / 2 - jaw * 0.75;
      const double ux = std::cos(b.phi), uy = -std::sin(b.phi);
      for (double t = -usable * margin_frac; t <= usable * margin_frac + 1e-9; t += jaw) {
        GraspCandidate2D g;
        g.j = b.cx + t * ux;
        g.k = b.cy + t * uy;
        g.w = b.thickness * 1.6;
        g.h = jaw;
        g.theta = wrap_half_pi(b.phi + kPi / 2);
        g.quality = 1.0;
        out.push_back(g);
      }
    };
    switch (o.kind) {
      case ShapeKind::Bar:
        bar_labels(o.bars[0], 1.0);
        break;
      case ShapeKind::TShape:
        bar_labels(o.bars[0], 1.0);
        bar_labels(o.bars[1], 0.6);
        break;
      case ShapeKind::Disc:
        for (int a = 0; a < 4; ++a) {
          GraspCandidate2D g;
          g.j = o.disc_cx;
          g.k = o.disc_cy;
          g.w = o.disc_r * 2.4;
          g.h = jaw;
          g.theta = wrap_half_pi(-kPi / 2 + a * kPi / 4);
          g.quality = 1.0;
          out.push_back(g);
        }
        break;
    }
    return out;
  }

  HandShape make_hand(double cx, double cy, double toward) {
    HandShape h;
    const double s = spec_.canvas / 224.0;
    h.palm_cx = cx;
    h.palm_cy = cy;
    h.palm_a = uni(13, 17) * s;
    h.palm_b = uni(10, 13) * s;
    h.palm_phi = toward;
    const int nf = uni_int(2, 5);
    const double spread = 0.35;
    for (int f = 0; f < nf; ++f) {
      const double a = toward + (f - (nf - 1) / 2.0) * spread + uni(-0.08, 0.08);
      const double len = uni(16, 26) * s;
      const double base = h.palm_a * 0.7;
      Capsule c;
      c.ax = cx + base * std::cos(a);
      c.ay = cy - base * std::sin(a);
      c.bx = cx + (base + len) * std::cos(a);
      c.by = cy - (base + len) * std::sin(a);
      c.radius = uni(3.5, 5.0) * s;
      h.fingers.push_back(c);
    }
    const double tone = uni(0.0, 1.0);
    h.color[0] = 0.80 + 0.15 * tone;
    h.color[1] = 0.58 + 0.15 * tone;
    h.color[2] = 0.45 + 0.12 * tone;
    return h;
  }

  DatasetRecord build(int index) {
    const int n = spec_.canvas;
    if (n < 64) throw InvalidInput("synthetic canvas must be at least 64 px");
    if (spec_.min_objects < 1 || spec_.max_objects < spec_.min_objects || spec_.shapes.empty()) {
      throw InvalidInput("invalid object count range or shape family");
    }
    DatasetRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "%06d", index);
    rec.id = idbuf;

    // background: table colour with low-frequency texture
    double base[3];
    hsv_to_rgb(uni(0.05, 0.15), uni(0.05, 0.3), uni(0.45, 0.75), base);
    struct Wave {
      double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 4; ++i) waves.push_back({uni(-0.08, 0.08), uni(-0.08, 0.08), uni(0, 2 * kPi), uni(0.01, 0.04)});

    const int count = uni_int(spec_.min_objects, spec_.max_objects);
    std::vector<ObjectShape> objects;
    // a crowded draw restarts the whole layout
    for (int round = 0; round < 50 && static_cast<int>(objects.size()) < spec_.min_objects; ++round) {
      objects.clear();
      for (int i = 0; i < count; ++i) {
        const ShapeKind kind =
            i == 0 ? ShapeKind::Bar : spec_.shapes[uni_int(0, static_cast<int>(spec_.shapes.size()) - 1)];
        ObjectShape o = make_object(kind);
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
          const double margin = o.extent + 4;
          if (margin * 2 >= n) break;
          const double cx = uni(margin, n - margin), cy = uni(margin, n - margin);
          bool ok = true;
          for (const auto& other : objects) {
            if (std::hypot(cx - other.cx, cy - other.cy) < o.extent + other.extent + 10) ok = false;
          }
          if (ok) {
            place(o, cx, cy);
            placed = true;
          }
        }
        if (!placed) break;
        objects.push_back(o);
      }
    }
    if (static_cast<int>(objects.size()) < spec_.min_objects) {
      throw InvalidInput("unsatisfiable object placement for scene " + rec.id);
    }

    LabelImage ids(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        for (std::size_t i = 0; i < objects.size(); ++i)
          if (objects[i].contains(c + 0.5, r + 0.5)) ids.set(r, c, static_cast<std::uint8_t>(i + 1));

    std::optional<HandShape> hand;
    Mask hand_mask(n, n);
    if (spec_.hand != HandPlacement::None) {
      std::vector<std::size_t> areas(objects.size() + 1, 0);
      for (auto v : ids.ids) ++areas[v];
      const Mask best_mask = ids.mask_of(1);
      bool ok = false;
      for (int attempt = 0; attempt < 400 && !ok; ++attempt) {
        double cx, cy, toward;
        if (spec_.hand == HandPlacement::NearBestObject) {
          const double a = uni(0, 2 * kPi);
          const double dist = objects[0].extent + uni(8, 22) * n / 224.0;
          cx = objects[0].cx + dist * std::cos(a);
          cy = objects[0].cy - dist * std::sin(a);
          toward = a + kPi + uni(-0.6, 0.6);
        } else {
          cx = uni(20, n - 20);
          cy = uni(20, n - 20);
          toward = uni(-kPi, kPi);
        }
        if (cx < 10 || cy < 10 || cx > n - 10 || cy > n - 10) continue;
        HandShape h = make_hand(cx, cy, toward);
        Mask m(n, n);
        std::vector<std::size_t> overlap(objects.size() + 1, 0);
        double sr = 0, sc = 0;
        for (int r = 0; r < n; ++r) {
          for (int c = 0; c < n; ++c) {
            if (!h.contains(c + 0.5, r + 0.5)) continue;
            m.set(r, c, true);
            ++overlap[ids(r, c)];
            sr += r;
            sc += c;
          }
        }
        const std::size_t cnt = m.count();
        if (cnt < 200) continue;
        bool fits = true;
        for (std::size_t i = 1; i < overlap.size(); ++i) {
          if (static_cast<double>(overlap[i]) > spec_.max_hand_overlap * static_cast<double>(areas[i])) fits = false;
        }
        if (!fits) continue;
        if (spec_.hand == HandPlacement::NearBestObject &&
            distance_to_mask(best_mask, sr / cnt, sc / cnt) > spec_.adjacency_px) {
          continue;
        }
        hand = h;
        hand_mask = m;
        ok = true;
      }
      if (!ok) throw InvalidInput("unsatisfiable hand placement for scene " + rec.id);
    }

    rec.rgb = Tensor(3, n, n);
    rec.depth = Tensor(1, n, n);
    std::normal_distribution<double> grain(0.0, 0.012);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        double px[3] = {base[0], base[1], base[2]};
        double tex = 0;
        for (const auto& w : waves) tex += w.amp * std::sin(w.fx * c + w.fy * r + w.phase);
        for (double& v : px) v += tex;
        double depth = spec_.table_depth_m;
        if (const int id = ids(r, c); id > 0) {
          const auto& o = objects[id - 1];
          for (int ch = 0; ch < 3; ++ch) px[ch] = o.color[ch];
          depth -= o.height_m;
        }
        if (hand && hand_mask(r, c)) {
          for (int ch = 0; ch < 3; ++ch) px[ch] = hand->color[ch];
          depth = spec_.table_depth_m - 0.1;
        }
        const double g = grain(rng_);
        for (int ch = 0; ch < 3; ++ch) rec.rgb(ch, r, c) = quantize8(px[ch] + g);
        rec.depth->at(r, c) = std::lround((depth + uni(-0.001, 0.001)) * 1000.0) / 1000.0;
      }
    }

    for (const auto& o : objects) {
      for (const auto& g : labels_for(o)) {
        if (!(g.j >= 0 && g.j < n && g.k >= 0 && g.k < n)) continue;
        const int r = static_cast<int>(g.k), c = static_cast<int>(g.j);
        if (hand && hand_mask(r, c)) continue;
        // Quantised to what grasps.csv stores.
        GraspCandidate2D q = g;
        q.j = std::round(q.j * 1000.0) / 1000.0;
        q.k = std::round(q.k * 1000.0) / 1000.0;
        q.w = std::round(q.w * 1000.0) / 1000.0;
        q.h = std::round(q.h * 1000.0) / 1000.0;
        q.theta = wrap_half_pi(std::round(q.theta * 180.0 / kPi * 1000.0) / 1000.0 * kPi / 180.0);
        rec.labels.push_back(q);
      }
    }
    rec.objects = std::move(ids);
    if (hand) rec.hand_mask = hand_mask;
    rec.best_object = objects.empty() ? 0 : 1;
    return rec;
  }

 private:
  SyntheticSceneSpec spec_;
  std::mt19937_64 rng_;
};

}  // namespace

DatasetRecord gen_scene(const SyntheticSceneSpec& spec, int index) { return SceneBuilder(spec, index).build(index); }

Dataset gen_synthetic(const SyntheticSceneSpec& spec, int n_scenes) {
  if (n_scenes < 0) throw InvalidInput("scene count must be non-negative");
  Dataset out;
  out.reserve(n_scenes);
  for (int i = 0; i < n_scenes; ++i) out.push_back(gen_scene(spec, i));
  return out;
}

void save_scene(const fs::path& scenes_dir, const DatasetRecord& r) {
  check_alignment(r);
  const fs::path dir = scenes_dir / r.id;
  fs::create_directories(dir);
  write_rgb_png(dir / "rgb.png", r.rgb);
  if (r.depth) write_depth_png(dir / "depth.png", *r.depth);
  if (r.hand_mask) write_mask_png(dir / "mask.png", *r.hand_mask);
  if (r.objects) {
    cv::Mat m(r.objects->rows, r.objects->cols, CV_8UC1, const_cast<std::uint8_t*>(r.objects->ids.data()));
    write_file_atomic(dir / "objects.png", encode_png(m));
  }
  std::ostringstream csv;
  csv.precision(10);
  for (const auto& g : r.labels) csv << g.j << ',' << g.k << ',' << g.w << ',' << g.h << ',' << g.theta * 180.0 / kPi << '\n';
  write_file_atomic(dir / "grasps.csv", csv.str());
  json meta{{"id", r.id}, {"best_object", r.best_object}, {"has_hand", r.hand_mask.has_value()},
            {"has_depth", r.depth.has_value()}, {"labels", r.labels.size()}};
  write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

void save_synthetic(const fs::path& root, const Dataset& records) {
  for (const auto& r : records) save_scene(root / "scenes", r);
}

DatasetRecord load_scene(const fs::path& dir) {
  DatasetRecord r;
  const json meta = json::parse(read_file(dir / "meta.json"));
  r.id = meta.at("id").get<std::string>();
  r.best_object = meta.value("best_object", 0);
  r.rgb = read_rgb_png(dir / "rgb.png");
  if (fs::exists(dir / "depth.png")) r.depth = read_depth_png(dir / "depth.png");
  if (fs::exists(dir / "mask.png")) r.hand_mask = read_mask_png(dir / "mask.png");
  if (fs::exists(dir / "objects.png")) {
    const cv::Mat m = cv::imread((dir / "objects.png").string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw InvalidInput("cannot read " + (dir / "objects.png").string());
    LabelImage ids(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) ids.set(y, x, m.at<std::uint8_t>(y, x));
    r.objects = std::move(ids);
  }
  r.labels = read_grasp_csv(dir / "grasps.csv");
  check_alignment(r);
  return r;
}

Dataset load_synthetic(const fs::path& root) {
  const fs::path scenes = fs::is_directory(root / "scenes") ? root / "scenes" : root;
  if (!fs::is_directory(scenes)) throw InvalidInput("dataset directory not found: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(scenes)) {
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw InvalidInput("no scenes found under " + scenes.string());
  Dataset out;
  for (const auto& d : dirs) out.push_back(load_scene(d));
  return out;
}

}  // namespace qfaap
