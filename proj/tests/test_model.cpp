#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "qfaap/data.hpp"
#include "qfaap/model.hpp"

using namespace qfaap;

namespace {

// Emits the rasterized labels of whichever record matches the frame.
class LabelOracle final : public GraspModel {
 public:
  explicit LabelOracle(const Dataset& d) : d_(d) {}
  std::string id() const override { return "oracle"; }
  HeadMaps infer(const Tensor& frame) const override {
    for (const auto& r : d_) {
      if (!(r.rgb == frame)) continue;
      const GraspMaps t = rasterize_targets(r.labels, r.rows(), r.cols());
      const LossTargets lt = make_targets(t, 150.0);
      return {t.quality, lt.sin2, lt.cos2, lt.width_norm};
    }
    throw InvalidInput("unknown frame");
  }
  Tensor quality_input_gradient(const Tensor& frame, const QualitySeed&, HeadMaps*) const override {
    return Tensor(frame.channels(), frame.rows(), frame.cols());
  }

 private:
  const Dataset& d_;
};

Dataset small_scenes(int n, int size = 64) {
  SyntheticSceneSpec spec;
  spec.canvas = size;
  spec.min_objects = 1;
  spec.max_objects = 2;
  spec.seed = 21;
  return gen_synthetic(spec, n);
}

double loop_huber_mean(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.values()[i] - b.values()[i]);
    s += d < 1 ? 0.5 * d * d : d - 0.5;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("huber branches and quality_loss examples") {
  CHECK(huber(0.0) == 0.0);
  Tensor p(1, 1, 1, 0.3), t(1, 1, 1, 1.0);
  CHECK(quality_loss(p, t) == doctest::Approx(0.245).epsilon(1e-12));
  Tensor p2(1, 1, 1, 3.0);
  CHECK(quality_loss(p2, t) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(quality_loss(t, t) == 0.0);
  CHECK_THROWS_AS(quality_loss(Tensor(1, 2, 2), Tensor(1, 2, 3)), InvalidInput);
}

TEST_CASE("total_loss: zero at target, additive, matches a per-pixel oracle") {
  std::mt19937_64 rng(1);
  const HeadMaps pred{oracle::random_frame(rng, 5, 6, 1), oracle::random_frame(rng, 5, 6, 1),
                      oracle::random_frame(rng, 5, 6, 1), oracle::random_frame(rng, 5, 6, 1)};
  const LossTargets same{pred.quality, pred.sin2, pred.cos2, pred.width_norm};
  const LossBreakdown z = total_loss(pred, same);
  CHECK(z.total == 0.0);
  CHECK(z.quality == 0.0);
  CHECK(z.angle == 0.0);
  CHECK(z.width == 0.0);

  LossTargets qdiff = same;
  qdiff.quality = oracle::random_frame(rng, 5, 6, 1);
  const LossBreakdown q = total_loss(pred, qdiff);
  CHECK(q.total == q.quality);
  CHECK(q.angle == 0.0);

  const LossTargets tgt{oracle::random_frame(rng, 5, 6, 1), oracle::random_frame(rng, 5, 6, 1),
                        oracle::random_frame(rng, 5, 6, 1), oracle::random_frame(rng, 5, 6, 1)};
  const LossBreakdown l = total_loss(pred, tgt);
  const double lq = loop_huber_mean(pred.quality, tgt.quality);
  const double lt = loop_huber_mean(pred.sin2, tgt.sin2) + loop_huber_mean(pred.cos2, tgt.cos2);
  const double lw = loop_huber_mean(pred.width_norm, tgt.width_norm);
  CHECK(oracle::rel_close(l.quality, lq, 1e-10, 0));
  CHECK(oracle::rel_close(l.angle, lt, 1e-10, 0));
  CHECK(oracle::rel_close(l.width, lw, 1e-10, 0));
  CHECK(std::abs(l.total - (l.quality + l.angle + l.width)) < 1e-12);
  CHECK(l.quality >= 0);
  CHECK(l.angle >= 0);
  CHECK(l.width >= 0);
}

TEST_CASE("forward: shape and range contract, determinism, continuity") {
  std::mt19937_64 rng(2);
  const GraspNet net = oracle::tiny_net(3, 16);
  const Tensor x = oracle::random_frame(rng, 16, 16);
  const GraspMaps a = net.predict(x);
  CHECK(a.rows() == 16);
  CHECK(a.cols() == 16);
  for (double q : a.quality.values()) CHECK((q >= 0 && q <= 1));
  for (double w : a.width.values()) CHECK((w >= 0 && w <= 150));
  for (double t : a.angle.values()) CHECK((t >= -kPi / 2 && t < kPi / 2));
  CHECK(net.predict(x).quality == a.quality);
  Tensor y = x;
  y.values()[37] += 1e-13;
  const GraspMaps b = net.predict(y);
  double worst = 0;
  for (std::size_t i = 0; i < a.quality.size(); ++i) worst = std::max(worst, std::abs(a.quality.values()[i] - b.quality.values()[i]));
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(net.predict(Tensor(1, 16, 16)), InvalidInput);
}

TEST_CASE("ref-fcn: output matches input size at 224 and 300") {
  std::mt19937_64 rng(4);
  for (int size : {224, 300}) {
    ModelConfig mc;
    mc.input_size = size;
    const GraspNet net(mc);
    const GraspMaps m = net.predict(oracle::random_frame(rng, size, size));
    CHECK(m.rows() == size);
    CHECK(m.cols() == size);
  }
  ModelConfig bad;
  bad.input_size = 256;
  CHECK_THROWS_AS(GraspNet{bad}, InvalidInput);
}

TEST_CASE("parameter gradients match central differences on the tiny net") {
  std::mt19937_64 rng(5);
  GraspNet net = oracle::tiny_net(6, 16);
  const Tensor x = oracle::random_frame(rng, 16, 16);
  const LossTargets tgt{oracle::random_frame(rng, 16, 16, 1), oracle::random_frame(rng, 16, 16, 1),
                        oracle::random_frame(rng, 16, 16, 1), oracle::random_frame(rng, 16, 16, 1)};
  auto loss = [&]() { return total_loss(heads_from_raw(net.forward(x, nullptr)), tgt).total; };
  ParamGrads g = net.zero_grads();
  {
    ForwardCache cache;
    const Tensor raw = net.forward(x, &cache);
    Tensor draw;
    total_loss_with_grad(heads_from_raw(raw), tgt, &draw);
    net.backward(cache, draw, &g);
  }
  std::uniform_int_distribution<int> layer(0, static_cast<int>(net.layers().size()) - 1);
  int checked = 0;
  for (int t = 0; t < 20; ++t) {
    const int li = layer(rng);
    auto& w = net.layers()[li].weight();
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, w.size() - 1)(rng);
    const double orig = w[k];
    w[k] = orig + 1e-4;
    const double lp = loss();
    w[k] = orig - 1e-4;
    const double lm = loss();
    w[k] = orig;
    const double fd = (lp - lm) / 2e-4;
    CHECK(oracle::rel_close(g.weight[li][k], fd, 1e-3));
    ++checked;
  }
  auto& b = net.layers().back().bias();
  for (std::size_t k = 0; k < b.size(); ++k) {
    const double orig = b[k];
    b[k] = orig + 1e-4;
    const double lp = loss();
    b[k] = orig - 1e-4;
    const double lm = loss();
    b[k] = orig;
    CHECK(oracle::rel_close(g.bias.back()[k], (lp - lm) / 2e-4, 1e-3));
  }
  CHECK(checked == 20);
}

TEST_CASE("input gradients match central differences at 20 pixels") {
  std::mt19937_64 rng(7);
  for (const char* arch : {"tiny", "ref-fcn"}) {
    ModelConfig mc;
    mc.architecture = arch;
    mc.input_size = std::string(arch) == "tiny" ? 16 : 224;
    mc.seed = 8;
    const GraspNet net(mc);
    const int n = mc.input_size;
    const Tensor x = oracle::random_frame(rng, n, n);
    const Tensor a = oracle::random_frame(rng, n, n, 1);
    // differences taken per pixel before summing, to keep cancellation small
    auto delta = [&](const Tensor& qp, const Tensor& qm) {
      double s = 0;
      for (std::size_t i = 0; i < qp.size(); ++i) s += a.values()[i] * (qp.values()[i] - qm.values()[i]);
      return s;
    };
    const Tensor grad = net.quality_input_gradient(x, [&](const Tensor&) { return a; }, nullptr);
    const double h = std::string(arch) == "tiny" ? 1e-4 : 1e-5;
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    for (int t = 0; t < 20; ++t) {
      const std::size_t p = pick(rng);
      Tensor xp = x, xm = x;
      xp.values()[p] += h;
      xm.values()[p] -= h;
      const double fd = delta(net.infer(xp).quality, net.infer(xm).quality) / (2 * h);
      INFO(arch << " p=" << p << " analytic=" << grad.values()[p] << " fd=" << fd);
      CHECK(oracle::rel_close(grad.values()[p], fd, 1e-3));
    }
  }
}

TEST_CASE("training: zero learning rate keeps weights bit-identical; fixed seed is reproducible") {
  const Dataset d = small_scenes(6, 16 * 4);
  ModelConfig mc;
  mc.architecture = "tiny";
  mc.input_size = 64;
  mc.seed = 1;
  GraspNet net(mc);
  const auto before = net.checksum();
  TrainConfig tc;
  tc.epochs = 1;
  tc.learning_rate = 0.0;
  train(net, d, {}, tc);
  CHECK(net.checksum() == before);

  tc.learning_rate = 0.01;
  tc.epochs = 2;
  tc.seed = 4;
  GraspNet n1(mc), n2(mc);
  const auto l1 = train(n1, d, d, tc);
  const auto l2 = train(n2, d, d, tc);
  REQUIRE(l1.size() == l2.size());
  for (std::size_t i = 0; i < l1.size(); ++i) {
    CHECK(l1[i].loss == l2[i].loss);
    CHECK(l1[i].oacc == l2[i].oacc);
  }
  CHECK(n1.checksum() == n2.checksum());
  CHECK(n1.checksum() != before);
}

TEST_CASE("training: loss does not increase while overfitting one fixed batch") {
  const Dataset one = small_scenes(1, 64);
  const Dataset batch(8, one.front());
  GraspNet net = oracle::tiny_net(2, 64);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.learning_rate = 0.05;
  tc.augmentation = false;
  std::vector<double> losses;
  for (int step = 0; step < 10; ++step) {
    train(net, batch, {}, tc, {}, [&](int, int, const LossBreakdown& l) { losses.push_back(l.total); });
  }
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] <= losses[i - 1] + 1e-15);
}

TEST_CASE("training rejects an empty set and reports non-finite losses") {
  GraspNet net = oracle::tiny_net(2, 16);
  CHECK_THROWS_AS(train(net, {}, {}, TrainConfig{}), InvalidInput);
  Dataset d = small_scenes(2, 16 * 4);
  GraspNet big = oracle::tiny_net(2, 64);
  for (double& w : big.layers().back().weight()) w = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.epochs = 1;
  try {
    train(big, d, {}, tc);
    FAIL("expected failure");
  } catch (const NumericalFailure& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("O-ACC: label oracle scores 1, constant model is defined, empty set rejected") {
  const Dataset d = small_scenes(10, 96);
  const LabelOracle oracle_model(d);
  CHECK(evaluate_oacc(oracle_model, d) == 1.0);
  const ConstantQualityModel zero(0.0);
  const double z = evaluate_oacc(zero, d);
  CHECK((z >= 0.0 && z <= 1.0));
  CHECK_THROWS_AS(evaluate_oacc(zero, {}), InvalidInput);
}

TEST_CASE("weights file round trip and model specs") {
  const GraspNet net = oracle::tiny_net(9, 16);
  const auto path = std::filesystem::temp_directory_path() / "qfaap_test_weights.qw";
  save_weights(path, net, "abc");
  const GraspNet back = load_weights(path);
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_frame(rng, 16, 16);
  // float32 storage
  const auto a = net.infer(x).quality, b = back.infer(x).quality;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-5);
  CHECK(load_model(path.string())->id() == "tiny");
  CHECK(load_model("const:1")->infer(x).quality.values()[0] == 1.0);
  CHECK_THROWS(load_model((std::filesystem::temp_directory_path() / "missing.qw").string()));
  std::filesystem::remove(path);
  ModelConfig mc;
  CHECK(GraspNet(mc).parameter_count() == 87692);
}
