#include "bipars/finite_diff.hpp"
#include "bipars/mlp.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace bipars;
using bipars::test::random_mat;
using bipars::test::random_vec;
using bipars::test::rel_err;

namespace {

MlpNet random_net(std::vector<Index> sizes, Activation act, std::uint64_t seed) {
  std::vector<Activation> acts(sizes.size() - 1, act);
  acts.back() = Activation::identity;
  MlpNet net(sizes, acts);
  Rng rng(seed);
  net.set_params(random_vec(net.num_params(), rng, 0.8));
  return net;
}

double scalar_out(const MlpNet& net, const Vec& x, const Vec& seed) { return seed.dot(net.predict(x)); }

// Plain loops, no Eigen products.
Vec naive_forward(const MlpNet& net, const Vec& x) {
  std::vector<double> a(x.data(), x.data() + x.size());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto W = net.weight(l);
    const auto b = net.bias(l);
    std::vector<double> out(static_cast<std::size_t>(W.rows()));
    for (Index i = 0; i < W.rows(); ++i) {
      double u = b(i, 0);
      for (Index j = 0; j < W.cols(); ++j) u += W(i, j) * a[static_cast<std::size_t>(j)];
      switch (net.activations()[l]) {
        case Activation::tanh: u = std::tanh(u); break;
        case Activation::relu: u = u > 0 ? u : 0; break;
        case Activation::identity: break;
      }
      out[static_cast<std::size_t>(i)] = u;
    }
    a = out;
  }
  return Eigen::Map<Vec>(a.data(), static_cast<Index>(a.size()));
}

bool away_from_kinks(const MlpNet& net, const Vec& x) {
  const ForwardTape t = net.forward(x);
  for (std::size_t l = 0; l + 1 < t.pre.size(); ++l)
    if ((t.pre[l].array().abs() < 1e-3).any()) return false;
  return true;
}

}  // namespace

TEST_CASE("param vector arithmetic follows layouts") {
  auto layout = std::make_shared<ParamLayout>();
  std::const_pointer_cast<ParamLayout>(layout)->add("W", 2, 3);
  std::const_pointer_cast<ParamLayout>(layout)->add("b", 2, 1);
  ParamVector a(layout, Vec::LinSpaced(8, 1, 8));
  ParamVector b(layout, Vec::Ones(8));
  CHECK(layout->size() == 8);
  CHECK((a + b)[7] == 9.0);
  CHECK((a - b)[0] == 0.0);
  CHECK((2.0 * a)[3] == 8.0);
  a.axpy(0.5, b);
  CHECK(a[0] == 1.5);
  CHECK(a.dot(b) == doctest::Approx(40.0));
  CHECK(a.segment(0)(1, 2) == 6.5);

  auto other = std::make_shared<ParamLayout>();
  std::const_pointer_cast<ParamLayout>(other)->add("W", 8, 1);
  ParamVector c(other, Vec::Ones(8));
  CHECK_THROWS_AS(a += c, ShapeError);
  CHECK_THROWS_AS(ParamVector(layout, Vec::Ones(3)), ShapeError);
}

TEST_CASE("two nets of the same spec yield addable parameter vectors") {
  const MlpNet a = random_net({3, 4, 1}, Activation::tanh, 1);
  const MlpNet b = random_net({3, 4, 1}, Activation::tanh, 2);
  CHECK(a.params().compatible(b.params()));
  CHECK_NOTHROW(a.params() + b.params());
}

TEST_CASE("clip_by_norm rescales only above the threshold") {
  auto layout = std::make_shared<ParamLayout>();
  std::const_pointer_cast<ParamLayout>(layout)->add("v", 2, 1);
  ParamVector g(layout, Vec::Constant(2, 3.0));
  const double before = clip_by_norm(g, 1.0);
  CHECK(before == doctest::Approx(std::sqrt(18.0)));
  CHECK(g.norm() == doctest::Approx(1.0));
  clip_by_norm(g, 5.0);
  CHECK(g.norm() == doctest::Approx(1.0));
}

TEST_CASE("forward examples") {
  MlpNet id({2, 2}, {Activation::identity});
  Vec p = Vec::Zero(6);
  p << 1, 0, 0, 1, 0, 0;
  id.set_params(p);
  CHECK(id.predict(Vec::LinSpaced(2, 1, 2)).isApprox(Vec::LinSpaced(2, 1, 2)));

  MlpNet t({3, 5, 4}, {Activation::tanh, Activation::tanh});
  Rng rng(3);
  Vec q = random_vec(t.num_params(), rng);
  // zero the biases: W1 5x3 then b1 5, W2 4x5 then b2 4
  q.segment(15, 5).setZero();
  q.tail(4).setZero();
  t.set_params(q);
  CHECK(t.predict(Vec::Zero(3)).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(t.predict(Vec::Zero(2)), ShapeError);
}

TEST_CASE("forward matches a hand-rolled loop") {
  const MlpNet net = random_net({2, 6, 3}, Activation::tanh, 7);
  Vec x(2);
  x << 0.5, -0.5;
  const Vec y = net.predict(x);
  const Vec ref = naive_forward(net, x);
  CHECK((y - ref).cwiseAbs().maxCoeff() < 1e-14);
  const ForwardTape tape = net.forward(x);
  CHECK((tape.output().col(0) - y).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("linear net gradients") {
  MlpNet lin({3, 2}, {Activation::identity});
  Rng rng(4);
  lin.set_params(random_vec(lin.num_params(), rng));
  Vec x(3);
  x << 0.3, -1.2, 2.0;
  const ForwardTape tape = lin.forward(x);
  Mat seed = Mat::Zero(2, 1);
  seed(0, 0) = 1.0;
  const ParamVector g = lin.grad_params(tape, seed);
  for (Index j = 0; j < 3; ++j) {
    CHECK(g[j] == x[j]);
    CHECK(g[3 + j] == 0.0);
  }
  CHECK(g[6] == 1.0);
  const Mat gi = lin.grad_input(tape, seed);
  for (Index j = 0; j < 3; ++j) CHECK(gi(j, 0) == lin.weight(0)(0, j));
  CHECK(lin.grad_params(tape, Mat::Zero(2, 1)).norm() == 0.0);
}

TEST_CASE("identity net input gradient equals the seed") {
  MlpNet id({3, 3}, {Activation::identity});
  Vec p = Vec::Zero(12);
  p(0) = p(4) = p(8) = 1.0;
  id.set_params(p);
  Vec seed(3);
  seed << 0.1, -2.0, 7.5;
  const Mat gi = id.grad_input(id.forward(Vec::Ones(3)), seed);
  CHECK((gi.col(0) - seed).norm() == 0.0);
}

TEST_CASE("gradients match finite differences over the net matrix") {
  int checked = 0;
  for (const Activation act : {Activation::tanh, Activation::relu}) {
    for (const std::vector<Index>& hidden : std::vector<std::vector<Index>>{{2}, {16, 8}, {64, 4, 3}, {}}) {
      std::vector<Index> sizes{4};
      sizes.insert(sizes.end(), hidden.begin(), hidden.end());
      sizes.push_back(2);
      const MlpNet net = random_net(sizes, act, 11 + checked);
      Rng rng(100 + checked);
      Vec x = random_vec(4, rng);
      for (int tries = 0; tries < 50 && !away_from_kinks(net, x); ++tries) x = random_vec(4, rng);
      REQUIRE(away_from_kinks(net, x));
      const Vec seed = random_vec(2, rng);
      const ForwardTape tape = net.forward(x);
      const auto [gp, gi] = net.grad_both(tape, seed);
      MlpNet probe = net;
      const Vec fd_p = finite_diff_grad(
          [&](const Vec& p) {
            probe.set_params(p);
            return scalar_out(probe, x, seed);
          },
          net.params().data(), 1e-6);
      const Vec fd_x = finite_diff_grad([&](const Vec& xi) { return scalar_out(net, xi, seed); }, x, 1e-6);
      CHECK(max_rel_error(gp.data(), fd_p) < 1e-5);
      CHECK(max_rel_error(gi.col(0), fd_x) < 1e-5);
      ++checked;
    }
  }
  CHECK(checked == 8);
}

TEST_CASE("batched gradients sum the per-sample ones") {
  const MlpNet net = random_net({3, 5, 2}, Activation::tanh, 21);
  Rng rng(22);
  const Mat x = random_mat(3, 6, rng);
  const Mat seeds = random_mat(2, 6, rng);
  const ForwardTape tape = net.forward_batch(x);
  const Mat per = net.per_sample_grads(tape, seeds);
  const ParamVector sum = net.grad_params(tape, seeds);
  CHECK(rel_err(per.rowwise().sum(), sum.data()) < 1e-13);
  for (Index j = 0; j < 6; ++j) {
    const ParamVector one = net.grad_params(net.forward(Vec(x.col(j))), seeds.col(j));
    CHECK(rel_err(per.col(j), one.data()) < 1e-13);
  }
}

TEST_CASE("stale tapes are refused") {
  MlpNet net = random_net({2, 3, 1}, Activation::tanh, 5);
  const ForwardTape tape = net.forward(Vec::Ones(2));
  Vec p = net.params().data();
  p[0] += 0.1;
  net.set_params(p);
  CHECK_THROWS_AS(net.grad_params(tape, Mat::Ones(1, 1)), StaleTapeError);
}

TEST_CASE("jvp matches finite differences of the output") {
  const MlpNet net = random_net({3, 4, 2}, Activation::tanh, 31);
  Rng rng(32);
  const Vec x = random_vec(3, rng);
  ParamVector d = ParamVector::zeros_like(net.params());
  d.data() = random_vec(d.size(), rng);
  const Mat j = net.jvp(net.forward(x), d);
  MlpNet plus = net, minus = net;
  const double eps = 1e-6;
  plus.set_params(net.params().data() + eps * d.data());
  minus.set_params(net.params().data() - eps * d.data());
  const Vec fd = (plus.predict(x) - minus.predict(x)) / (2 * eps);
  CHECK(rel_err(j.col(0), fd) < 1e-7);
}

TEST_CASE("hvp of a linear-in-params output is zero") {
  MlpNet lin({3, 2}, {Activation::identity});
  Rng rng(41);
  lin.set_params(random_vec(lin.num_params(), rng));
  ParamVector d = ParamVector::zeros_like(lin.params());
  d.data() = random_vec(d.size(), rng);
  CHECK(lin.hvp(random_vec(3, rng), random_vec(2, rng), d).norm() == 0.0);
}

TEST_CASE("hvp on a one-hidden-unit tanh net matches the symbolic Hessian") {
  // y = w2 tanh(w1 x + b1) + b2, parameters [w1, b1, w2, b2]
  MlpNet net({1, 1, 1}, {Activation::tanh, Activation::identity});
  Vec p(4);
  p << 0.7, -0.3, 1.4, 0.2;
  net.set_params(p);
  const double x = 0.9;
  const double t = std::tanh(p[0] * x + p[1]);
  const double t1 = 1 - t * t;
  const double t2 = -2 * t * t1;
  const double w2 = p[2];
  Mat H = Mat::Zero(4, 4);
  H(0, 0) = w2 * t2 * x * x;
  H(0, 1) = H(1, 0) = w2 * t2 * x;
  H(0, 2) = H(2, 0) = t1 * x;
  H(1, 1) = w2 * t2;
  H(1, 2) = H(2, 1) = t1;
  Vec dv(4);
  dv << 0.5, -1.0, 2.0, 3.0;
  ParamVector d = ParamVector::zeros_like(net.params());
  d.data() = dv;
  const ParamVector hv = net.hvp(Vec::Constant(1, x), Vec::Ones(1), d);
  CHECK(rel_err(hv.data(), H * dv) < 1e-14);
}

TEST_CASE("hvp properties: finite differences, linearity, symmetry, modes") {
  const MlpNet net = random_net({4, 8, 6, 3}, Activation::tanh, 51);
  Rng rng(52);
  const Vec x = random_vec(4, rng);
  const Vec seed = random_vec(3, rng);
  auto rand_dir = [&] {
    ParamVector d = ParamVector::zeros_like(net.params());
    d.data() = random_vec(d.size(), rng);
    return d;
  };
  const ParamVector d1 = rand_dir(), d2 = rand_dir();
  const ParamVector h1 = net.hvp(x, seed, d1);
  const ParamVector h2 = net.hvp(x, seed, d2);

  const double eps = 1e-4;
  MlpNet plus = net, minus = net;
  plus.set_params(net.params() + eps * d1);
  minus.set_params(net.params() - eps * d1);
  const Vec fd = (plus.grad_params(plus.forward(x), seed).data() - minus.grad_params(minus.forward(x), seed).data()) /
                 (2 * eps);
  CHECK(rel_err(h1.data(), fd) < 1e-4);

  const ParamVector combo = net.hvp(x, seed, 2.5 * d1 - 0.75 * d2);
  CHECK((combo.data() - (2.5 * h1.data() - 0.75 * h2.data())).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(std::abs(d1.dot(h2) - d2.dot(h1)) < 1e-8);

  const ParamVector hfd = net.hvp(x, seed, d1, {HvpMode::finite_difference, 1e-5});
  CHECK(rel_err(h1.data(), hfd.data()) < 1e-4);
}

TEST_CASE("hvp with a curved output loss matches finite differences of its gradient") {
  const MlpNet net = random_net({3, 5, 2}, Activation::tanh, 61);
  Rng rng(62);
  const Mat x = random_mat(3, 4, rng);
  // L = 0.5 * sum |y|^2
  OutputLoss loss;
  loss.seed = [](const Mat& y) { return y; };
  loss.curvature = [](const Mat&, const Mat& ry) { return ry; };
  ParamVector d = ParamVector::zeros_like(net.params());
  d.data() = random_vec(d.size(), rng);
  const ParamVector hv = net.hvp(x, loss, d);
  auto grad_at = [&](const Vec& p) {
    MlpNet n2 = net;
    n2.set_params(p);
    const ForwardTape t = n2.forward_batch(x);
    return n2.grad_params(t, t.output()).data();
  };
  const double eps = 1e-5;
  const Vec fd = (grad_at(net.params().data() + eps * d.data()) - grad_at(net.params().data() - eps * d.data())) / (2 * eps);
  CHECK(rel_err(hv.data(), fd) < 1e-6);
}

TEST_CASE("outer-product operator") {
  Rng rng(71);
  const Vec g = random_vec(10, rng);
  OuterProductOperator single(g, Vec::Ones(1));
  CHECK(rel_err(single.apply(g), g * g.squaredNorm()) < 1e-15);

  const Mat G = random_mat(10, 2, rng);
  OuterProductOperator zero(G, Vec::Zero(2));
  CHECK(zero.apply(random_vec(10, rng)).norm() == 0.0);

  Vec w(2);
  w << 0.7, -1.3;
  const Mat explicit_m = G * w.asDiagonal() * G.transpose();
  OuterProductOperator op(G, w);
  const Mat cols = op.apply_columns(Mat::Identity(10, 10));
  CHECK((cols - explicit_m).cwiseAbs().maxCoeff() < 1e-14);

  const Mat G16 = random_mat(16, 5, rng);
  const Vec w16 = random_vec(5, rng);
  OuterProductOperator op16(G16, w16);
  const Mat explicit16 = G16 * w16.asDiagonal() * G16.transpose();
  for (Index i = 0; i < 16; ++i)
    CHECK((op16.apply(Vec(Vec::Unit(16, i))) - explicit16.col(i)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("finite_diff_grad examples") {
  Vec p(2);
  p << 1, -2;
  const Vec g = finite_diff_grad([](const Vec& v) { return v.squaredNorm(); }, p, 1e-5);
  CHECK(std::abs(g[0] - 2) < 1e-8);
  CHECK(std::abs(g[1] + 4) < 1e-8);
  CHECK(finite_diff_grad([](const Vec&) { return 3.0; }, p, 1e-5).norm() == 0.0);
  CHECK_THROWS_AS(finite_diff_grad([](const Vec&) { return std::nan(""); }, p, 1e-5), NumericError);
  CHECK_THROWS_AS(finite_diff_grad([](const Vec& v) { return v[0]; }, p, 0.0), std::invalid_argument);
}

TEST_CASE("relu derivative at exactly zero is zero") {
  MlpNet net({1, 1, 1}, {Activation::relu, Activation::identity});
  Vec p(4);
  p << 1.0, 0.0, 1.0, 0.0;
  net.set_params(p);
  const ParamVector g = net.grad_params(net.forward(Vec::Zero(1)), Mat::Ones(1, 1));
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
}

TEST_CASE("activation names round-trip") {
  for (const Activation a : {Activation::tanh, Activation::relu, Activation::identity})
    CHECK(parse_activation(to_string(a)) == a);
  CHECK_THROWS(parse_activation("sigmoid"));
}
