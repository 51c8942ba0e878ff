#include "bipars/finite_diff.hpp"
#include "bipars/shaping.hpp"
#include "test_util.hpp"

#include <cmath>
#include <set>

using namespace bipars;
using test::random_vec;

namespace {

Vec cart(double x, double v, double th, double w) {
  Vec s(4);
  s << x, v, th, w;
  return s;
}

Vec force(double f) { return Vec::Constant(1, f); }

}  // namespace

TEST_CASE("modified reward") {
  CHECK(modified_reward(-1.0, 1.0, 0.1) == doctest::Approx(-0.9));
  CHECK(modified_reward(0.3, 0.0, 123.0) == 0.3);
  CHECK(modified_reward(0.3, 1.0, 0.2) == 0.3 + 0.2);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Vec v = random_vec(3, rng, 5.0);
    CHECK(modified_reward(v[0], v[1], v[2]) - v[0] == doctest::Approx(v[1] * v[2]).epsilon(1e-15));
  }
}

TEST_CASE("beneficial shaping") {
  const ShapingSpec f = builtin_shaping("cartpole-beneficial");
  CHECK(f(cart(0, 0, 0.05, 0), force(1.0), cart(0, 0, 0, 0)) == 0.1);
  CHECK(f(cart(0, 0, 0.05, 0), force(10.0), cart(0, 0, 0, 0)) == 0.1);
  CHECK(f(cart(0, 0, -0.05, 0), force(-10.0), cart(0, 0, 0, 0)) == 0.1);
  CHECK(f(cart(0, 0, 0.05, 0), force(-10.0), cart(0, 0, 0, 0)) == 0.0);
  CHECK(f(cart(0, 0, 0.0, 0), force(10.0), cart(0, 0, 0, 0)) == 0.0);
}

TEST_CASE("harmful shaping") {
  const ShapingSpec f = builtin_shaping("cartpole-harmful");
  CHECK(f(cart(0, 0, 0.05, 0), force(1), cart(0, 0, 0.04, 0)) == -0.1);
  CHECK(f(cart(0, 0, -0.05, 0), force(1), cart(0, 0, -0.01, 0)) == -0.1);
  CHECK(f(cart(0, 0, 0.05, 0), force(1), cart(0, 0, 0.06, 0)) == 0.0);
  CHECK(f(cart(0, 0, 0.05, 0), force(1), cart(0, 0, -0.05, 0)) == 0.0);
}

TEST_CASE("half shaping takes three values, +0.1 only when leaning right") {
  const ShapingSpec f = builtin_shaping("cartpole-half");
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const Vec s = random_vec(4, rng, 0.2);
    const Vec a = force(uniform01(rng) < 0.5 ? -10.0 : 10.0);
    const double v = f(s, a, s);
    CHECK((v == 0.1 || v == 0.0 || v == -0.1));
    if (v == 0.1) CHECK(s[2] > 0.0);
    if (v == -0.1) CHECK(s[2] < 0.0);
  }
  CHECK(f(cart(0, 0, 0.1, 0), force(10), cart(0, 0, 0, 0)) == 0.1);
  CHECK(f(cart(0, 0, -0.1, 0), force(-10), cart(0, 0, 0, 0)) == -0.1);
}

TEST_CASE("random shaping is reproducible per table seed and bounded") {
  const ShapingSpec a = builtin_shaping("cartpole-random", 5);
  const ShapingSpec b = builtin_shaping("cartpole-random", 5);
  const ShapingSpec c = builtin_shaping("cartpole-random", 6);
  Rng rng(3);
  int differs = 0;
  std::set<double> distinct;
  for (int i = 0; i < 1000; ++i) {
    const Vec s = cart(4.8 * uniform01(rng) - 2.4, 4 * uniform01(rng) - 2, 0.42 * uniform01(rng) - 0.21, 4 * uniform01(rng) - 2);
    const Vec f = force(uniform01(rng) < 0.5 ? -10.0 : 10.0);
    const double va = a(s, f, s);
    CHECK(va == b(s, f, s));
    CHECK(va >= -1.0);
    CHECK(va <= 1.0);
    differs += va != c(s, f, s);
    distinct.insert(va);
  }
  CHECK(differs > 900);
  CHECK(distinct.size() > 500);
  CHECK(cartpole_random_cell(cart(-10, -10, -10, -10)) == 0);
  CHECK(cartpole_random_cell(cart(10, 10, 10, 10)) == 9999);
}

TEST_CASE("torque constraint") {
  const ShapingSpec f = builtin_shaping("torque-constraint", 0, 20.0);
  CHECK(f(Vec::Zero(3), Vec::Zero(3), Vec::Zero(3)) == doctest::Approx(5.0));
  const double at_max = f(Vec::Zero(3), Vec::Ones(3), Vec::Zero(3));
  CHECK(at_max < 0.0);
  CHECK(at_max == doctest::Approx(20.0 * (0.25 - 1.0)));
  Vec a(3);
  a << 0.5, -0.25, 0.0;
  CHECK(f(Vec::Zero(3), a, Vec::Zero(3)) == doctest::Approx(0.0));
}

TEST_CASE("unknown shaping id") {
  CHECK_THROWS_AS(builtin_shaping("cartpole-mystery"), UnknownShapingError);
  for (const auto& id : builtin_shaping_ids()) CHECK_NOTHROW(builtin_shaping(id));
}

TEST_CASE("weight function initialization") {
  WeightFn wf(4, {ActionKind::discrete, 2}, {});
  Rng rng(4);
  wf.init(rng);
  const auto bias = wf.net().bias(wf.net().num_layers() - 1);
  CHECK(bias(0, 0) >= 1 - 1e-3);
  CHECK(bias(0, 0) <= 1 + 1e-3);
  for (std::size_t l = 0; l + 1 < wf.net().num_layers(); ++l) {
    CHECK(wf.net().weight(l).cwiseAbs().maxCoeff() <= 0.125);
    CHECK(wf.net().bias(l).cwiseAbs().maxCoeff() <= 0.125);
  }
  CHECK(wf.net().weight(wf.net().num_layers() - 1).cwiseAbs().maxCoeff() <= 1e-3);

  Rng probe(5);
  for (int i = 0; i < 1000; ++i) {
    const Vec s = random_vec(4, probe, 3.0);
    const double z = wf.value(s, Vec::Constant(1, uniform01(probe) < 0.5 ? 0.0 : 1.0));
    CHECK(z > 0.9);
    CHECK(z < 1.1);
    CHECK(std::abs(z - 1.0) < 0.05);
  }

  WeightFn again(4, {ActionKind::discrete, 2}, {});
  Rng rng2(4);
  again.init(rng2);
  CHECK(again.params().data() == wf.params().data());
}

TEST_CASE("initial weight sits just inside a clip bound at 1") {
  WeightFnSpec spec;
  spec.clip = std::make_pair(-1.0, 1.0);
  WeightFn wf(3, {ActionKind::continuous, 3, -1, 1}, spec);
  CHECK(wf.initial_weight() == 1.0 - kClipInitMargin);
  Rng rng(6);
  wf.init(rng);
  const auto [z, g] = wf.weight_and_grad(Vec::Zero(3), Vec::Zero(3));
  CHECK(z < 1.0);
  CHECK(g.norm() > 0.0);

  WeightFnSpec wide;
  wide.clip = std::make_pair(-5.0, 5.0);
  CHECK(WeightFn(3, {ActionKind::continuous, 3, -1, 1}, wide).initial_weight() == 1.0);
  CHECK(WeightFn(3, {ActionKind::continuous, 3, -1, 1}, {}).initial_weight() == 1.0);
}

TEST_CASE("single weight starts at exactly 1") {
  WeightFnSpec spec;
  spec.single = true;
  WeightFn wf(4, {ActionKind::discrete, 2}, spec);
  Rng rng(7);
  wf.init(rng);
  CHECK(wf.num_params() == 1);
  CHECK(wf.value(Vec::Zero(4), Vec::Zero(1)) == 1.0);
  CHECK(wf.z_dim() == 1);
  const auto [z, g] = wf.weight_and_grad(Vec::Ones(4), Vec::Ones(1));
  CHECK(z == 1.0);
  CHECK(g[0] == 1.0);
}

TEST_CASE("weight gradient matches finite differences") {
  for (const bool discrete : {true, false}) {
    const ActionSpace space = discrete ? ActionSpace{ActionKind::discrete, 2} : ActionSpace{ActionKind::continuous, 1, -1, 1};
    WeightFn wf(4, space, {});
    Rng rng(8);
    wf.set_params(random_vec(wf.num_params(), rng, 0.5));
    const Vec s = random_vec(4, rng);
    const Vec a = discrete ? Vec::Ones(1) : Vec::Constant(1, 0.3);
    const auto [z, g] = wf.weight_and_grad(s, a);
    CHECK(z == wf.value(s, a));
    WeightFn probe = wf;
    const Vec fd = finite_diff_grad(
        [&](const Vec& p) {
          probe.set_params(p);
          return probe.value(s, a);
        },
        wf.params().data(), 1e-6);
    CHECK(max_rel_error(g.data(), fd) < 1e-5);

    Mat x(wf.input_dim(), 3);
    for (Index j = 0; j < 3; ++j) x.col(j) = wf.encode(random_vec(4, rng), a);
    const Mat per = wf.per_sample_grads(x);
    const Vec w = random_vec(3, rng);
    CHECK(test::rel_err(per * w, wf.weighted_grad(x, w).data()) < 1e-13);
  }
}

TEST_CASE("clamped weights have zero gradient") {
  WeightFnSpec spec;
  spec.clip = std::make_pair(-1.0, 1.0);
  spec.hidden = {};
  WeightFn wf(2, {ActionKind::continuous, 1, -1, 1}, spec);
  // z_raw = w . x + b with inputs (s0, s1, a)
  Vec p(4);
  p << 1.0, 0.0, 0.0, 0.0;
  wf.set_params(p);
  const auto [z_hi, g_hi] = wf.weight_and_grad(Vec::Constant(2, 3.0), Vec::Zero(1));
  CHECK(z_hi == 1.0);
  CHECK(g_hi.norm() == 0.0);
  const auto [z_lo, g_lo] = wf.weight_and_grad(Vec::Constant(2, -3.0), Vec::Zero(1));
  CHECK(z_lo == -1.0);
  CHECK(g_lo.norm() == 0.0);
  const auto [z_in, g_in] = wf.weight_and_grad(Vec::Constant(2, 0.5), Vec::Zero(1));
  CHECK(z_in == 0.5);
  CHECK(g_in.norm() > 0.0);
}

TEST_CASE("encodings and z-vectors") {
  const ActionSpace d{ActionKind::discrete, 3};
  Vec s(2);
  s << 0.5, -0.5;
  const Vec x = encode_state_action(d, s, Vec::Constant(1, 2.0));
  CHECK(x.size() == 5);
  CHECK(x[4] == 1.0);
  CHECK(x[2] == 0.0);
  CHECK_THROWS_AS(encode_state_action(d, s, Vec::Constant(1, 3.0)), std::out_of_range);

  WeightFn wf(2, d, {});
  Rng rng(9);
  wf.init(rng);
  CHECK(wf.z_dim() == 3);
  const Vec zv = wf.z_vector(s);
  for (Index k = 0; k < 3; ++k) CHECK(zv[k] == wf.value(s, Vec::Constant(1, static_cast<double>(k))));

  WeightFn wc(2, {ActionKind::continuous, 2, -1, 1}, {});
  CHECK(wc.z_dim() == 2);
  CHECK(wc.reference_actions()[0] == Vec::Constant(2, -1.0));
  CHECK(wc.reference_actions()[1] == Vec::Constant(2, 1.0));
}
