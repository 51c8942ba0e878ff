#include "bipars/shaping.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace bipars {

namespace {

int sign(double v) { return (v > 0.0) - (v < 0.0); }

Index bin(double v, double lo, double hi, Index bins) {
  const double t = (std::clamp(v, lo, hi) - lo) / (hi - lo);
  return std::min<Index>(static_cast<Index>(t * static_cast<double>(bins)), bins - 1);
}

}  // namespace

Index cartpole_random_cell(const Vec& s) {
  static constexpr double lo[4] = {-2.4, -2.0, -0.21, -2.0};
  static constexpr double hi[4] = {2.4, 2.0, 0.21, 2.0};
  Index cell = 0;
  for (int k = 0; k < 4; ++k) cell = cell * 10 + bin(s[k], lo[k], hi[k], 10);
  return cell;
}

ShapingSpec builtin_shaping(const std::string& id, std::uint64_t table_seed, double task_weight) {
  ShapingSpec spec;
  spec.id = id;
  if (id == "none") {
    spec.description = "no shaping";
    spec.f = [](const Vec&, const Vec&, const Vec&) { return 0.0; };
  } else if (id == "cartpole-beneficial") {
    spec.description = "0.1 when force and pole angle share a sign";
    spec.f = [](const Vec& s, const Vec& a, const Vec&) {
      const int sf = sign(a[0]);
      return (sf != 0 && sf == sign(s[2])) ? 0.1 : 0.0;
    };
  } else if (id == "cartpole-harmful") {
    spec.description = "-0.1 when the pole angle magnitude shrinks";
    spec.f = [](const Vec& s, const Vec&, const Vec& s2) { return std::abs(s2[2]) < std::abs(s[2]) ? -0.1 : 0.0; };
  } else if (id == "cartpole-half") {
    spec.description = "+0.1 for rightward corrections when leaning right, -0.1 for leftward corrections when leaning left";
    spec.f = [](const Vec& s, const Vec& a, const Vec&) {
      if (s[2] > 0.0 && a[0] > 0.0) return 0.1;
      if (s[2] < 0.0 && a[0] < 0.0) return -0.1;
      return 0.0;
    };
  } else if (id == "cartpole-random") {
    spec.description = "uniform [-1, 1] value per (state cell, action sign)";
    auto table = std::make_shared<std::vector<double>>(20000);
    Rng rng = make_stream(table_seed, "shaping-table");
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (double& v : *table) v = u(rng);
    spec.f = [table](const Vec& s, const Vec& a, const Vec&) {
      const Index cell = cartpole_random_cell(s);
      return (*table)[static_cast<std::size_t>(2 * cell + (a[0] > 0.0 ? 1 : 0))];
    };
  } else if (id == "torque-constraint") {
    spec.description = "w * (0.25 - mean |a_i|)";
    spec.task_weight = task_weight;
    spec.f = [task_weight](const Vec&, const Vec& a, const Vec&) { return task_weight * (0.25 - a.cwiseAbs().mean()); };
  } else {
    throw UnknownShapingError("unknown shaping id: " + id);
  }
  return spec;
}

std::vector<std::string> builtin_shaping_ids() {
  return {"none", "cartpole-beneficial", "cartpole-harmful", "cartpole-half", "cartpole-random", "torque-constraint"};
}

WeightFn::WeightFn(Index state_dim, ActionSpace space, WeightFnSpec spec)
    : state_dim_(state_dim), space_(space), spec_(std::move(spec)) {
  if (spec_.clip && !(spec_.clip->first < spec_.clip->second)) throw std::invalid_argument("weight clip range is empty");
  if (spec_.single) {
    net_ = MlpNet({0, 1}, {Activation::identity});
  } else {
    std::vector<Index> sizes{state_dim_ + space_.size};
    std::vector<Activation> acts;
    for (Index h : spec_.hidden) {
      sizes.push_back(h);
      acts.push_back(spec_.activation);
    }
    sizes.push_back(1);
    acts.push_back(Activation::identity);
    net_ = MlpNet(sizes, acts);
  }
  if (spec_.single) {
    refs_.push_back(Vec::Zero(space_.size));
  } else if (space_.discrete()) {
    for (Index k = 0; k < space_.size; ++k) refs_.push_back(Vec::Constant(1, static_cast<double>(k)));
  } else {
    refs_.push_back(Vec::Constant(space_.size, space_.low));
    refs_.push_back(Vec::Constant(space_.size, space_.high));
  }
}

void WeightFn::init(Rng& rng) {
  if (spec_.single) {
    net_.set_params(Vec::Constant(1, initial_weight()));
    return;
  }
  const std::size_t last = net_.num_layers() - 1;
  for (std::size_t l = 0; l < last; ++l) net_.init_uniform(l, -0.125, 0.125, rng);
  net_.init_uniform(last, -1e-3, 1e-3, rng);
  net_.bias(last)(0, 0) += initial_weight();
}

Vec encode_state_action(const ActionSpace& space, const Vec& s, const Vec& a) {
  Vec x = Vec::Zero(s.size() + space.size);
  x.head(s.size()) = s;
  if (space.discrete()) {
    const long idx = std::lround(a[0]);
    if (idx < 0 || idx >= space.size) throw std::out_of_range("discrete action index out of range");
    x[s.size() + idx] = 1.0;
  } else {
    if (a.size() != space.size) throw ShapeError("action length mismatch");
    x.tail(space.size) = a;
  }
  return x;
}

Vec WeightFn::encode(const Vec& s, const Vec& a) const {
  if (spec_.single) return Vec(0);
  if (s.size() != state_dim_) throw ShapeError("weight function state length mismatch");
  return encode_state_action(space_, s, a);
}

double WeightFn::initial_weight() const {
  if (spec_.clip && spec_.clip->second <= 1.0 + kClipInitMargin) return spec_.clip->second - kClipInitMargin;
  return 1.0;
}

double WeightFn::clamp(double z) const { return spec_.clip ? std::clamp(z, spec_.clip->first, spec_.clip->second) : z; }

bool WeightFn::clamped(double raw) const { return spec_.clip && (raw < spec_.clip->first || raw > spec_.clip->second); }

double WeightFn::value_encoded(const Vec& x) const { return clamp(net_.predict(x)[0]); }

Vec WeightFn::values(const Mat& x) const {
  Vec z = net_.predict_batch(x).row(0).transpose();
  for (Index j = 0; j < z.size(); ++j) z[j] = clamp(z[j]);
  return z;
}

std::pair<double, ParamVector> WeightFn::weight_and_grad(const Vec& s, const Vec& a) const {
  const ForwardTape tape = net_.forward(encode(s, a));
  const double raw = tape.output()(0, 0);
  if (clamped(raw)) return {clamp(raw), ParamVector::zeros_like(net_.params())};
  return {raw, net_.grad_params(tape, Mat::Ones(1, 1))};
}

Mat WeightFn::per_sample_grads(const Mat& x) const {
  const ForwardTape tape = net_.forward_batch(x);
  Mat g = net_.per_sample_grads(tape, Mat::Ones(1, x.cols()));
  if (spec_.clip)
    for (Index j = 0; j < x.cols(); ++j)
      if (clamped(tape.output()(0, j))) g.col(j).setZero();
  return g;
}

ParamVector WeightFn::weighted_grad(const Mat& x, const Vec& w) const {
  if (w.size() != x.cols()) throw ShapeError("weight gradient weight length mismatch");
  const ForwardTape tape = net_.forward_batch(x);
  Mat seeds = w.transpose();
  if (spec_.clip)
    for (Index j = 0; j < x.cols(); ++j)
      if (clamped(tape.output()(0, j))) seeds(0, j) = 0.0;
  return net_.grad_params(tape, seeds);
}

Mat WeightFn::z_vector_inputs(const Vec& s) const {
  Mat x(input_dim(), z_dim());
  for (Index k = 0; k < z_dim(); ++k) x.col(k) = encode(s, refs_[static_cast<std::size_t>(k)]);
  return x;
}

Vec WeightFn::z_vector(const Vec& s) const { return values(z_vector_inputs(s)); }

}  // namespace bipars
