#include "bipars/mlp.hpp"

#include <cmath>

namespace bipars {

namespace {

void apply_activation(Activation a, const Mat& u, Mat& out) {
  switch (a) {
    case Activation::tanh: out = u.array().tanh(); break;
    case Activation::relu: out = u.array().max(0.0); break;
    case Activation::identity: out = u; break;
  }
}

// sigma'(u), with the activated value y = sigma(u) available.
Mat activation_slope(Activation a, const Mat& u, const Mat& y) {
  switch (a) {
    case Activation::tanh: return (1.0 - y.array().square()).matrix();
    case Activation::relu: return (u.array() > 0.0).cast<double>().matrix();
    case Activation::identity: return Mat::Ones(u.rows(), u.cols());
  }
  return {};
}

// sigma''(u)
Mat activation_curvature(Activation a, const Mat& u, const Mat& y) {
  if (a == Activation::tanh) return (-2.0 * y.array() * (1.0 - y.array().square())).matrix();
  return Mat::Zero(u.rows(), u.cols());
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "identity" || name == "linear") return Activation::identity;
  throw std::invalid_argument("unknown activation: " + std::string(name));
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

OutputLoss OutputLoss::linear(Mat seeds) {
  OutputLoss l;
  l.seed = [s = std::move(seeds)](const Mat& y) {
    if (s.rows() != y.rows() || s.cols() != y.cols()) throw ShapeError("output seed shape mismatch");
    return s;
  };
  return l;
}

MlpNet::MlpNet(std::vector<Index> sizes, std::vector<Activation> activations)
    : sizes_(std::move(sizes)), activations_(std::move(activations)) {
  if (sizes_.size() < 2) throw ShapeError("an MLP needs at least an input and an output size");
  if (activations_.size() != sizes_.size() - 1) throw ShapeError("need exactly one activation per layer");
  auto layout = std::make_shared<ParamLayout>();
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    if (sizes_[l + 1] <= 0) throw ShapeError("layer output size must be positive");
    layout->add("W" + std::to_string(l), sizes_[l + 1], sizes_[l]);
    layout->add("b" + std::to_string(l), sizes_[l + 1], 1);
  }
  params_ = ParamVector(std::move(layout));
}

void MlpNet::set_params(const ParamVector& p) {
  if (!params_.compatible(p)) throw ShapeError("parameter layout does not match network");
  params_.data() = p.data();
}

void MlpNet::set_params(const Vec& data) {
  if (data.size() != params_.size()) throw ShapeError("parameter count does not match network");
  params_.data() = data;
}

void MlpNet::init_uniform(std::size_t layer, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  auto w = weight(layer);
  for (Index r = 0; r < w.rows(); ++r)
    for (Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
  auto b = bias(layer);
  for (Index r = 0; r < b.rows(); ++r) b(r, 0) = u(rng);
}

void MlpNet::init_fan_in(std::mt19937_64& rng) {
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(sizes_[l], 1)));
    init_uniform(l, -bound, bound, rng);
  }
}

std::uint64_t MlpNet::fingerprint() const {
  std::uint64_t h = fnv1a(params_.data());
  for (Index s : sizes_) h = (h ^ static_cast<std::uint64_t>(s)) * 1099511628211ULL;
  return h;
}

ForwardTape MlpNet::forward(const Vec& x) const { return forward_batch(x); }

ForwardTape MlpNet::forward_batch(const Mat& x) const {
  if (x.rows() != input_size())
    throw ShapeError("input has " + std::to_string(x.rows()) + " rows, network expects " +
                     std::to_string(input_size()));
  ForwardTape tape;
  tape.pre.resize(num_layers());
  tape.act.resize(num_layers() + 1);
  tape.act[0] = x;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Mat& u = tape.pre[l];
    u.noalias() = weight(l) * tape.act[l];
    u.colwise() += bias(l).col(0);
    apply_activation(activations_[l], u, tape.act[l + 1]);
  }
  tape.fingerprint = fingerprint();
  return tape;
}

Vec MlpNet::predict(const Vec& x) const { return forward_batch(x).output().col(0); }

Mat MlpNet::predict_batch(const Mat& x) const {
  if (x.rows() != input_size()) throw ShapeError("input shape mismatch");
  Mat a = x;
  Mat u;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    u.noalias() = weight(l) * a;
    u.colwise() += bias(l).col(0);
    apply_activation(activations_[l], u, a);
  }
  return a;
}

void MlpNet::check_tape(const ForwardTape& tape) const {
  if (tape.act.size() != num_layers() + 1 || tape.fingerprint != fingerprint())
    throw StaleTapeError("forward tape was not produced by this network with its current parameters");
}

std::pair<ParamVector, Mat> MlpNet::grad_both(const ForwardTape& tape, const Mat& seeds) const {
  check_tape(tape);
  if (seeds.rows() != output_size() || seeds.cols() != tape.batch()) throw ShapeError("output seed shape mismatch");
  ParamVector g = ParamVector::zeros_like(params_);
  Mat gy = seeds;
  Mat gu;
  for (std::size_t l = num_layers(); l-- > 0;) {
    gu = activation_slope(activations_[l], tape.pre[l], tape.act[l + 1]).cwiseProduct(gy);
    g.segment(2 * l).noalias() = gu * tape.act[l].transpose();
    g.segment(2 * l + 1) = gu.rowwise().sum();
    gy.noalias() = weight(l).transpose() * gu;
  }
  return {std::move(g), std::move(gy)};
}

ParamVector MlpNet::grad_params(const ForwardTape& tape, const Mat& seeds) const {
  return grad_both(tape, seeds).first;
}

Mat MlpNet::grad_input(const ForwardTape& tape, const Mat& seeds) const { return grad_both(tape, seeds).second; }

Mat MlpNet::per_sample_grads(const ForwardTape& tape, const Mat& seeds) const {
  check_tape(tape);
  if (seeds.rows() != output_size() || seeds.cols() != tape.batch()) throw ShapeError("output seed shape mismatch");
  const Index batch = tape.batch();
  Mat out(num_params(), batch);
  Mat gy = seeds;
  Mat gu;
  const auto& layout = *params_.layout();
  for (std::size_t l = num_layers(); l-- > 0;) {
    gu = activation_slope(activations_[l], tape.pre[l], tape.act[l + 1]).cwiseProduct(gy);
    const Segment& ws = layout.segment(2 * l);
    const Segment& bs = layout.segment(2 * l + 1);
    const Mat& xin = tape.act[l];
    for (Index j = 0; j < batch; ++j) {
      Eigen::Map<DenseMatrix> w(out.col(j).data() + ws.offset, ws.rows, ws.cols);
      w.noalias() = gu.col(j) * xin.col(j).transpose();
      out.col(j).segment(bs.offset, bs.rows) = gu.col(j);
    }
    if (l > 0) gy.noalias() = weight(l).transpose() * gu;
  }
  return out;
}

Mat MlpNet::jvp(const ForwardTape& tape, const ParamVector& direction) const {
  check_tape(tape);
  if (!params_.compatible(direction)) throw ShapeError("jvp direction layout does not match network");
  const auto& layout = *params_.layout();
  Mat rx = Mat::Zero(tape.act[0].rows(), tape.batch());
  Mat ru;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const Segment& ws = layout.segment(2 * l);
    const Segment& bs = layout.segment(2 * l + 1);
    Eigen::Map<const DenseMatrix> dw(direction.data().data() + ws.offset, ws.rows, ws.cols);
    ru.noalias() = dw * tape.act[l];
    ru.noalias() += weight(l) * rx;
    ru.colwise() += direction.data().segment(bs.offset, bs.rows);
    rx = activation_slope(activations_[l], tape.pre[l], tape.act[l + 1]).cwiseProduct(ru);
  }
  return rx;
}

ParamVector MlpNet::hvp(const Vec& x, const Vec& seed, const ParamVector& direction, const HvpOptions& opts) const {
  return hvp(Mat(x), OutputLoss::linear(Mat(seed)), direction, opts);
}

ParamVector MlpNet::hvp(const Mat& x, const OutputLoss& loss, const ParamVector& direction,
                        const HvpOptions& opts) const {
  if (!params_.compatible(direction)) throw ShapeError("hvp direction layout does not match network");
  ParamVector out;
  if (opts.mode == HvpMode::reverse) {
    out = hvp_reverse(x, loss, direction);
  } else {
    if (!(opts.fd_eps > 0.0)) throw std::invalid_argument("finite-difference hvp needs eps > 0");
    MlpNet shifted = *this;
    auto grad_at = [&](double s) {
      shifted.params_.data() = params_.data() + s * direction.data();
      ForwardTape t = shifted.forward_batch(x);
      return shifted.grad_params(t, loss.seed(t.output()));
    };
    out = grad_at(opts.fd_eps);
    out -= grad_at(-opts.fd_eps);
    out *= 1.0 / (2.0 * opts.fd_eps);
  }
  if (!out.all_finite()) throw NumericError("non-finite value in Hessian-vector product");
  return out;
}

// Forward-over-reverse (Pearlmutter's R-operator): one forward sweep carries
// directional derivatives R{u}, R{x}; the backward sweep carries R{adjoints}.
ParamVector MlpNet::hvp_reverse(const Mat& x, const OutputLoss& loss, const ParamVector& direction) const {
  const ForwardTape tape = forward_batch(x);
  const std::size_t L = num_layers();
  const auto& layout = *params_.layout();
  auto dW = [&](std::size_t l) {
    const Segment& s = layout.segment(2 * l);
    return Eigen::Map<const DenseMatrix>(direction.data().data() + s.offset, s.rows, s.cols);
  };
  auto db = [&](std::size_t l) {
    const Segment& s = layout.segment(2 * l + 1);
    return direction.data().segment(s.offset, s.rows);
  };

  std::vector<Mat> ru(L), rx(L + 1), slope(L);
  rx[0] = Mat::Zero(x.rows(), x.cols());
  for (std::size_t l = 0; l < L; ++l) {
    slope[l] = activation_slope(activations_[l], tape.pre[l], tape.act[l + 1]);
    ru[l].noalias() = dW(l) * tape.act[l];
    ru[l].noalias() += weight(l) * rx[l];
    ru[l].colwise() += db(l);
    rx[l + 1] = slope[l].cwiseProduct(ru[l]);
  }

  Mat gy = loss.seed(tape.output());
  if (gy.rows() != output_size() || gy.cols() != tape.batch()) throw ShapeError("output seed shape mismatch");
  Mat rgy = loss.curvature ? loss.curvature(tape.output(), rx[L]) : Mat::Zero(gy.rows(), gy.cols());

  ParamVector out = ParamVector::zeros_like(params_);
  Mat gu, rgu;
  for (std::size_t l = L; l-- > 0;) {
    gu = slope[l].cwiseProduct(gy);
    rgu = slope[l].cwiseProduct(rgy);
    if (activations_[l] == Activation::tanh)
      rgu += activation_curvature(activations_[l], tape.pre[l], tape.act[l + 1]).cwiseProduct(ru[l]).cwiseProduct(gy);
    out.segment(2 * l).noalias() = rgu * tape.act[l].transpose();
    out.segment(2 * l).noalias() += gu * rx[l].transpose();
    out.segment(2 * l + 1) = rgu.rowwise().sum();
    if (l > 0) {
      Mat next_rgy = weight(l).transpose() * rgu;
      next_rgy.noalias() += dW(l).transpose() * gu;
      gy.noalias() = weight(l).transpose() * gu;
      rgy = std::move(next_rgy);
    }
  }
  return out;
}

OuterProductOperator::OuterProductOperator(Mat grads, Vec weights) : grads_(std::move(grads)), weights_(std::move(weights)) {
  if (grads_.cols() != weights_.size()) throw ShapeError("OPG: number of gradients and weights differ");
}

OuterProductOperator OuterProductOperator::from_list(const std::vector<ParamVector>& grads,
                                                     const std::vector<double>& weights) {
  if (grads.size() != weights.size()) throw ShapeError("OPG: number of gradients and weights differ");
  const Index n = grads.empty() ? 0 : grads.front().size();
  Mat g(n, static_cast<Index>(grads.size()));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != n) throw ShapeError("OPG: gradient lengths differ");
    g.col(static_cast<Index>(i)) = grads[i].data();
  }
  return OuterProductOperator(std::move(g), Eigen::Map<const Vec>(weights.data(), static_cast<Index>(weights.size())));
}

Vec OuterProductOperator::apply(const Vec& d) const {
  if (d.size() != grads_.rows()) throw ShapeError("OPG: direction length mismatch");
  if (grads_.cols() == 0) return Vec::Zero(d.size());
  const Vec proj = (grads_.transpose() * d).cwiseProduct(weights_);
  return grads_ * proj;
}

ParamVector OuterProductOperator::apply(const ParamVector& d) const { return ParamVector(d.layout(), apply(d.data())); }

Mat OuterProductOperator::apply_columns(const Mat& d) const {
  if (d.rows() != grads_.rows()) throw ShapeError("OPG: direction length mismatch");
  if (grads_.cols() == 0) return Mat::Zero(d.rows(), d.cols());
  const Mat proj = weights_.asDiagonal() * (grads_.transpose() * d);
  return grads_ * proj;
}

}  // namespace bipars
