#include "bipars/policy.hpp"

#include <cmath>

namespace bipars {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Index action_index(double a, Index n) {
  const long idx = std::lround(a);
  if (idx < 0 || idx >= n) throw std::out_of_range("discrete action index out of range");
  return idx;
}

}  // namespace

Mat softmax_columns(const Mat& logits) {
  Mat p = logits;
  for (Index j = 0; j < p.cols(); ++j) {
    const double mx = p.col(j).maxCoeff();
    p.col(j) = (p.col(j).array() - mx).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

Policy::Policy(Index obs_dim, Index z_dim, ActionSpace space, PolicySpec spec)
    : obs_dim_(obs_dim), z_dim_(z_dim), space_(space), spec_(std::move(spec)) {
  if (obs_dim_ < 0 || z_dim_ < 0) throw ShapeError("policy input sizes must be non-negative");
  if (space_.size <= 0) throw ShapeError("policy needs a non-empty action space");
  std::vector<Index> sizes{input_dim()};
  std::vector<Activation> acts;
  for (Index h : spec_.hidden) {
    sizes.push_back(h);
    acts.push_back(spec_.activation);
  }
  sizes.push_back(space_.size);
  acts.push_back(Activation::identity);
  net_ = MlpNet(sizes, acts);
  if (!discrete()) log_std_ = Vec::Constant(space_.size, spec_.init_log_std);
  build_layout();
}

void Policy::build_layout() {
  auto layout = std::make_shared<ParamLayout>();
  layout->append(*net_.params().layout(), "net.");
  if (!discrete()) layout->add("log_std", space_.size, 1);
  layout_ = std::move(layout);
}

void Policy::init(Rng& rng) {
  net_.init_fan_in(rng);
  net_.init_uniform(net_.num_layers() - 1, -spec_.output_init_scale, spec_.output_init_scale, rng);
  if (!discrete()) log_std_.setConstant(std::clamp(spec_.init_log_std, kLogStdMin, kLogStdMax));
}

ParamVector Policy::params() const {
  Vec data(num_params());
  data.head(net_.num_params()) = net_.params().data();
  if (!discrete()) data.tail(space_.size) = log_std_;
  return ParamVector(layout_, std::move(data));
}

void Policy::set_params(const ParamVector& p) {
  if (!(*p.layout() == *layout_)) throw ShapeError("policy parameter layout mismatch");
  set_params(p.data());
}

void Policy::set_params(const Vec& data) {
  if (data.size() != num_params()) throw ShapeError("policy parameter count mismatch");
  net_.set_params(Vec(data.head(net_.num_params())));
  if (!discrete()) log_std_ = data.tail(space_.size).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
}

Vec Policy::make_input(const Vec& obs, const Vec* z) const {
  if (obs.size() != obs_dim_) throw ShapeError("policy observation length mismatch");
  if (hyper_mode() != (z != nullptr))
    throw std::invalid_argument(hyper_mode() ? "hyper-mode policy requires a z input" : "policy is not in hyper mode");
  if (!z) return obs;
  if (z->size() != z_dim_) throw ShapeError("policy z input length mismatch");
  return concat(obs, *z);
}

Vec Policy::draw_noise(Rng& rng) const {
  if (discrete()) return Vec::Constant(1, uniform01(rng));
  Vec xi(space_.size);
  for (Index k = 0; k < xi.size(); ++k) xi[k] = standard_normal(rng);
  return xi;
}

Policy::Sample Policy::act(const Vec& input, const Vec& noise) const {
  const Vec y = net_.predict(input);
  Sample s;
  if (discrete()) {
    const Vec p = softmax_columns(y);
    const double u = noise[0];
    Index a = p.size() - 1;
    double acc = 0.0;
    for (Index k = 0; k < p.size(); ++k) {
      acc += p[k];
      if (u < acc) {
        a = k;
        break;
      }
    }
    s.action = Vec::Constant(1, static_cast<double>(a));
    s.log_prob = std::log(p[a]);
  } else {
    if (noise.size() != space_.size) throw ShapeError("gaussian noise length mismatch");
    const Vec sigma = log_std_.array().exp();
    s.action = y + sigma.cwiseProduct(noise);
    s.log_prob = -0.5 * noise.squaredNorm() - log_std_.sum() - kHalfLog2Pi * static_cast<double>(space_.size);
  }
  return s;
}

PolicyEval Policy::evaluate(const Mat& inputs, const Mat& actions) const {
  if (actions.rows() != action_dim() || actions.cols() != inputs.cols()) throw ShapeError("policy action batch shape mismatch");
  PolicyEval ev;
  ev.tape = net_.forward_batch(inputs);
  const Mat& y = ev.tape.output();
  const Index B = inputs.cols();
  ev.log_prob.resize(B);
  if (discrete()) {
    ev.head = softmax_columns(y);
    ev.dlogp_dy = -ev.head;
    for (Index j = 0; j < B; ++j) {
      const Index a = action_index(actions(0, j), space_.size);
      ev.log_prob[j] = std::log(ev.head(a, j));
      ev.dlogp_dy(a, j) += 1.0;
    }
  } else {
    ev.head = y;
    const Vec inv_var = (-2.0 * log_std_).array().exp();
    const Mat diff = actions - y;
    ev.dlogp_dy = inv_var.asDiagonal() * diff;
    const Mat z2 = diff.cwiseProduct(ev.dlogp_dy);
    ev.dlogp_dlogstd = (z2.array() - 1.0).matrix();
    const double norm = log_std_.sum() + kHalfLog2Pi * static_cast<double>(space_.size);
    ev.log_prob = (-0.5 * z2.colwise().sum().array() - norm).matrix().transpose();
  }
  return ev;
}

ParamVector Policy::weighted_grad(const PolicyEval& ev, const Vec& w) const {
  if (w.size() != ev.tape.batch()) throw ShapeError("policy gradient weight length mismatch");
  const ParamVector gnet = net_.grad_params(ev.tape, ev.dlogp_dy * w.asDiagonal());
  Vec data(num_params());
  data.head(net_.num_params()) = gnet.data();
  if (!discrete()) data.tail(space_.size) = ev.dlogp_dlogstd * w;
  return ParamVector(layout_, std::move(data));
}

Mat Policy::per_sample_grads(const PolicyEval& ev) const {
  const Mat gnet = net_.per_sample_grads(ev.tape, ev.dlogp_dy);
  if (discrete()) return gnet;
  Mat out(num_params(), gnet.cols());
  out.topRows(gnet.rows()) = gnet;
  out.bottomRows(space_.size) = ev.dlogp_dlogstd;
  return out;
}

Mat Policy::input_grads(const PolicyEval& ev) const { return net_.grad_input(ev.tape, ev.dlogp_dy); }

Mat Policy::z_grads(const PolicyEval& ev) const {
  if (!hyper_mode()) throw std::invalid_argument("z gradients require a hyper-mode policy");
  return input_grads(ev).bottomRows(z_dim_);
}

ParamVector Policy::weighted_hvp(const Mat& inputs, const Mat& actions, const Vec& w, const ParamVector& d,
                                 const HvpOptions& opts) const {
  if (!(*d.layout() == *layout_)) throw ShapeError("policy hvp direction layout mismatch");
  if (w.size() != inputs.cols()) throw ShapeError("policy hvp weight length mismatch");
  ParamVector out;
  if (opts.mode == HvpMode::reverse) {
    out = weighted_hvp_reverse(inputs, actions, w, d);
  } else {
    if (!(opts.fd_eps > 0.0)) throw std::invalid_argument("finite-difference hvp needs eps > 0");
    Policy shifted = *this;
    auto grad_at = [&](double s) {
      Vec p = params().data() + s * d.data();
      shifted.net_.set_params(Vec(p.head(net_.num_params())));
      if (!discrete()) shifted.log_std_ = p.tail(space_.size);
      return shifted.weighted_grad(shifted.evaluate(inputs, actions), w);
    };
    out = grad_at(opts.fd_eps);
    out -= grad_at(-opts.fd_eps);
    out *= 1.0 / (2.0 * opts.fd_eps);
  }
  if (!out.all_finite()) throw NumericError("non-finite value in policy Hessian-vector product");
  return out;
}

ParamVector Policy::weighted_hvp_reverse(const Mat& inputs, const Mat& actions, const Vec& w,
                                         const ParamVector& d) const {
  const Index nn = net_.num_params();
  const ParamVector d_net(net_.params().layout(), Vec(d.data().head(nn)));
  const Index B = inputs.cols();
  Vec data(num_params());

  if (discrete()) {
    Mat onehot = Mat::Zero(space_.size, B);
    for (Index j = 0; j < B; ++j) onehot(action_index(actions(0, j), space_.size), j) = 1.0;
    OutputLoss loss;
    loss.seed = [&](const Mat& y) { return Mat((onehot - softmax_columns(y)) * w.asDiagonal()); };
    loss.curvature = [&](const Mat& y, const Mat& ry) {
      const Mat p = softmax_columns(y);
      const Mat pr = p.cwiseProduct(ry);
      const Mat hr = pr - p * pr.colwise().sum().asDiagonal();
      return Mat(-(hr * w.asDiagonal()));
    };
    return ParamVector(layout_, net_.hvp(inputs, loss, d_net).data());
  }

  const Vec inv_var = (-2.0 * log_std_).array().exp();
  const Vec d_ls = d.data().tail(space_.size);
  OutputLoss loss;
  loss.seed = [&](const Mat& y) { return Mat(inv_var.asDiagonal() * (actions - y) * w.asDiagonal()); };
  loss.curvature = [&](const Mat& /*y*/, const Mat& ry) { return Mat(-(inv_var.asDiagonal() * ry * w.asDiagonal())); };
  ParamVector hnet = net_.hvp(inputs, loss, d_net);

  const ForwardTape tape = net_.forward_batch(inputs);
  const Mat diff = actions - tape.output();
  // d^2 log pi / (d mu d log_std) = -2 (a - mu) / sigma^2
  const Mat cross = -2.0 * (inv_var.asDiagonal() * diff);
  hnet += net_.grad_params(tape, d_ls.asDiagonal() * cross * w.asDiagonal());
  const Mat rmu = net_.jvp(tape, d_net);
  const Mat d2_ls = cross.cwiseProduct(diff);
  const Vec hls = (cross.cwiseProduct(rmu) + d_ls.asDiagonal() * d2_ls) * w;

  data.head(nn) = hnet.data();
  data.tail(space_.size) = hls;
  return ParamVector(layout_, std::move(data));
}

Vec Policy::probs(const Vec& input) const {
  if (!discrete()) throw std::invalid_argument("probs() needs a discrete policy");
  return softmax_columns(net_.predict(input));
}

Vec Policy::mean(const Vec& input) const {
  if (discrete()) throw std::invalid_argument("mean() needs a continuous policy");
  return net_.predict(input);
}

std::uint64_t Policy::fingerprint() const { return fnv1a(params().data()); }

}  // namespace bipars
