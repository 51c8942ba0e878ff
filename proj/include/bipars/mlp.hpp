#pragma once

#include "bipars/tensor.hpp"

#include <functional>
#include <random>
#include <string_view>
#include <vector>

namespace bipars {

enum class Activation { tanh, relu, identity };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);

/// Cached intermediates of one forward pass over a batch. Column j of every
/// matrix belongs to sample j. `act[0]` is the input, `act.back()` the output.
struct ForwardTape {
  std::vector<Mat> pre;
  std::vector<Mat> act;
  std::uint64_t fingerprint = 0;

  const Mat& output() const { return act.back(); }
  Index batch() const { return act.front().cols(); }
};

/// Scalar loss on the network output, summed over the batch. `seed` returns
/// dL/dY; `curvature` returns the directional derivative of dL/dY along RY
/// (the output Hessian applied to RY). An empty curvature means L is linear
/// in Y.
struct OutputLoss {
  std::function<Mat(const Mat& y)> seed;
  std::function<Mat(const Mat& y, const Mat& ry)> curvature;

  static OutputLoss linear(Mat seeds);
};

enum class HvpMode { reverse, finite_difference };

struct HvpOptions {
  HvpMode mode = HvpMode::reverse;
  double fd_eps = 1e-5;
};

/// Fully connected network. Layer l maps x -> act_l(W_l x + b_l).
///
/// Parameter layout is layer-major, weights (row-major, out x in) before
/// biases, so that checkpoints are portable:
///   [W_1, b_1, W_2, b_2, ..., W_L, b_L]
/// A layer with zero inputs is allowed; it outputs act(b).
class MlpNet {
 public:
  MlpNet() = default;
  MlpNet(std::vector<Index> sizes, std::vector<Activation> activations);

  Index input_size() const { return sizes_.front(); }
  Index output_size() const { return sizes_.back(); }
  std::size_t num_layers() const { return activations_.size(); }
  const std::vector<Index>& sizes() const { return sizes_; }
  const std::vector<Activation>& activations() const { return activations_; }
  Index num_params() const { return params_.size(); }

  const ParamVector& params() const { return params_; }
  void set_params(const ParamVector& p);
  void set_params(const Vec& data);

  ParamVector::ConstSegmentMap weight(std::size_t layer) const { return params_.segment(2 * layer); }
  ParamVector::ConstSegmentMap bias(std::size_t layer) const { return params_.segment(2 * layer + 1); }
  ParamVector::SegmentMap weight(std::size_t layer) { return params_.segment(2 * layer); }
  ParamVector::SegmentMap bias(std::size_t layer) { return params_.segment(2 * layer + 1); }

  /// Fills layer `layer` weights and biases with U[lo, hi].
  void init_uniform(std::size_t layer, double lo, double hi, std::mt19937_64& rng);
  /// U[-1/sqrt(fan_in), 1/sqrt(fan_in)] for every layer.
  void init_fan_in(std::mt19937_64& rng);

  ForwardTape forward(const Vec& x) const;
  ForwardTape forward_batch(const Mat& x) const;
  Vec predict(const Vec& x) const;
  Mat predict_batch(const Mat& x) const;

  /// Sum over the batch of d(seed_j . y_j)/dparams.
  ParamVector grad_params(const ForwardTape& tape, const Mat& seeds) const;
  /// Column j holds d(seed_j . y_j)/dx_j.
  Mat grad_input(const ForwardTape& tape, const Mat& seeds) const;
  /// Both of the above from one backward sweep.
  std::pair<ParamVector, Mat> grad_both(const ForwardTape& tape, const Mat& seeds) const;
  /// Column j holds d(seed_j . y_j)/dparams (n x batch).
  Mat per_sample_grads(const ForwardTape& tape, const Mat& seeds) const;
  /// Directional derivative of the outputs along `direction` in parameter
  /// space (forward mode), one column per sample.
  Mat jvp(const ForwardTape& tape, const ParamVector& direction) const;

  /// Sum over the batch of (d^2 L / dparams^2) * direction.
  ParamVector hvp(const Mat& x, const OutputLoss& loss, const ParamVector& direction,
                  const HvpOptions& opts = {}) const;
  /// Linear-seed form: L = sum_j seed_j . y_j.
  ParamVector hvp(const Vec& x, const Vec& seed, const ParamVector& direction, const HvpOptions& opts = {}) const;

  std::uint64_t fingerprint() const;

 private:
  void check_tape(const ForwardTape& tape) const;
  ParamVector hvp_reverse(const Mat& x, const OutputLoss& loss, const ParamVector& direction) const;

  std::vector<Index> sizes_;
  std::vector<Activation> activations_;
  ParamVector params_;
};

/// Lazy operator d -> sum_i w_i g_i (g_i . d). Columns of `grads` are g_i.
class OuterProductOperator {
 public:
  OuterProductOperator(Mat grads, Vec weights);
  static OuterProductOperator from_list(const std::vector<ParamVector>& grads, const std::vector<double>& weights);

  Index dim() const { return grads_.rows(); }
  Vec apply(const Vec& d) const;
  ParamVector apply(const ParamVector& d) const;
  /// Applies the operator to every column of `d` (n x k).
  Mat apply_columns(const Mat& d) const;

 private:
  Mat grads_;
  Vec weights_;
};

inline OuterProductOperator opg_approx(const std::vector<ParamVector>& grads, const std::vector<double>& weights) {
  return OuterProductOperator::from_list(grads, weights);
}

}  // namespace bipars
