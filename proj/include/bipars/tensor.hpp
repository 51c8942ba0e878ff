#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bipars {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Row-major dense matrix. Used for explicit operators at test scale and
/// for the dense meta-gradient accumulator.
using DenseMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StaleTapeError : std::logic_error {
  using std::logic_error::logic_error;
};

/// One named block inside a flat parameter vector. A block is a rows x cols
/// matrix stored row-major starting at `offset`.
struct Segment {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;

  Index size() const { return rows * cols; }
  bool operator==(const Segment& o) const {
    return name == o.name && rows == o.rows && cols == o.cols && offset == o.offset;
  }
};

/// Ordered list of segments. Layouts compare by value so two vectors built
/// from identical network specs are compatible even when created separately.
class ParamLayout {
 public:
  ParamLayout() = default;

  void add(std::string name, Index rows, Index cols);
  void append(const ParamLayout& other, const std::string& prefix);

  Index size() const { return size_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(std::size_t i) const { return segments_.at(i); }

  bool operator==(const ParamLayout& o) const { return segments_ == o.segments_; }

 private:
  std::vector<Segment> segments_;
  Index size_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

/// Flat parameter storage tagged with its layout.
class ParamVector {
 public:
  ParamVector() : layout_(std::make_shared<ParamLayout>()) {}
  explicit ParamVector(LayoutPtr layout);
  ParamVector(LayoutPtr layout, Vec data);

  static ParamVector zeros_like(const ParamVector& other) { return ParamVector(other.layout_); }

  Index size() const { return data_.size(); }
  const Vec& data() const { return data_; }
  Vec& data() { return data_; }
  const LayoutPtr& layout() const { return layout_; }

  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }

  using SegmentMap = Eigen::Map<DenseMatrix>;
  using ConstSegmentMap = Eigen::Map<const DenseMatrix>;
  SegmentMap segment(std::size_t i);
  ConstSegmentMap segment(std::size_t i) const;

  bool compatible(const ParamVector& other) const;

  ParamVector& operator+=(const ParamVector& o);
  ParamVector& operator-=(const ParamVector& o);
  ParamVector& operator*=(double s);
  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(ParamVector a, double s) { return a *= s; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }

  /// this += s * o
  void axpy(double s, const ParamVector& o);
  double dot(const ParamVector& o) const;
  double norm() const { return data_.norm(); }
  bool all_finite() const { return data_.allFinite(); }

 private:
  void check(const ParamVector& o, const char* op) const;

  LayoutPtr layout_;
  Vec data_;
};

Vec concat(const Vec& a, const Vec& b);

/// Rescale so that the global L2 norm is at most max_norm. Returns the norm
/// before clipping.
double clip_by_norm(ParamVector& g, double max_norm);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = 14695981039346656037ULL);
std::uint64_t fnv1a(const Vec& v, std::uint64_t seed = 14695981039346656037ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace bipars
