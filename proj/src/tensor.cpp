#include "bipars/tensor.hpp"

#include <cmath>

namespace bipars {

void ParamLayout::add(std::string name, Index rows, Index cols) {
  if (rows < 0 || cols < 0) throw ShapeError("negative segment shape for " + name);
  segments_.push_back(Segment{std::move(name), rows, cols, size_});
  size_ += rows * cols;
}

void ParamLayout::append(const ParamLayout& other, const std::string& prefix) {
  for (const auto& s : other.segments()) add(prefix + s.name, s.rows, s.cols);
}

ParamVector::ParamVector(LayoutPtr layout) : layout_(std::move(layout)), data_(Vec::Zero(layout_->size())) {}

ParamVector::ParamVector(LayoutPtr layout, Vec data) : layout_(std::move(layout)), data_(std::move(data)) {
  if (data_.size() != layout_->size())
    throw ShapeError("parameter data length " + std::to_string(data_.size()) + " does not match layout size " +
                     std::to_string(layout_->size()));
}

ParamVector::SegmentMap ParamVector::segment(std::size_t i) {
  const Segment& s = layout_->segment(i);
  return SegmentMap(data_.data() + s.offset, s.rows, s.cols);
}

ParamVector::ConstSegmentMap ParamVector::segment(std::size_t i) const {
  const Segment& s = layout_->segment(i);
  return ConstSegmentMap(data_.data() + s.offset, s.rows, s.cols);
}

bool ParamVector::compatible(const ParamVector& other) const {
  return layout_ == other.layout_ || *layout_ == *other.layout_;
}

void ParamVector::check(const ParamVector& o, const char* op) const {
  if (!compatible(o)) throw ShapeError(std::string("incompatible parameter layouts in ") + op);
}

ParamVector& ParamVector::operator+=(const ParamVector& o) {
  check(o, "+=");
  data_ += o.data_;
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& o) {
  check(o, "-=");
  data_ -= o.data_;
  return *this;
}

ParamVector& ParamVector::operator*=(double s) {
  data_ *= s;
  return *this;
}

void ParamVector::axpy(double s, const ParamVector& o) {
  check(o, "axpy");
  data_.noalias() += s * o.data_;
}

double ParamVector::dot(const ParamVector& o) const {
  check(o, "dot");
  return data_.dot(o.data_);
}

Vec concat(const Vec& a, const Vec& b) {
  Vec out(a.size() + b.size());
  out << a, b;
  return out;
}

double clip_by_norm(ParamVector& g, double max_norm) {
  const double n = g.norm();
  if (max_norm > 0.0 && n > max_norm) g *= max_norm / n;
  return n;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fnv1a(const Vec& v, std::uint64_t seed) {
  return fnv1a(std::as_bytes(std::span<const double>(v.data(), static_cast<std::size_t>(v.size()))), seed);
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t seed) {
  return fnv1a(std::as_bytes(std::span<const char>(s.data(), s.size())), seed);
}

}  // namespace bipars
