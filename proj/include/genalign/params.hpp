#pragma once

#include "genalign/ndiff.hpp"
#include "genalign/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace genalign {

/// Ordered, named collection of parameter matrices.
template <typename Scalar>
class ParamSet {
 public:
  using Mat = nd::Matrix<Scalar>;

  void add(const std::string& name, Mat value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Mat& at(const std::string& name) { return values_[lookup(name)]; }
  const Mat& at(const std::string& name) const { return values_[lookup(name)]; }

  Mat& at(std::size_t i) { return values_[i]; }
  const Mat& at(std::size_t i) const { return values_[i]; }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return values_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  bool same_layout(const ParamSet& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols()) return false;
    }
    return true;
  }

  template <typename To>
  ParamSet<To> cast() const {
    ParamSet<To> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<To>());
    return out;
  }

  /// Zero-valued set with the same layout.
  ParamSet zeros_like() const {
    ParamSet out;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      out.add(names_[i], Mat::Zero(values_[i].rows(), values_[i].cols()));
    }
    return out;
  }

  /// Entries whose names start with `prefix`, with the prefix removed.
  ParamSet subset(const std::string& prefix) const {
    ParamSet out;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (names_[i].rfind(prefix, 0) == 0) out.add(names_[i].substr(prefix.size()), values_[i]);
    }
    return out;
  }

  /// Adds every entry of `other` under `prefix`.
  void merge(const std::string& prefix, const ParamSet& other) {
    for (std::size_t i = 0; i < other.size(); ++i) add(prefix + other.names()[i], other.at(i));
  }

  void add_scaled(const ParamSet& other, Scalar scale) {
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// A ParamSet recorded as leaves of one graph.
template <typename Scalar>
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(nd::Graph<Scalar>& g, const ParamSet<Scalar>& params, bool trainable) : names_(params.names()) {
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      vars_.push_back(trainable ? g.variable(params.at(i)) : g.constant(params.at(i)));
      index_.emplace(names_[i], i);
    }
  }

  nd::Var<Scalar> operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unbound parameter '" + name + "'");
    return vars_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  /// Binds each entry of `layout` to a reshaped slice of the 1 x N row `flat`,
  /// in layout order. Lets a gradient check treat a whole ParamSet as one input.
  static BoundParams from_flat(const nd::Var<Scalar>& flat, const ParamSet<Scalar>& layout) {
    BoundParams out;
    out.names_ = layout.names();
    nd::Index offset = 0;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& m = layout.at(i);
      out.vars_.push_back(nd::reshape(nd::slice_cols(flat, offset, m.size()), m.rows(), m.cols()));
      out.index_.emplace(out.names_[i], i);
      offset += m.size();
    }
    if (offset != flat.cols()) throw nd::ShapeError("from_flat: layout does not cover the flat vector");
    return out;
  }

  /// Gradients after backward(); zero for parameters the loss did not touch.
  ParamSet<Scalar> gradients() const {
    ParamSet<Scalar> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i].grad());
    return out;
  }

  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::vector<nd::Var<Scalar>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// All entries concatenated row-major into a single 1 x N row.
template <typename Scalar>
nd::Matrix<Scalar> flatten(const ParamSet<Scalar>& params) {
  nd::Matrix<Scalar> out(1, static_cast<nd::Index>(params.element_count()));
  nd::Index offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = params.at(i);
    out.block(0, offset, 1, m.size()) = Eigen::Map<const nd::Matrix<Scalar>>(m.data(), 1, m.size());
    offset += m.size();
  }
  return out;
}

namespace nn {

/// Weights ~ N(0, 1/fan_in), bias zero. Weight shape is in x out.
template <typename Scalar>
void add_linear(ParamSet<Scalar>& p, const std::string& name, int in, int out, Rng& rng) {
  nd::Matrix<Scalar> w(in, out);
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  for (int i = 0; i < in; ++i) {
    for (int j = 0; j < out; ++j) w(i, j) = static_cast<Scalar>(rng.normal() * scale);
  }
  p.add(name + ".w", std::move(w));
  p.add(name + ".b", nd::Matrix<Scalar>::Zero(1, out));
}

template <typename Scalar>
void add_layer_norm(ParamSet<Scalar>& p, const std::string& name, int dim) {
  p.add(name + ".gamma", nd::Matrix<Scalar>::Ones(1, dim));
  p.add(name + ".beta", nd::Matrix<Scalar>::Zero(1, dim));
}

template <typename Scalar>
nd::Var<Scalar> linear(const BoundParams<Scalar>& p, const std::string& name, const nd::Var<Scalar>& x) {
  return nd::add(nd::matmul(x, p[name + ".w"]), p[name + ".b"]);
}

template <typename Scalar>
nd::Var<Scalar> layer_norm(const BoundParams<Scalar>& p, const std::string& name, const nd::Var<Scalar>& x) {
  return nd::layer_norm(x, p[name + ".gamma"], p[name + ".beta"], Scalar(1e-5));
}

}  // namespace nn
}  // namespace genalign
