// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "smol/nn/tape.hpp"

namespace smol::nn {

enum class Init { zeros, ones, normal, xavier };

/// Named parameters with stable addresses. Names are "group/module/tensor".
template <typename T>
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : rng_(seed) {}
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  /// Xavier uses fan_in = rows, fan_out = cols unless overridden.
  Parameter<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init, double stddev = 0.02,
                    Eigen::Index fan_in = 0, Eigen::Index fan_out = 0) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    Parameter<T>& p = params_.emplace_back();
    p.name = name;
    p.value.resize(rows, cols);
    switch (init) {
      case Init::zeros: p.value.setZero(); break;
      case Init::ones: p.value.setOnes(); break;
      case Init::normal: fill_normal(p.value, stddev); break;
      case Init::xavier: {
        const double fi = static_cast<double>(fan_in ? fan_in : rows);
        const double fo = static_cast<double>(fan_out ? fan_out : cols);
        const double a = std::sqrt(6.0 / (fi + fo));
        std::uniform_real_distribution<double> u(-a, a);
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(u(rng_));
        break;
      }
    }
    p.grad = Matrix<T>::Zero(rows, cols);
    index_[name] = params_.size() - 1;
    return p;
  }

  Parameter<T>& operator[](const std::string& name) { return params_[lookup(name)]; }
  const Parameter<T>& operator[](const std::string& name) const { return params_[lookup(name)]; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::deque<Parameter<T>>& all() { return params_; }
  const std::deque<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  void fill_normal(Matrix<T>& m, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng_));
  }

  std::mt19937_64 rng_;
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Copies values between sets with identical names and shapes (e.g. float <-> double).
template <typename Dst, typename Src>
void copy_values(ParameterSet<Dst>& dst, const ParameterSet<Src>& src) {
  for (auto& p : dst.all()) {
    const auto& s = src[p.name];
    if (s.value.rows() != p.value.rows() || s.value.cols() != p.value.cols()) {
      throw std::invalid_argument("copy_values: shape mismatch for " + p.name);
    }
    p.value = s.value.template cast<Dst>();
  }
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
template <typename T>
class AdamW {
 public:
  AdamW(ParameterSet<T>& params, AdamWConfig cfg = {}) : params_(params), cfg_(cfg) {
    for (const auto& p : params_.all()) {
      m_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
    lr_scale_.assign(m_.size(), 1.0);
  }

  /// Multiplies the step size (and hence the decay) of every parameter whose
  /// name starts with `prefix`.
  void scale_group(const std::string& prefix, double scale) {
    std::size_t i = 0;
    for (const auto& p : params_.all()) {
      if (p.name.starts_with(prefix)) lr_scale_[i] = scale;
      ++i;
    }
  }

  void step(double lr) {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, t_));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, t_));
    const T eps = static_cast<T>(cfg_.eps);
    std::size_t i = 0;
    for (auto& p : params_.all()) {
      auto& m = m_[i];
      auto& v = v_[i];
      const double group_lr = lr * lr_scale_[i];
      const T step = static_cast<T>(group_lr);
      const T decay = static_cast<T>(1.0 - group_lr * cfg_.weight_decay);
      ++i;
      m = b1 * m + (T(1) - b1) * p.grad;
      v = b2 * v + (T(1) - b2) * p.grad.cwiseAbs2();
      p.value *= decay;
      p.value.array() -= step * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
  }

  long steps() const { return t_; }

 private:
  ParameterSet<T>& params_;
  AdamWConfig cfg_;
  std::vector<Matrix<T>> m_;
  std::vector<Matrix<T>> v_;
  std::vector<double> lr_scale_;
  long t_ = 0;
};

}  // namespace smol::nn
