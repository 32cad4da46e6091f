#pragma once

// AdamW with decoupled weight decay. One state per named parameter; the
// update order over names is fixed (std::map), so training is deterministic.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "securegate/tensor.hpp"

namespace securegate {

struct AdamWParams {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  explicit AdamW(AdamWParams p) : p_(p) {
    if (p.lr <= 0 || p.beta1 <= 0 || p.beta1 >= 1 || p.beta2 <= 0 ||
        p.beta2 >= 1 || p.eps <= 0 || p.weight_decay < 0)
      throw std::invalid_argument("AdamW: invalid hyperparameters");
  }

  // One step over all (param, grad) pairs. Missing grads are an error; the
  // caller controls which parameters participate.
  void step(std::map<std::string, Tensor>& params,
            const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(p_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(p_.beta2, static_cast<double>(t_));
    for (auto& [name, w] : params) {
      auto git = grads.find(name);
      if (git == grads.end())
        throw std::invalid_argument("AdamW: no gradient for parameter '" + name + "'");
      const Tensor& g = git->second;
      if (!g.same_shape(w))
        throw std::invalid_argument("AdamW: gradient shape mismatch for '" + name + "'");
      Tensor& m = m_[name];
      Tensor& v = v_[name];
      if (m.numel() == 0) {
        m = Tensor::zeros(w.shape);
        v = Tensor::zeros(w.shape);
      }
      for (std::size_t i = 0; i < w.numel(); ++i) {
        m.data[i] = p_.beta1 * m.data[i] + (1.0 - p_.beta1) * g.data[i];
        v.data[i] = p_.beta2 * v.data[i] + (1.0 - p_.beta2) * g.data[i] * g.data[i];
        const double mhat = m.data[i] / bc1;
        const double vhat = v.data[i] / bc2;
        w.data[i] -= p_.lr * (mhat / (std::sqrt(vhat) + p_.eps) +
                              p_.weight_decay * w.data[i]);
      }
    }
  }

  std::uint64_t steps_taken() const { return t_; }

 private:
  AdamWParams p_;
  std::uint64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace securegate
