#pragma once

#include <cmath>
#include <vector>

#include "unlearn/common.hpp"

namespace unlearn::detail {

struct Adam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;
  std::vector<MatrixF> m, v;

  explicit Adam(double learning_rate) : lr(learning_rate) {}

  void step(std::vector<MatrixF*> params, const std::vector<MatrixF>& grads) {
    if (m.empty()) {
      for (auto* p : params) {
        m.push_back(MatrixF::Zero(p->rows(), p->cols()));
        v.push_back(MatrixF::Zero(p->rows(), p->cols()));
      }
    }
    ++t;
    const auto c1 = static_cast<float>(1.0 - std::pow(beta1, t));
    const auto c2 = static_cast<float>(1.0 - std::pow(beta2, t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      m[k] = static_cast<float>(beta1) * m[k] + static_cast<float>(1.0 - beta1) * grads[k];
      v[k] = static_cast<float>(beta2) * v[k] + static_cast<float>(1.0 - beta2) * grads[k].cwiseProduct(grads[k]);
      params[k]->array() -= static_cast<float>(lr) * (m[k].array() / c1) /
                            ((v[k].array() / c2).sqrt() + static_cast<float>(eps));
    }
  }
};

}  // namespace unlearn::detail
