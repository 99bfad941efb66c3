#include "prisp/optim.hpp"

#include <cmath>

namespace prisp {

Var ParamRegistry::bind(Tape& tape, Mat& storage, std::string key,
                        bool trainable) {
  Var v = tape.param(storage);
  items_.push_back(ParamBinding{&storage, std::move(key), trainable, v.id});
  return v;
}

void Optimizer::step(const std::vector<ParamBinding>& params,
                     const GradMap& grads) {
  ++step_count_;
  for (const ParamBinding& p : params) {
    if (!p.trainable) continue;
    auto it = grads.find(p.node);
    if (it == grads.end()) {
      throw ConfigError("optimizer: missing gradient for trainable parameter '" +
                        p.key + "'");
    }
    const Mat& g = it->second;
    Mat& w = *p.value;
    require_shape(g, w.rows(), w.cols(), "optimizer gradient");
    if (cfg_.kind == OptKind::kSgd) {
      if (cfg_.weight_decay != 0.0) w -= cfg_.lr * cfg_.weight_decay * w;
      w -= cfg_.lr * g;
      continue;
    }
    Moments& mom = moments_[p.key];
    if (mom.m.size() == 0) {
      mom.m = Mat::Zero(w.rows(), w.cols());
      mom.v = Mat::Zero(w.rows(), w.cols());
    }
    mom.m = cfg_.beta1 * mom.m + (1.0 - cfg_.beta1) * g;
    mom.v = cfg_.beta2 * mom.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_count_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_count_));
    Mat m_hat = mom.m / bc1;
    Mat v_hat = mom.v / bc2;
    if (cfg_.weight_decay != 0.0) w -= cfg_.lr * cfg_.weight_decay * w;
    w -= cfg_.lr * (m_hat.array() / (v_hat.array().sqrt() + cfg_.eps)).matrix();
  }
}

long Optimizer::state_entries() const {
  if (cfg_.kind == OptKind::kSgd) return 0;
  long n = 0;
  for (const auto& [key, mom] : moments_) n += long(mom.m.size() + mom.v.size());
  return n;
}

Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& at,
                     double h) {
  Mat g(at.rows(), at.cols());
  Mat x = at;
  for (Eigen::Index i = 0; i < at.rows(); ++i) {
    for (Eigen::Index j = 0; j < at.cols(); ++j) {
      double orig = x(i, j);
      x(i, j) = orig + h;
      double up = f(x);
      x(i, j) = orig - h;
      double dn = f(x);
      x(i, j) = orig;
      g(i, j) = (up - dn) / (2.0 * h);
    }
  }
  return g;
}

double grad_rel_err(const Mat& a, const Mat& b) {
  require_shape(b, a.rows(), a.cols(), "grad_rel_err");
  double denom = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / denom;
}

double max_rel_diff(const Mat& a, const Mat& b, double floor) {
  require_shape(b, a.rows(), a.cols(), "max_rel_diff");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), floor});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  }
  return worst;
}

}  // namespace prisp
