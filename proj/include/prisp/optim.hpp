#pragma once

#include "prisp/matrix.hpp"
#include "prisp/tape.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace prisp {

// One trainable (or deliberately frozen) matrix as seen by a training step:
// the storage that survives across tapes, the leaf node it was bound to on the
// current tape, and a stable key for optimizer state.
struct ParamBinding {
  Mat* value = nullptr;
  std::string key;
  bool trainable = false;
  int node = -1;
};

// Collects bindings for one tape. Rebind every forward pass; optimizer moments
// persist across passes via the string keys.
class ParamRegistry {
 public:
  Var bind(Tape& tape, Mat& storage, std::string key, bool trainable);
  const std::vector<ParamBinding>& items() const { return items_; }
  bool empty() const { return items_.empty(); }
  void clear() { items_.clear(); }

 private:
  std::vector<ParamBinding> items_;
};

enum class OptKind { kAdamW, kSgd };

struct OptimizerConfig {
  OptKind kind = OptKind::kAdamW;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW / SGD over masked parameter lists. Moments are keyed by binding key so
// the same logical matrix keeps its state across rebuilt tapes. Bindings with
// trainable == false are never read or written: frozen values stay bitwise
// identical no matter how many steps run.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<ParamBinding>& params, const GradMap& grads);

  long step_count() const { return step_count_; }
  const OptimizerConfig& config() const { return cfg_; }
  // For schedules; moments and step count carry over unchanged.
  void set_lr(double lr) { cfg_.lr = lr; }
  // Two float64 moment matrices per trainable entry under AdamW, none for SGD.
  long state_entries() const;

 private:
  struct Moments {
    Mat m, v;
  };
  OptimizerConfig cfg_;
  long step_count_ = 0;
  std::map<std::string, Moments> moments_;
};

// Central-difference gradient of an arbitrary scalar function with respect to
// one matrix argument; the reference oracle for tape gradients.
Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& at,
                     double h = 1e-6);

// max over entries of |a - b| / max(|a|, |b|, floor).
double max_rel_diff(const Mat& a, const Mat& b, double floor = 1e-4);

// ||a - b||_F / max(||a||_F, ||b||_F, eps): the whole-matrix relative error
// used for gradient checks through deep graphs, where per-entry ratios on
// near-zero entries sit at the finite-difference noise floor.
double grad_rel_err(const Mat& a, const Mat& b);

}  // namespace prisp
