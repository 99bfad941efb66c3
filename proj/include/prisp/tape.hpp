#pragma once

#include "prisp/matrix.hpp"
#include "prisp/rng.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace prisp {

class Tape;

// Lightweight handle to a tape node; free functions below combine handles into
// expressions while the tape records everything needed for the reverse pass.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

using GradMap = std::unordered_map<int, Mat>;

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kHadamard,
  kScalarMul,
  kMatmul,
  kTranspose,
  kReshape,
  kTakeRows,
  kSliceCols,
  kConcatCols,
  kConcatRows,
  kTanh,
  kGelu,
  kRmsNorm,
  kRowScale,
  kCausalSoftmax,
  kDropout,
  kSum,
  kSoftmaxXentMasked,
};

struct TapeNode {
  Op op = Op::kLeaf;
  bool is_param = false;
  std::vector<int> inputs;
  Mat value;
  // Op-specific extras. `aux` caches whatever the backward rule needs that is
  // cheaper to keep than recompute (dropout mask, per-row inverse RMS,
  // masked-softmax probabilities).
  double scalar = 0.0;
  std::vector<int> indices;  // kTakeRows row ids; kSoftmaxXentMasked targets
  int col0 = 0;
  int ncols = 0;
  Mat aux;
  std::vector<uint8_t> row_active;  // kSoftmaxXentMasked
};

// Append-only reverse-mode tape. A tape is built fresh for every forward pass;
// node ids are strictly increasing, so inputs always precede the nodes that
// consume them and one backward sweep from high to low id visits every node
// after all of its consumers.
class Tape {
 public:
  Var constant(Mat value) { return push_leaf(std::move(value), false); }
  Var param(Mat value) { return push_leaf(std::move(value), true); }

  const Mat& value(int id) const { return node(id).value; }
  const Mat& value(Var v) const { return node(v.id).value; }
  bool is_param(int id) const { return node(id).is_param; }
  size_t size() const { return nodes_.size(); }

  // Accumulates d(loss)/d(node) for every node that influences the scalar
  // loss, and returns gradients for all param leaves; params the loss does not
  // reach get explicit zero matrices so optimizers see a complete map.
  GradMap backward(Var loss) const;

  const TapeNode& node(int id) const;
  TapeNode& mutable_node(int id);

  Var push(TapeNode n);

 private:
  Var push_leaf(Mat value, bool is_param);
  std::vector<TapeNode> nodes_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scalar_mul(Var a, double s);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, int rows, int cols);
// Gathers rows of an embedding-style matrix: out.row(i) = a.row(ids[i]).
Var take_rows(Var a, const std::vector<int>& ids);
Var slice_cols(Var a, int col0, int ncols);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var tanh_act(Var a);
Var gelu(Var a);  // exact erf form
// Row-wise x / sqrt(mean(x^2) + eps).
Var rmsnorm(Var a, double eps = 1e-6);
// Scales column j of every row by gain(0, j); gain is a 1 x cols node.
Var row_scale(Var a, Var gain);
// Softmax over a square score matrix where row i only sees columns j <= i.
// Masked-out entries are exact zeros and never touch max/sum reductions, so
// trailing rows cannot perturb earlier ones even at the bit level.
Var causal_softmax(Var a);
// Inverted-scale dropout on the forward value; mask drawn once at node
// creation from `rng`. p == 0 is an exact pass-through.
Var dropout(Var a, double p, Rng& rng);
Var sum(Var a);
// Mean of -log softmax(row)[target] over rows with row_active != 0. Scalar.
Var softmax_xent_masked(Var logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& row_active);

}  // namespace prisp
