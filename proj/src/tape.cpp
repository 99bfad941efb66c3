#include "prisp/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace prisp {

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw ConfigError("tape op: operands live on different tapes");
  }
  return *a.tape;
}

Tape& own_tape(Var a) {
  if (a.tape == nullptr) throw ConfigError("tape op: unbound operand");
  return *a.tape;
}

}  // namespace

const TapeNode& Tape::node(int id) const {
  if (id < 0 || size_t(id) >= nodes_.size()) {
    throw ConfigError("tape: node id " + std::to_string(id) + " out of range");
  }
  return nodes_[size_t(id)];
}

TapeNode& Tape::mutable_node(int id) {
  return const_cast<TapeNode&>(node(id));
}

Var Tape::push(TapeNode n) {
  int id = int(nodes_.size());
  for (int in : n.inputs) {
    if (in < 0 || in >= id) {
      throw ConfigError("tape: node " + std::to_string(id) +
                        " references input " + std::to_string(in) +
                        " that is not an earlier node (cycle)");
    }
  }
  require_finite(n.value, "tape op result");
  nodes_.push_back(std::move(n));
  return Var{this, id};
}

Var Tape::push_leaf(Mat value, bool is_param) {
  TapeNode n;
  n.op = Op::kLeaf;
  n.is_param = is_param;
  n.value = std::move(value);
  return push(std::move(n));
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Mat& x = t.value(a);
  const Mat& y = t.value(b);
  require_shape(y, x.rows(), x.cols(), "add rhs");
  TapeNode n;
  n.op = Op::kAdd;
  n.inputs = {a.id, b.id};
  n.value = x + y;
  return t.push(std::move(n));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Mat& x = t.value(a);
  const Mat& y = t.value(b);
  require_shape(y, x.rows(), x.cols(), "sub rhs");
  TapeNode n;
  n.op = Op::kSub;
  n.inputs = {a.id, b.id};
  n.value = x - y;
  return t.push(std::move(n));
}

Var hadamard(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Mat& x = t.value(a);
  const Mat& y = t.value(b);
  require_shape(y, x.rows(), x.cols(), "hadamard rhs");
  TapeNode n;
  n.op = Op::kHadamard;
  n.inputs = {a.id, b.id};
  n.value = x.cwiseProduct(y);
  return t.push(std::move(n));
}

Var scalar_mul(Var a, double s) {
  Tape& t = own_tape(a);
  TapeNode n;
  n.op = Op::kScalarMul;
  n.inputs = {a.id};
  n.scalar = s;
  n.value = t.value(a) * s;
  return t.push(std::move(n));
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Mat& x = t.value(a);
  const Mat& y = t.value(b);
  if (x.cols() != y.rows()) {
    throw ShapeError("matmul: inner dims " + shape_str(x) + " * " + shape_str(y));
  }
  TapeNode n;
  n.op = Op::kMatmul;
  n.inputs = {a.id, b.id};
  n.value = x * y;
  return t.push(std::move(n));
}

Var transpose(Var a) {
  Tape& t = own_tape(a);
  TapeNode n;
  n.op = Op::kTranspose;
  n.inputs = {a.id};
  n.value = t.value(a).transpose();
  return t.push(std::move(n));
}

Var reshape(Var a, int rows, int cols) {
  Tape& t = own_tape(a);
  const Mat& x = t.value(a);
  if (x.size() != Eigen::Index(rows) * cols) {
    throw ShapeError("reshape: " + shape_str(x) + " to " + std::to_string(rows) +
                     "x" + std::to_string(cols));
  }
  TapeNode n;
  n.op = Op::kReshape;
  n.inputs = {a.id};
  // Row-major storage, so a flat copy reinterprets in reading order.
  n.value = Eigen::Map<const Mat>(x.data(), rows, cols);
  return t.push(std::move(n));
}

Var take_rows(Var a, const std::vector<int>& ids) {
  Tape& t = own_tape(a);
  const Mat& x = t.value(a);
  TapeNode n;
  n.op = Op::kTakeRows;
  n.inputs = {a.id};
  n.indices = ids;
  n.value.resize(Eigen::Index(ids.size()), x.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= x.rows()) {
      throw ConfigError("take_rows: row id " + std::to_string(ids[i]) +
                        " out of range for " + shape_str(x));
    }
    n.value.row(Eigen::Index(i)) = x.row(ids[i]);
  }
  return t.push(std::move(n));
}

Var slice_cols(Var a, int col0, int ncols) {
  Tape& t = own_tape(a);
  const Mat& x = t.value(a);
  if (col0 < 0 || ncols <= 0 || col0 + ncols > x.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(col0) + ", " +
                     std::to_string(col0 + ncols) + ") of " + shape_str(x));
  }
  TapeNode n;
  n.op = Op::kSliceCols;
  n.inputs = {a.id};
  n.col0 = col0;
  n.ncols = ncols;
  n.value = x.middleCols(col0, ncols);
  return t.push(std::move(n));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no operands");
  Tape& t = own_tape(parts[0]);
  Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    if (t.value(p).rows() != rows) {
      throw ShapeError("concat_cols: row mismatch");
    }
    cols += t.value(p).cols();
  }
  TapeNode n;
  n.op = Op::kConcatCols;
  n.value.resize(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    n.inputs.push_back(p.id);
    const Mat& x = t.value(p);
    n.value.middleCols(at, x.cols()) = x;
    at += x.cols();
  }
  return t.push(std::move(n));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no operands");
  Tape& t = own_tape(parts[0]);
  Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    if (t.value(p).cols() != cols) {
      throw ShapeError("concat_rows: column mismatch");
    }
    rows += t.value(p).rows();
  }
  TapeNode n;
  n.op = Op::kConcatRows;
  n.value.resize(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    n.inputs.push_back(p.id);
    const Mat& x = t.value(p);
    n.value.middleRows(at, x.rows()) = x;
    at += x.rows();
  }
  return t.push(std::move(n));
}

Var tanh_act(Var a) {
  Tape& t = own_tape(a);
  TapeNode n;
  n.op = Op::kTanh;
  n.inputs = {a.id};
  n.value = t.value(a).array().tanh();
  return t.push(std::move(n));
}

Var gelu(Var a) {
  Tape& t = own_tape(a);
  TapeNode n;
  n.op = Op::kGelu;
  n.inputs = {a.id};
  n.value = t.value(a).unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
  });
  return t.push(std::move(n));
}

Var rmsnorm(Var a, double eps) {
  Tape& t = own_tape(a);
  const Mat& x = t.value(a);
  TapeNode n;
  n.op = Op::kRmsNorm;
  n.inputs = {a.id};
  n.scalar = eps;
  n.aux.resize(x.rows(), 1);  // per-row 1 / rms
  n.value.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double ms = x.row(i).squaredNorm() / double(x.cols());
    double inv = 1.0 / std::sqrt(ms + eps);
    n.aux(i, 0) = inv;
    n.value.row(i) = x.row(i) * inv;
  }
  return t.push(std::move(n));
}

Var row_scale(Var a, Var gain) {
  Tape& t = same_tape(a, gain);
  const Mat& x = t.value(a);
  const Mat& g = t.value(gain);
  require_shape(g, 1, x.cols(), "row_scale gain");
  TapeNode n;
  n.op = Op::kRowScale;
  n.inputs = {a.id, gain.id};
  n.value = x.array().rowwise() * g.row(0).array();
  return t.push(std::move(n));
}

Var causal_softmax(Var a) {
  Tape& t = own_tape(a);
  const Mat& x = t.value(a);
  if (x.rows() != x.cols()) {
    throw ShapeError("causal_softmax: square scores required, got " + shape_str(x));
  }
  TapeNode n;
  n.op = Op::kCausalSoftmax;
  n.inputs = {a.id};
  n.value = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    // Reductions run over the causal prefix only; entries past the diagonal
    // never enter max or sum, so future positions cannot affect row i.
    double mx = x.row(i).head(i + 1).maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) denom += std::exp(x(i, j) - mx);
    for (Eigen::Index j = 0; j <= i; ++j) {
      n.value(i, j) = std::exp(x(i, j) - mx) / denom;
    }
  }
  return t.push(std::move(n));
}

Var dropout(Var a, double p, Rng& rng) {
  Tape& t = own_tape(a);
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(p));
  }
  const Mat& x = t.value(a);
  TapeNode n;
  n.op = Op::kDropout;
  n.inputs = {a.id};
  n.scalar = p;
  if (p == 0.0) {
    n.aux = Mat::Ones(x.rows(), x.cols());
  } else {
    double keep_scale = 1.0 / (1.0 - p);
    n.aux.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        n.aux(i, j) = rng.uniform() < p ? 0.0 : keep_scale;
      }
    }
  }
  n.value = x.cwiseProduct(n.aux);
  return t.push(std::move(n));
}

Var sum(Var a) {
  Tape& t = own_tape(a);
  TapeNode n;
  n.op = Op::kSum;
  n.inputs = {a.id};
  n.value = Mat::Constant(1, 1, t.value(a).sum());
  return t.push(std::move(n));
}

Var softmax_xent_masked(Var logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& row_active) {
  Tape& t = own_tape(logits);
  const Mat& x = t.value(logits);
  if (Eigen::Index(targets.size()) != x.rows() ||
      Eigen::Index(row_active.size()) != x.rows()) {
    throw ShapeError("softmax_xent_masked: need one target/mask entry per row");
  }
  int n_active = 0;
  for (uint8_t m : row_active) n_active += m ? 1 : 0;
  if (n_active == 0) {
    throw ConfigError("softmax_xent_masked: no active rows");
  }
  TapeNode n;
  n.op = Op::kSoftmaxXentMasked;
  n.inputs = {logits.id};
  n.indices = targets;
  n.row_active = row_active;
  n.aux = Mat::Zero(x.rows(), x.cols());  // probs for active rows
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (!row_active[size_t(i)]) continue;
    int tgt = targets[size_t(i)];
    if (tgt < 0 || tgt >= x.cols()) {
      throw ConfigError("softmax_xent_masked: target " + std::to_string(tgt) +
                        " out of range");
    }
    double mx = x.row(i).maxCoeff();
    double denom = (x.row(i).array() - mx).exp().sum();
    n.aux.row(i) = (x.row(i).array() - mx).exp() / denom;
    total += std::log(denom) - (x(i, tgt) - mx);
  }
  n.scalar = double(n_active);
  n.value = Mat::Constant(1, 1, total / double(n_active));
  return t.push(std::move(n));
}

GradMap Tape::backward(Var loss) const {
  if (loss.tape != this) throw ConfigError("backward: loss not on this tape");
  const TapeNode& ln = node(loss.id);
  if (ln.value.rows() != 1 || ln.value.cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + shape_str(ln.value));
  }
  std::vector<Mat> grads(nodes_.size());
  std::vector<uint8_t> has_grad(nodes_.size(), 0);
  auto accum = [&](int id, const Mat& g) {
    if (!has_grad[size_t(id)]) {
      grads[size_t(id)] = g;
      has_grad[size_t(id)] = 1;
    } else {
      grads[size_t(id)] += g;
    }
  };
  grads[size_t(loss.id)] = Mat::Ones(1, 1);
  has_grad[size_t(loss.id)] = 1;

  for (int id = loss.id; id >= 0; --id) {
    if (!has_grad[size_t(id)]) continue;
    const TapeNode& n = nodes_[size_t(id)];
    const Mat& g = grads[size_t(id)];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        accum(n.inputs[0], g);
        accum(n.inputs[1], g);
        break;
      case Op::kSub:
        accum(n.inputs[0], g);
        accum(n.inputs[1], -g);
        break;
      case Op::kHadamard:
        accum(n.inputs[0], g.cwiseProduct(value(n.inputs[1])));
        accum(n.inputs[1], g.cwiseProduct(value(n.inputs[0])));
        break;
      case Op::kScalarMul:
        accum(n.inputs[0], g * n.scalar);
        break;
      case Op::kMatmul:
        accum(n.inputs[0], g * value(n.inputs[1]).transpose());
        accum(n.inputs[1], value(n.inputs[0]).transpose() * g);
        break;
      case Op::kTranspose:
        accum(n.inputs[0], g.transpose());
        break;
      case Op::kReshape: {
        const Mat& x = value(n.inputs[0]);
        accum(n.inputs[0], Eigen::Map<const Mat>(g.data(), x.rows(), x.cols()));
        break;
      }
      case Op::kTakeRows: {
        const Mat& x = value(n.inputs[0]);
        Mat gx = Mat::Zero(x.rows(), x.cols());
        for (size_t i = 0; i < n.indices.size(); ++i) {
          gx.row(n.indices[i]) += g.row(Eigen::Index(i));
        }
        accum(n.inputs[0], gx);
        break;
      }
      case Op::kSliceCols: {
        const Mat& x = value(n.inputs[0]);
        Mat gx = Mat::Zero(x.rows(), x.cols());
        gx.middleCols(n.col0, n.ncols) = g;
        accum(n.inputs[0], gx);
        break;
      }
      case Op::kConcatCols: {
        Eigen::Index at = 0;
        for (int in : n.inputs) {
          Eigen::Index w = value(in).cols();
          accum(in, g.middleCols(at, w));
          at += w;
        }
        break;
      }
      case Op::kConcatRows: {
        Eigen::Index at = 0;
        for (int in : n.inputs) {
          Eigen::Index h = value(in).rows();
          accum(in, g.middleRows(at, h));
          at += h;
        }
        break;
      }
      case Op::kTanh:
        accum(n.inputs[0],
              (g.array() * (1.0 - n.value.array().square())).matrix());
        break;
      case Op::kGelu: {
        const Mat& x = value(n.inputs[0]);
        Mat dx = x.unaryExpr([](double v) {
          double phi = 0.5 * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
          double pdf = std::exp(-0.5 * v * v) /
                       std::sqrt(2.0 * std::numbers::pi);
          return phi + v * pdf;
        });
        accum(n.inputs[0], g.cwiseProduct(dx));
        break;
      }
      case Op::kRmsNorm: {
        // dx = inv_rms * (g - y * mean(g .* y)) per row, with y the output.
        Mat gx(n.value.rows(), n.value.cols());
        for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
          double dot = g.row(i).dot(n.value.row(i)) / double(n.value.cols());
          gx.row(i) = n.aux(i, 0) * (g.row(i) - n.value.row(i) * dot);
        }
        accum(n.inputs[0], gx);
        break;
      }
      case Op::kRowScale: {
        const Mat& x = value(n.inputs[0]);
        const Mat& gain = value(n.inputs[1]);
        accum(n.inputs[0], (g.array().rowwise() * gain.row(0).array()).matrix());
        accum(n.inputs[1], g.cwiseProduct(x).colwise().sum());
        break;
      }
      case Op::kCausalSoftmax: {
        Mat gx = Mat::Zero(n.value.rows(), n.value.cols());
        for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
          double dot = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) dot += g(i, j) * n.value(i, j);
          for (Eigen::Index j = 0; j <= i; ++j) {
            gx(i, j) = n.value(i, j) * (g(i, j) - dot);
          }
        }
        accum(n.inputs[0], gx);
        break;
      }
      case Op::kDropout:
        accum(n.inputs[0], g.cwiseProduct(n.aux));
        break;
      case Op::kSum:
        accum(n.inputs[0],
              Mat::Constant(value(n.inputs[0]).rows(),
                            value(n.inputs[0]).cols(), g(0, 0)));
        break;
      case Op::kSoftmaxXentMasked: {
        Mat gx = Mat::Zero(n.value.rows(), 0);  // placeholder, resized below
        const Mat& x = value(n.inputs[0]);
        gx = Mat::Zero(x.rows(), x.cols());
        double scale = g(0, 0) / n.scalar;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          if (!n.row_active[size_t(i)]) continue;
          gx.row(i) = n.aux.row(i) * scale;
          gx(i, n.indices[size_t(i)]) -= scale;
        }
        accum(n.inputs[0], gx);
        break;
      }
    }
  }

  GradMap out;
  for (size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].is_param) continue;
    if (has_grad[id]) {
      out.emplace(int(id), std::move(grads[id]));
    } else {
      out.emplace(int(id), Mat::Zero(nodes_[id].value.rows(),
                                     nodes_[id].value.cols()));
    }
  }
  return out;
}

}  // namespace prisp
