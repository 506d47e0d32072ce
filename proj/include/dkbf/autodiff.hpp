#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dkbf/rng.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

enum class Op {
  kLeaf,
  kMatMul,
  kTranspose,
  kReshape,
  kAdd,
  kAddRowVec,
  kMul,
  kMulRowVec,
  kMulColVec,
  kMulScalarT,
  kAffine,
  kRowSoftmax,
  kSigmoid,
  kTanh,
  kSilu,
  kSoftplus,
  kExp,
  kLog,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kGatherRows,
  kMeanPoolRows,
  kMaxPoolRows,
  kSumAll,
  kConv1dSame,
  kCausalConv1d,
  kDropout,
  kLayerNorm,
  kBSplineBasis,
  kAttendIndexed,
  kSelectiveScan,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kAdd: return "add";
    case Op::kAddRowVec: return "add_rowvec";
    case Op::kMul: return "mul";
    case Op::kMulRowVec: return "mul_rowvec";
    case Op::kMulColVec: return "mul_colvec";
    case Op::kMulScalarT: return "mul_scalar_t";
    case Op::kAffine: return "affine";
    case Op::kRowSoftmax: return "row_softmax";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSilu: return "silu";
    case Op::kSoftplus: return "softplus";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kGatherRows: return "gather_rows";
    case Op::kMeanPoolRows: return "mean_pool_rows";
    case Op::kMaxPoolRows: return "max_pool_rows";
    case Op::kSumAll: return "sum_all";
    case Op::kConv1dSame: return "conv1d_same";
    case Op::kCausalConv1d: return "causal_conv1d";
    case Op::kDropout: return "dropout";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kBSplineBasis: return "bspline_basis";
    case Op::kAttendIndexed: return "attend_indexed";
    case Op::kSelectiveScan: return "selective_scan";
  }
  return "?";
}

// Per-op parameters. Only the fields an op reads are meaningful.
struct OpAttrs {
  double alpha = 1.0;   // affine scale / softmax temperature / layernorm eps
  double beta = 0.0;    // affine shift
  double rate = 0.0;    // dropout rate
  int i0 = 0;           // slice begin
  int i1 = 0;           // slice end
  int order = 0;        // spline degree
  std::uint64_t seed = 0;                       // dropout mask seed
  std::vector<int> indices;                     // gather_rows
  std::vector<int> shape;                       // reshape target
  std::vector<std::vector<int>> index_lists;    // attend_indexed, per query
  std::vector<double> knots;                    // bspline knot vector
};

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  // log(1 + e^x) without overflow.
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

[[noreturn]] inline void shape_fail(Op op, const std::string& detail) {
  throw Error(std::string("op ") + op_name(op) + ": " + detail);
}

inline void require(bool cond, Op op, const char* msg) {
  if (!cond) shape_fail(op, msg);
}

template <typename MsgFn>
inline void require(bool cond, Op op, MsgFn&& msg) {
  if (!cond) shape_fail(op, msg());
}

inline void require_rank2(const Tensor& t, Op op, const char* role) {
  if (t.rank() != 2)
    shape_fail(op, std::string(role) + " must be rank-2, got " + shape_str(t.shape));
}

// Treats {d} and {1,d} interchangeably as a d-vector.
inline int vec_len(const Tensor& t) {
  if (t.rank() == 1) return t.shape[0];
  if (t.rank() == 2 && t.shape[0] == 1) return t.shape[1];
  return -1;
}

// Treats {n} and {n,1} interchangeably as a column of length n.
inline int col_len(const Tensor& t) {
  if (t.rank() == 1) return t.shape[0];
  if (t.rank() == 2 && t.shape[1] == 1) return t.shape[0];
  return -1;
}

// Cox-de Boor: all degree-`deg` basis values at x for knot vector T.
// out must have size nt-1; entry i holds N_{i,deg}(x) (tail entries unused).
inline void bspline_all(const std::vector<double>& T, int deg, double x,
                        std::vector<double>& out) {
  const int nt = static_cast<int>(T.size());
  for (int i = 0; i + 1 < nt; ++i) out[i] = (x >= T[i] && x < T[i + 1]) ? 1.0 : 0.0;
  for (int j = 1; j <= deg; ++j) {
    for (int i = 0; i + j + 1 < nt; ++i) {
      double left = 0.0, right = 0.0;
      const double dl = T[i + j] - T[i];
      const double dr = T[i + j + 1] - T[i + 1];
      if (dl > 0.0) left = (x - T[i]) / dl * out[i];
      if (dr > 0.0) right = (T[i + j + 1] - x) / dr * out[i + 1];
      out[i] = left + right;
    }
  }
}

}  // namespace detail

// Gradient map produced by Tape::backward. Unreached requires_grad nodes
// hold zero tensors of the node's shape.
class GradMap {
 public:
  explicit GradMap(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  bool has(int node_id) const {
    return node_id >= 0 && node_id < static_cast<int>(grads_.size()) &&
           !grads_[node_id].shape.empty();
  }

  const Tensor& at(int node_id) const {
    if (!has(node_id)) throw Error("gradmap: no gradient for node " + std::to_string(node_id));
    return grads_[node_id];
  }

  const Tensor& at(const Tensor& t) const {
    if (t.node_id < 0) throw Error("gradmap: tensor is not on the tape");
    return at(t.node_id);
  }

 private:
  std::vector<Tensor> grads_;
};

// Reverse-mode tape. Append-only: inputs of node k all have id < k.
// When recording is off, apply() evaluates forward only and returns an
// untaped tensor, so the same layer code serves training and evaluation.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording), id_(next_id()) {
    if (recording_) nodes_.reserve(1024);
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t num_nodes() const { return nodes_.size(); }

  // RNG used for dropout masks; seed it from the run's named stream.
  void set_rng(Rng rng) { rng_ = rng; }

  // Registers a tensor as a leaf. Gradients flow into it iff requires_grad.
  Tensor leaf(Tensor t) {
    if (!recording_) {
      t.node_id = -1;
      t.tape_id = 0;
      return t;
    }
    Node node;
    node.op = Op::kLeaf;
    node.out = t;
    node.requires_grad = t.requires_grad;
    return push(std::move(node));
  }

  Tensor apply(Op op, const std::vector<Tensor>& inputs, OpAttrs attrs = {}) {
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    for (const Tensor& t : inputs) in.push_back(&t);
    return apply_impl(op, in, std::move(attrs));
  }

  // ---- convenience wrappers -------------------------------------------
  Tensor matmul(const Tensor& a, const Tensor& b) { return apply_impl(Op::kMatMul, {&a, &b}, {}); }
  Tensor transpose(const Tensor& a) { return apply_impl(Op::kTranspose, {&a}, {}); }
  Tensor reshape(const Tensor& a, Shape target) {
    OpAttrs at;
    at.shape = std::move(target);
    return apply_impl(Op::kReshape, {&a}, std::move(at));
  }
  Tensor add(const Tensor& a, const Tensor& b) { return apply_impl(Op::kAdd, {&a, &b}, {}); }
  Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    return apply_impl(Op::kAddRowVec, {&a, &v}, {});
  }
  Tensor mul(const Tensor& a, const Tensor& b) { return apply_impl(Op::kMul, {&a, &b}, {}); }
  Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    return apply_impl(Op::kMulRowVec, {&a, &v}, {});
  }
  Tensor mul_colvec(const Tensor& a, const Tensor& g) {
    return apply_impl(Op::kMulColVec, {&a, &g}, {});
  }
  Tensor mul_scalar_t(const Tensor& a, const Tensor& s) {
    return apply_impl(Op::kMulScalarT, {&a, &s}, {});
  }
  Tensor affine(const Tensor& a, double alpha, double beta) {
    OpAttrs at;
    at.alpha = alpha;
    at.beta = beta;
    return apply_impl(Op::kAffine, {&a}, std::move(at));
  }
  Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }
  Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }
  Tensor row_softmax(const Tensor& a) { return apply_impl(Op::kRowSoftmax, {&a}, {}); }
  Tensor sigmoid(const Tensor& a) { return apply_impl(Op::kSigmoid, {&a}, {}); }
  Tensor tanh(const Tensor& a) { return apply_impl(Op::kTanh, {&a}, {}); }
  Tensor silu(const Tensor& a) { return apply_impl(Op::kSilu, {&a}, {}); }
  Tensor softplus(const Tensor& a) { return apply_impl(Op::kSoftplus, {&a}, {}); }
  Tensor exp(const Tensor& a) { return apply_impl(Op::kExp, {&a}, {}); }
  Tensor log(const Tensor& a) { return apply_impl(Op::kLog, {&a}, {}); }
  Tensor concat_rows(const std::vector<Tensor>& parts) { return apply(Op::kConcatRows, parts); }
  Tensor concat_cols(const std::vector<Tensor>& parts) { return apply(Op::kConcatCols, parts); }
  Tensor slice_rows(const Tensor& a, int r0, int r1) {
    OpAttrs at;
    at.i0 = r0;
    at.i1 = r1;
    return apply_impl(Op::kSliceRows, {&a}, std::move(at));
  }
  Tensor slice_cols(const Tensor& a, int c0, int c1) {
    OpAttrs at;
    at.i0 = c0;
    at.i1 = c1;
    return apply_impl(Op::kSliceCols, {&a}, std::move(at));
  }
  Tensor gather_rows(const Tensor& a, std::vector<int> indices) {
    OpAttrs at;
    at.indices = std::move(indices);
    return apply_impl(Op::kGatherRows, {&a}, std::move(at));
  }
  Tensor mean_pool_rows(const Tensor& a) { return apply_impl(Op::kMeanPoolRows, {&a}, {}); }
  Tensor max_pool_rows(const Tensor& a) { return apply_impl(Op::kMaxPoolRows, {&a}, {}); }
  Tensor sum_all(const Tensor& a) { return apply_impl(Op::kSumAll, {&a}, {}); }
  Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& b) {
    return apply_impl(Op::kConv1dSame, {&x, &w, &b}, {});
  }
  Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
    return apply_impl(Op::kCausalConv1d, {&x, &w, &b}, {});
  }
  Tensor dropout(const Tensor& x, double rate) {
    OpAttrs at;
    at.rate = rate;
    if (rate > 0.0) {
      if (!rng_) throw Error("dropout: tape has no RNG (call set_rng)");
      at.seed = rng_->next_u64();
    }
    return apply_impl(Op::kDropout, {&x}, std::move(at));
  }
  Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
    OpAttrs at;
    at.alpha = eps;
    return apply_impl(Op::kLayerNorm, {&x}, std::move(at));
  }
  Tensor bspline_basis(const Tensor& x, std::vector<double> knots, int degree) {
    OpAttrs at;
    at.knots = std::move(knots);
    at.order = degree;
    return apply_impl(Op::kBSplineBasis, {&x}, std::move(at));
  }
  Tensor attend_indexed(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::vector<std::vector<int>> lists, double temperature) {
    OpAttrs at;
    at.index_lists = std::move(lists);
    at.alpha = temperature;
    return apply_impl(Op::kAttendIndexed, {&q, &k, &v}, std::move(at));
  }
  Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a,
                        const Tensor& b, const Tensor& c, const Tensor& d) {
    return apply_impl(Op::kSelectiveScan, {&u, &delta, &a, &b, &c, &d}, {});
  }

  GradMap backward(const Tensor& loss);

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> inputs;
    Tensor out;
    std::vector<Tensor> saved;  // op-specific context (masks, argmax, scan states)
    OpAttrs attrs;
    bool requires_grad = false;
  };

  static std::uint32_t next_id() {
    static std::atomic<std::uint32_t> counter{1};
    return counter.fetch_add(1);
  }

  Tensor push(Node node) {
    node.out.node_id = static_cast<int>(nodes_.size());
    node.out.tape_id = id_;
    nodes_.push_back(std::move(node));
    return nodes_.back().out;
  }

  Tensor apply_impl(Op op, const std::vector<const Tensor*>& in, OpAttrs attrs);

  // Resolves an input tensor to a node id, auto-registering untaped
  // tensors as leaves. A tensor recorded on a different tape is a bug.
  int input_id(const Tensor& t) {
    if (t.node_id >= 0) {
      if (t.tape_id != id_) throw Error("tape: input tensor belongs to another tape");
      return t.node_id;
    }
    Tensor reg = leaf(t);
    return reg.node_id;
  }

  static Tensor forward_op(Op op, const std::vector<const Tensor*>& in, const OpAttrs& attrs,
                           std::vector<Tensor>* saved);
  static void backward_op(Op op, const std::vector<const Tensor*>& in, const Tensor& out,
                          const std::vector<Tensor>& saved, const OpAttrs& attrs,
                          const std::vector<double>& gout, std::vector<std::vector<double>*>& gin);

  bool recording_;
  std::uint32_t id_;
  std::vector<Node> nodes_;
  std::optional<Rng> rng_;
};

inline Tensor Tape::apply_impl(Op op, const std::vector<const Tensor*>& in, OpAttrs attrs) {
  if (op == Op::kLeaf) throw Error("apply: use leaf() to register leaves");

  if (!recording_) {
    std::vector<Tensor> saved;
    Tensor out = forward_op(op, in, attrs, &saved);
    out.node_id = -1;
    return out;
  }

  Node node;
  node.op = op;
  node.attrs = std::move(attrs);
  for (const Tensor* t : in) node.inputs.push_back(input_id(*t));
  for (int id : node.inputs) node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
  // Forward reads the canonical copies held by the tape.
  std::vector<const Tensor*> canon;
  canon.reserve(node.inputs.size());
  for (int id : node.inputs) canon.push_back(&nodes_[id].out);
  node.out = forward_op(op, canon, node.attrs, &node.saved);
  node.out.requires_grad = node.requires_grad;
  return push(std::move(node));
}

// ---------------------------------------------------------------------------
// Forward implementations
// ---------------------------------------------------------------------------

inline Tensor Tape::forward_op(Op op, const std::vector<const Tensor*>& in, const OpAttrs& attrs,
                               std::vector<Tensor>* saved) {
  using detail::require;
  using detail::require_rank2;
  using detail::shape_fail;
  using detail::vec_len;

  switch (op) {
    case Op::kLeaf:
      break;

    case Op::kMatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require_rank2(a, op, "lhs");
      require_rank2(b, op, "rhs");
      require(a.shape[1] == b.shape[0], op, [&] { return "inner dims differ: " + shape_str(a.shape) + " x " + shape_str(b.shape); });
      const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
      Tensor c = Tensor::zeros({m, n});
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
          const double av = a.values[static_cast<std::size_t>(i) * k + p];
          if (av == 0.0) continue;
          const double* brow = &b.values[static_cast<std::size_t>(p) * n];
          double* crow = &c.values[static_cast<std::size_t>(i) * n];
          for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
      return c;
    }

    case Op::kTranspose: {
      const Tensor& a = *in[0];
      require_rank2(a, op, "input");
      const int m = a.shape[0], n = a.shape[1];
      Tensor c = Tensor::zeros({n, m});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) c.values[static_cast<std::size_t>(j) * m + i] = a.at(i, j);
      return c;
    }

    case Op::kReshape: {
      const Tensor& a = *in[0];
      require(numel(attrs.shape) == a.size(), op, [&] { return "cannot reshape " + shape_str(a.shape) + " to " + shape_str(attrs.shape); });
      Tensor c(attrs.shape, a.values);
      return c;
    }

    case Op::kAdd: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require(a.shape == b.shape, op, [&] { return "shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape); });
      Tensor c = a;
      c.requires_grad = false;
      for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] += b.values[i];
      return c;
    }

    case Op::kAddRowVec: {
      const Tensor& a = *in[0];
      const Tensor& v = *in[1];
      require_rank2(a, op, "matrix");
      require(vec_len(v) == a.shape[1], op, [&] { return "vector " + shape_str(v.shape) + " vs matrix " + shape_str(a.shape); });
      Tensor c = a;
      c.requires_grad = false;
      const int n = a.shape[0], d = a.shape[1];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) c.values[static_cast<std::size_t>(i) * d + j] += v.values[j];
      return c;
    }

    case Op::kMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require(a.shape == b.shape, op, [&] { return "shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape); });
      Tensor c = a;
      c.requires_grad = false;
      for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] *= b.values[i];
      return c;
    }

    case Op::kMulRowVec: {
      const Tensor& a = *in[0];
      const Tensor& v = *in[1];
      require_rank2(a, op, "matrix");
      require(vec_len(v) == a.shape[1], op, [&] { return "vector " + shape_str(v.shape) + " vs matrix " + shape_str(a.shape); });
      Tensor c = a;
      c.requires_grad = false;
      const int n = a.shape[0], d = a.shape[1];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) c.values[static_cast<std::size_t>(i) * d + j] *= v.values[j];
      return c;
    }

    case Op::kMulColVec: {
      const Tensor& a = *in[0];
      const Tensor& g = *in[1];
      require_rank2(a, op, "matrix");
      require(detail::col_len(g) == a.shape[0], op, [&] { return "column vector " + shape_str(g.shape) + " vs matrix " + shape_str(a.shape); });
      Tensor c = a;
      c.requires_grad = false;
      const int n = a.shape[0], d = a.shape[1];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) c.values[static_cast<std::size_t>(i) * d + j] *= g.values[i];
      return c;
    }

    case Op::kMulScalarT: {
      const Tensor& a = *in[0];
      const Tensor& s = *in[1];
      require(s.is_scalar(), op,
              [&] { return "second input must be scalar, got " + shape_str(s.shape); });
      Tensor c = a;
      c.requires_grad = false;
      for (double& x : c.values) x *= s.values[0];
      return c;
    }

    case Op::kAffine: {
      Tensor c = *in[0];
      c.requires_grad = false;
      for (double& x : c.values) x = attrs.alpha * x + attrs.beta;
      return c;
    }

    case Op::kRowSoftmax: {
      const Tensor& a = *in[0];
      require_rank2(a, op, "input");
      Tensor c = a;
      c.requires_grad = false;
      const int n = a.shape[0], d = a.shape[1];
      for (int i = 0; i < n; ++i) {
        double* row = &c.values[static_cast<std::size_t>(i) * d];
        double mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < d; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (int j = 0; j < d; ++j) row[j] /= sum;
      }
      return c;
    }

    case Op::kSigmoid: {
      Tensor c = *in[0];
      c.requires_grad = false;
      for (double& x : c.values) x = detail::stable_sigmoid(x);
      return c;
    }

    case Op::kTanh: {
      Tensor c = *in[0];
      c.requires_grad = false;
      for (double& x : c.values) x = std::tanh(x);
      return c;
    }

    case Op::kSilu: {
      Tensor c = *in[0];
      c.requires_grad = false;
      for (double& x : c.values) x = x * detail::stable_sigmoid(x);
      return c;
    }

    case Op::kSoftplus: {
      Tensor c = *in[0];
      c.requires_grad = false;
      for (double& x : c.values) x = detail::stable_softplus(x);
      return c;
    }

    case Op::kExp: {
      Tensor c = *in[0];
      c.requires_grad = false;
      for (double& x : c.values) x = std::exp(x);
      return c;
    }

    case Op::kLog: {
      Tensor c = *in[0];
      c.requires_grad = false;
      for (double& x : c.values) x = std::log(x);
      return c;
    }

    case Op::kConcatRows: {
      require(!in.empty(), op, "needs at least one input");
      const int d = in[0]->cols();
      int total = 0;
      for (const Tensor* t : in) {
        require_rank2(*t, op, "input");
        require(t->shape[1] == d, op, [&] { return "column mismatch: " + shape_str(t->shape); });
        total += t->shape[0];
      }
      Tensor c = Tensor::zeros({total, d});
      std::size_t off = 0;
      for (const Tensor* t : in) {
        std::copy(t->values.begin(), t->values.end(), c.values.begin() + off);
        off += t->values.size();
      }
      return c;
    }

    case Op::kConcatCols: {
      require(!in.empty(), op, "needs at least one input");
      const int n = in[0]->rows();
      int total = 0;
      for (const Tensor* t : in) {
        require_rank2(*t, op, "input");
        require(t->shape[0] == n, op, [&] { return "row mismatch: " + shape_str(t->shape); });
        total += t->shape[1];
      }
      Tensor c = Tensor::zeros({n, total});
      int coff = 0;
      for (const Tensor* t : in) {
        const int d = t->shape[1];
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) c.at(i, coff + j) = t->at(i, j);
        coff += d;
      }
      return c;
    }

    case Op::kSliceRows: {
      const Tensor& a = *in[0];
      require_rank2(a, op, "input");
      require(0 <= attrs.i0 && attrs.i0 < attrs.i1 && attrs.i1 <= a.shape[0], op, [&] {
        return "bad row range [" + std::to_string(attrs.i0) + "," + std::to_string(attrs.i1) +
               ") for " + shape_str(a.shape);
      });
      const int d = a.shape[1];
      Tensor c = Tensor::zeros({attrs.i1 - attrs.i0, d});
      std::copy(a.values.begin() + static_cast<std::size_t>(attrs.i0) * d,
                a.values.begin() + static_cast<std::size_t>(attrs.i1) * d, c.values.begin());
      return c;
    }

    case Op::kSliceCols: {
      const Tensor& a = *in[0];
      require_rank2(a, op, "input");
      require(0 <= attrs.i0 && attrs.i0 < attrs.i1 && attrs.i1 <= a.shape[1], op, [&] {
        return "bad col range [" + std::to_string(attrs.i0) + "," + std::to_string(attrs.i1) +
               ") for " + shape_str(a.shape);
      });
      const int n = a.shape[0];
      Tensor c = Tensor::zeros({n, attrs.i1 - attrs.i0});
      for (int i = 0; i < n; ++i)
        for (int j = attrs.i0; j < attrs.i1; ++j) c.at(i, j - attrs.i0) = a.at(i, j);
      return c;
    }

    case Op::kGatherRows: {
      const Tensor& a = *in[0];
      require_rank2(a, op, "input");
      require(!attrs.indices.empty(), op, "empty index list");
      const int n = a.shape[0], d = a.shape[1];
      Tensor c = Tensor::zeros({static_cast<int>(attrs.indices.size()), d});
      for (std::size_t r = 0; r < attrs.indices.size(); ++r) {
        const int idx = attrs.indices[r];
        require(0 <= idx && idx < n, op, [&] { return "index " + std::to_string(idx) + " out of range"; });
        std::copy(a.values.begin() + static_cast<std::size_t>(idx) * d,
                  a.values.begin() + static_cast<std::size_t>(idx + 1) * d,
                  c.values.begin() + r * d);
      }
      return c;
    }

    case Op::kMeanPoolRows: {
      const Tensor& a = *in[0];
      require_rank2(a, op, "input");
      const int n = a.shape[0], d = a.shape[1];
      Tensor c = Tensor::zeros({1, d});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) c.values[j] += a.at(i, j);
      for (int j = 0; j < d; ++j) c.values[j] /= n;
      return c;
    }

    case Op::kMaxPoolRows: {
      const Tensor& a = *in[0];
      require_rank2(a, op, "input");
      const int n = a.shape[0], d = a.shape[1];
      Tensor c = Tensor::zeros({1, d});
      Tensor argmax = Tensor::zeros({d});
      for (int j = 0; j < d; ++j) {
        int best = 0;
        double bv = a.at(0, j);
        for (int i = 1; i < n; ++i) {
          if (a.at(i, j) > bv) {
            bv = a.at(i, j);
            best = i;
          }
        }
        c.values[j] = bv;
        argmax.values[j] = best;
      }
      if (saved) saved->push_back(std::move(argmax));
      return c;
    }

    case Op::kSumAll: {
      const Tensor& a = *in[0];
      double s = 0.0;
      for (double x : a.values) s += x;
      return Tensor::scalar(s);
    }

    case Op::kConv1dSame: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      const Tensor& b = *in[2];
      require_rank2(x, op, "input");
      require(w.rank() == 3, op, "kernel must be rank-3 [width,c_in,c_out]");
      const int n = x.shape[0], cin = x.shape[1];
      const int kw = w.shape[0], cout = w.shape[2];
      require(w.shape[1] == cin, op, [&] { return "kernel " + shape_str(w.shape) + " vs input " + shape_str(x.shape); });
      require(kw % 2 == 1, op, "kernel width must be odd for same padding");
      require(vec_len(b) == cout, op, [&] { return "bias " + shape_str(b.shape); });
      const int half = kw / 2;
      Tensor y = Tensor::zeros({n, cout});
      for (int p = 0; p < n; ++p) {
        for (int co = 0; co < cout; ++co) y.at(p, co) = b.values[co];
        for (int t = 0; t < kw; ++t) {
          const int q = p + t - half;
          if (q < 0 || q >= n) continue;
          for (int ci = 0; ci < cin; ++ci) {
            const double xv = x.at(q, ci);
            if (xv == 0.0) continue;
            const double* wrow = &w.values[(static_cast<std::size_t>(t) * cin + ci) * cout];
            for (int co = 0; co < cout; ++co) y.at(p, co) += xv * wrow[co];
          }
        }
      }
      return y;
    }

    case Op::kCausalConv1d: {
      // Depthwise causal convolution: each channel has its own kernel.
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      const Tensor& b = *in[2];
      require_rank2(x, op, "input");
      require_rank2(w, op, "kernel");
      const int n = x.shape[0], c = x.shape[1], kw = w.shape[0];
      require(w.shape[1] == c, op, [&] { return "kernel " + shape_str(w.shape) + " vs input " + shape_str(x.shape); });
      require(vec_len(b) == c, op, [&] { return "bias " + shape_str(b.shape); });
      Tensor y = Tensor::zeros({n, c});
      for (int p = 0; p < n; ++p) {
        for (int ci = 0; ci < c; ++ci) {
          double acc = b.values[ci];
          for (int t = 0; t < kw && t <= p; ++t) acc += w.at(t, ci) * x.at(p - t, ci);
          y.at(p, ci) = acc;
        }
      }
      return y;
    }

    case Op::kDropout: {
      const Tensor& x = *in[0];
      require(attrs.rate >= 0.0 && attrs.rate < 1.0, op, "rate must be in [0,1)");
      if (attrs.rate == 0.0) {
        Tensor c = x;
        c.requires_grad = false;
        return c;
      }
      const double keep = 1.0 - attrs.rate;
      Rng mask_rng(attrs.seed);
      Tensor mask = Tensor::zeros(x.shape);
      Tensor y = x;
      y.requires_grad = false;
      for (std::size_t i = 0; i < y.values.size(); ++i) {
        const double m = mask_rng.uniform() < keep ? 1.0 / keep : 0.0;
        mask.values[i] = m;
        y.values[i] *= m;
      }
      if (saved) saved->push_back(std::move(mask));
      return y;
    }

    case Op::kLayerNorm: {
      const Tensor& x = *in[0];
      require_rank2(x, op, "input");
      const int n = x.shape[0], d = x.shape[1];
      const double eps = attrs.alpha;
      Tensor y = Tensor::zeros({n, d});
      for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x.at(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
          const double dv = x.at(i, j) - mu;
          var += dv * dv;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) y.at(i, j) = (x.at(i, j) - mu) * inv;
      }
      return y;
    }

    case Op::kBSplineBasis: {
      const Tensor& x = *in[0];
      require_rank2(x, op, "input");
      const int deg = attrs.order;
      const int nt = static_cast<int>(attrs.knots.size());
      require(deg >= 0 && nt >= deg + 2, op, "knot vector too short for degree");
      for (int i = 0; i + 1 < nt; ++i)
        require(attrs.knots[i] < attrs.knots[i + 1], op, "knots must be strictly increasing");
      const int nb = nt - deg - 1;
      const int n = x.shape[0], din = x.shape[1];
      Tensor y = Tensor::zeros({n, din * nb});
      std::vector<double> buf(static_cast<std::size_t>(nt - 1));
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < din; ++j) {
          detail::bspline_all(attrs.knots, deg, x.at(i, j), buf);
          for (int m = 0; m < nb; ++m) y.at(i, j * nb + m) = buf[m];
        }
      }
      return y;
    }

    case Op::kAttendIndexed: {
      // Per-query attention over a gathered key/value subset; the index
      // lists are a constant of the forward pass (no gradient through
      // selection). attrs.alpha is the logit temperature multiplier.
      const Tensor& q = *in[0];
      const Tensor& k = *in[1];
      const Tensor& v = *in[2];
      require_rank2(q, op, "queries");
      require_rank2(k, op, "keys");
      require_rank2(v, op, "values");
      require(q.shape[1] == k.shape[1], op, "query/key dim mismatch");
      require(k.shape[0] == v.shape[0] && k.shape[1] == v.shape[1], op, "key/value mismatch");
      const int n = q.shape[0], dh = q.shape[1], nk = k.shape[0];
      require(static_cast<int>(attrs.index_lists.size()) == n, op, "one index list per query");
      Tensor y = Tensor::zeros({n, dh});
      std::vector<double> w;
      for (int t = 0; t < n; ++t) {
        const std::vector<int>& idx = attrs.index_lists[t];
        if (idx.empty()) continue;
        w.assign(idx.size(), 0.0);
        double mx = -1e300;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          require(0 <= idx[i] && idx[i] < nk, op, "index out of range");
          double z = 0.0;
          for (int c = 0; c < dh; ++c) z += q.at(t, c) * k.at(idx[i], c);
          w[i] = attrs.alpha * z;
          mx = std::max(mx, w[i]);
        }
        double sum = 0.0;
        for (double& z : w) {
          z = std::exp(z - mx);
          sum += z;
        }
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const double wi = w[i] / sum;
          for (int c = 0; c < dh; ++c) y.at(t, c) += wi * v.at(idx[i], c);
        }
      }
      return y;
    }

    case Op::kSelectiveScan: {
      // Zero-order-hold discretization with input-dependent B/C:
      //   h_t = exp(delta_t * A) .* h_{t-1} + (delta_t * B_t) * u_t
      //   y_t = C_t . h_t + D .* u_t,  h_0 = 0
      const Tensor& u = *in[0];
      const Tensor& delta = *in[1];
      const Tensor& a = *in[2];
      const Tensor& b = *in[3];
      const Tensor& c = *in[4];
      const Tensor& d = *in[5];
      require_rank2(u, op, "u");
      require(delta.shape == u.shape, op, "delta shape mismatch");
      const int n = u.shape[0], de = u.shape[1];
      require(a.rank() == 2 && a.shape[0] == de, op, "A must be [d_e x d_state]");
      const int ds = a.shape[1];
      require(b.rank() == 2 && b.shape[0] == n && b.shape[1] == ds, op, "B must be [n x d_state]");
      require(c.shape == b.shape, op, "C must be [n x d_state]");
      require(vec_len(d) == de, op, "D must be length d_e");
      Tensor y = Tensor::zeros({n, de});
      Tensor hist = Tensor::zeros({n, de * ds});
      std::vector<double> h(static_cast<std::size_t>(de) * ds, 0.0);
      for (int t = 0; t < n; ++t) {
        for (int e = 0; e < de; ++e) {
          const double dt = delta.at(t, e);
          const double ut = u.at(t, e);
          double acc = 0.0;
          for (int s = 0; s < ds; ++s) {
            const double abar = std::exp(dt * a.at(e, s));
            double& he = h[static_cast<std::size_t>(e) * ds + s];
            he = abar * he + dt * b.at(t, s) * ut;
            acc += c.at(t, s) * he;
          }
          const double yt = acc + d.values[e] * ut;
          if (!std::isfinite(yt)) {
            shape_fail(op, "non-finite value at step " + std::to_string(t));
          }
          y.at(t, e) = yt;
        }
        std::copy(h.begin(), h.end(), hist.values.begin() + static_cast<std::size_t>(t) * de * ds);
      }
      if (saved) saved->push_back(std::move(hist));
      return y;
    }
  }
  throw Error("apply: unhandled op");
}

// ---------------------------------------------------------------------------
// Backward implementations
// ---------------------------------------------------------------------------

inline void Tape::backward_op(Op op, const std::vector<const Tensor*>& in, const Tensor& out,
                              const std::vector<Tensor>& saved, const OpAttrs& attrs,
                              const std::vector<double>& gout,
                              std::vector<std::vector<double>*>& gin) {
  switch (op) {
    case Op::kLeaf:
      return;

    case Op::kMatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
      if (gin[0]) {
        // dA = dC * B^T
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j)
              acc += gout[static_cast<std::size_t>(i) * n + j] *
                     b.values[static_cast<std::size_t>(p) * n + j];
            (*gin[0])[static_cast<std::size_t>(i) * k + p] += acc;
          }
      }
      if (gin[1]) {
        // dB = A^T * dC
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i)
              acc += a.values[static_cast<std::size_t>(i) * k + p] *
                     gout[static_cast<std::size_t>(i) * n + j];
            (*gin[1])[static_cast<std::size_t>(p) * n + j] += acc;
          }
      }
      return;
    }

    case Op::kTranspose: {
      if (!gin[0]) return;
      const int m = in[0]->shape[0], n = in[0]->shape[1];
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          (*gin[0])[static_cast<std::size_t>(i) * n + j] +=
              gout[static_cast<std::size_t>(j) * m + i];
      return;
    }

    case Op::kReshape: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
      return;
    }

    case Op::kAdd: {
      for (int s = 0; s < 2; ++s) {
        if (!gin[s]) continue;
        for (std::size_t i = 0; i < gout.size(); ++i) (*gin[s])[i] += gout[i];
      }
      return;
    }

    case Op::kAddRowVec: {
      const int n = in[0]->shape[0], d = in[0]->shape[1];
      if (gin[0])
        for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
      if (gin[1])
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) (*gin[1])[j] += gout[static_cast<std::size_t>(i) * d + j];
      return;
    }

    case Op::kMul: {
      if (gin[0])
        for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * in[1]->values[i];
      if (gin[1])
        for (std::size_t i = 0; i < gout.size(); ++i) (*gin[1])[i] += gout[i] * in[0]->values[i];
      return;
    }

    case Op::kMulRowVec: {
      const int n = in[0]->shape[0], d = in[0]->shape[1];
      if (gin[0])
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            (*gin[0])[static_cast<std::size_t>(i) * d + j] +=
                gout[static_cast<std::size_t>(i) * d + j] * in[1]->values[j];
      if (gin[1])
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            (*gin[1])[j] += gout[static_cast<std::size_t>(i) * d + j] *
                            in[0]->values[static_cast<std::size_t>(i) * d + j];
      return;
    }

    case Op::kMulColVec: {
      const int n = in[0]->shape[0], d = in[0]->shape[1];
      if (gin[0])
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            (*gin[0])[static_cast<std::size_t>(i) * d + j] +=
                gout[static_cast<std::size_t>(i) * d + j] * in[1]->values[i];
      if (gin[1])
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            (*gin[1])[i] += gout[static_cast<std::size_t>(i) * d + j] *
                            in[0]->values[static_cast<std::size_t>(i) * d + j];
      return;
    }

    case Op::kMulScalarT: {
      const double s = in[1]->values[0];
      if (gin[0])
        for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * s;
      if (gin[1]) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gout.size(); ++i) acc += gout[i] * in[0]->values[i];
        (*gin[1])[0] += acc;
      }
      return;
    }

    case Op::kAffine: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += attrs.alpha * gout[i];
      return;
    }

    case Op::kRowSoftmax: {
      if (!gin[0]) return;
      const int n = out.shape[0], d = out.shape[1];
      for (int i = 0; i < n; ++i) {
        const double* y = &out.values[static_cast<std::size_t>(i) * d];
        const double* gy = &gout[static_cast<std::size_t>(i) * d];
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < d; ++j)
          (*gin[0])[static_cast<std::size_t>(i) * d + j] += y[j] * (gy[j] - dot);
      }
      return;
    }

    case Op::kSigmoid: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i) {
        const double y = out.values[i];
        (*gin[0])[i] += gout[i] * y * (1.0 - y);
      }
      return;
    }

    case Op::kTanh: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i) {
        const double y = out.values[i];
        (*gin[0])[i] += gout[i] * (1.0 - y * y);
      }
      return;
    }

    case Op::kSilu: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i) {
        const double x = in[0]->values[i];
        const double s = detail::stable_sigmoid(x);
        (*gin[0])[i] += gout[i] * s * (1.0 + x * (1.0 - s));
      }
      return;
    }

    case Op::kSoftplus: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i)
        (*gin[0])[i] += gout[i] * detail::stable_sigmoid(in[0]->values[i]);
      return;
    }

    case Op::kExp: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * out.values[i];
      return;
    }

    case Op::kLog: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] / in[0]->values[i];
      return;
    }

    case Op::kConcatRows: {
      std::size_t off = 0;
      for (std::size_t s = 0; s < in.size(); ++s) {
        const std::size_t sz = in[s]->values.size();
        if (gin[s])
          for (std::size_t i = 0; i < sz; ++i) (*gin[s])[i] += gout[off + i];
        off += sz;
      }
      return;
    }

    case Op::kConcatCols: {
      const int n = in[0]->shape[0];
      const int dtot = out.shape[1];
      int coff = 0;
      for (std::size_t s = 0; s < in.size(); ++s) {
        const int d = in[s]->shape[1];
        if (gin[s])
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              (*gin[s])[static_cast<std::size_t>(i) * d + j] +=
                  gout[static_cast<std::size_t>(i) * dtot + coff + j];
        coff += d;
      }
      return;
    }

    case Op::kSliceRows: {
      if (!gin[0]) return;
      const int d = in[0]->shape[1];
      for (int i = attrs.i0; i < attrs.i1; ++i)
        for (int j = 0; j < d; ++j)
          (*gin[0])[static_cast<std::size_t>(i) * d + j] +=
              gout[static_cast<std::size_t>(i - attrs.i0) * d + j];
      return;
    }

    case Op::kSliceCols: {
      if (!gin[0]) return;
      const int n = in[0]->shape[0], d = in[0]->shape[1];
      const int dout = attrs.i1 - attrs.i0;
      for (int i = 0; i < n; ++i)
        for (int j = attrs.i0; j < attrs.i1; ++j)
          (*gin[0])[static_cast<std::size_t>(i) * d + j] +=
              gout[static_cast<std::size_t>(i) * dout + (j - attrs.i0)];
      return;
    }

    case Op::kGatherRows: {
      if (!gin[0]) return;
      const int d = in[0]->shape[1];
      for (std::size_t r = 0; r < attrs.indices.size(); ++r) {
        const int idx = attrs.indices[r];
        for (int j = 0; j < d; ++j)
          (*gin[0])[static_cast<std::size_t>(idx) * d + j] += gout[r * d + j];
      }
      return;
    }

    case Op::kMeanPoolRows: {
      if (!gin[0]) return;
      const int n = in[0]->shape[0], d = in[0]->shape[1];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          (*gin[0])[static_cast<std::size_t>(i) * d + j] += gout[j] / n;
      return;
    }

    case Op::kMaxPoolRows: {
      if (!gin[0]) return;
      const Tensor& argmax = saved[0];
      const int d = in[0]->shape[1];
      for (int j = 0; j < d; ++j) {
        const int i = static_cast<int>(argmax.values[j]);
        (*gin[0])[static_cast<std::size_t>(i) * d + j] += gout[j];
      }
      return;
    }

    case Op::kSumAll: {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < gin[0]->size(); ++i) (*gin[0])[i] += gout[0];
      return;
    }

    case Op::kConv1dSame: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      const int n = x.shape[0], cin = x.shape[1];
      const int kw = w.shape[0], cout = w.shape[2];
      const int half = kw / 2;
      for (int p = 0; p < n; ++p) {
        const double* gy = &gout[static_cast<std::size_t>(p) * cout];
        if (gin[2])
          for (int co = 0; co < cout; ++co) (*gin[2])[co] += gy[co];
        for (int t = 0; t < kw; ++t) {
          const int q = p + t - half;
          if (q < 0 || q >= n) continue;
          for (int ci = 0; ci < cin; ++ci) {
            const std::size_t widx = (static_cast<std::size_t>(t) * cin + ci) * cout;
            if (gin[0]) {
              double acc = 0.0;
              for (int co = 0; co < cout; ++co) acc += gy[co] * w.values[widx + co];
              (*gin[0])[static_cast<std::size_t>(q) * cin + ci] += acc;
            }
            if (gin[1]) {
              const double xv = x.at(q, ci);
              for (int co = 0; co < cout; ++co) (*gin[1])[widx + co] += gy[co] * xv;
            }
          }
        }
      }
      return;
    }

    case Op::kCausalConv1d: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      const int n = x.shape[0], c = x.shape[1], kw = w.shape[0];
      for (int p = 0; p < n; ++p) {
        for (int ci = 0; ci < c; ++ci) {
          const double gy = gout[static_cast<std::size_t>(p) * c + ci];
          if (gy == 0.0) continue;
          if (gin[2]) (*gin[2])[ci] += gy;
          for (int t = 0; t < kw && t <= p; ++t) {
            if (gin[0])
              (*gin[0])[static_cast<std::size_t>(p - t) * c + ci] += gy * w.at(t, ci);
            if (gin[1])
              (*gin[1])[static_cast<std::size_t>(t) * c + ci] += gy * x.at(p - t, ci);
          }
        }
      }
      return;
    }

    case Op::kDropout: {
      if (!gin[0]) return;
      if (attrs.rate == 0.0) {
        for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
        return;
      }
      const Tensor& mask = saved[0];
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * mask.values[i];
      return;
    }

    case Op::kLayerNorm: {
      if (!gin[0]) return;
      const Tensor& x = *in[0];
      const int n = x.shape[0], d = x.shape[1];
      const double eps = attrs.alpha;
      for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x.at(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
          const double dv = x.at(i, j) - mu;
          var += dv * dv;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        const double* gy = &gout[static_cast<std::size_t>(i) * d];
        double gmean = 0.0, gdot = 0.0;
        for (int j = 0; j < d; ++j) {
          const double xh = (x.at(i, j) - mu) * inv;
          gmean += gy[j];
          gdot += gy[j] * xh;
        }
        gmean /= d;
        gdot /= d;
        for (int j = 0; j < d; ++j) {
          const double xh = (x.at(i, j) - mu) * inv;
          (*gin[0])[static_cast<std::size_t>(i) * d + j] += inv * (gy[j] - gmean - xh * gdot);
        }
      }
      return;
    }

    case Op::kBSplineBasis: {
      if (!gin[0]) return;
      const Tensor& x = *in[0];
      const int deg = attrs.order;
      const int nt = static_cast<int>(attrs.knots.size());
      const int nb = nt - deg - 1;
      const int n = x.shape[0], din = x.shape[1];
      const std::vector<double>& T = attrs.knots;
      std::vector<double> lower(static_cast<std::size_t>(nt - 1));
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < din; ++j) {
          const double xv = x.at(i, j);
          double acc = 0.0;
          if (deg == 0) {
            // Piecewise constant: derivative 0 a.e.
          } else {
            detail::bspline_all(T, deg - 1, xv, lower);
            for (int m = 0; m < nb; ++m) {
              const double gy = gout[static_cast<std::size_t>(i) * (din * nb) + j * nb + m];
              if (gy == 0.0) continue;
              double der = 0.0;
              const double dl = T[m + deg] - T[m];
              const double dr = T[m + deg + 1] - T[m + 1];
              if (dl > 0.0) der += deg * lower[m] / dl;
              if (dr > 0.0) der -= deg * lower[m + 1] / dr;
              acc += gy * der;
            }
          }
          (*gin[0])[static_cast<std::size_t>(i) * din + j] += acc;
        }
      }
      return;
    }

    case Op::kAttendIndexed: {
      const Tensor& q = *in[0];
      const Tensor& k = *in[1];
      const Tensor& v = *in[2];
      const int n = q.shape[0], dh = q.shape[1];
      std::vector<double> w, sv;
      for (int t = 0; t < n; ++t) {
        const std::vector<int>& idx = attrs.index_lists[t];
        if (idx.empty()) continue;
        // Recompute softmax weights for this query.
        w.assign(idx.size(), 0.0);
        double mx = -1e300;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          double z = 0.0;
          for (int c = 0; c < dh; ++c) z += q.at(t, c) * k.at(idx[i], c);
          w[i] = attrs.alpha * z;
          mx = std::max(mx, w[i]);
        }
        double sum = 0.0;
        for (double& z : w) {
          z = std::exp(z - mx);
          sum += z;
        }
        for (double& z : w) z /= sum;

        const double* gy = &gout[static_cast<std::size_t>(t) * dh];
        // s_i = gy . v_i ; dz_i = w_i (s_i - sum_j w_j s_j)
        sv.assign(idx.size(), 0.0);
        double wdot = 0.0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += gy[c] * v.at(idx[i], c);
          sv[i] = s;
          wdot += w[i] * s;
          if (gin[2])
            for (int c = 0; c < dh; ++c)
              (*gin[2])[static_cast<std::size_t>(idx[i]) * dh + c] += w[i] * gy[c];
        }
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const double dz = w[i] * (sv[i] - wdot) * attrs.alpha;
          if (dz == 0.0) continue;
          if (gin[0])
            for (int c = 0; c < dh; ++c)
              (*gin[0])[static_cast<std::size_t>(t) * dh + c] += dz * k.at(idx[i], c);
          if (gin[1])
            for (int c = 0; c < dh; ++c)
              (*gin[1])[static_cast<std::size_t>(idx[i]) * dh + c] += dz * q.at(t, c);
        }
      }
      return;
    }

    case Op::kSelectiveScan: {
      const Tensor& u = *in[0];
      const Tensor& delta = *in[1];
      const Tensor& a = *in[2];
      const Tensor& b = *in[3];
      const Tensor& c = *in[4];
      const Tensor& d = *in[5];
      const Tensor& hist = saved[0];
      const int n = u.shape[0], de = u.shape[1], ds = a.shape[1];
      std::vector<double> gh(static_cast<std::size_t>(de) * ds, 0.0);
      for (int t = n - 1; t >= 0; --t) {
        const double* ht = &hist.values[static_cast<std::size_t>(t) * de * ds];
        const double* hprev =
            t > 0 ? &hist.values[static_cast<std::size_t>(t - 1) * de * ds] : nullptr;
        for (int e = 0; e < de; ++e) {
          const double gy = gout[static_cast<std::size_t>(t) * de + e];
          const double dt = delta.at(t, e);
          const double ut = u.at(t, e);
          // y_t contributions.
          if (gy != 0.0) {
            if (gin[5]) (*gin[5])[e] += gy * ut;
            if (gin[0]) (*gin[0])[static_cast<std::size_t>(t) * de + e] += gy * d.values[e];
          }
          double gdt = 0.0, gut = 0.0;
          for (int s = 0; s < ds; ++s) {
            const std::size_t hi = static_cast<std::size_t>(e) * ds + s;
            double ghe = gh[hi] + (gy != 0.0 ? gy * c.at(t, s) : 0.0);
            if (gin[4] && gy != 0.0) (*gin[4])[static_cast<std::size_t>(t) * ds + s] += gy * ht[hi];
            if (ghe != 0.0) {
              const double av = a.at(e, s);
              const double abar = std::exp(dt * av);
              const double hp = hprev ? hprev[hi] : 0.0;
              const double bt = b.at(t, s);
              gdt += ghe * (av * abar * hp + bt * ut);
              if (gin[2]) (*gin[2])[static_cast<std::size_t>(e) * ds + s] += ghe * dt * abar * hp;
              if (gin[3]) (*gin[3])[static_cast<std::size_t>(t) * ds + s] += ghe * dt * ut;
              gut += ghe * dt * bt;
              gh[hi] = ghe * abar;  // adjoint flows to h_{t-1}
            } else {
              gh[hi] = 0.0;
            }
          }
          if (gin[1]) (*gin[1])[static_cast<std::size_t>(t) * de + e] += gdt;
          if (gin[0]) (*gin[0])[static_cast<std::size_t>(t) * de + e] += gut;
        }
      }
      return;
    }
  }
}

inline GradMap Tape::backward(const Tensor& loss) {
  if (!recording_) throw Error("backward: tape is not recording");
  if (loss.node_id < 0 || loss.tape_id != id_)
    throw Error("backward: loss is not on this tape");
  if (!loss.is_scalar())
    throw Error("backward: loss must be scalar, got " + shape_str(loss.shape));

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[loss.node_id] = {1.0};

  for (int k = loss.node_id; k >= 0; --k) {
    if (grads[k].empty()) continue;
    Node& node = nodes_[k];
    if (node.op == Op::kLeaf || !node.requires_grad) continue;

    std::vector<const Tensor*> in;
    std::vector<std::vector<double>*> gin;
    in.reserve(node.inputs.size());
    gin.reserve(node.inputs.size());
    for (int id : node.inputs) {
      in.push_back(&nodes_[id].out);
      if (nodes_[id].requires_grad) {
        if (grads[id].empty()) grads[id].assign(nodes_[id].out.values.size(), 0.0);
        gin.push_back(&grads[id]);
      } else {
        gin.push_back(nullptr);
      }
    }
    backward_op(node.op, in, node.out, node.saved, node.attrs, grads[k], gin);
  }

  std::vector<Tensor> result(nodes_.size());
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    if (!nodes_[k].requires_grad) continue;
    Tensor g = Tensor::zeros(nodes_[k].out.shape);
    if (!grads[k].empty()) g.values = std::move(grads[k]);
    result[k] = std::move(g);
  }
  return GradMap(std::move(result));
}

// Top-k column indices per row of a score matrix, ranked by descending
// score with ties broken toward the lower index; the result is sorted
// ascending. Selection is non-differentiable by contract: callers feed
// these indices back as constants of the forward pass.
inline std::vector<std::vector<int>> topk_rows(const Tensor& scores, int k) {
  if (scores.rank() != 2) throw Error("topk_rows: input must be rank-2");
  if (k < 1) throw Error("topk_rows: k must be >= 1");
  const int n = scores.shape[0], m = scores.shape[1];
  const int kk = std::min(k, m);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  std::vector<int> order(static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
      const double sx = scores.at(i, x), sy = scores.at(i, y);
      if (sx != sy) return sx > sy;
      return x < y;
    });
    std::vector<int> sel(order.begin(), order.begin() + kk);
    std::sort(sel.begin(), sel.end());
    out[i] = std::move(sel);
  }
  return out;
}

}  // namespace dkbf
