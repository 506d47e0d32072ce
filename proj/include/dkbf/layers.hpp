#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dkbf/autodiff.hpp"
#include "dkbf/rng.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

// Visitor over named trainable tensors; used for binding to a tape,
// optimizer state, and checkpoints.
using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

inline Tensor xavier_uniform(Shape shape, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(shape, true);
  for (double& x : t.values) x = rng.uniform(-limit, limit);
  return t;
}

inline Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

// ---------------------------------------------------------------------------
// Multi-head cross-modal attention
// ---------------------------------------------------------------------------

// Per-head projections plus the output projection and the post-attention
// fully-connected map used by the residual interaction blocks.
struct MhcaParams {
  int d = 0;
  int heads = 0;
  std::vector<Tensor> w_q;  // h tensors, d x d_h
  std::vector<Tensor> w_k;
  std::vector<Tensor> w_v;
  Tensor w_o;   // d x d
  Tensor fc_w;  // d x d
  Tensor fc_b;  // d

  MhcaParams() = default;

  MhcaParams(int d_, int heads_, Rng& rng) : d(d_), heads(heads_) {
    if (heads <= 0 || d % heads != 0) throw Error("mhca: d must be divisible by heads");
    const int dh = d / heads;
    for (int h = 0; h < heads; ++h) {
      w_q.push_back(xavier_uniform({d, dh}, d, dh, rng));
      w_k.push_back(xavier_uniform({d, dh}, d, dh, rng));
      w_v.push_back(xavier_uniform({d, dh}, d, dh, rng));
    }
    w_o = xavier_uniform({d, d}, d, d, rng);
    fc_w = xavier_uniform({d, d}, d, d, rng);
    fc_b = zeros_param({d});
  }

  int head_dim() const { return d / heads; }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    for (int h = 0; h < heads; ++h) {
      const std::string hs = std::to_string(h);
      fn(prefix + ".w_q." + hs, w_q[h]);
      fn(prefix + ".w_k." + hs, w_k[h]);
      fn(prefix + ".w_v." + hs, w_v[h]);
    }
    fn(prefix + ".w_o", w_o);
    fn(prefix + ".fc_w", fc_w);
    fn(prefix + ".fc_b", fc_b);
  }
};

// Standard multi-head attention: per head softmax(QK^T / sqrt(d_h)) V,
// heads concatenated, output-projected.
inline Tensor mhca_forward(Tape& tape, const Tensor& q_seq, const Tensor& kv_seq,
                           const MhcaParams& p) {
  if (q_seq.rank() != 2 || kv_seq.rank() != 2) throw Error("mhca: inputs must be rank-2");
  if (q_seq.shape[1] != p.d || kv_seq.shape[1] != p.d)
    throw Error("mhca: feature dim mismatch, expected " + std::to_string(p.d));
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  for (int h = 0; h < p.heads; ++h) {
    Tensor q = tape.matmul(q_seq, p.w_q[h]);
    Tensor k = tape.matmul(kv_seq, p.w_k[h]);
    Tensor v = tape.matmul(kv_seq, p.w_v[h]);
    Tensor logits = tape.scale(tape.matmul(q, tape.transpose(k)), scale);
    Tensor attn = tape.row_softmax(logits);
    heads.push_back(tape.matmul(attn, v));
  }
  Tensor cat = p.heads == 1 ? heads[0] : tape.concat_cols(heads);
  return tape.matmul(cat, p.w_o);
}

// Aspect-textual interaction: cross-attention from the sentence onto the
// aspect tokens, refined by a residual fully-connected layer.
inline Tensor ati_forward(Tape& tape, const Tensor& h_s, const Tensor& h_a,
                          const MhcaParams& p) {
  Tensor attn = mhca_forward(tape, h_s, h_a, p);
  Tensor fc = tape.add_rowvec(tape.matmul(attn, p.fc_w), p.fc_b);
  return tape.add(fc, attn);
}

// ---------------------------------------------------------------------------
// Aspect-visual interaction
// ---------------------------------------------------------------------------

struct AviParams {
  int d = 0;
  int d_img = 0;
  Tensor w_proj;  // d_img x d
  Tensor w_gate;  // d x d
  Tensor b_gate;  // d
  MhcaParams attn;

  AviParams() = default;

  AviParams(int d_, int d_img_, int heads, Rng& rng) : d(d_), d_img(d_img_) {
    w_proj = xavier_uniform({d_img, d}, d_img, d, rng);
    w_gate = xavier_uniform({d, d}, d, d, rng);
    b_gate = zeros_param({d});
    attn = MhcaParams(d, heads, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w_proj", w_proj);
    fn(prefix + ".w_gate", w_gate);
    fn(prefix + ".b_gate", b_gate);
    attn.visit(prefix + ".attn", fn);
  }
};

// Projects image features to model width, lets each visual token attend to
// the aspect-aware sentence, then filters the result with a gate computed
// from the max-pooled sequence. Output keeps the ti visual positions.
inline Tensor avi_forward(Tape& tape, const Tensor& h_as, const Tensor& h_img,
                          const AviParams& p) {
  if (h_img.rank() != 2 || h_img.shape[1] != p.d_img)
    throw Error("avi: image features must be [ti x " + std::to_string(p.d_img) + "], got " +
                shape_str(h_img.shape));
  Tensor proj = tape.matmul(h_img, p.w_proj);
  Tensor attn = mhca_forward(tape, proj, h_as, p.attn);
  Tensor fc = tape.add_rowvec(tape.matmul(attn, p.attn.fc_w), p.attn.fc_b);
  Tensor h_asi = tape.add(fc, attn);
  Tensor pooled = tape.max_pool_rows(h_asi);
  Tensor gate = tape.sigmoid(tape.add_rowvec(tape.matmul(pooled, p.w_gate), p.b_gate));
  return tape.mul_rowvec(h_asi, gate);
}

// ---------------------------------------------------------------------------
// Dynamic Tanh
// ---------------------------------------------------------------------------

struct DyTParams {
  Tensor alpha;  // scalar, > 0 at init
  Tensor gamma;  // d
  Tensor beta;   // d

  DyTParams() = default;

  explicit DyTParams(int d) {
    alpha = Tensor::scalar(0.5, true);
    gamma = Tensor::full({d}, 1.0, true);
    beta = zeros_param({d});
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".alpha", alpha);
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

// gamma_j * tanh(alpha * x_ij) + beta_j
inline Tensor dyt_forward(Tape& tape, const Tensor& x, const DyTParams& p) {
  Tensor t = tape.tanh(tape.mul_scalar_t(x, p.alpha));
  return tape.add_rowvec(tape.mul_rowvec(t, p.gamma), p.beta);
}

// ---------------------------------------------------------------------------
// Kolmogorov-Arnold layer
// ---------------------------------------------------------------------------

// Each edge (i,j) carries w_b * silu(x_i) plus a spline over a fixed knot
// grid; outputs sum the edge functions over inputs. The basis expansion is
// shared per input entry, so the layer reduces to two matmuls.
struct KanParams {
  int d_in = 0;
  int d_out = 0;
  int grid_size = 5;    // G
  int degree = 3;       // k
  double grid_range = 2.0;
  std::vector<double> knots;
  Tensor w_base;  // d_in x d_out
  Tensor coeffs;  // (d_in * (G + k)) x d_out

  KanParams() = default;

  KanParams(int d_in_, int d_out_, Rng& rng, int grid = 5, int deg = 3, double range = 2.0)
      : d_in(d_in_), d_out(d_out_), grid_size(grid), degree(deg), grid_range(range) {
    const double h = 2.0 * grid_range / grid_size;
    const int n_knots = grid_size + 2 * degree + 1;
    knots.resize(n_knots);
    for (int i = 0; i < n_knots; ++i) knots[i] = -grid_range - degree * h + i * h;
    w_base = xavier_uniform({d_in, d_out}, d_in, d_out, rng);
    const int nb = num_bases();
    coeffs = Tensor::zeros({d_in * nb, d_out}, true);
    const double lim = 0.1 / std::sqrt(static_cast<double>(d_in));
    for (double& c : coeffs.values) c = rng.uniform(-lim, lim);
  }

  int num_bases() const { return grid_size + degree; }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w_base", w_base);
    fn(prefix + ".coeffs", coeffs);
  }
};

inline Tensor kan_forward(Tape& tape, const Tensor& x, const KanParams& p) {
  if (x.rank() != 2 || x.shape[1] != p.d_in)
    throw Error("kan: input must be [n x " + std::to_string(p.d_in) + "], got " +
                shape_str(x.shape));
  Tensor base = tape.matmul(tape.silu(x), p.w_base);
  Tensor spline = tape.matmul(tape.bspline_basis(x, p.knots, p.degree), p.coeffs);
  return tape.add(base, spline);
}

// ---------------------------------------------------------------------------
// Convolutional gate maps and gated fusion
// ---------------------------------------------------------------------------

struct GateConvParams {
  int d = 0;
  int width = 3;  // odd
  Tensor kernel;  // width x d x d
  Tensor bias;    // d

  GateConvParams() = default;

  GateConvParams(int d_, int width_, Rng& rng) : d(d_), width(width_) {
    if (width % 2 == 0) throw Error("gate conv: width must be odd");
    kernel = xavier_uniform({width, d, d}, width * d, d, rng);
    bias = zeros_param({d});
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".kernel", kernel);
    fn(prefix + ".bias", bias);
  }
};

// sigma(conv1d(H)); outputs lie strictly in (0,1).
inline Tensor gate_map(Tape& tape, const Tensor& h, const GateConvParams& p) {
  return tape.sigmoid(tape.conv1d_same(h, p.kernel, p.bias));
}

// G_a .* H_a + (1 - G_a) .* G_b .* H_b
inline Tensor gated_fuse(Tape& tape, const Tensor& h_a, const Tensor& h_b, const Tensor& g_a,
                         const Tensor& g_b) {
  if (!(h_a.shape == h_b.shape && h_a.shape == g_a.shape && h_a.shape == g_b.shape))
    throw Error("gated_fuse: all shapes must match, got " + shape_str(h_a.shape) + " vs " +
                shape_str(h_b.shape) + " vs " + shape_str(g_a.shape) + " vs " +
                shape_str(g_b.shape));
  Tensor first = tape.mul(g_a, h_a);
  Tensor second = tape.mul(tape.mul(tape.affine(g_a, -1.0, 1.0), g_b), h_b);
  return tape.add(first, second);
}

}  // namespace dkbf
