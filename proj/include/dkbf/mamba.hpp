#pragma once

#include <cmath>
#include <string>

#include "dkbf/autodiff.hpp"
#include "dkbf/layers.hpp"
#include "dkbf/rng.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

// Selective state-space layer. The scan itself is a single tape op
// (sequential zero-order-hold recurrence); this wrapper adds the input
// expansion, causal depthwise convolution, input-dependent discretization
// and the multiplicative SiLU gate.
struct MambaParams {
  int d = 0;
  int d_e = 0;      // expanded width (2*d by default)
  int d_state = 16;
  int d_conv = 2;
  int dt_rank = 1;

  Tensor w_in;       // d x 2*d_e (main path | gate path)
  Tensor conv_w;     // d_conv x d_e, depthwise causal
  Tensor conv_b;     // d_e
  Tensor w_dt_down;  // d_e x dt_rank
  Tensor w_dt_up;    // dt_rank x d_e
  Tensor dt_bias;    // d_e
  Tensor w_b;        // d_e x d_state
  Tensor w_c;        // d_e x d_state
  Tensor a_log;      // d_e x d_state; A = -exp(a_log) keeps Abar in (0,1)
  Tensor d_skip;     // d_e
  Tensor w_out;      // d_e x d

  MambaParams() = default;

  MambaParams(int d_, Rng& rng, int d_state_ = 16, int d_conv_ = 2, int expand = 2)
      : d(d_), d_e(expand * d_), d_state(d_state_), d_conv(d_conv_) {
    dt_rank = std::max(1, d_e / 16);
    w_in = xavier_uniform({d, 2 * d_e}, d, 2 * d_e, rng);
    conv_w = Tensor::zeros({d_conv, d_e}, true);
    const double climit = 1.0 / std::sqrt(static_cast<double>(d_conv));
    for (double& x : conv_w.values) x = rng.uniform(-climit, climit);
    conv_b = zeros_param({d_e});
    w_dt_down = xavier_uniform({d_e, dt_rank}, d_e, dt_rank, rng);
    w_dt_up = xavier_uniform({dt_rank, d_e}, dt_rank, d_e, rng);
    // softplus(dt_bias) lands in [1e-3, 1e-1].
    dt_bias = Tensor::zeros({d_e}, true);
    for (double& x : dt_bias.values) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      x = std::log(std::expm1(dt));
    }
    w_b = xavier_uniform({d_e, d_state}, d_e, d_state, rng);
    w_c = xavier_uniform({d_e, d_state}, d_e, d_state, rng);
    a_log = Tensor::zeros({d_e, d_state}, true);
    for (int e = 0; e < d_e; ++e)
      for (int s = 0; s < d_state; ++s) a_log.at(e, s) = std::log(static_cast<double>(s + 1));
    d_skip = Tensor::full({d_e}, 1.0, true);
    w_out = xavier_uniform({d_e, d}, d_e, d, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w_in", w_in);
    fn(prefix + ".conv_w", conv_w);
    fn(prefix + ".conv_b", conv_b);
    fn(prefix + ".w_dt_down", w_dt_down);
    fn(prefix + ".w_dt_up", w_dt_up);
    fn(prefix + ".dt_bias", dt_bias);
    fn(prefix + ".w_b", w_b);
    fn(prefix + ".w_c", w_c);
    fn(prefix + ".a_log", a_log);
    fn(prefix + ".d_skip", d_skip);
    fn(prefix + ".w_out", w_out);
  }
};

// Raw scan. Exposed separately so the recurrence can be checked against a
// naive per-step oracle.
inline Tensor selective_scan(Tape& tape, const Tensor& u, const Tensor& delta, const Tensor& a,
                             const Tensor& b, const Tensor& c, const Tensor& d) {
  return tape.selective_scan(u, delta, a, b, c, d);
}

inline Tensor mamba_forward(Tape& tape, const Tensor& h, const MambaParams& p) {
  if (h.rank() != 2 || h.shape[1] != p.d)
    throw Error("mamba: input must be [n x " + std::to_string(p.d) + "], got " +
                shape_str(h.shape));
  Tensor xz = tape.matmul(h, p.w_in);
  Tensor x = tape.slice_cols(xz, 0, p.d_e);
  Tensor z = tape.slice_cols(xz, p.d_e, 2 * p.d_e);

  x = tape.silu(tape.causal_conv1d(x, p.conv_w, p.conv_b));

  Tensor dt_low = tape.matmul(x, p.w_dt_down);
  Tensor delta = tape.softplus(tape.add_rowvec(tape.matmul(dt_low, p.w_dt_up), p.dt_bias));
  Tensor b = tape.matmul(x, p.w_b);
  Tensor c = tape.matmul(x, p.w_c);
  Tensor a = tape.scale(tape.exp(p.a_log), -1.0);

  Tensor y = tape.selective_scan(x, delta, a, b, c, p.d_skip);
  y = tape.mul(y, tape.silu(z));
  return tape.matmul(y, p.w_out);
}

}  // namespace dkbf
