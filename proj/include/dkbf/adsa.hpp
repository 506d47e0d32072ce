#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dkbf/autodiff.hpp"
#include "dkbf/layers.hpp"
#include "dkbf/rng.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

// Aspect-driven sparse attention: three key/value branches per head
// (scope = compressed blocks, focus = top-n selected blocks, proximity =
// local window) combined by per-position sigmoid gates.

enum class ProximityMode { kSuffix, kSliding };

struct AdsaConfig {
  int block_len = 4;      // compress block length (l)
  int stride = 2;         // compress stride (s_c)
  int sel_block_len = 4;  // selection block size; spans share the compress offsets
  int n_sel = 2;          // number of selected blocks per query
  int window = 2;         // proximity window size (w)
  ProximityMode proximity_mode = ProximityMode::kSuffix;
  // Eq.-style logits divide by d_h; set true for conventional 1/sqrt(d_h).
  bool sqrt_temperature = false;

  void validate() const {
    if (block_len < 1 || stride < 1 || sel_block_len < 1 || n_sel < 1 || window < 1)
      throw Error("adsa config: block_len, stride, sel_block_len, n_sel, window must be >= 1");
  }

  // Number of compress blocks for a sequence of n tokens, at 0-based
  // offsets {0, s_c, 2*s_c, ...}; 0 when the sequence is shorter than one
  // block.
  int num_blocks(int n) const { return n >= block_len ? (n - block_len) / stride + 1 : 0; }

  double temperature(int d_h) const {
    return sqrt_temperature ? 1.0 / std::sqrt(static_cast<double>(d_h))
                            : 1.0 / static_cast<double>(d_h);
  }
};

// One-hidden-layer block compressor (flattened block -> one token). The
// key-side instance carries no output bias: scores are row-softmaxed, so a
// constant shift of every compressed key cancels and the bias could never
// train.
struct BlockCompressor {
  Tensor w1;  // (l * d_h) x d_h
  Tensor b1;  // d_h
  Tensor w2;  // d_h x d_h
  Tensor b2;  // d_h, value side only
  bool out_bias = true;

  BlockCompressor() = default;

  BlockCompressor(int block_len, int d_h, Rng& rng, bool with_out_bias)
      : out_bias(with_out_bias) {
    const int flat = block_len * d_h;
    w1 = xavier_uniform({flat, d_h}, flat, d_h, rng);
    b1 = zeros_param({d_h});
    w2 = xavier_uniform({d_h, d_h}, d_h, d_h, rng);
    if (out_bias) b2 = zeros_param({d_h});
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    if (out_bias) fn(prefix + ".b2", b2);
  }
};

struct AdsaParams {
  int d = 0;
  int heads = 0;
  Tensor w_q;  // d x d
  Tensor w_k;
  Tensor w_v;
  Tensor pos_emb;  // block_len x d_h, intra-block positions (shared by K/V compressors)
  BlockCompressor phi_k;
  BlockCompressor phi_v;
  Tensor gate_w;  // d x 3 (scope, focus, proximity)
  Tensor gate_b;  // 3

  AdsaParams() = default;

  AdsaParams(int d_, int heads_, const AdsaConfig& cfg, Rng& rng) : d(d_), heads(heads_) {
    if (heads <= 0 || d % heads != 0) throw Error("adsa: d must be divisible by heads");
    const int dh = d / heads;
    w_q = xavier_uniform({d, d}, d, d, rng);
    w_k = xavier_uniform({d, d}, d, d, rng);
    w_v = xavier_uniform({d, d}, d, d, rng);
    pos_emb = xavier_uniform({cfg.block_len, dh}, cfg.block_len, dh, rng);
    phi_k = BlockCompressor(cfg.block_len, dh, rng, /*with_out_bias=*/false);
    phi_v = BlockCompressor(cfg.block_len, dh, rng, /*with_out_bias=*/true);
    gate_w = xavier_uniform({d, 3}, d, 3, rng);
    gate_b = zeros_param({3});
  }

  int head_dim() const { return d / heads; }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w_q", w_q);
    fn(prefix + ".w_k", w_k);
    fn(prefix + ".w_v", w_v);
    fn(prefix + ".pos_emb", pos_emb);
    phi_k.visit(prefix + ".phi_k", fn);
    phi_v.visit(prefix + ".phi_v", fn);
    fn(prefix + ".gate_w", gate_w);
    fn(prefix + ".gate_b", gate_b);
  }
};

// Compressed scope branch; m == 0 marks the degenerate empty branch.
struct CompressedKv {
  int m = 0;
  Tensor k;  // m x d_h
  Tensor v;  // m x d_h
};

namespace detail_adsa {

inline Tensor compress_one(Tape& tape, const Tensor& tokens, const Tensor& pos_emb,
                           const BlockCompressor& phi, const AdsaConfig& cfg, int n, int m,
                           int d_h) {
  // Gather every block's rows, add position embeddings, flatten each block
  // and push it through the MLP: (m*l) x d_h -> m x (l*d_h) -> m x d_h.
  std::vector<int> row_idx;
  std::vector<int> pos_idx;
  row_idx.reserve(static_cast<std::size_t>(m) * cfg.block_len);
  pos_idx.reserve(row_idx.capacity());
  for (int b = 0; b < m; ++b) {
    const int off = b * cfg.stride;
    for (int t = 0; t < cfg.block_len; ++t) {
      row_idx.push_back(off + t);
      pos_idx.push_back(t);
    }
  }
  (void)n;
  Tensor blocks = tape.gather_rows(tokens, row_idx);
  Tensor pos = tape.gather_rows(pos_emb, pos_idx);
  Tensor flat = tape.reshape(tape.add(blocks, pos), {m, cfg.block_len * d_h});
  Tensor hidden = tape.silu(tape.add_rowvec(tape.matmul(flat, phi.w1), phi.b1));
  Tensor out = tape.matmul(hidden, phi.w2);
  return phi.out_bias ? tape.add_rowvec(out, phi.b2) : out;
}

}  // namespace detail_adsa

// Compresses K/V into coarse per-block tokens (scope branch).
inline CompressedKv compress_kv(Tape& tape, const Tensor& k, const Tensor& v,
                                const AdsaConfig& cfg, const AdsaParams& p) {
  cfg.validate();
  if (k.rank() != 2 || v.rank() != 2 || !(k.shape == v.shape))
    throw Error("compress_kv: K and V must be rank-2 with equal shapes");
  if (p.pos_emb.shape[0] != cfg.block_len)
    throw Error("compress_kv: params were built for block_len " +
                std::to_string(p.pos_emb.shape[0]) + ", config has " +
                std::to_string(cfg.block_len));
  const int n = k.shape[0];
  const int d_h = k.shape[1];
  CompressedKv out;
  out.m = cfg.num_blocks(n);
  if (out.m == 0) return out;
  out.k = detail_adsa::compress_one(tape, k, p.pos_emb, p.phi_k, cfg, n, out.m, d_h);
  out.v = detail_adsa::compress_one(tape, v, p.pos_emb, p.phi_v, cfg, n, out.m, d_h);
  return out;
}

// Row-softmaxed scores of queries against compressed keys (Eq. 19
// temperature applied before the softmax).
inline Tensor scope_scores(Tape& tape, const Tensor& q, const Tensor& k_scp, double temperature) {
  return tape.row_softmax(tape.scale(tape.matmul(q, tape.transpose(k_scp)), temperature));
}

// Top-n_sel block indices per query, ties toward the lower block index,
// result ascending. Selection is a constant of the forward pass.
inline std::vector<std::vector<int>> select_focus_blocks(const Tensor& scores,
                                                         const AdsaConfig& cfg) {
  return topk_rows(scores, cfg.n_sel);
}

// Raw-token spans of the selected blocks, concatenated per query.
inline std::vector<std::vector<int>> focus_token_lists(
    const std::vector<std::vector<int>>& block_sel, const AdsaConfig& cfg, int n) {
  std::vector<std::vector<int>> lists(block_sel.size());
  for (std::size_t t = 0; t < block_sel.size(); ++t) {
    for (int b : block_sel[t]) {
      const int start = b * cfg.stride;
      const int stop = std::min(start + cfg.sel_block_len, n);
      for (int r = start; r < stop; ++r) lists[t].push_back(r);
    }
  }
  return lists;
}

// Proximity branch: a shared suffix window (literal formula) or per-query
// centered windows clipped to the sequence bounds.
struct ProximityKv {
  bool per_query = false;
  Tensor k;  // suffix mode: w' x d_h
  Tensor v;
  std::vector<std::vector<int>> windows;  // sliding mode
};

inline ProximityKv proximity_kv(Tape& tape, const Tensor& k, const Tensor& v,
                                const AdsaConfig& cfg) {
  const int n = k.shape[0];
  ProximityKv out;
  if (cfg.proximity_mode == ProximityMode::kSuffix) {
    const int w = std::min(cfg.window, n);
    out.k = tape.slice_rows(k, n - w, n);
    out.v = tape.slice_rows(v, n - w, n);
    return out;
  }
  out.per_query = true;
  const int w = std::min(cfg.window, n);
  out.windows.resize(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    int start = t - (cfg.window - 1) / 2;
    start = std::max(0, std::min(start, n - w));
    for (int r = start; r < start + w; ++r) out.windows[static_cast<std::size_t>(t)].push_back(r);
  }
  return out;
}

// Dense branch attention with the shared-key layout: per query,
// out = sum_i softmax(q.k_i * temperature)_i * v_i.
inline Tensor branch_attention(Tape& tape, const Tensor& q, const Tensor& k_b, const Tensor& v_b,
                               double temperature) {
  Tensor scores = tape.row_softmax(tape.scale(tape.matmul(q, tape.transpose(k_b)), temperature));
  return tape.matmul(scores, v_b);
}

// Selected block indices per (head, query); capturable and re-injectable
// so gradient checks can freeze the non-differentiable ranking.
using AdsaSelection = std::vector<std::vector<std::vector<int>>>;

inline Tensor adsa_forward(Tape& tape, const Tensor& h, const AdsaConfig& cfg,
                           const AdsaParams& p, const AdsaSelection* pinned = nullptr,
                           AdsaSelection* captured = nullptr) {
  cfg.validate();
  if (h.rank() != 2 || h.shape[1] != p.d)
    throw Error("adsa: input must be [n x " + std::to_string(p.d) + "], got " +
                shape_str(h.shape));
  const int n = h.shape[0];
  const int dh = p.head_dim();
  const double temp = cfg.temperature(dh);

  Tensor gates = tape.sigmoid(tape.add_rowvec(tape.matmul(h, p.gate_w), p.gate_b));
  Tensor g_scp = tape.slice_cols(gates, 0, 1);
  Tensor g_fcs = tape.slice_cols(gates, 1, 2);
  Tensor g_prx = tape.slice_cols(gates, 2, 3);

  Tensor q_all = tape.matmul(h, p.w_q);
  Tensor k_all = tape.matmul(h, p.w_k);
  Tensor v_all = tape.matmul(h, p.w_v);

  if (captured) captured->assign(static_cast<std::size_t>(p.heads), {});

  std::vector<Tensor> head_outs;
  head_outs.reserve(p.heads);
  for (int head = 0; head < p.heads; ++head) {
    Tensor q = tape.slice_cols(q_all, head * dh, (head + 1) * dh);
    Tensor k = tape.slice_cols(k_all, head * dh, (head + 1) * dh);
    Tensor v = tape.slice_cols(v_all, head * dh, (head + 1) * dh);

    std::vector<Tensor> terms;

    CompressedKv comp = compress_kv(tape, k, v, cfg, p);
    std::vector<std::vector<int>> block_sel;
    if (comp.m > 0) {
      Tensor scores = scope_scores(tape, q, comp.k, temp);
      terms.push_back(tape.mul_colvec(tape.matmul(scores, comp.v), g_scp));
      block_sel = pinned ? (*pinned)[static_cast<std::size_t>(head)]
                         : select_focus_blocks(scores, cfg);
      std::vector<std::vector<int>> focus = focus_token_lists(block_sel, cfg, n);
      terms.push_back(tape.mul_colvec(tape.attend_indexed(q, k, v, std::move(focus), temp), g_fcs));
    }
    if (captured) (*captured)[static_cast<std::size_t>(head)] = block_sel;

    ProximityKv prox = proximity_kv(tape, k, v, cfg);
    Tensor prx_out = prox.per_query
                         ? tape.attend_indexed(q, k, v, prox.windows, temp)
                         : branch_attention(tape, q, prox.k, prox.v, temp);
    terms.push_back(tape.mul_colvec(prx_out, g_prx));

    Tensor acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = tape.add(acc, terms[i]);
    head_outs.push_back(acc);
  }
  return p.heads == 1 ? head_outs[0] : tape.concat_cols(head_outs);
}

// Measured attended-KV accounting for one configuration and length:
// compressed blocks + selected raw tokens + window tokens, per query.
struct SparsityStats {
  double avg_attended = 0.0;
  int max_attended = 0;
  int dense = 0;
};

inline SparsityStats adsa_sparsity(const AdsaConfig& cfg, int n, const AdsaSelection& sel) {
  SparsityStats st;
  st.dense = n;
  const int m = cfg.num_blocks(n);
  const int w = std::min(cfg.window, n);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& per_head : sel) {
    for (const auto& blocks : per_head) {
      int attended = m + w;
      for (int b : blocks)
        attended += std::min(b * cfg.stride + cfg.sel_block_len, n) - b * cfg.stride;
      total += attended;
      st.max_attended = std::max(st.max_attended, attended);
      ++count;
    }
  }
  if (sel.empty() || count == 0) {
    // No selection happened (m == 0): scope and focus are empty.
    st.avg_attended = w;
    st.max_attended = w;
    return st;
  }
  st.avg_attended = total / static_cast<double>(count);
  return st;
}

}  // namespace dkbf
