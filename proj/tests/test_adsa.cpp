#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dkbf/adsa.hpp"
#include "dkbf/checks.hpp"
#include "dkbf/rng.hpp"
#include "oracles.hpp"

using namespace dkbf;
using Catch::Approx;

namespace {

Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
  return oracle::random_tensor(std::move(shape), rng, scale);
}

AdsaConfig paper_config() {
  AdsaConfig cfg;  // window 2, block 4, stride 2, selection block 4, 2 selected
  return cfg;
}

// Forces the branch gates to (~0, ~0, ~1) through saturated logits.
void force_proximity_only(AdsaParams& p) {
  p.gate_w = Tensor::zeros({p.d, 3}, true);
  p.gate_b = Tensor({3}, {-30.0, -30.0, 30.0}, true);
}

}  // namespace

TEST_CASE("compress block counts") {
  AdsaConfig cfg = paper_config();
  REQUIRE(cfg.num_blocks(128) == 63);
  REQUIRE(cfg.num_blocks(3) == 0);
  REQUIRE(cfg.num_blocks(4) == 1);
}

TEST_CASE("compress_kv produces one token per block") {
  Rng rng(31);
  AdsaConfig cfg = paper_config();
  AdsaParams p(8, 2, cfg, rng);
  const int dh = p.head_dim();
  Tape tape(false);
  SECTION("short sequences give the empty branch") {
    CompressedKv c = compress_kv(tape, randn({3, dh}, rng), randn({3, dh}, rng), cfg, p);
    REQUIRE(c.m == 0);
  }
  SECTION("block count and shape") {
    CompressedKv c = compress_kv(tape, randn({10, dh}, rng), randn({10, dh}, rng), cfg, p);
    REQUIRE(c.m == 4);
    REQUIRE(c.k.shape == Shape{4, dh});
    REQUIRE(c.v.shape == Shape{4, dh});
  }
  SECTION("identical (content, in-block position) pairs compress identically") {
    AdsaConfig c2 = cfg;
    c2.block_len = 2;
    c2.stride = 2;
    AdsaParams p2(8, 2, c2, rng);
    Tensor k = Tensor::zeros({4, dh});
    Rng rowrng(32);
    for (int j = 0; j < dh; ++j) {
      k.at(0, j) = rowrng.normal();
      k.at(1, j) = rowrng.normal();
      k.at(2, j) = k.at(0, j);  // duplicate the whole block pattern
      k.at(3, j) = k.at(1, j);
    }
    CompressedKv c = compress_kv(tape, k, k, c2, p2);
    REQUIRE(c.m == 2);
    for (int j = 0; j < dh; ++j) REQUIRE(c.k.at(0, j) == Approx(c.k.at(1, j)).margin(1e-14));
  }
}

TEST_CASE("scope score rows sum to one") {
  Rng rng(33);
  Tape tape(false);
  Tensor q = randn({5, 4}, rng);
  Tensor kc = randn({6, 4}, rng);
  Tensor scores = scope_scores(tape, q, kc, 0.25);
  for (int i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 6; ++j) sum += scores.at(i, j);
    REQUIRE(sum == Approx(1.0).margin(1e-6));
  }
  SECTION("single block scores exactly one") {
    Tensor s1 = scope_scores(tape, q, randn({1, 4}, rng), 0.25);
    for (double v : s1.values) REQUIRE(v == 1.0);
  }
  SECTION("query orthogonal to all keys gives uniform scores") {
    Tensor kz = Tensor::zeros({4, 4});
    kz.at(0, 0) = 1.0;
    kz.at(1, 0) = 2.0;
    kz.at(2, 0) = -1.0;
    kz.at(3, 0) = 0.5;
    Tensor qz = Tensor::zeros({2, 4});
    qz.at(0, 1) = 3.0;  // orthogonal to the keys' span
    qz.at(1, 1) = -2.0;
    Tensor s = scope_scores(tape, qz, kz, 0.25);
    for (double v : s.values) REQUIRE(v == Approx(0.25).margin(1e-12));
  }
}

TEST_CASE("focus block selection") {
  AdsaConfig cfg = paper_config();
  SECTION("tie toward the lower block index") {
    Tensor p = Tensor::row({0.1, 0.5, 0.2, 0.2});
    auto sel = select_focus_blocks(p, cfg);
    REQUIRE(sel[0] == std::vector<int>{1, 2});
  }
  SECTION("selecting more blocks than exist takes them all") {
    Tensor p = Tensor::row({0.4, 0.6});
    auto sel = select_focus_blocks(p, cfg);
    REQUIRE(sel[0] == std::vector<int>{0, 1});
  }
  SECTION("strictly decreasing scores select the leading blocks") {
    Tensor p = Tensor::row({0.5, 0.3, 0.15, 0.05});
    auto sel = select_focus_blocks(p, cfg);
    REQUIRE(sel[0] == std::vector<int>{0, 1});
  }
  SECTION("token spans follow the compress offsets and clip at the end") {
    auto lists = focus_token_lists({{0, 2}}, cfg, 7);
    // block 0 -> rows 0..3, block 2 -> offset 4, clipped to rows 4..6
    REQUIRE(lists[0] == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  }
}

TEST_CASE("proximity windows") {
  Rng rng(34);
  Tape tape(false);
  AdsaConfig cfg = paper_config();
  SECTION("suffix keeps the last w tokens") {
    Tensor k = randn({10, 4}, rng);
    Tensor v = randn({10, 4}, rng);
    ProximityKv prox = proximity_kv(tape, k, v, cfg);
    REQUIRE_FALSE(prox.per_query);
    REQUIRE(prox.k.shape == Shape{2, 4});
    for (int j = 0; j < 4; ++j) {
      REQUIRE(prox.k.at(0, j) == k.at(8, j));
      REQUIRE(prox.k.at(1, j) == k.at(9, j));
    }
  }
  SECTION("window clips to a single token") {
    Tensor k = randn({1, 4}, rng);
    Tensor v = randn({1, 4}, rng);
    ProximityKv prox = proximity_kv(tape, k, v, cfg);
    REQUIRE(prox.k.shape == Shape{1, 4});
    REQUIRE(prox.k.values == k.values);
  }
  SECTION("sliding window at position 0 covers tokens 0..1") {
    AdsaConfig scfg = cfg;
    scfg.proximity_mode = ProximityMode::kSliding;
    Tensor k = randn({6, 4}, rng);
    ProximityKv prox = proximity_kv(tape, k, k, scfg);
    REQUIRE(prox.per_query);
    REQUIRE(prox.windows[0] == std::vector<int>{0, 1});
    REQUIRE(prox.windows[5] == std::vector<int>{4, 5});
  }
}

TEST_CASE("branch attention closed forms") {
  Tape tape(false);
  SECTION("single key returns its value exactly") {
    Tensor q({2, 3}, {1, -2, 0.5, 0, 1, 1});
    Tensor k({1, 3}, {0.3, 0.1, -0.7});
    Tensor v({1, 3}, {5, 6, 7});
    Tensor out = branch_attention(tape, q, k, v, 1.0 / 3.0);
    for (int t = 0; t < 2; ++t)
      for (int j = 0; j < 3; ++j) REQUIRE(out.at(t, j) == Approx(v.at(0, j)).margin(1e-15));
  }
  SECTION("two identical keys average the values") {
    Tensor q({1, 2}, {0.4, -1.2});
    Tensor k({2, 2}, {0.3, 0.7, 0.3, 0.7});
    Tensor v({2, 2}, {1, 3, 5, 9});
    Tensor out = branch_attention(tape, q, k, v, 0.5);
    REQUIRE(out.at(0, 0) == Approx(3.0).margin(1e-12));
    REQUIRE(out.at(0, 1) == Approx(6.0).margin(1e-12));
  }
  SECTION("logit gap of ln 3 weights the values 0.75 / 0.25") {
    const double dk = 2.0;
    Tensor q({1, 2}, {dk * std::log(3.0), 0.0});
    Tensor k({2, 2}, {1, 0, 0, 0});  // q.k1/dk = ln3, q.k2/dk = 0
    Tensor v({2, 2}, {1, 0, 0, 1});
    Tensor out = branch_attention(tape, q, k, v, 1.0 / dk);
    REQUIRE(out.at(0, 0) == Approx(0.75).margin(1e-12));
    REQUIRE(out.at(0, 1) == Approx(0.25).margin(1e-12));
  }
}

TEST_CASE("adsa degenerates to dense attention when only proximity is open") {
  Rng rng(35);
  AdsaConfig cfg = paper_config();
  const int n = 12, d = 8, heads = 2;
  cfg.window = n;  // window covers the whole sequence
  for (int trial = 0; trial < 5; ++trial) {
    AdsaParams p(d, heads, cfg, rng);
    force_proximity_only(p);
    Tensor h = randn({n, d}, rng);
    Tape tape(false);
    Tensor out = adsa_forward(tape, h, cfg, p);
    REQUIRE(out.shape == Shape{n, d});

    // dense oracle with the literal exp(q.k/d_k) kernel, per head
    const int dh = d / heads;
    oracle::Mat hm = oracle::to_mat(h);
    oracle::Mat q_all = oracle::matmul(hm, oracle::to_mat(p.w_q));
    oracle::Mat k_all = oracle::matmul(hm, oracle::to_mat(p.w_k));
    oracle::Mat v_all = oracle::matmul(hm, oracle::to_mat(p.w_v));
    for (int head = 0; head < heads; ++head) {
      oracle::Mat q(n, std::vector<double>(dh)), k(n, std::vector<double>(dh)),
          v(n, std::vector<double>(dh));
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < dh; ++c) {
          q[i][c] = q_all[i][head * dh + c];
          k[i][c] = k_all[i][head * dh + c];
          v[i][c] = v_all[i][head * dh + c];
        }
      oracle::Mat ref = oracle::dense_attention(q, k, v, 1.0 / dh);
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < dh; ++c)
          REQUIRE(std::abs(out.at(i, head * dh + c) - ref[i][c]) <= 1e-10);
    }
  }
}

TEST_CASE("adsa with all gates closed is near zero") {
  Rng rng(36);
  AdsaConfig cfg = paper_config();
  AdsaParams p(8, 2, cfg, rng);
  p.gate_w = Tensor::zeros({8, 3}, true);
  p.gate_b = Tensor::full({3}, -30.0, true);
  Tape tape(false);
  Tensor out = adsa_forward(tape, randn({10, 8}, rng), cfg, p);
  for (double v : out.values) REQUIRE(std::abs(v) <= 1e-9);
}

TEST_CASE("adsa output always matches the input shape") {
  Rng rng(37);
  AdsaConfig cfg = paper_config();
  AdsaParams p(8, 4, cfg, rng);
  for (int n : {1, 2, 3, 5, 17}) {
    Tape tape(false);
    Tensor out = adsa_forward(tape, randn({n, 8}, rng), cfg, p);
    REQUIRE(out.shape == Shape{n, 8});
  }
}

TEST_CASE("selection invariants: unique ascending, capped at block count") {
  Rng rng(38);
  AdsaConfig cfg = paper_config();
  AdsaParams p(8, 2, cfg, rng);
  Tape tape(false);
  AdsaSelection sel;
  adsa_forward(tape, randn({14, 8}, rng), cfg, p, nullptr, &sel);
  const int m = cfg.num_blocks(14);
  for (const auto& per_head : sel) {
    REQUIRE(per_head.size() == 14);
    for (const auto& blocks : per_head) {
      REQUIRE(static_cast<int>(blocks.size()) == std::min(cfg.n_sel, m));
      for (std::size_t i = 1; i < blocks.size(); ++i) REQUIRE(blocks[i - 1] < blocks[i]);
      for (int b : blocks) {
        REQUIRE(b >= 0);
        REQUIRE(b < m);
      }
    }
  }
}

TEST_CASE("attended-kv accounting at the paper configuration") {
  Rng rng(39);
  AdsaConfig cfg = paper_config();
  const int n = 128, d = 16, heads = 2;
  AdsaParams p(d, heads, cfg, rng);
  Tape tape(false);
  AdsaSelection sel;
  adsa_forward(tape, randn({n, d}, rng), cfg, p, nullptr, &sel);
  SparsityStats st = adsa_sparsity(cfg, n, sel);
  REQUIRE(st.dense == 128);
  REQUIRE(st.avg_attended == Approx(73.0).margin(1e-12));  // 63 + 2*4 + 2
  REQUIRE(st.max_attended == 73);
  REQUIRE(st.max_attended <= cfg.num_blocks(n) + cfg.n_sel * cfg.sel_block_len + cfg.window);
  REQUIRE(st.max_attended < n);
}

TEST_CASE("adsa gradient checks pass at 1e-5 with frozen selection") {
  for (const CheckResult& r : gradcheck_adsa(777, 0)) {
    INFO(r.name << " max_rel_err=" << r.max_rel_err);
    REQUIRE(r.max_rel_err <= 1e-5);
  }
}

TEST_CASE("gradients do not flow through the selection ranking") {
  // Perturbing a value tensor entry changes the focus output but never the
  // selected indices captured for the same scores.
  Rng rng(40);
  AdsaConfig cfg = paper_config();
  cfg.block_len = 2;
  cfg.stride = 1;
  cfg.sel_block_len = 2;
  AdsaParams p(4, 1, cfg, rng);
  Tensor h = randn({6, 4}, rng);
  Tape t1(false);
  AdsaSelection s1;
  adsa_forward(t1, h, cfg, p, nullptr, &s1);
  // w_v only affects values, not scores: selection must be identical
  for (double& v : p.w_v.values) v += 0.1;
  Tape t2(false);
  AdsaSelection s2;
  adsa_forward(t2, h, cfg, p, nullptr, &s2);
  REQUIRE(s1 == s2);
}
