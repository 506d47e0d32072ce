#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dkbf/adsa.hpp"
#include "dkbf/autodiff.hpp"
#include "dkbf/data.hpp"
#include "dkbf/layers.hpp"
#include "dkbf/mamba.hpp"
#include "dkbf/rng.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

enum class FusionMode { kGated, kFfn, kSum };

struct ModelConfig {
  int d = 64;
  int heads = 4;
  int n_layers = 2;
  int d_in = 32;  // width of the precomputed text/aspect/visual features
  int ts = 128;
  int ti = 49;
  int ta = 2;
  AdsaConfig adsa;
  int mamba_d_state = 16;
  int mamba_d_conv = 2;
  int mamba_expand = 2;
  int kan_grid = 5;
  int kan_degree = 3;
  double kan_range = 2.0;
  int intra_gate_width = 3;
  double dropout = 0.5;
  std::uint64_t seed = 42;

  // Ablation switches.
  bool use_mamba = true;
  bool use_kanformer = true;
  bool kan_as_ffn = false;
  bool dyt_as_layernorm = false;
  FusionMode intra_fusion = FusionMode::kGated;
  FusionMode multimodal_fusion = FusionMode::kGated;
  bool text_only = false;

  void validate() const {
    if (d < 1 || heads < 1 || d % heads != 0)
      throw Error("model config: d must be positive and divisible by heads");
    if (n_layers < 1) throw Error("model config: n_layers must be >= 1");
    if (d_in < 1) throw Error("model config: d_in must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("model config: dropout must be in [0,1)");
    adsa.validate();
    if (!use_mamba && !use_kanformer)
      throw Error("model config: at most one of mamba/kanformer may be disabled");
  }
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

struct FfnParams {
  Tensor w1, b1, w2, b2;

  FfnParams() = default;

  FfnParams(int d_in, int hidden, int d_out, Rng& rng) {
    w1 = xavier_uniform({d_in, hidden}, d_in, hidden, rng);
    b1 = zeros_param({hidden});
    w2 = xavier_uniform({hidden, d_out}, hidden, d_out, rng);
    b2 = zeros_param({d_out});
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }
};

inline Tensor ffn_forward(Tape& tape, const Tensor& x, const FfnParams& p) {
  Tensor hidden = tape.silu(tape.add_rowvec(tape.matmul(x, p.w1), p.b1));
  return tape.add_rowvec(tape.matmul(hidden, p.w2), p.b2);
}

// DyT by default; plain layer normalization with the same scale/shift
// parameters when the ablation asks for it.
inline Tensor norm_forward(Tape& tape, const Tensor& x, const DyTParams& p, bool as_layernorm) {
  if (!as_layernorm) return dyt_forward(tape, x, p);
  Tensor normed = tape.layer_norm(x);
  return tape.add_rowvec(tape.mul_rowvec(normed, p.gamma), p.beta);
}

struct KanformerParams {
  AdsaConfig adsa_cfg;
  AdsaParams adsa;
  KanParams kan;
  FfnParams kan_ffn;  // built only when kan_as_ffn
  DyTParams norm1, norm2;
  bool kan_as_ffn = false;
  bool dyt_as_layernorm = false;

  KanformerParams() = default;

  KanformerParams(const ModelConfig& cfg, Rng rng)
      : adsa_cfg(cfg.adsa),
        kan_as_ffn(cfg.kan_as_ffn),
        dyt_as_layernorm(cfg.dyt_as_layernorm) {
    Rng r_adsa = rng.stream("adsa");
    adsa = AdsaParams(cfg.d, cfg.heads, cfg.adsa, r_adsa);
    if (kan_as_ffn) {
      // Two-layer perceptron with the parameter count of the KAN it replaces.
      const int hidden = std::max(1, (1 + cfg.kan_grid + cfg.kan_degree) * cfg.d / 2);
      Rng r_ffn = rng.stream("ffn");
      kan_ffn = FfnParams(cfg.d, hidden, cfg.d, r_ffn);
    } else {
      Rng r_kan = rng.stream("kan");
      kan = KanParams(cfg.d, cfg.d, r_kan, cfg.kan_grid, cfg.kan_degree, cfg.kan_range);
    }
    norm1 = DyTParams(cfg.d);
    norm2 = DyTParams(cfg.d);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    adsa.visit(prefix + ".adsa", fn);
    if (kan_as_ffn)
      kan_ffn.visit(prefix + ".kan_ffn", fn);
    else
      kan.visit(prefix + ".kan", fn);
    norm1.visit(prefix + ".norm1", fn);
    norm2.visit(prefix + ".norm2", fn);
  }
};

// y1 = Norm(ADSA(H) + H); y2 = Norm(KAN(y1) + y1)
inline Tensor kanformer_block(Tape& tape, const Tensor& h, const KanformerParams& p,
                              const AdsaSelection* pinned = nullptr,
                              AdsaSelection* captured = nullptr) {
  Tensor attn = adsa_forward(tape, h, p.adsa_cfg, p.adsa, pinned, captured);
  Tensor y1 = norm_forward(tape, tape.add(attn, h), p.norm1, p.dyt_as_layernorm);
  Tensor inner = p.kan_as_ffn ? ffn_forward(tape, y1, p.kan_ffn) : kan_forward(tape, y1, p.kan);
  return norm_forward(tape, tape.add(inner, y1), p.norm2, p.dyt_as_layernorm);
}

struct KanbaLayerParams {
  KanformerParams kanformer;
  MambaParams mamba;
  GateConvParams gate_k, gate_m;
  FfnParams fuse_ffn;
  bool use_mamba = true;
  bool use_kanformer = true;
  FusionMode fusion = FusionMode::kGated;

  KanbaLayerParams() = default;

  KanbaLayerParams(const ModelConfig& cfg, Rng rng)
      : use_mamba(cfg.use_mamba), use_kanformer(cfg.use_kanformer), fusion(cfg.intra_fusion) {
    if (use_kanformer) kanformer = KanformerParams(cfg, rng.stream("kanformer"));
    if (use_mamba) {
      Rng r_mamba = rng.stream("mamba");
      mamba = MambaParams(cfg.d, r_mamba, cfg.mamba_d_state, cfg.mamba_d_conv, cfg.mamba_expand);
    }
    if (use_mamba && use_kanformer) {
      if (fusion == FusionMode::kGated) {
        Rng r_gk = rng.stream("gate_k");
        Rng r_gm = rng.stream("gate_m");
        gate_k = GateConvParams(cfg.d, cfg.intra_gate_width, r_gk);
        gate_m = GateConvParams(cfg.d, cfg.intra_gate_width, r_gm);
      } else if (fusion == FusionMode::kFfn) {
        Rng r_fuse = rng.stream("fuse_ffn");
        fuse_ffn = FfnParams(2 * cfg.d, cfg.d, cfg.d, r_fuse);
      }
    }
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    if (use_kanformer) kanformer.visit(prefix + ".kanformer", fn);
    if (use_mamba) mamba.visit(prefix + ".mamba", fn);
    if (use_mamba && use_kanformer) {
      if (fusion == FusionMode::kGated) {
        gate_k.visit(prefix + ".gate_k", fn);
        gate_m.visit(prefix + ".gate_m", fn);
      } else if (fusion == FusionMode::kFfn) {
        fuse_ffn.visit(prefix + ".fuse_ffn", fn);
      }
    }
  }
};

inline Tensor kanbaformer_layer(Tape& tape, const Tensor& h, const KanbaLayerParams& p,
                                const AdsaSelection* pinned = nullptr,
                                AdsaSelection* captured = nullptr) {
  if (!p.use_mamba) return kanformer_block(tape, h, p.kanformer, pinned, captured);
  if (!p.use_kanformer) return mamba_forward(tape, h, p.mamba);
  Tensor h_k = kanformer_block(tape, h, p.kanformer, pinned, captured);
  Tensor h_m = mamba_forward(tape, h, p.mamba);
  switch (p.fusion) {
    case FusionMode::kGated: {
      Tensor g_k = gate_map(tape, h_k, p.gate_k);
      Tensor g_m = gate_map(tape, h_m, p.gate_m);
      return gated_fuse(tape, h_k, h_m, g_k, g_m);
    }
    case FusionMode::kSum:
      return tape.add(h_k, h_m);
    case FusionMode::kFfn:
      return ffn_forward(tape, tape.concat_cols({h_k, h_m}), p.fuse_ffn);
  }
  throw Error("kanbaformer: unknown fusion mode");
}

// Stack of (kanformer || mamba) + intra-modal fusion units; the output of
// layer i feeds layer i+1.
inline Tensor kanbaformer_forward(Tape& tape, const Tensor& h,
                                  const std::vector<KanbaLayerParams>& layers,
                                  const std::vector<AdsaSelection>* pinned = nullptr,
                                  std::vector<AdsaSelection>* captured = nullptr) {
  if (captured) captured->assign(layers.size(), {});
  Tensor x = h;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const AdsaSelection* pin = pinned ? &(*pinned)[i] : nullptr;
    AdsaSelection* cap = captured ? &(*captured)[i] : nullptr;
    x = kanbaformer_layer(tape, x, layers[i], pin, cap);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Multimodal fusion and classifier
// ---------------------------------------------------------------------------

struct MultimodalFusionParams {
  GateConvParams gate_t, gate_v;  // width-1 convolutions on pooled vectors
  FfnParams ffn;
  FusionMode mode = FusionMode::kGated;

  MultimodalFusionParams() = default;

  MultimodalFusionParams(const ModelConfig& cfg, Rng rng) : mode(cfg.multimodal_fusion) {
    if (mode == FusionMode::kGated) {
      Rng r_t = rng.stream("gate_t");
      Rng r_v = rng.stream("gate_v");
      gate_t = GateConvParams(cfg.d, 1, r_t);
      gate_v = GateConvParams(cfg.d, 1, r_v);
    } else if (mode == FusionMode::kFfn) {
      Rng r_ffn = rng.stream("ffn");
      ffn = FfnParams(2 * cfg.d, cfg.d, cfg.d, r_ffn);
    }
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    if (mode == FusionMode::kGated) {
      gate_t.visit(prefix + ".gate_t", fn);
      gate_v.visit(prefix + ".gate_v", fn);
    } else if (mode == FusionMode::kFfn) {
      ffn.visit(prefix + ".ffn", fn);
    }
  }
};

// Mean-pools each modality to a d-vector, then combines:
// H_C = G_V .* h_V + (1 - G_V) .* G_T .* h_T
inline Tensor multimodal_fuse(Tape& tape, const Tensor& h_t, const Tensor& h_v,
                              const MultimodalFusionParams& p) {
  Tensor pooled_t = tape.mean_pool_rows(h_t);
  Tensor pooled_v = tape.mean_pool_rows(h_v);
  switch (p.mode) {
    case FusionMode::kGated: {
      Tensor g_t = gate_map(tape, pooled_t, p.gate_t);
      Tensor g_v = gate_map(tape, pooled_v, p.gate_v);
      return gated_fuse(tape, pooled_v, pooled_t, g_v, g_t);
    }
    case FusionMode::kSum:
      return tape.add(pooled_t, pooled_v);
    case FusionMode::kFfn:
      return ffn_forward(tape, tape.concat_cols({pooled_v, pooled_t}), p.ffn);
  }
  throw Error("multimodal_fuse: unknown fusion mode");
}

struct ClassifierParams {
  Tensor w;  // d x 3
  Tensor b;  // 3

  ClassifierParams() = default;

  ClassifierParams(int d, Rng& rng) {
    w = xavier_uniform({d, kNumClasses}, d, kNumClasses, rng);
    b = zeros_param({kNumClasses});
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

inline Tensor classify(Tape& tape, const Tensor& h_c, const ClassifierParams& p) {
  return tape.row_softmax(tape.add_rowvec(tape.matmul(h_c, p.w), p.b));
}

// -log(probs[label]); mean over samples is taken by the caller.
inline Tensor cross_entropy(Tape& tape, const Tensor& probs, int label) {
  if (label < 0 || label >= kNumClasses)
    throw Error("loss: label " + std::to_string(label) + " out of range");
  Tensor onehot = Tensor::zeros({kNumClasses, 1});
  onehot.values[static_cast<std::size_t>(label)] = 1.0;
  Tensor picked = tape.matmul(probs, onehot);
  return tape.scale(tape.log(picked), -1.0);
}

// ---------------------------------------------------------------------------
// End-to-end model
// ---------------------------------------------------------------------------

// Frozen ADSA selections for one full forward (per modality, per layer).
struct ModelSelections {
  std::vector<AdsaSelection> text;
  std::vector<AdsaSelection> visual;
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng root = Rng(cfg_.seed).stream("init");
    if (cfg_.d_in != cfg_.d) {
      Rng r_in = root.stream("input_proj");
      w_text_in_ = xavier_uniform({cfg_.d_in, cfg_.d}, cfg_.d_in, cfg_.d, r_in);
      w_aspect_in_ = xavier_uniform({cfg_.d_in, cfg_.d}, cfg_.d_in, cfg_.d, r_in);
    }
    Rng r_ati = root.stream("ati");
    ati_ = MhcaParams(cfg_.d, cfg_.heads, r_ati);
    if (!cfg_.text_only) {
      Rng r_avi = root.stream("avi");
      avi_ = AviParams(cfg_.d, cfg_.d_in, cfg_.heads, r_avi);
    }
    for (int i = 0; i < cfg_.n_layers; ++i) {
      text_layers_.emplace_back(cfg_, root.stream("text_layer", static_cast<std::uint64_t>(i)));
      if (!cfg_.text_only)
        visual_layers_.emplace_back(cfg_,
                                    root.stream("visual_layer", static_cast<std::uint64_t>(i)));
    }
    if (!cfg_.text_only) mm_fusion_ = MultimodalFusionParams(cfg_, root.stream("mm_fusion"));
    Rng r_cls = root.stream("classifier");
    cls_ = ClassifierParams(cfg_.d, r_cls);
  }

  const ModelConfig& config() const { return cfg_; }

  void visit(const ParamVisitor& fn) {
    if (cfg_.d_in != cfg_.d) {
      fn("in.text", w_text_in_);
      fn("in.aspect", w_aspect_in_);
    }
    ati_.visit("ati", fn);
    if (!cfg_.text_only) avi_.visit("avi", fn);
    for (std::size_t i = 0; i < text_layers_.size(); ++i)
      text_layers_[i].visit("text." + std::to_string(i), fn);
    for (std::size_t i = 0; i < visual_layers_.size(); ++i)
      visual_layers_[i].visit("visual." + std::to_string(i), fn);
    if (!cfg_.text_only) mm_fusion_.visit("mm", fn);
    cls_.visit("cls", fn);
  }

  std::size_t num_params() {
    std::size_t n = 0;
    visit([&n](const std::string&, Tensor& t) { n += t.values.size(); });
    return n;
  }

  // Registers every parameter as a leaf of the tape (no-op when the tape
  // is not recording). Must be called before a taped forward.
  void bind(Tape& tape) {
    visit([&tape](const std::string&, Tensor& t) { t = tape.leaf(std::move(t)); });
  }

  // probs (1 x 3) for one sample. Dropout is active only in train mode.
  Tensor forward(Tape& tape, const Sample& sample, bool train,
                 const ModelSelections* pinned = nullptr, ModelSelections* captured = nullptr) {
    if (sample.text.cols() != cfg_.d_in)
      throw Error("model input stage: text features have dim " +
                  std::to_string(sample.text.cols()) + ", config expects " +
                  std::to_string(cfg_.d_in));
    if (sample.aspect.cols() != cfg_.d_in)
      throw Error("model input stage: aspect features have dim " +
                  std::to_string(sample.aspect.cols()) + ", config expects " +
                  std::to_string(cfg_.d_in));
    const double rate = train ? cfg_.dropout : 0.0;

    Tensor h_s = sample.text;
    Tensor h_a = sample.aspect;
    if (cfg_.d_in != cfg_.d) {
      h_s = tape.matmul(h_s, w_text_in_);
      h_a = tape.matmul(h_a, w_aspect_in_);
    }
    Tensor h_as = ati_forward(tape, h_s, h_a, ati_);
    if (rate > 0.0) h_as = tape.dropout(h_as, rate);

    Tensor h_t = kanbaformer_forward(tape, h_as, text_layers_, pinned ? &pinned->text : nullptr,
                                     captured ? &captured->text : nullptr);

    if (cfg_.text_only) {
      Tensor pooled = tape.mean_pool_rows(h_t);
      if (rate > 0.0) pooled = tape.dropout(pooled, rate);
      return classify(tape, pooled, cls_);
    }

    Tensor h_gi = avi_forward(tape, h_as, sample.visual, avi_);
    if (rate > 0.0) h_gi = tape.dropout(h_gi, rate);
    Tensor h_v = kanbaformer_forward(tape, h_gi, visual_layers_,
                                     pinned ? &pinned->visual : nullptr,
                                     captured ? &captured->visual : nullptr);

    Tensor h_c = multimodal_fuse(tape, h_t, h_v, mm_fusion_);
    if (rate > 0.0) h_c = tape.dropout(h_c, rate);
    return classify(tape, h_c, cls_);
  }

 private:
  ModelConfig cfg_;
  Tensor w_text_in_, w_aspect_in_;
  MhcaParams ati_;
  AviParams avi_;
  std::vector<KanbaLayerParams> text_layers_;
  std::vector<KanbaLayerParams> visual_layers_;
  MultimodalFusionParams mm_fusion_;
  ClassifierParams cls_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: "DKBF", version u32, count u32, then per entry
// (name_len u32, name bytes, rank u32, extents u64 each, values f32 each),
// all little-endian.
// ---------------------------------------------------------------------------

namespace detail_ckpt {

template <typename T>
inline void put(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
inline T get(const std::string& buf, std::size_t& off) {
  if (off + sizeof(T) > buf.size()) throw Error("checkpoint: truncated file");
  T value;
  std::memcpy(&value, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return value;
}

}  // namespace detail_ckpt

constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string checkpoint_bytes(Model& model) {
  std::string out;
  out += "DKBF";
  detail_ckpt::put<std::uint32_t>(out, kCheckpointVersion);
  std::uint32_t count = 0;
  model.visit([&count](const std::string&, Tensor&) { ++count; });
  detail_ckpt::put<std::uint32_t>(out, count);
  model.visit([&out](const std::string& name, Tensor& t) {
    detail_ckpt::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail_ckpt::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int e : t.shape) detail_ckpt::put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    for (double v : t.values) detail_ckpt::put<float>(out, static_cast<float>(v));
  });
  return out;
}

inline void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint: cannot open " + path + " for writing");
  const std::string bytes = checkpoint_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("checkpoint: write failed for " + path);
}

inline void load_checkpoint_bytes(Model& model, const std::string& buf) {
  std::size_t off = 0;
  if (buf.size() < 4 || buf.compare(0, 4, "DKBF") != 0)
    throw Error("checkpoint: bad magic");
  off = 4;
  const auto version = detail_ckpt::get<std::uint32_t>(buf, off);
  if (version != kCheckpointVersion)
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail_ckpt::get<std::uint32_t>(buf, off);

  std::map<std::string, Tensor> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail_ckpt::get<std::uint32_t>(buf, off);
    if (off + name_len > buf.size()) throw Error("checkpoint: truncated name");
    std::string name = buf.substr(off, name_len);
    off += name_len;
    const auto rank = detail_ckpt::get<std::uint32_t>(buf, off);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r)
      shape.push_back(static_cast<int>(detail_ckpt::get<std::uint64_t>(buf, off)));
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.values) v = static_cast<double>(detail_ckpt::get<float>(buf, off));
    entries.emplace(std::move(name), std::move(t));
  }
  if (off != buf.size()) throw Error("checkpoint: trailing bytes");

  std::uint32_t used = 0;
  model.visit([&entries, &used](const std::string& name, Tensor& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw Error("checkpoint: missing parameter " + name);
    if (it->second.shape != t.shape)
      throw Error("checkpoint: shape mismatch for " + name + ": file has " +
                  shape_str(it->second.shape) + ", config expects " + shape_str(t.shape));
    const bool rg = t.requires_grad;
    t = it->second;
    t.requires_grad = rg;
    ++used;
  });
  if (used != count)
    throw Error("checkpoint: file has " + std::to_string(count) + " entries, model expects " +
                std::to_string(used));
}

inline void load_checkpoint(Model& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    load_checkpoint_bytes(model, buf);
  } catch (const Error& e) {
    throw Error(std::string(e.what()) + " (" + path + ")");
  }
}

}  // namespace dkbf
