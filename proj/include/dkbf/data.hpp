#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dkbf/rng.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

// Labels: 0 = negative, 1 = neutral, 2 = positive.
constexpr int kNumClasses = 3;

struct Sample {
  Tensor text;    // ts x d_in
  Tensor visual;  // ti x d_in
  Tensor aspect;  // ta x d_in
  int label = 1;

  bool operator==(const Sample& o) const {
    return label == o.label && text.shape == o.text.shape && text.values == o.text.values &&
           visual.shape == o.visual.shape && visual.values == o.visual.values &&
           aspect.shape == o.aspect.shape && aspect.values == o.aspect.values;
  }
};

using Dataset = std::vector<Sample>;

// Planted bimodal task: each sample hides one signal token in the text and
// one in the image; the label needs both signs, so text alone caps out at
// the enumerated Bayes rate while both modalities recover the label.
struct SynthSpec {
  int n_samples = 512;
  int ts = 16;
  int ti = 8;
  int ta = 2;
  int d_in = 32;
  double noise_std = 0.1;
  std::uint64_t seed = 42;
  bool fixed_signal_pos = false;  // plant at position 0 instead of a random one
  int prototypes = 4;

  void validate() const {
    if (n_samples < 0 || ts < 1 || ti < 1 || ta < 1 || d_in < 1 || prototypes < 1)
      throw Error("synth spec: non-positive dimension");
    if (noise_std < 0.0) throw Error("synth spec: noise_std must be >= 0");
  }
};

inline int synth_label(int b_text, int b_visual) {
  if (b_text > 0 && b_visual > 0) return 2;
  if (b_text < 0 && b_visual < 0) return 0;
  return 1;
}

// Aspect prototypes and the shared signal direction for a spec; exposed so
// tests can decode planted samples independently of any model.
struct SynthBasis {
  std::vector<std::vector<double>> prototypes;  // K x d_in, unit norm
  std::vector<double> signal;                   // d_in, unit norm
};

inline SynthBasis synth_basis(const SynthSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  SynthBasis basis;
  Rng prng = root.stream("prototypes");
  basis.prototypes.resize(static_cast<std::size_t>(spec.prototypes));
  for (auto& proto : basis.prototypes) {
    proto.resize(static_cast<std::size_t>(spec.d_in));
    double norm = 0.0;
    for (double& x : proto) {
      x = prng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : proto) x /= norm;
  }
  // Signal direction orthogonal to every prototype, so the polarity bit
  // never aliases with aspect identity.
  Rng srng = root.stream("signal");
  basis.signal.resize(static_cast<std::size_t>(spec.d_in));
  for (double& x : basis.signal) x = srng.normal();
  for (const auto& proto : basis.prototypes) {
    double dot = 0.0, nn = 0.0;
    for (std::size_t j = 0; j < proto.size(); ++j) {
      dot += basis.signal[j] * proto[j];
      nn += proto[j] * proto[j];
    }
    for (std::size_t j = 0; j < proto.size(); ++j) basis.signal[j] -= dot / nn * proto[j];
  }
  double norm = 0.0;
  for (double x : basis.signal) norm += x * x;
  norm = std::sqrt(norm);
  if (norm < 1e-9) throw Error("synth spec: prototypes span the space, no signal direction left");
  for (double& x : basis.signal) x /= norm;
  return basis;
}

inline Dataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const SynthBasis basis = synth_basis(spec);
  Rng root(spec.seed);
  Dataset out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    Rng rng = root.stream("samples", static_cast<std::uint64_t>(i));
    const int k = static_cast<int>(rng.uniform_int(0, spec.prototypes - 1));
    const int b_text = rng.bernoulli(0.5) ? 1 : -1;
    const int b_visual = rng.bernoulli(0.5) ? 1 : -1;
    const int pos_text = spec.fixed_signal_pos ? 0 : static_cast<int>(rng.uniform_int(0, spec.ts - 1));
    const int pos_visual =
        spec.fixed_signal_pos ? 0 : static_cast<int>(rng.uniform_int(0, spec.ti - 1));

    Sample s;
    s.text = Tensor::zeros({spec.ts, spec.d_in});
    s.visual = Tensor::zeros({spec.ti, spec.d_in});
    s.aspect = Tensor::zeros({spec.ta, spec.d_in});
    for (double& x : s.text.values) x = rng.normal() * spec.noise_std;
    for (double& x : s.visual.values) x = rng.normal() * spec.noise_std;
    // Aspect rows alternate a_k + u and a_k - u: the aspect set spans both
    // polarity directions, so cross-attention weights over the aspect can
    // transmit the planted sign into downstream values.
    for (int r = 0; r < spec.ta; ++r) {
      const double pole = r % 2 == 0 ? 1.0 : -1.0;
      for (int j = 0; j < spec.d_in; ++j)
        s.aspect.at(r, j) =
            basis.prototypes[k][j] + pole * basis.signal[j] + rng.normal() * spec.noise_std;
    }
    for (int j = 0; j < spec.d_in; ++j) {
      s.text.at(pos_text, j) = basis.prototypes[k][j] + b_text * basis.signal[j];
      s.visual.at(pos_visual, j) = basis.prototypes[k][j] + b_visual * basis.signal[j];
    }
    s.label = synth_label(b_text, b_visual);
    out.push_back(std::move(s));
  }
  return out;
}

// Best achievable accuracy when only the text bit is observable, by brute
// force over the four (b_text, b_visual) cases (uniform, independent).
inline double text_only_bayes_accuracy() {
  double acc = 0.0;
  for (int bt : {-1, 1}) {
    std::array<double, kNumClasses> cond{};
    for (int bv : {-1, 1}) cond[static_cast<std::size_t>(synth_label(bt, bv))] += 0.5;
    double best = 0.0;
    for (double p : cond) best = std::max(best, p);
    acc += 0.5 * best;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// JSONL feature files
// ---------------------------------------------------------------------------

namespace detail_data {

inline void append_matrix(std::string& out, const Tensor& t) {
  char buf[40];
  out += '[';
  for (int i = 0; i < t.shape[0]; ++i) {
    if (i) out += ',';
    out += '[';
    for (int j = 0; j < t.shape[1]; ++j) {
      if (j) out += ',';
      std::snprintf(buf, sizeof buf, "%.17g", t.at(i, j));
      out += buf;
    }
    out += ']';
  }
  out += ']';
}

inline Tensor parse_matrix(const nlohmann::json& arr, const char* key, int line_no) {
  if (!arr.is_array() || arr.empty() || !arr[0].is_array())
    throw Error("jsonl line " + std::to_string(line_no) + ": " + key +
                " must be a non-empty array of arrays");
  const int rows = static_cast<int>(arr.size());
  const int cols = static_cast<int>(arr[0].size());
  Tensor t = Tensor::zeros({rows, cols});
  for (int i = 0; i < rows; ++i) {
    if (!arr[i].is_array() || static_cast<int>(arr[i].size()) != cols)
      throw Error("jsonl line " + std::to_string(line_no) + ": ragged rows in " + key);
    for (int j = 0; j < cols; ++j) {
      if (!arr[i][j].is_number())
        throw Error("jsonl line " + std::to_string(line_no) + ": non-numeric entry in " + key);
      const double v = arr[i][j].get<double>();
      if (!std::isfinite(v))
        throw Error("jsonl line " + std::to_string(line_no) + ": non-finite entry in " + key);
      t.at(i, j) = v;
    }
  }
  return t;
}

}  // namespace detail_data

inline void write_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_jsonl: cannot open " + path);
  std::string line;
  for (const Sample& s : ds) {
    line.clear();
    line += "{\"text_features\":";
    detail_data::append_matrix(line, s.text);
    line += ",\"visual_features\":";
    detail_data::append_matrix(line, s.visual);
    line += ",\"aspect_features\":";
    detail_data::append_matrix(line, s.aspect);
    line += ",\"label\":";
    line += std::to_string(s.label);
    line += "}\n";
    out << line;
  }
  if (!out) throw Error("write_jsonl: write failed for " + path);
}

inline Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_jsonl: cannot open " + path);
  Dataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      // A blank line is only legal as a trailing newline artifact.
      if (in.peek() == std::ifstream::traits_type::eof()) break;
      throw Error("jsonl line " + std::to_string(line_no) + ": empty line");
    }
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error("jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("text_features") || !obj.contains("visual_features") ||
        !obj.contains("aspect_features") || !obj.contains("label"))
      throw Error("jsonl line " + std::to_string(line_no) + ": missing required keys");
    Sample s;
    s.text = detail_data::parse_matrix(obj["text_features"], "text_features", line_no);
    s.visual = detail_data::parse_matrix(obj["visual_features"], "visual_features", line_no);
    s.aspect = detail_data::parse_matrix(obj["aspect_features"], "aspect_features", line_no);
    if (!obj["label"].is_number_integer())
      throw Error("jsonl line " + std::to_string(line_no) + ": label must be an integer");
    s.label = obj["label"].get<int>();
    if (s.label < 0 || s.label >= kNumClasses)
      throw Error("jsonl line " + std::to_string(line_no) + ": label out of range");
    if (!ds.empty()) {
      const Sample& first = ds.front();
      if (s.text.shape != first.text.shape || s.visual.shape != first.visual.shape ||
          s.aspect.shape != first.aspect.shape)
        throw Error("jsonl line " + std::to_string(line_no) +
                    ": feature dims differ from the first sample");
    }
    ds.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Seeded split
// ---------------------------------------------------------------------------

struct SplitResult {
  Dataset train;
  Dataset dev;
  Dataset test;
};

inline SplitResult split(const Dataset& ds, double r_train, double r_dev, double r_test,
                         std::uint64_t seed) {
  if (r_train <= 0.0 || r_dev <= 0.0 || r_test <= 0.0)
    throw Error("split: ratios must be positive");
  if (std::abs(r_train + r_dev + r_test - 1.0) > 1e-9)
    throw Error("split: ratios must sum to 1");
  const std::size_t n = ds.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = Rng(seed).stream("split");
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  const std::size_t n_train = static_cast<std::size_t>(std::floor(r_train * static_cast<double>(n)));
  const std::size_t n_dev = static_cast<std::size_t>(std::floor(r_dev * static_cast<double>(n)));
  SplitResult out;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = ds[idx[i]];
    if (i < n_train)
      out.train.push_back(s);
    else if (i < n_train + n_dev)
      out.dev.push_back(s);
    else
      out.test.push_back(s);
  }
  return out;
}

}  // namespace dkbf
