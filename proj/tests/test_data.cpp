#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>

#include "dkbf/data.hpp"
#include "dkbf/rng.hpp"

using namespace dkbf;
using Catch::Approx;

namespace {

std::string temp_path(const std::string& name) {
  return std::string("/tmp/dkbf_test_") + name + "_" + std::to_string(::getpid()) + ".jsonl";
}

std::string sample_key(const Sample& s) {
  std::string key = std::to_string(s.label);
  for (double v : s.text.values) key += "," + std::to_string(v);
  for (double v : s.visual.values) key += "," + std::to_string(v);
  for (double v : s.aspect.values) key += "," + std::to_string(v);
  return key;
}

}  // namespace

TEST_CASE("generator is deterministic under the seed") {
  SynthSpec spec;
  spec.n_samples = 16;
  Dataset a = generate_synthetic(spec);
  Dataset b = generate_synthetic(spec);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);

  spec.seed = 43;
  Dataset c = generate_synthetic(spec);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) any_diff = any_diff || !(a[i] == c[i]);
  REQUIRE(any_diff);
}

TEST_CASE("label balance: about half neutral, quarters positive/negative") {
  SynthSpec spec;
  spec.n_samples = 512;
  Dataset ds = generate_synthetic(spec);
  int counts[3] = {0, 0, 0};
  for (const Sample& s : ds) ++counts[s.label];
  // binomial 3-sigma bands at n = 512
  REQUIRE(counts[1] >= 256 - 34);
  REQUIRE(counts[1] <= 256 + 34);
  REQUIRE(counts[0] >= 128 - 30);
  REQUIRE(counts[0] <= 128 + 30);
  REQUIRE(counts[2] >= 128 - 30);
  REQUIRE(counts[2] <= 128 + 30);
}

TEST_CASE("text-only Bayes ceiling is 50% by case enumeration") {
  // (b_t, b_v) uniform on {-1,+1}^2. Observing b_t alone leaves a 50/50
  // tie between neutral and the matching polar class either way, so the
  // best achievable accuracy is exactly one half.
  REQUIRE(text_only_bayes_accuracy() == Approx(0.5).margin(1e-15));
}

TEST_CASE("noiseless samples decode perfectly by the nearest-prototype rule") {
  SynthSpec spec;
  spec.n_samples = 64;
  spec.noise_std = 0.0;
  const SynthBasis basis = synth_basis(spec);
  Dataset ds = generate_synthetic(spec);

  auto planted_row = [](const Tensor& t) {
    int best = 0;
    double bn = -1.0;
    for (int i = 0; i < t.rows(); ++i) {
      double norm = 0.0;
      for (int j = 0; j < t.cols(); ++j) norm += t.at(i, j) * t.at(i, j);
      if (norm > bn) {
        bn = norm;
        best = i;
      }
    }
    return best;
  };
  auto decode_bit = [&](const Tensor& t, int proto) {
    const int row = planted_row(t);
    double dot = 0.0;
    for (int j = 0; j < t.cols(); ++j)
      dot += (t.at(row, j) - basis.prototypes[static_cast<std::size_t>(proto)][static_cast<std::size_t>(j)]) *
             basis.signal[static_cast<std::size_t>(j)];
    return dot > 0.0 ? 1 : -1;
  };
  auto nearest_prototype = [&](const Tensor& aspect) {
    // aspect rows alternate a_k + u and a_k - u; their mean recovers a_k
    std::vector<double> mean(static_cast<std::size_t>(aspect.cols()), 0.0);
    for (int i = 0; i < aspect.rows(); ++i)
      for (int j = 0; j < aspect.cols(); ++j) mean[static_cast<std::size_t>(j)] += aspect.at(i, j) / aspect.rows();
    int best = 0;
    double bd = 1e300;
    for (std::size_t k = 0; k < basis.prototypes.size(); ++k) {
      double dist = 0.0;
      for (int j = 0; j < aspect.cols(); ++j) {
        const double d = mean[static_cast<std::size_t>(j)] - basis.prototypes[k][static_cast<std::size_t>(j)];
        dist += d * d;
      }
      if (dist < bd) {
        bd = dist;
        best = static_cast<int>(k);
      }
    }
    return best;
  };

  int correct = 0;
  for (const Sample& s : ds) {
    const int proto = nearest_prototype(s.aspect);
    const int bt = decode_bit(s.text, proto);
    const int bv = decode_bit(s.visual, proto);
    if (synth_label(bt, bv) == s.label) ++correct;
  }
  REQUIRE(correct == static_cast<int>(ds.size()));
}

TEST_CASE("jsonl round trip") {
  SynthSpec spec;
  spec.n_samples = 5;
  spec.ts = 3;
  spec.ti = 2;
  spec.ta = 1;
  spec.d_in = 4;
  Dataset ds = generate_synthetic(spec);
  const std::string path = temp_path("roundtrip");

  SECTION("datasets round trip exactly") {
    write_jsonl(ds, path);
    Dataset back = read_jsonl(path);
    REQUIRE(back.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) REQUIRE(back[i] == ds[i]);
  }
  SECTION("empty dataset round trips to an empty file") {
    write_jsonl({}, path);
    std::ifstream in(path);
    REQUIRE(in.peek() == std::ifstream::traits_type::eof());
    REQUIRE(read_jsonl(path).empty());
  }
  SECTION("a truncated line reports its line number") {
    write_jsonl(ds, path);
    std::ifstream in(path);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    // chop the last line in half
    all.resize(all.size() - all.size() / 8);
    std::ofstream out(path, std::ios::binary);
    out << all;
    out.close();
    try {
      read_jsonl(path);
      FAIL("expected throw");
    } catch (const Error& e) {
      REQUIRE(std::string(e.what()).find("line 5") != std::string::npos);
    }
  }
  SECTION("dimension drift across lines is rejected") {
    write_jsonl(ds, path);
    std::ofstream out(path, std::ios::app);
    out << "{\"text_features\":[[1,2]],\"visual_features\":[[1,2]],"
           "\"aspect_features\":[[1,2]],\"label\":0}\n";
    out.close();
    try {
      read_jsonl(path);
      FAIL("expected throw");
    } catch (const Error& e) {
      REQUIRE(std::string(e.what()).find("line 6") != std::string::npos);
      REQUIRE(std::string(e.what()).find("differ") != std::string::npos);
    }
  }
  SECTION("labels outside {0,1,2} are rejected") {
    std::ofstream out(path);
    out << "{\"text_features\":[[1]],\"visual_features\":[[1]],"
           "\"aspect_features\":[[1]],\"label\":7}\n";
    out.close();
    REQUIRE_THROWS_AS(read_jsonl(path), Error);
  }
  std::remove(path.c_str());
}

TEST_CASE("seeded split") {
  SynthSpec spec;
  spec.n_samples = 100;
  spec.ts = 2;
  spec.ti = 2;
  spec.ta = 1;
  spec.d_in = 3;
  Dataset ds = generate_synthetic(spec);

  SECTION("ratios produce exact sizes") {
    SplitResult sp = split(ds, 0.8, 0.1, 0.1, 7);
    REQUIRE(sp.train.size() == 80);
    REQUIRE(sp.dev.size() == 10);
    REQUIRE(sp.test.size() == 10);
  }
  SECTION("same seed gives the same split") {
    SplitResult a = split(ds, 0.6, 0.2, 0.2, 7);
    SplitResult b = split(ds, 0.6, 0.2, 0.2, 7);
    for (std::size_t i = 0; i < a.train.size(); ++i) REQUIRE(a.train[i] == b.train[i]);
    for (std::size_t i = 0; i < a.test.size(); ++i) REQUIRE(a.test[i] == b.test[i]);
  }
  SECTION("splits are disjoint and exhaustive (union is the original multiset)") {
    SplitResult sp = split(ds, 0.5, 0.25, 0.25, 11);
    std::vector<std::string> original, recombined;
    for (const Sample& s : ds) original.push_back(sample_key(s));
    for (const Sample& s : sp.train) recombined.push_back(sample_key(s));
    for (const Sample& s : sp.dev) recombined.push_back(sample_key(s));
    for (const Sample& s : sp.test) recombined.push_back(sample_key(s));
    std::sort(original.begin(), original.end());
    std::sort(recombined.begin(), recombined.end());
    REQUIRE(original == recombined);
  }
  SECTION("bad ratios are rejected") {
    REQUIRE_THROWS_AS(split(ds, 0.5, 0.5, 0.5, 1), Error);
    REQUIRE_THROWS_AS(split(ds, 1.0, -0.5, 0.5, 1), Error);
  }
}

TEST_CASE("fixed signal position plants at index 0") {
  SynthSpec spec;
  spec.n_samples = 8;
  spec.noise_std = 0.0;
  spec.fixed_signal_pos = true;
  Dataset ds = generate_synthetic(spec);
  for (const Sample& s : ds) {
    double norm0 = 0.0;
    for (int j = 0; j < s.text.cols(); ++j) norm0 += s.text.at(0, j) * s.text.at(0, j);
    REQUIRE(norm0 > 0.5);  // planted token lives at row 0
    for (int i = 1; i < s.text.rows(); ++i)
      for (int j = 0; j < s.text.cols(); ++j) REQUIRE(s.text.at(i, j) == 0.0);
  }
}
