#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "minidistill/errors.hpp"
#include "minidistill/gradcheck.hpp"
#include "minidistill/model.hpp"
#include "minidistill/ops.hpp"

using namespace minidistill;
using D = Tensor<double>;

namespace {

ModelConfig small(int layers = 2, int hidden = 8, int heads = 2) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.vocab_size = 20;
  c.max_seq_len = 16;
  c.dropout = 0.1;
  return c;
}

ModelConfig bert(int layers, int hidden) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = 12;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  return c;
}

// Closed form written out per tensor, independent of the model code.
std::int64_t layer_params(std::int64_t d, std::int64_t ff) {
  const std::int64_t attention = 4 * (d * d + d);
  const std::int64_t ffn = (d * ff + ff) + (ff * d + d);
  const std::int64_t norms = 2 * (2 * d);
  return attention + ffn + norms;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small();
  c.num_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(small().validate());
}

TEST_CASE("init is deterministic per seed") {
  const auto a = TransformerModel<double>::init(small(), 7).state();
  const auto b = TransformerModel<double>::init(small(), 7).state();
  const auto c = TransformerModel<double>::init(small(), 8).state();
  REQUIRE(a.size() == b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].values == b[i].values);
    differs |= a[i].values != c[i].values;
  }
  CHECK(differs);
}

TEST_CASE("count_params closed form on a 2x8 model") {
  const ModelConfig c = small();
  const auto p = count_params(c);
  CHECK(p.transformer == 2 * layer_params(8, 32));
  CHECK(p.embedding == 20 * 8);
  const auto m = TransformerModel<double>::init(c, 1);
  CHECK(m.transformer_param_count() == static_cast<std::size_t>(p.transformer));
  CHECK(m.param_count() == static_cast<std::size_t>(p.total()));
}

TEST_CASE("count_params reproduces the published rows") {
  struct Row {
    int layers, hidden;
    std::int64_t trm;
  };
  for (const Row& r : {Row{12, 768, 85054464}, Row{6, 768, 42527232}, Row{12, 384, 21293568},
                       Row{6, 384, 10646784}, Row{4, 384, 7097856}, Row{3, 384, 5323392}}) {
    CAPTURE(r.layers);
    CAPTURE(r.hidden);
    CHECK(count_params(bert(r.layers, r.hidden)).transformer == r.trm);
    CHECK(layer_params(r.hidden, 4 * r.hidden) * r.layers == r.trm);
  }
  CHECK(count_params(bert(12, 768)).embedding == 23440896);
  CHECK(count_params(bert(6, 384)).embedding == 11720448);
}

TEST_CASE("count_params equals a traversal of instantiated models") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> layers(1, 3), heads(1, 4), dk(1, 6), vocab(6, 40), ff(0, 24);
  for (int i = 0; i < 10; ++i) {
    ModelConfig c;
    c.num_layers = layers(rng);
    c.heads = heads(rng);
    c.hidden = c.heads * dk(rng);
    c.ffn_dim = ff(rng);
    c.vocab_size = vocab(rng);
    c.max_seq_len = 8;
    const auto m = TransformerModel<float>::init(c, i);
    std::size_t traversed = 0, trm = 0;
    for (const auto& p : m.parameters()) {
      traversed += p.tensor.size();
      if (p.name.rfind("layers.", 0) == 0) trm += p.tensor.size();
    }
    const auto count = count_params(c);
    CHECK(traversed == static_cast<std::size_t>(count.total()));
    CHECK(trm == static_cast<std::size_t>(count.transformer));
  }
}

TEST_CASE("flops_per_token") {
  ModelConfig a = bert(6, 768), b = bert(12, 768);
  CHECK(flops_per_token(b, 128) == 2 * flops_per_token(a, 128));
  CHECK(static_cast<double>(flops_per_token(b, 128)) / flops_per_token(a, 128) == 2.0);

  const ModelConfig c = small();
  const auto m = TransformerModel<double>::init(c, 3);
  const int n = 7;
  reset_matmul_flops();
  m.encode(EncoderInput::single({2, 5, 6, 7, 8, 9, 3}));
  const double measured = static_cast<double>(matmul_flops()) / n;
  CHECK(measured == doctest::Approx(static_cast<double>(flops_per_token(c, n))).epsilon(0.05));
}

TEST_CASE("single token attends to itself") {
  const auto m = TransformerModel<double>::init(small(), 4);
  const auto r = m.encode(EncoderInput::single({9}), CaptureRequest::all());
  REQUIRE(r.captures.size() == 1);
  for (const auto& layer : r.captures[0].layers) {
    for (const auto& h : layer.heads) {
      REQUIRE(h.attention.size() == 1);
      CHECK(h.attention[0] == 1.0);
    }
  }
}

TEST_CASE("identical tokens without position embeddings attend uniformly") {
  auto m = TransformerModel<double>::init(small(), 5);
  m.zero_position_embeddings();
  const auto r = m.encode(EncoderInput::single({11, 11}), CaptureRequest::all());
  for (const auto& layer : r.captures[0].layers) {
    for (const auto& h : layer.heads) {
      for (double v : h.attention.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
    }
  }
}

TEST_CASE("hidden states match the frozen reference") {
  std::ifstream in(std::string(MINIDISTILL_TEST_DATA) + "/golden_encode.txt");
  REQUIRE(in);
  std::string line;
  std::vector<double> golden;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    for (double v; ls >> v;) golden.push_back(v);
  }
  REQUIRE(golden.size() == 8 * 16);

  ModelConfig c;
  c.num_layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.vocab_size = 32;
  c.max_seq_len = 16;
  c.dropout = 0.1;
  const auto m = TransformerModel<double>::init(c, 2024);
  const auto r = m.encode(EncoderInput::single({2, 7, 19, 4, 11, 30, 5, 3}));
  REQUIRE(r.hidden.size() == golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) CHECK(r.hidden[i] == doctest::Approx(golden[i]).epsilon(1e-10));
}

TEST_CASE("padding does not leak into valid positions") {
  const auto m = TransformerModel<double>::init(small(), 6);
  const auto plain = m.encode(EncoderInput::single({2, 7, 8, 3}), CaptureRequest::last());

  EncoderInput padded;
  padded.batch = 2;
  padded.seq_len = 6;
  padded.token_ids = {2, 7, 8, 3, 13, 17, 2, 9, 10, 11, 12, 3};
  padded.segment_ids.assign(12, 0);
  padded.attn_mask = {1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1};
  const auto both = m.encode(padded, CaptureRequest::last());

  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(both.hidden.at(i, j) == doctest::Approx(plain.hidden.at(i, j)).epsilon(1e-12));

  const auto& att = both.captures[0].last().heads[0].attention;
  REQUIRE(att.rows() == 6);
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      if (j >= 4) CHECK(att.at(i, j) == 0.0);
      total += att.at(i, j);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("dropout is seeded and off without an rng") {
  const auto m = TransformerModel<double>::init(small(), 6);
  const auto in = EncoderInput::single({2, 7, 8, 9, 3});
  const auto a = m.encode(in), b = m.encode(in);
  CHECK(std::vector<double>(a.hidden.values().begin(), a.hidden.values().end()) ==
        std::vector<double>(b.hidden.values().begin(), b.hidden.values().end()));
  std::mt19937_64 r1(5), r2(5);
  const auto c = m.encode(in, {}, &r1), d = m.encode(in, {}, &r2);
  CHECK(std::vector<double>(c.hidden.values().begin(), c.hidden.values().end()) ==
        std::vector<double>(d.hidden.values().begin(), d.hidden.values().end()));
  CHECK(c.hidden[0] != a.hidden[0]);
}

TEST_CASE("mlm logits shape and normalisation") {
  const auto m = TransformerModel<double>::init(small(), 8);
  const auto r = m.encode(EncoderInput::single({2, 7, 8, 3}));
  const D logits = m.mlm_logits(r.hidden);
  CHECK(logits.rows() == 4);
  CHECK(logits.cols() == 20);
  const D p = softmax_rows(logits);
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 20; ++j) total += p.at(i, j);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("mlm cross entropy gradient wrt embeddings on a 4-token model") {
  auto check = run_gradcheck({"mlm_embeddings", "model", [] {
                                auto model = std::make_shared<TransformerModel<double>>(
                                    TransformerModel<double>::init(small(1, 8, 2), 9));
                                std::vector<D> inputs;
                                for (const auto& p : model->parameters()) {
                                  if (p.name.rfind("embeddings.", 0) == 0) inputs.push_back(p.tensor);
                                }
                                return GradProblem{inputs, [model] {
                                                     const auto r = model->encode(EncoderInput::single({2, 4, 12, 3}));
                                                     const std::vector<int> rows{1, 2}, targets{6, 12};
                                                     const D lp = log_softmax_rows(
                                                         model->mlm_logits(embedding_lookup(r.hidden, rows)));
                                                     return nll_rows(lp, targets);
                                                   }};
                              }});
  CHECK(check.error.empty());
  CHECK(check.passed);
}

TEST_CASE("state round trip and precision conversion") {
  const auto m = TransformerModel<double>::init(small(), 10);
  const auto back = TransformerModel<double>::from_state(m.config(), m.state());
  const auto s1 = m.state(), s2 = back.state();
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i].values == s2[i].values);
  const auto f = convert_model<float>(m);
  CHECK(f.param_count() == m.param_count());

  auto broken = m.state();
  broken.pop_back();
  CHECK_THROWS(TransformerModel<double>::from_state(m.config(), broken));
}
