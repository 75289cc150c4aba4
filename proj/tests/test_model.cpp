#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "testutil.hpp"
#include "xsalab/checkpoint.hpp"
#include "xsalab/model.hpp"

using namespace xsalab;

using MD = ModelT<double>;

namespace {

ModelConfig tiny_config(AttnMode mode = AttnMode::kSA, int64_t n_sinks = 0) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_head = 8;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 24;
  cfg.mode = mode;
  cfg.n_sinks = n_sinks;
  cfg.init_seed = 7;
  return cfg;
}

TokenBatch batch_of(std::vector<int32_t> ids, int64_t b, int64_t t) {
  return TokenBatch{b, t, std::move(ids)};
}

std::vector<int32_t> arange_tokens(int64_t n, int64_t vocab) {
  std::vector<int32_t> ids(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = static_cast<int32_t>((i * 7 + 3) % vocab);
  return ids;
}

}  // namespace

TEST_CASE("same seed builds parameter-identical models") {
  MD a = MD::build(tiny_config());
  MD b = MD::build(tiny_config());
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::memcmp(pa[i].tensor.ptr(), pb[i].tensor.ptr(),
                      sizeof(double) * pa[i].tensor.numel()) == 0);
  }
  ModelConfig other = tiny_config();
  other.init_seed = 8;
  MD c = MD::build(other);
  CHECK(std::memcmp(a.parameters()[0].tensor.ptr(), c.parameters()[0].tensor.ptr(),
                    sizeof(double) * 64) != 0);
}

TEST_CASE("closed-form parameter count matches the built model") {
  ModelConfig cfg = tiny_config();
  MD m = MD::build(cfg);
  int64_t embedding_params = cfg.vocab_size * cfg.d_model;  // tied head
  CHECK(m.param_count() == nonembedding_param_count(cfg) + embedding_params);

  cfg.n_sinks = 3;
  MD ms = MD::build(cfg);
  CHECK(ms.param_count() == nonembedding_param_count(cfg) + embedding_params);

  cfg.n_sinks = 0;
  cfg.tie_embeddings = false;
  MD mu = MD::build(cfg);
  CHECK(mu.param_count() ==
        nonembedding_param_count(cfg) + 2 * embedding_params);
}

TEST_CASE("Table-1-style configs land on their nominal sizes") {
  auto count = [](int64_t layers, int64_t d, int64_t heads, int64_t dh) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = d;
    cfg.n_heads = heads;
    cfg.d_head = dh;
    cfg.vocab_size = 50257;
    cfg.max_seq_len = 2048;
    return nonembedding_param_count(cfg);
  };
  CHECK(std::abs(static_cast<double>(count(24, 1536, 6, 256)) / 0.7e9 - 1.0) < 0.05);
  CHECK(std::abs(static_cast<double>(count(24, 2048, 24, 128)) / 1.4e9 - 1.0) < 0.05);
  CHECK(std::abs(static_cast<double>(count(32, 2560, 24, 128)) / 2.7e9 - 1.0) < 0.05);
}

TEST_CASE("forward validates inputs") {
  MD m = MD::build(tiny_config());
  CHECK_THROWS_AS(m.forward(batch_of(arange_tokens(25, 64), 1, 25)), std::invalid_argument);
  CHECK_THROWS_AS(m.forward(batch_of({0, 1, 64}, 1, 3)), std::runtime_error);  // id out of range
  TensorT<double> logits = m.forward(batch_of(arange_tokens(12, 64), 2, 6));
  CHECK(logits.shape == Shape{2, 6, 64});
}

TEST_CASE("sink count zero is bit-identical to the sink-free path") {
  ModelConfig cfg = tiny_config(AttnMode::kXSA, 0);
  MD m = MD::build(cfg);
  // no sink parameter exists, so the k=0 forward IS the sink-free path;
  // a second build must agree bitwise
  for (const auto& p : m.parameters()) CHECK(p.name != "sinks.weight");
  auto ids = arange_tokens(16, 64);
  TensorT<double> a = m.forward(batch_of(ids, 2, 8));
  TensorT<double> b = MD::build(cfg).forward(batch_of(ids, 2, 8));
  CHECK(std::memcmp(a.ptr(), b.ptr(), sizeof(double) * a.numel()) == 0);
}

TEST_CASE("sinks are attendable but stripped from logits") {
  ModelConfig cfg = tiny_config(AttnMode::kSA, 2);
  MD m = MD::build(cfg);
  auto ids = arange_tokens(10, 64);
  TensorT<double> logits = m.forward(batch_of(ids, 1, 10));
  CHECK(logits.shape == Shape{1, 10, 64});

  // a_{i,i} for real tokens is no longer the full row mass: sinks soak some
  TraceT<double> trace;
  m.forward(batch_of(ids, 1, 10), &trace);
  const auto& diag = trace.layers[0].diag;
  CHECK(diag.dim(2) == 12);  // 2 sinks + 10 tokens traced internally
}

TEST_CASE("causality holds end to end with and without sinks") {
  for (AttnMode mode : {AttnMode::kSA, AttnMode::kXSA}) {
    for (int64_t sinks : {0, 2}) {
      MD m = MD::build(tiny_config(mode, sinks));
      auto ids = arange_tokens(12, 64);
      TensorT<double> base = m.forward(batch_of(ids, 1, 12));
      const int64_t p = 5;
      auto ids2 = ids;
      ids2[p] = (ids2[p] + 1) % 64;
      TensorT<double> pert = m.forward(batch_of(ids2, 1, 12));
      CHECK(std::memcmp(base.ptr(), pert.ptr(), sizeof(double) * p * 64) == 0);
      double diff = 0;
      for (int64_t i = p * 64; i < 12 * 64; ++i)
        diff = std::max(diff, std::abs((*base.data)[i] - (*pert.data)[i]));
      CHECK(diff > 0);
    }
  }
}

TEST_CASE("residual identity: zeroed output projections reduce to the embedding path") {
  ModelConfig cfg = tiny_config();
  MD m = MD::build(cfg);
  for (auto& blk : m.blocks()) {
    std::fill(blk.attn.wo.data->begin(), blk.attn.wo.data->end(), 0.0);
    std::fill(blk.ffn_w2.data->begin(), blk.ffn_w2.data->end(), 0.0);
  }
  auto ids = arange_tokens(9, 64);
  TensorT<double> got = m.forward(batch_of(ids, 1, 9));

  // embed -> post LN -> final LN -> tied head, straight from the params
  std::map<std::string, TensorT<double>> byname;
  for (auto& p : m.parameters()) byname[p.name] = p.tensor;
  TensorT<double> h = reshape(embedding(byname["embed.weight"], ids), {1, 9, cfg.d_model});
  h = layernorm(h, byname["post_ln.gain"], byname["post_ln.bias"], kLayerNormEps);
  h = layernorm(h, byname["final_ln.gain"], byname["final_ln.bias"], kLayerNormEps);
  TensorT<double> want = matmul(h, transpose(byname["embed.weight"], 0, 1));
  for (int64_t i = 0; i < got.numel(); ++i)
    CHECK((*got.data)[i] == doctest::Approx((*want.data)[i]).epsilon(1e-12));
}

TEST_CASE("mode switch changes logits except on the orthogonal fixture") {
  ModelConfig sa_cfg = tiny_config(AttnMode::kSA);
  ModelConfig xsa_cfg = tiny_config(AttnMode::kXSA);
  MD sa = MD::build(sa_cfg);
  MD xsa = MD::build(xsa_cfg);
  auto ids = arange_tokens(10, 64);
  TensorT<double> la = sa.forward(batch_of(ids, 1, 10));
  TensorT<double> lb = xsa.forward(batch_of(ids, 1, 10));
  double diff = 0;
  for (int64_t i = 0; i < la.numel(); ++i)
    diff = std::max(diff, std::abs((*la.data)[i] - (*lb.data)[i]));
  CHECK(diff > 1e-6);

  // zero W_v in both: y is then orthogonal (vacuously) to v and modes agree
  for (auto& blk : sa.blocks()) std::fill(blk.attn.wv.data->begin(), blk.attn.wv.data->end(), 0.0);
  for (auto& blk : xsa.blocks())
    std::fill(blk.attn.wv.data->begin(), blk.attn.wv.data->end(), 0.0);
  TensorT<double> fa = sa.forward(batch_of(ids, 1, 10));
  TensorT<double> fb = xsa.forward(batch_of(ids, 1, 10));
  CHECK(std::memcmp(fa.ptr(), fb.ptr(), sizeof(double) * fa.numel()) == 0);
}

TEST_CASE("checkpoint round trip reproduces forward bit-exactly") {
  const std::string dir = testutil::temp_dir("ckpt");
  ModelConfig cfg = tiny_config(AttnMode::kXSA, 1);
  MD m = MD::build(cfg);
  auto ids = arange_tokens(14, 64);
  TensorT<double> before = m.forward(batch_of(ids, 1, 14));

  CheckpointMeta meta{42, 42 * 2048, 0xdeadbeefULL, 42};
  save_checkpoint(dir + "/model.ckpt", m, meta);

  CheckpointMeta got;
  MD loaded = load_checkpoint<double>(dir + "/model.ckpt", &got);
  CHECK(got.step == 42);
  CHECK(got.rng_state == 0xdeadbeefULL);
  CHECK(loaded.config().mode == AttnMode::kXSA);
  TensorT<double> after = loaded.forward(batch_of(ids, 1, 14));
  CHECK(std::memcmp(before.ptr(), after.ptr(), sizeof(double) * before.numel()) == 0);
}

TEST_CASE("checkpoint carries optimizer moments") {
  const std::string dir = testutil::temp_dir("ckpt_opt");
  ModelConfig cfg = tiny_config();
  MD m = MD::build(cfg);
  auto params = m.parameters();
  AdamW<double> opt(params, 0.9, 0.95, 1e-8, 0.1);
  // run two real steps so moments are nonzero
  for (int it = 0; it < 2; ++it) {
    TapeT<double> tape;
    RecordScope<double> rec(tape);
    for (auto& p : params) p.tensor.zero_grad();
    auto ids = arange_tokens(10, 64);
    TensorT<double> loss = cross_entropy_logits(m.forward(batch_of(ids, 1, 10)),
                                                std::vector<int32_t>(ids.begin(), ids.end()));
    backward(loss);
    opt.step(params, 1e-3);
  }
  CheckpointMeta meta{2, 2 * 10, 1, 2};
  save_checkpoint(dir + "/model.ckpt", m, meta, &opt);

  MD m2 = MD::build(cfg);
  auto params2 = m2.parameters();
  AdamW<double> opt2(params2, 0.9, 0.95, 1e-8, 0.1);
  MD loaded = load_checkpoint<double>(dir + "/model.ckpt", nullptr, &opt2);
  CHECK(opt2.step_count() == 2);
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(opt.first_moment(i) == opt2.first_moment(i));
    CHECK(opt.second_moment(i) == opt2.second_moment(i));
  }
}

TEST_CASE("float checkpoint loads into a double model") {
  const std::string dir = testutil::temp_dir("ckpt_f32");
  ModelConfig cfg = tiny_config();
  ModelT<float> m = ModelT<float>::build(cfg);
  save_checkpoint(dir + "/m.ckpt", m, CheckpointMeta{});
  MD wide = load_checkpoint<double>(dir + "/m.ckpt");
  auto pf = m.parameters();
  auto pd = wide.parameters();
  for (size_t i = 0; i < pf.size(); ++i)
    for (int64_t j = 0; j < pf[i].tensor.numel(); ++j)
      CHECK(static_cast<double>((*pf[i].tensor.data)[j]) == (*pd[i].tensor.data)[j]);
}

TEST_CASE("sampling is deterministic and respects limits") {
  ModelConfig cfg = tiny_config();
  cfg.max_seq_len = 16;
  MD m = MD::build(cfg);
  std::vector<int32_t> prompt{1, 2, 3};
  auto a = m.sample(prompt, 20, 0.8, 123);
  auto b = m.sample(prompt, 20, 0.8, 123);
  CHECK(a == b);
  auto c = m.sample(prompt, 20, 0.8, 124);
  CHECK(a != c);

  // temperature 0 is greedy argmax, no seed needed
  auto g1 = m.sample(prompt, 10, 0.0, 1);
  auto g2 = m.sample(prompt, 10, 0.0, 999);
  CHECK(g1 == g2);

  CHECK_THROWS_AS(m.sample(arange_tokens(17, 64), 1, 1.0, 0), std::invalid_argument);
  CHECK_THROWS_AS(m.sample(prompt, 1, -0.5, 0), std::invalid_argument);
  CHECK_THROWS_AS(m.sample({}, 1, 1.0, 0), std::invalid_argument);
}

TEST_CASE("untrained model samples are near-uniform (chi-square)") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_head = 8;
  cfg.vocab_size = 256;
  cfg.max_seq_len = 8;
  cfg.init_seed = 3;
  ModelT<float> m = ModelT<float>::build(cfg);
  auto toks = m.sample(std::vector<int32_t>{0}, 10000, 1.0, 77);
  std::vector<int64_t> counts(256, 0);
  for (size_t i = 1; i < toks.size(); ++i) ++counts[static_cast<size_t>(toks[i])];
  const double expect = 10000.0 / 256.0;
  double chi2 = 0;
  for (int64_t c : counts) chi2 += (static_cast<double>(c) - expect) * (static_cast<double>(c) - expect) / expect;
  // dof 255, p = 0.001 critical value
  CHECK(chi2 < 330.6);
}

TEST_CASE("single sequence forward equals batch of one") {
  MD m = MD::build(tiny_config());
  auto ids = arange_tokens(11, 64);
  TensorT<double> a = m.forward(std::span<const int32_t>(ids));
  TensorT<double> b = m.forward(batch_of(ids, 1, 11));
  CHECK(a.shape == Shape{11, 64});
  CHECK(std::memcmp(a.ptr(), b.ptr(), sizeof(double) * a.numel()) == 0);
}

TEST_CASE("config validation rejects bad dimensions") {
  ModelConfig cfg = tiny_config();
  cfg.d_head = 7;
  CHECK_THROWS_AS(MD::build(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.n_layers = 0;
  CHECK_THROWS_AS(MD::build(cfg), std::invalid_argument);
}
