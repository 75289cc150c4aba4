#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "xsalab/trainer.hpp"

using namespace xsalab;

namespace {

TrainConfig schedule_config(double max_lr, int64_t warmup, int64_t total) {
  TrainConfig cfg;
  cfg.max_lr = max_lr;
  cfg.warmup_steps = warmup;
  cfg.total_steps = total;
  cfg.final_lr_frac = 0.1;
  return cfg;
}

ModelConfig small_model(AttnMode mode, int64_t seq_len, int64_t d_model = 32,
                        int64_t n_layers = 2) {
  ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.d_model = d_model;
  cfg.n_heads = 2;
  cfg.d_head = d_model / 4;
  cfg.vocab_size = 256;
  cfg.max_seq_len = seq_len;
  cfg.mode = mode;
  cfg.init_seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("learning rate schedule goldens") {
  TrainConfig cfg = schedule_config(4e-4, 2000, 200000);
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(2000, cfg) == doctest::Approx(4e-4).epsilon(1e-15));
  CHECK(lr_at(200000, cfg) == doctest::Approx(4e-5).epsilon(1e-12));
  const int64_t mid = 2000 + (200000 - 2000) / 2;
  CHECK(lr_at(mid, cfg) == doctest::Approx(4e-4 * 0.55).epsilon(1e-12));
  CHECK(lr_at(250000, cfg) == doctest::Approx(4e-5).epsilon(1e-12));  // clamps past the end
  CHECK_THROWS_AS(lr_at(-1, cfg), std::invalid_argument);
}

TEST_CASE("schedule is continuous at warmup and nonincreasing after") {
  TrainConfig cfg = schedule_config(1e-3, 100, 5000);
  CHECK(std::abs(lr_at(99, cfg) - lr_at(100, cfg)) < 1e-3 * (1.0 / 100 + 1e-9));
  double prev = lr_at(100, cfg);
  for (int64_t s = 101; s <= 5000; s += 7) {
    const double cur = lr_at(s, cfg);
    CHECK(cur <= prev + 1e-18);
    prev = cur;
  }
  // warmup is strictly increasing
  CHECK(lr_at(50, cfg) == doctest::Approx(0.5e-3));
}

TEST_CASE("adamw: zero gradient behavior") {
  TensorT<double> w = TensorT<double>::from_data({3}, {1.0, -2.0, 0.5});
  w.set_requires_grad(true);
  std::vector<Param<double>> params{{"w", w, false}};
  AdamW<double> opt(params, 0.9, 0.95, 1e-8, 0.1);
  w.zero_grad();
  opt.step(params, 1e-2);
  CHECK((*w.data)[0] == 1.0);  // no decay on this param, zero grad: unchanged
  CHECK((*w.data)[1] == -2.0);

  TensorT<double> wd = TensorT<double>::from_data({2}, {1.0, -4.0});
  wd.set_requires_grad(true);
  std::vector<Param<double>> p2{{"wd", wd, true}};
  AdamW<double> opt2(p2, 0.9, 0.95, 1e-8, 0.1);
  wd.zero_grad();
  const double lr = 1e-2;
  opt2.step(p2, lr);
  CHECK((*wd.data)[0] == doctest::Approx(1.0 * (1 - lr * 0.1)).epsilon(1e-15));
  CHECK((*wd.data)[1] == doctest::Approx(-4.0 * (1 - lr * 0.1)).epsilon(1e-15));
}

TEST_CASE("adamw scalar recurrence matches a hand evaluation") {
  const double b1 = 0.9, b2 = 0.95, eps = 1e-8, lr = 1e-3, g = 0.37;
  TensorT<double> w = TensorT<double>::scalar(2.0);
  w.set_requires_grad(true);
  std::vector<Param<double>> params{{"w", w, false}};
  AdamW<double> opt(params, b1, b2, eps, 0.0);

  double m = 0, v = 0, x = 2.0;
  for (int t = 1; t <= 5; ++t) {
    (*w.grad)[0] = g;
    opt.step(params, lr);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
    CHECK(std::abs((*w.data)[0] - x) < 1e-12);
  }
}

TEST_CASE("adamw with lr=0 changes nothing; NaN gradient aborts the step") {
  Rng rng(5);
  TensorT<double> w = testutil::random_tensor({4, 4}, rng);
  w.set_requires_grad(true);
  std::vector<Param<double>> params{{"w", w, true}};
  AdamW<double> opt(params, 0.9, 0.95, 1e-8, 0.1);
  for (double& g : *w.grad) g = 0.25;
  std::vector<double> before = *w.data;
  opt.step(params, 0.0);
  CHECK(*w.data == before);

  (*w.grad)[7] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(opt.step(params, 1e-3), BadGradient);
  CHECK(*w.data == before);  // aborted before touching anything
}

TEST_CASE("global norm clipping") {
  TensorT<double> w = TensorT<double>::from_data({2}, {0.0, 0.0});
  w.set_requires_grad(true);
  (*w.grad)[0] = 3.0;
  (*w.grad)[1] = 4.0;
  std::vector<Param<double>> params{{"w", w, false}};
  CHECK(clip_global_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK((*w.grad)[0] == doctest::Approx(0.6));
  CHECK((*w.grad)[1] == doctest::Approx(0.8));
  // below the threshold: untouched
  CHECK(clip_global_norm(params, 10.0) == doctest::Approx(1.0));
  CHECK((*w.grad)[0] == doctest::Approx(0.6));
}

TEST_CASE("window sampling: the abcde corpus has exactly one window") {
  // "abcde" with the default 0.05% validation tail reserves 'e', leaving
  // offsets for a single (abc -> bcd) window
  Corpus c = make_corpus({'a', 'b', 'c', 'd', 'e'}, 0.0005);
  CHECK(c.train_len() == 4);
  BatchSampler s(c, Split::kTrain, 3, 2, 99);
  for (int rep = 0; rep < 3; ++rep) {
    auto [in, tgt] = s.next();
    CHECK(in.ids == std::vector<int32_t>{'a', 'b', 'c', 'a', 'b', 'c'});
    CHECK(tgt.ids == std::vector<int32_t>{'b', 'c', 'd', 'b', 'c', 'd'});
  }
}

TEST_CASE("window sampling determinism and split bounds") {
  std::vector<int32_t> ids(1000);
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int32_t>(i % 251);
  Corpus c = make_corpus(ids, 0.1);
  CHECK(c.train_len() == 900);
  CHECK(c.val_len() == 100);

  BatchSampler a(c, Split::kTrain, 16, 4, 7);
  BatchSampler b(c, Split::kTrain, 16, 4, 7);
  for (int i = 0; i < 5; ++i) {
    auto [ia, ta] = a.next();
    auto [ib, tb] = b.next();
    CHECK(ia.ids == ib.ids);
    CHECK(ta.ids == tb.ids);
    // targets are inputs shifted by one
    for (size_t j = 0; j + 1 < ia.ids.size(); ++j)
      if ((j + 1) % 16 != 0) CHECK(ia.ids[j + 1] == ta.ids[j]);
  }

  // validation windows stay inside the tail
  BatchSampler v(c, Split::kVal, 16, 4, 7);
  auto [vi, vt] = v.next();
  for (int32_t id : vi.ids) CHECK(id >= 0);

  CHECK_THROWS_WITH_AS(BatchSampler(c, Split::kVal, 100, 1, 0), doctest::Contains("too small"),
                       std::runtime_error);
  Corpus tiny = make_corpus({1, 2, 3}, 0.0);
  CHECK_THROWS_AS(BatchSampler(tiny, Split::kTrain, 3, 1, 0), std::runtime_error);
}

TEST_CASE("token budget stays constant across sequence lengths") {
  for (int64_t t : {64, 128, 256, 512}) {
    TrainConfig cfg;
    cfg.batch_tokens = 4096;
    cfg.seq_len = t;
    CHECK(cfg.batch_size() * t == 4096);
  }
  TrainConfig bad;
  bad.batch_tokens = 100;
  bad.seq_len = 64;
  CHECK_THROWS_AS(bad.batch_size(), std::invalid_argument);
}

TEST_CASE("tokenizers: bytes round-trip, vocab file greedy-matches") {
  Tokenizer bytes = Tokenizer::bytes();
  const std::string text = "hello \xf0\x9f\x8c\x8d world";
  auto ids = bytes.encode(text);
  CHECK(bytes.decode(ids) == text);
  CHECK(bytes.vocab_size() == 256);

  const std::string vocab_path =
      testutil::write_temp_file("vocab.txt", "the\nth\nt\nh\ne\n \ncat\nc\na\n");
  Tokenizer tok = Tokenizer::from_vocab_file(vocab_path);
  CHECK(tok.vocab_size() == 9);
  auto enc = tok.encode("the cat");
  CHECK(tok.decode(enc) == "the cat");
  CHECK(enc[0] == 0);  // greedy longest match picks "the" over "th"+"e"
  CHECK_THROWS_AS(tok.encode("dog"), std::runtime_error);
}

TEST_CASE("training memorizes a 32-token corpus under 0.05 nats") {
  const std::string corpus_text = "The quick brown fox jumps over.\n";  // 32 bytes
  REQUIRE(corpus_text.size() == 32);
  Corpus corpus = make_corpus(Tokenizer::bytes().encode(corpus_text), 0.0);

  for (AttnMode mode : {AttnMode::kSA, AttnMode::kXSA}) {
    ModelT<float> model = ModelT<float>::build(small_model(mode, 16));
    TrainConfig cfg;
    cfg.max_lr = 3e-3;
    cfg.warmup_steps = 20;
    cfg.total_steps = 600;
    cfg.batch_tokens = 64;
    cfg.seq_len = 16;
    cfg.eval_every = 0;
    cfg.val_frac = 0.0;
    cfg.seed = 5;
    const std::string dir = testutil::temp_dir(std::string("memorize_") + mode_name(mode));
    TrainResult<float> res = train_model(model, corpus, cfg, dir);
    CHECK(!res.halted_on_nan);
    CHECK(res.final_loss < 0.05);
  }
}

TEST_CASE("initial loss on bytes is ln(256)") {
  Corpus corpus = make_corpus(Tokenizer::bytes().encode(testutil::synthetic_text(1 << 16, 42)),
                              0.0005);
  ModelT<float> model = ModelT<float>::build(small_model(AttnMode::kSA, 64));
  TrainConfig cfg;
  cfg.max_lr = 1e-3;
  cfg.warmup_steps = 2;
  cfg.total_steps = 3;
  cfg.batch_tokens = 256;
  cfg.seq_len = 64;
  cfg.eval_every = 0;
  TrainResult<float> res = train_model(model, corpus, cfg, testutil::temp_dir("initloss"));
  CHECK(std::abs(res.initial_loss - std::log(256.0)) < 0.1);
}

TEST_CASE("same seed gives identical loss curves (double precision)") {
  Corpus corpus = make_corpus(Tokenizer::bytes().encode(testutil::synthetic_text(1 << 14, 9)),
                              0.01);
  auto run = [&](const std::string& name) {
    ModelT<double> model = ModelT<double>::build(small_model(AttnMode::kXSA, 32));
    TrainConfig cfg;
    cfg.max_lr = 1e-3;
    cfg.warmup_steps = 5;
    cfg.total_steps = 25;
    cfg.batch_tokens = 128;
    cfg.seq_len = 32;
    cfg.eval_every = 10;
    cfg.seed = 31;
    const std::string dir = testutil::temp_dir(name);
    train_model(model, corpus, cfg, dir);
    return parse_loss_log(dir + "/loss.csv");
  };
  auto a = run("det_a");
  auto b = run("det_b");
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].step == b[i].step);
    CHECK(a[i].split == b[i].split);
    CHECK(a[i].loss == b[i].loss);  // exact: same bits
    CHECK(a[i].lr == b[i].lr);
    CHECK(a[i].tokens_seen == b[i].tokens_seen);
  }
}

TEST_CASE("non-finite loss halts training and keeps the last good checkpoint") {
  Corpus corpus = make_corpus(Tokenizer::bytes().encode(testutil::synthetic_text(1 << 14, 2)),
                              0.0);
  ModelT<float> model = ModelT<float>::build(small_model(AttnMode::kSA, 32));
  TrainConfig cfg;
  cfg.max_lr = 1e20;  // first update launches the weights into overflow
  cfg.warmup_steps = 1;
  cfg.total_steps = 50;
  cfg.batch_tokens = 64;
  cfg.seq_len = 32;
  cfg.eval_every = 0;
  cfg.grad_clip = 0;
  const std::string dir = testutil::temp_dir("nan_halt");
  TrainResult<float> res = train_model(model, corpus, cfg, dir);
  CHECK(res.halted_on_nan);
  CHECK(res.steps_run < 50);
  ModelT<float> recovered = load_checkpoint<float>(dir + "/final.ckpt");
  for (const auto& p : recovered.parameters())
    for (float x : *p.tensor.data) CHECK(std::isfinite(x));
}

TEST_CASE("loss log round-trips byte-identically") {
  Corpus corpus = make_corpus(Tokenizer::bytes().encode(testutil::synthetic_text(1 << 14, 3)),
                              0.01);
  ModelT<float> model = ModelT<float>::build(small_model(AttnMode::kSA, 32));
  TrainConfig cfg;
  cfg.max_lr = 1e-3;
  cfg.warmup_steps = 2;
  cfg.total_steps = 8;
  cfg.batch_tokens = 64;
  cfg.seq_len = 32;
  cfg.eval_every = 4;
  const std::string dir = testutil::temp_dir("logrt");
  train_model(model, corpus, cfg, dir);
  auto rows = parse_loss_log(dir + "/loss.csv");
  write_loss_log(dir + "/copy.csv", rows);
  CHECK(testutil::slurp(dir + "/loss.csv") == testutil::slurp(dir + "/copy.csv"));
}
