#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "grad_check.hpp"
#include "spm/checkpoint.hpp"
#include "spm/trainer.hpp"

using namespace spm;

namespace {

const SpecialIds kSp;

ModelParams tiny_model(std::uint64_t seed, std::size_t vs = 8, std::size_t vt = 8, double range = 0.3) {
  ModelConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 4;
  cfg.source_vocab = vs;
  cfg.target_vocab = vt;
  ModelParams p(cfg);
  p.initialize(seed, range);
  return p;
}

std::vector<Tensor> rows_of(const std::vector<std::vector<double>>& rows) {
  std::vector<Tensor> out;
  for (const auto& r : rows) out.push_back(Tensor::from({1, r.size()}, r));
  return out;
}

std::vector<Example> random_examples(std::mt19937_64& rng, std::size_t n, int vocab, std::size_t max_len) {
  std::uniform_int_distribution<int> tok(4, vocab - 1);
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::vector<Example> out;
  for (std::size_t k = 0; k < n; ++k) {
    Example ex;
    const std::size_t I = len(rng);
    for (std::size_t i = 0; i < I; ++i) ex.source.push_back(tok(rng));
    const std::size_t J = std::uniform_int_distribution<std::size_t>(0, I - 1)(rng);
    ex.target.push_back(kSp.bos);
    for (std::size_t j = 0; j < J; ++j) ex.target.push_back(tok(rng));
    ex.target.push_back(kSp.eos);
    out.push_back(ex);
  }
  return out;
}

// Per-sequence objective computed directly from decode_step outputs.
std::pair<double, double> reference_losses(const ModelParams& p, const Example& ex, double C) {
  NoGradGuard guard;
  auto enc = encode(p, ex.source);
  auto st = init_decoder(p, enc);
  const std::size_t I = ex.source.size();
  std::vector<int> yp = ex.target;
  while (yp.size() < I + 1) yp.push_back(kSp.pad);
  double nll = 0.0;
  std::vector<double> qsum(p.config.source_vocab, 0.0);
  for (std::size_t j = 1; j <= I; ++j) {
    auto out = decode_step(p, std::vector<int>{yp[j - 1]}, st, enc);
    nll -= std::log(out.target_probs.data()[yp[j]]);
    for (std::size_t s = 0; s < qsum.size(); ++s) qsum[s] += out.source_probs.data()[s];
    st = out.state;
  }
  for (int x : ex.source) qsum[x] -= 1.0;
  double sq = 0.0;
  for (double d : qsum) sq += d * d;
  return {nll, sq / C};
}

std::vector<std::string> read_all(const std::string& path) { return read_lines(path); }

}  // namespace

TEST_CASE("padded target examples") {
  const int a = 4, b = 5;
  auto yp = build_padded_target(std::vector<int>{kSp.bos, a, b, kSp.eos}, 5, kSp);
  CHECK(yp.ids == std::vector<int>{kSp.bos, a, b, kSp.eos, kSp.pad, kSp.pad});

  auto same = build_padded_target(std::vector<int>{kSp.bos, a, kSp.eos}, 2, kSp);
  CHECK(same.ids == std::vector<int>{kSp.bos, a, kSp.eos});

  CHECK_THROWS_AS(build_padded_target(std::vector<int>{kSp.bos, a, b, kSp.eos}, 2, kSp), FilteredInputError);
}

TEST_CASE("padded target contract over random lengths") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t I = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
    const std::size_t J = std::uniform_int_distribution<std::size_t>(0, I - 1)(rng);
    std::vector<int> y = {kSp.bos};
    for (std::size_t j = 0; j < J; ++j) y.push_back(4 + static_cast<int>(rng() % 50));
    y.push_back(kSp.eos);
    auto yp = build_padded_target(y, I, kSp).ids;
    CHECK(yp.size() == I + 1);
    CHECK(yp[J + 1] == kSp.eos);
    for (std::size_t j = J + 2; j <= I; ++j) CHECK(yp[j] == kSp.pad);
    CHECK((yp == y) == (J + 1 == I));
  }
}

TEST_CASE("target loss examples") {
  const PaddedTarget two{{kSp.bos, 1, 0}};
  auto lo = rows_of({{0.25, 0.5, 0.25}, {0.25, 0.5, 0.25}});
  // gold probabilities 0.5 and 0.25
  CHECK(target_loss(lo, two).item() == doctest::Approx(std::log(2.0) + std::log(4.0)).epsilon(1e-15));

  auto certain = rows_of({{0, 1, 0}, {1, 0, 0}});
  CHECK(target_loss(certain, two).item() == 0.0);

  const std::size_t V = 7, I = 4;
  std::vector<std::vector<double>> uniform(I, std::vector<double>(V, 1.0 / V));
  PaddedTarget yp{{kSp.bos, 3, 5, kSp.eos, kSp.pad}};
  CHECK(target_loss(rows_of(uniform), yp).item() == doctest::Approx(I * std::log(double(V))).epsilon(1e-14));

  CHECK_THROWS(target_loss(rows_of(uniform), PaddedTarget{{kSp.bos, 3, kSp.eos}}));
}

TEST_CASE("spm loss examples") {
  // q~ - x~ = (1, 0, -2, 0) with C = 10 -> 0.5
  const std::vector<int> source = {0, 2, 2, 3};
  auto q = rows_of({{1, 0, 0, 0}, {0, 0, 0, 1}, {1, 0, 0, 0}, {0, 0, 0, 0}});
  CHECK(spm_loss(q, source, 10.0).item() == 0.5);

  auto exact = rows_of({{1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  CHECK(spm_loss(exact, source, 10.0).item() == 0.0);

  CHECK_THROWS(spm_loss(exact, std::vector<int>{0, 2}, 10.0));
}

TEST_CASE("bag of words counts occurrences") {
  const int a = 4, b = 5;
  auto bag = bag_of_words(std::vector<int>{a, a, b}, 8);
  CHECK(bag == std::vector<double>{0, 0, 0, 0, 2, 1, 0, 0});
}

TEST_CASE("spm loss is non-negative and halves when C doubles") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t I = 1 + rng() % 6, V = 3 + rng() % 5;
    std::vector<Tensor> q;
    for (std::size_t j = 0; j < I; ++j) q.push_back(softmax(spm::testing::random_tensor({1, V}, rng, -3, 3, false)));
    std::vector<int> src;
    for (std::size_t i = 0; i < I; ++i) src.push_back(static_cast<int>(rng() % V));
    const double C = 0.5 + static_cast<double>(rng() % 20);
    const double l1 = spm_loss(q, src, C).item();
    const double l2 = spm_loss(q, src, 2 * C).item();
    CHECK(l1 >= 0.0);
    CHECK(l2 == l1 / 2);
  }
}

TEST_CASE("spm on minus spm off is the source term of the same pass") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = tiny_model(100 + trial);
    auto batch = random_examples(rng, 1 + trial % 4, 8, 6);
    NoGradGuard guard;
    auto on = compute_objective(p, std::span<const Example>(batch), 10.0, true, kSp);
    auto off = compute_objective(p, std::span<const Example>(batch), 10.0, false, kSp);
    CHECK(on.target.item() == off.total.item());
    CHECK(on.total.item() == off.total.item() + on.source.item());
    CHECK_FALSE(off.source.defined());
  }
}

TEST_CASE("batched objective equals the mean of per-sequence losses") {
  std::mt19937_64 rng(24);
  auto p = tiny_model(25);
  auto batch = random_examples(rng, 5, 8, 7);
  double nll = 0, src = 0;
  for (const auto& ex : batch) {
    auto [t, s] = reference_losses(p, ex, 10.0);
    nll += t;
    src += s;
  }
  NoGradGuard guard;
  auto obj = compute_objective(p, std::span<const Example>(batch), 10.0, true, kSp);
  CHECK(obj.target.item() == doctest::Approx(nll / 5).epsilon(1e-12));
  CHECK(obj.source.item() == doctest::Approx(src / 5).epsilon(1e-12));
}

TEST_CASE("gradient of the joint objective matches finite differences") {
  std::mt19937_64 rng(26);
  auto p = tiny_model(27, 8, 8, 0.5);
  auto batch = random_examples(rng, 3, 8, 4);
  auto r = spm::testing::check_gradients(p.named_tensors(), [&] {
    return compute_objective(p, std::span<const Example>(batch), 10.0, true, kSp).total;
  });
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  for (int e = 1; e <= 9; ++e) CHECK(cfg.learning_rate_at(e) == 0.001);
  CHECK(cfg.learning_rate_at(10) == 0.0005);
  CHECK(cfg.learning_rate_at(11) == 0.00025);
}

TEST_CASE("config keys accept both spellings and reject bad values") {
  TrainConfig cfg;
  CHECK(cfg.set("learning-rate", "0.01"));
  CHECK(cfg.learning_rate == 0.01);
  CHECK(cfg.set("C", "4"));
  CHECK(cfg.C == 4.0);
  CHECK(cfg.set("spm_enabled", "false"));
  CHECK_FALSE(cfg.spm_enabled);
  CHECK_FALSE(cfg.set("nonsense", "1"));
  cfg.C = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg.C = 10.0;
  cfg.clip_norm = -1.0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("adam first step moves each weight by the learning rate against the gradient sign") {
  auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  Adam adam({w});
  backward(sum(mul(w, w)));  // grad = 2w
  adam.step(0.1);
  CHECK(w.at(0) == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(w.at(1) == doctest::Approx(-1.9).epsilon(1e-9));
  CHECK(w.at(2) == doctest::Approx(0.4).epsilon(1e-9));
}

TEST_CASE("global norm clipping") {
  auto a = Tensor::from({2}, {0.0, 0.0}, true);
  a.mutable_grad()[0] = 3.0;
  a.mutable_grad()[1] = 4.0;
  std::vector<Tensor> ps = {a};
  CHECK(clip_global_norm(ps, 1.0) == 5.0);
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(a.grad()[1] == doctest::Approx(0.8));
  CHECK(clip_global_norm(ps, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("ingest filters and frames pairs") {
  const std::vector<std::string> corpus = {"a b c d e f g"};
  auto voc = Vocabulary::learn(corpus, 0);
  const std::vector<std::string> src = {"a b c", "a b", "", "a b c d"};
  const std::vector<std::string> tgt = {"a b c d e", "a", "a", "b c d"};
  IngestReport report;
  auto data = ingest(src, tgt, voc, &report);
  CHECK(report.total == 4);
  CHECK(report.kept == 2);
  CHECK(report.dropped_longer == 1);
  CHECK(report.dropped_empty == 1);
  CHECK_FALSE(report.warnings.empty());
  REQUIRE(data.size() == 2);
  CHECK(data[0].target.front() == kSp.bos);
  CHECK(data[0].target.back() == kSp.eos);
  CHECK(data[1].source.size() == data[1].target.size() - 1);  // J + 1 = I kept

  const std::vector<std::string> short_tgt = {"a"};
  try {
    ingest(src, short_tgt, voc);
    FAIL("expected a line-count error");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find('4') != std::string::npos);
    CHECK(msg.find('1') != std::string::npos);
  }
}

namespace {

struct ToyCorpus {
  Vocabulary vocab;
  std::vector<Example> data;
};

ToyCorpus toy_corpus() {
  const auto src = read_all(SPM_DATA_DIR "/toy/train.src");
  const auto tgt = read_all(SPM_DATA_DIR "/toy/train.tgt");
  std::vector<std::string> both = src;
  both.insert(both.end(), tgt.begin(), tgt.end());
  auto vocab = Vocabulary::learn(both, 200);
  auto data = ingest(src, tgt, vocab);
  return {std::move(vocab), std::move(data)};
}

ModelParams toy_model(const Vocabulary& vocab, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 32;
  cfg.source_vocab = cfg.target_vocab = vocab.size();
  ModelParams p(cfg);
  p.initialize(seed);
  return p;
}

}  // namespace

TEST_CASE("toy training loss does not increase over the first ten epochs") {
  auto toy = toy_corpus();
  REQUIRE(toy.data.size() == 32);
  auto p = toy_model(toy.vocab, 31);
  TrainConfig cfg;
  cfg.dropout_rate = 0.0;
  cfg.max_epochs = 10;
  Trainer trainer(p, cfg, toy.vocab.specials());
  auto report = trainer.fit(toy.data);
  REQUIRE(report.epochs.size() == 10);
  for (std::size_t e = 1; e < report.epochs.size(); ++e)
    CHECK(report.epochs[e].train_loss <= report.epochs[e - 1].train_loss);
}

TEST_CASE("same seed, data and config give bit-identical epochs") {
  auto toy = toy_corpus();
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 2;
  auto run = [&] {
    auto p = toy_model(toy.vocab, 32);
    Trainer trainer(p, cfg, toy.vocab.specials());
    auto report = trainer.fit(toy.data);
    return std::pair{report.epochs, p.clone()};
  };
  auto [ea, pa] = run();
  auto [eb, pb] = run();
  CHECK(ea[0].train_loss == eb[0].train_loss);
  CHECK(ea[1].train_loss == eb[1].train_loss);
  auto na = pa.named_tensors(), nb = pb.named_tensors();
  for (std::size_t k = 0; k < na.size(); ++k)
    for (std::size_t i = 0; i < na[k].second.size(); ++i) CHECK(na[k].second.data()[i] == nb[k].second.data()[i]);
}

TEST_CASE("resuming from a checkpoint reproduces uninterrupted training") {
  auto toy = toy_corpus();
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 2;

  auto straight = toy_model(toy.vocab, 33);
  Trainer full(straight, cfg, toy.vocab.specials());
  full.fit(toy.data);

  auto dir = std::filesystem::temp_directory_path() / "spm_resume_test";
  std::filesystem::create_directories(dir);
  {
    auto first = toy_model(toy.vocab, 33);
    TrainConfig one = cfg;
    one.max_epochs = 1;
    Trainer t(first, one, toy.vocab.specials());
    t.fit(toy.data);
    save_checkpoint(dir / "last.ckpt", first, t.state(), t.optimizer_tensors());
  }
  auto ck = load_checkpoint(dir / "last.ckpt");
  ModelParams resumed = ck.params.clone();
  Trainer t(resumed, cfg, toy.vocab.specials());
  t.restore(ck.state, ck.extra, ck.params);
  t.fit(toy.data);
  CHECK(t.epochs_done() == 2);
  auto na = straight.named_tensors(), nb = resumed.named_tensors();
  for (std::size_t k = 0; k < na.size(); ++k)
    for (std::size_t i = 0; i < na[k].second.size(); ++i) CHECK(na[k].second.data()[i] == nb[k].second.data()[i]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("early stopping halts after the patience runs out") {
  auto toy = toy_corpus();
  TrainConfig cfg;
  cfg.learning_rate = 1e-300;  // steps vanish below one ulp, so validation never improves
  cfg.max_epochs = 15;
  cfg.patience = 3;
  auto p = toy_model(toy.vocab, 34);
  Trainer trainer(p, cfg, toy.vocab.specials());
  std::vector<Example> valid(toy.data.begin(), toy.data.begin() + 4);
  auto report = trainer.fit(toy.data, &valid);
  CHECK(report.stopped_early);
  CHECK(report.epochs.size() == 4);
  CHECK(report.best_epoch == 1);
}

TEST_CASE("epoch line format") {
  EpochStats s;
  s.epoch = 3;
  s.train_loss = 1.5;
  s.val_loss = 2.25;
  s.learning_rate = 0.001;
  CHECK(format_epoch_line(s) == "3\t1.5\t2.25\t0.001");
}
