#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "grad_check.hpp"
#include "spm/checkpoint.hpp"
#include "spm/model.hpp"

using namespace spm;
using spm::testing::check_gradients;

namespace {

using Vec = std::vector<double>;

ModelConfig tiny_config(std::size_t d = 4, std::size_t h = 4, std::size_t vs = 8, std::size_t vt = 8) {
  ModelConfig cfg;
  cfg.embed_dim = d;
  cfg.hidden_dim = h;
  cfg.source_vocab = vs;
  cfg.target_vocab = vt;
  return cfg;
}

ModelParams tiny_model(std::uint64_t seed, double range = 0.5) {
  ModelParams p(tiny_config());
  p.initialize(seed, range);
  return p;
}

// ---- Plain-loop reference implementation -------------------------------

Vec row(const Tensor& t, std::size_t r) {
  const std::size_t n = t.cols();
  return Vec(t.data().begin() + r * n, t.data().begin() + (r + 1) * n);
}

// x (row vector) times M [in × out]
Vec vecmat(const Vec& x, const Tensor& m) {
  Vec out(m.cols(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += x[i] * m.at(i, j);
  return out;
}

Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Vec cat(Vec a, const Vec& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Vec softmax_ref(const Vec& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  Vec out(x.size());
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) total += out[i] = std::exp(x[i] - mx);
  for (auto& v : out) v /= total;
  return out;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void lstm_ref(const LstmWeights& w, const Vec& x, Vec& h, Vec& c) {
  const std::size_t hd = h.size();
  Vec g = plus(plus(vecmat(x, w.input), vecmat(h, w.hidden)), Vec(w.bias.data().begin(), w.bias.data().end()));
  for (std::size_t k = 0; k < hd; ++k) {
    const double i = sig(g[k]), f = sig(g[hd + k]), cc = std::tanh(g[2 * hd + k]), o = sig(g[3 * hd + k]);
    c[k] = f * c[k] + i * cc;
    h[k] = o * std::tanh(c[k]);
  }
}

struct RefEncoder {
  std::vector<Vec> states, fwd, bwd;
};

RefEncoder encode_ref(const ModelParams& p, const std::vector<int>& x) {
  const std::size_t hd = p.config.hidden_dim, n = x.size();
  std::vector<Vec> inputs;
  for (int id : x) inputs.push_back(row(p.source_embedding, id));
  RefEncoder enc;
  for (std::size_t l = 0; l < p.config.layers; ++l) {
    std::vector<Vec> f(n), b(n);
    Vec h(hd, 0.0), c(hd, 0.0);
    for (std::size_t i = 0; i < n; ++i) lstm_ref(p.encoder_forward[l], inputs[i], h, c), f[i] = h;
    h.assign(hd, 0.0), c.assign(hd, 0.0);
    for (std::size_t i = n; i-- > 0;) lstm_ref(p.encoder_backward[l], inputs[i], h, c), b[i] = h;
    for (std::size_t i = 0; i < n; ++i) inputs[i] = plus(f[i], b[i]);
    enc.fwd = f, enc.bwd = b;
  }
  enc.states = inputs;
  return enc;
}

struct RefStep {
  Vec z, o, q, alpha;
};

struct RefDecoder {
  std::vector<Vec> h, c;
  Vec feed;
};

RefStep decode_ref(const ModelParams& p, const RefEncoder& enc, RefDecoder& st, int prev) {
  Vec input = cat(row(p.target_embedding, prev), st.feed);
  for (std::size_t l = 0; l < p.config.layers; ++l) {
    lstm_ref(p.decoder[l], input, st.h[l], st.c[l]);
    input = st.h[l];
  }
  const Vec& query = input;
  const std::size_t hd = query.size();
  Vec wz(hd, 0.0);  // W_α z⃗
  for (std::size_t a = 0; a < hd; ++a)
    for (std::size_t b = 0; b < hd; ++b) wz[a] += p.attention.at(a, b) * query[b];
  Vec scores;
  for (const auto& h : enc.states) {
    double s = 0;
    for (std::size_t a = 0; a < hd; ++a) s += h[a] * wz[a];
    scores.push_back(s);
  }
  RefStep out;
  out.alpha = softmax_ref(scores);
  Vec ctx(hd, 0.0);
  for (std::size_t i = 0; i < enc.states.size(); ++i)
    for (std::size_t a = 0; a < hd; ++a) ctx[a] += out.alpha[i] * enc.states[i][a];
  out.z = vecmat(cat(ctx, query), p.mix);
  for (auto& v : out.z) v = std::tanh(v);
  out.o = softmax_ref(plus(vecmat(out.z, p.target_out), Vec(p.target_bias.data().begin(), p.target_bias.data().end())));
  out.q = softmax_ref(plus(vecmat(out.z, p.source_out), Vec(p.source_bias.data().begin(), p.source_bias.data().end())));
  st.feed = out.z;
  return out;
}

void check_close(std::span<const double> got, const Vec& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= tol);
}

}  // namespace

TEST_CASE("forward pass matches the plain-loop reference") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = tiny_model(seed);
    const std::vector<int> x = {4, 6, 5, 7, 4};
    const std::vector<int> y = {1, 5, 6, 7};
    auto enc = encode(p, x);
    auto ref = encode_ref(p, x);
    for (std::size_t i = 0; i < x.size(); ++i) check_close(enc.states[i].data(), ref.states[i], 1e-13);

    RefDecoder rst{{plus(ref.fwd.back(), ref.bwd.front()), Vec(4, 0.0)}, {Vec(4, 0.0), Vec(4, 0.0)}, Vec(4, 0.0)};
    auto st = init_decoder(p, enc);
    for (int prev : y) {
      auto out = decode_step(p, std::vector<int>{prev}, st, enc);
      auto want = decode_ref(p, ref, rst, prev);
      check_close(out.attention.data(), want.alpha, 1e-13);
      check_close(out.mixed.data(), want.z, 1e-13);
      check_close(out.target_probs.data(), want.o, 1e-13);
      check_close(out.source_probs.data(), want.q, 1e-13);
      st = out.state;
    }
  }
}

TEST_CASE("I=1: h_1 is the exact sum of both directions and attention is [1]") {
  auto p = tiny_model(7);
  const std::vector<int> x = {5};
  auto enc = encode(p, x);
  for (std::size_t k = 0; k < 4; ++k) CHECK(enc.states[0].data()[k] == enc.forward[0].data()[k] + enc.backward[0].data()[k]);
  auto out = decode_step(p, std::vector<int>{1}, init_decoder(p, enc), enc);
  CHECK(out.attention.size() == 1);
  CHECK(out.attention.data()[0] == 1.0);
}

TEST_CASE("states are the sum of directions at every position") {
  auto p = tiny_model(8);
  const std::vector<int> x = {4, 5, 6, 7, 4, 5};
  auto enc = encode(p, x);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(enc.states[i].data()[k] == enc.forward[i].data()[k] + enc.backward[i].data()[k]);
}

TEST_CASE("reversed input under swapped directions mirrors the forward chain") {
  auto p = tiny_model(9);
  auto swapped = p.clone();
  std::swap(swapped.encoder_forward, swapped.encoder_backward);
  const std::vector<int> x = {4, 6, 5};
  const std::vector<int> rx(x.rbegin(), x.rend());
  auto enc = encode(p, x);
  auto mirrored = encode(swapped, rx);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& want = enc.forward[i].data();
    const auto& got = mirrored.backward[x.size() - 1 - i].data();
    for (std::size_t k = 0; k < 4; ++k) CHECK(got[k] == want[k]);
  }
}

TEST_CASE("zero weights give zero encoder states and zero decoder init") {
  ModelParams p(tiny_config());
  const std::vector<int> x = {4, 5, 6};
  auto enc = encode(p, x);
  for (const auto& h : enc.states)
    for (double v : h.data()) CHECK(v == 0.0);
  auto st = init_decoder(p, enc);
  for (const auto& h : st.hidden)
    for (double v : h.data()) CHECK(v == 0.0);
  for (double v : st.feed.data()) CHECK(v == 0.0);
}

TEST_CASE("decoder init adds the boundary states") {
  ModelParams p(tiny_config(2, 2, 8, 8));
  EncoderStates enc;
  enc.forward_last = Tensor::from({1, 2}, {1, 2});
  enc.backward_first = Tensor::from({1, 2}, {3, 4});
  enc.lengths = {1};
  auto st = init_decoder(p, enc);
  CHECK(st.hidden[0].at(0) == 4.0);
  CHECK(st.hidden[0].at(1) == 6.0);
  for (double v : st.hidden[1].data()) CHECK(v == 0.0);
  for (const auto& c : st.cell)
    for (double v : c.data()) CHECK(v == 0.0);
  auto again = init_decoder(p, enc);
  CHECK(again.hidden[0].at(0) == 4.0);
}

TEST_CASE("distributions sum to one") {
  auto p = tiny_model(10);
  const std::vector<int> x = {4, 6, 5, 7};
  auto enc = encode(p, x);
  auto st = init_decoder(p, enc);
  for (int prev : {1, 4, 5, 6, 7}) {
    auto out = decode_step(p, std::vector<int>{prev}, st, enc);
    for (const auto* t : {&out.target_probs, &out.source_probs, &out.attention}) {
      double total = 0;
      for (double v : t->data()) {
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
    st = out.state;
  }
}

TEST_CASE("zero attention matrix gives uniform attention") {
  auto p = tiny_model(11);
  for (auto& v : p.attention.mutable_data()) v = 0.0;
  const std::vector<int> x = {4, 6, 5, 7, 5};
  auto enc = encode(p, x);
  auto out = decode_step(p, std::vector<int>{1}, init_decoder(p, enc), enc);
  for (double a : out.attention.data()) CHECK(a == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("the heads are independent") {
  auto p = tiny_model(12);
  const std::vector<int> x = {4, 6, 5};
  auto enc = encode(p, x);
  auto st = init_decoder(p, enc);
  auto before = decode_step(p, std::vector<int>{1}, st, enc);
  std::vector<double> o(before.target_probs.data().begin(), before.target_probs.data().end());
  std::vector<double> q(before.source_probs.data().begin(), before.source_probs.data().end());

  p.source_out.mutable_data()[3] += 0.7;
  p.source_bias.mutable_data()[5] -= 0.4;
  auto after = decode_step(p, std::vector<int>{1}, st, enc);
  for (std::size_t i = 0; i < o.size(); ++i) CHECK(after.target_probs.data()[i] == o[i]);
  bool changed = false;
  for (std::size_t i = 0; i < q.size(); ++i) changed |= after.source_probs.data()[i] != q[i];
  CHECK(changed);

  auto no_head = decode_step(p, std::vector<int>{1}, st, enc, {}, false);
  CHECK_FALSE(no_head.source_probs.defined());
  for (std::size_t i = 0; i < o.size(); ++i) CHECK(no_head.target_probs.data()[i] == o[i]);
}

TEST_CASE("batched encoding matches per-sequence encoding") {
  auto p = tiny_model(13);
  const std::vector<std::vector<int>> xs = {{4, 5, 6, 7}, {6, 5}, {7, 7, 4}};
  auto batch = encode(p, std::span<const std::vector<int>>(xs));
  auto st = init_decoder(p, batch);
  auto out = decode_step(p, std::vector<int>{1, 1, 1}, st, batch);
  for (std::size_t b = 0; b < xs.size(); ++b) {
    auto single = encode(p, xs[b]);
    for (std::size_t i = 0; i < xs[b].size(); ++i)
      for (std::size_t k = 0; k < 4; ++k) CHECK(batch.states[i].at(b, k) == doctest::Approx(single.states[i].at(0, k)).epsilon(1e-14));
    auto one = decode_step(p, std::vector<int>{1}, init_decoder(p, single), single);
    for (std::size_t t = 0; t < 8; ++t) CHECK(out.target_probs.at(b, t) == doctest::Approx(one.target_probs.at(0, t)).epsilon(1e-13));
    for (std::size_t i = xs[b].size(); i < 4; ++i) CHECK(out.attention.at(b, i) == 0.0);
  }
}

TEST_CASE("shifting attention scores leaves attention unchanged") {
  // A bias direction shared by every h_i adds the same constant to every score.
  std::mt19937_64 rng(14);
  auto s = spm::testing::random_tensor({1, 6}, rng, -3, 3, false);
  auto a = softmax(s);
  std::vector<double> shifted(s.data().begin(), s.data().end());
  for (auto& v : shifted) v -= 41.5;
  auto b = softmax(Tensor::from({1, 6}, shifted));
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(a.at(i) - b.at(i)) <= 1e-12);
}

TEST_CASE("out-of-range ids and empty sources are errors") {
  auto p = tiny_model(15);
  CHECK_THROWS(encode(p, std::vector<int>{}));
  CHECK_THROWS(encode(p, std::vector<int>{8}));
  auto enc = encode(p, std::vector<int>{4});
  CHECK_THROWS(decode_step(p, std::vector<int>{9}, init_decoder(p, enc), enc));
}

TEST_CASE("end-to-end gradient through encode and three decode steps") {
  auto p = tiny_model(16, 0.5);
  const std::vector<int> x = {4, 6, 5};
  const std::vector<int> prev = {1, 5, 6};
  const std::vector<int> gold = {5, 6, 2};
  std::vector<std::pair<std::string, Tensor>> params = p.named_tensors();
  auto build = [&] {
    auto enc = encode(p, x);
    auto st = init_decoder(p, enc);
    Tensor loss = Tensor::scalar(0.0);
    for (std::size_t j = 0; j < prev.size(); ++j) {
      auto out = decode_step(p, std::vector<int>{prev[j]}, st, enc);
      loss = sub(loss, sum(log(gather(out.target_probs, std::vector<int>{gold[j]}))));
      loss = add(loss, scale(sum(mul(out.source_probs, out.source_probs)), 0.3));
      st = out.state;
    }
    return loss;
  };
  auto r = check_gradients(params, build);
  INFO(r.worst);
  CHECK(r.checked == p.parameter_count());
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("initialization is seeded and in range") {
  auto a = tiny_model(17, 0.1);
  auto b = tiny_model(17, 0.1);
  auto na = a.named_tensors(), nb = b.named_tensors();
  for (std::size_t k = 0; k < na.size(); ++k) {
    CHECK(na[k].first == nb[k].first);
    CHECK(na[k].second.requires_grad());
    for (std::size_t i = 0; i < na[k].second.size(); ++i) {
      CHECK(na[k].second.data()[i] == nb[k].second.data()[i]);
      const bool forget_bias = na[k].first.ends_with(".bias") && i >= 4 && i < 8;
      if (forget_bias) CHECK(na[k].second.data()[i] == 1.0);
      else CHECK(std::abs(na[k].second.data()[i]) <= 0.1);
    }
  }
}

TEST_CASE("checkpoint round trip preserves every tensor bit for bit") {
  auto p = tiny_model(18);
  auto dir = std::filesystem::temp_directory_path() / "spm_ckpt_test";
  std::filesystem::create_directories(dir);
  std::map<std::string, std::string> state = {{"epoch", "3"}, {"seed", "42"}};
  std::vector<std::pair<std::string, Tensor>> extra = {{"adam.m/x", Tensor::from({2}, {0.25, -1e-300})}};
  save_checkpoint(dir / "a.ckpt", p, state, extra);
  auto ck = load_checkpoint(dir / "a.ckpt");
  CHECK(ck.params.config == p.config);
  CHECK(ck.state == state);
  auto want = p.named_tensors(), got = ck.params.named_tensors();
  REQUIRE(want.size() == got.size());
  for (std::size_t k = 0; k < want.size(); ++k) {
    CHECK(want[k].first == got[k].first);
    CHECK(want[k].second.shape() == got[k].second.shape());
    for (std::size_t i = 0; i < want[k].second.size(); ++i) CHECK(want[k].second.data()[i] == got[k].second.data()[i]);
  }
  REQUIRE(ck.extra.size() == 1);
  CHECK(ck.extra[0].second.data()[1] == -1e-300);
  CHECK(read_checkpoint_config(dir / "a.ckpt") == p.config);

  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "NOTACKPT";
  }
  CHECK_THROWS(load_checkpoint(dir / "bad.ckpt"));
  std::filesystem::remove_all(dir);
}
