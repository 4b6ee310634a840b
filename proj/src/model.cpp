#include "spm/model.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace spm {

void ModelConfig::validate() const {
  if (embed_dim == 0 || hidden_dim == 0 || layers == 0) {
    throw std::invalid_argument("model dimensions and layer count must be positive");
  }
  if (source_vocab == 0 || target_vocab == 0) throw std::invalid_argument("vocabulary sizes must be positive");
}

namespace {

LstmWeights make_lstm(std::size_t in, std::size_t hidden) {
  return {Tensor::zeros({in, 4 * hidden}, true), Tensor::zeros({hidden, 4 * hidden}, true),
          Tensor::zeros({4 * hidden}, true)};
}

struct LstmOut {
  Tensor h;
  Tensor c;
};

LstmOut lstm_step(const LstmWeights& w, const Tensor& x, const Tensor& h, const Tensor& c) {
  const std::size_t hd = h.cols();
  Tensor gates = add_bias(add(matmul(x, w.input), matmul(h, w.hidden)), w.bias);
  Tensor in = sigmoid(slice(gates, 0, hd));
  Tensor forget = sigmoid(slice(gates, hd, 2 * hd));
  Tensor cand = tanh(slice(gates, 2 * hd, 3 * hd));
  Tensor out = sigmoid(slice(gates, 3 * hd, 4 * hd));
  Tensor c2 = add(mul(forget, c), mul(in, cand));
  return {mul(out, tanh(c2)), c2};
}

// keep[b] = 1 selects the fresh state, 0 carries the old one.
struct Carry {
  Tensor keep;
  Tensor hold;
};

Tensor blend(const Tensor& fresh, const Tensor& old, const Carry& carry) {
  if (!carry.keep.defined()) return fresh;
  return add(scale_rows(fresh, carry.keep), scale_rows(old, carry.hold));
}

void add_lstm_names(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                    const std::vector<LstmWeights>& layers) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string base = prefix + "." + std::to_string(l) + ".";
    out.emplace_back(base + "input", layers[l].input);
    out.emplace_back(base + "hidden", layers[l].hidden);
    out.emplace_back(base + "bias", layers[l].bias);
  }
}

}  // namespace

ModelParams::ModelParams(ModelConfig cfg) : config(cfg) {
  config.validate();
  const std::size_t d = cfg.embed_dim, h = cfg.hidden_dim;
  source_embedding = Tensor::zeros({cfg.source_vocab, d}, true);
  target_embedding = Tensor::zeros({cfg.target_vocab, d}, true);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = l == 0 ? d : h;
    encoder_forward.push_back(make_lstm(in, h));
    encoder_backward.push_back(make_lstm(in, h));
    decoder.push_back(make_lstm(l == 0 ? d + h : h, h));
  }
  attention = Tensor::zeros({h, h}, true);
  mix = Tensor::zeros({2 * h, h}, true);
  target_out = Tensor::zeros({h, cfg.target_vocab}, true);
  target_bias = Tensor::zeros({cfg.target_vocab}, true);
  source_out = Tensor::zeros({h, cfg.source_vocab}, true);
  source_bias = Tensor::zeros({cfg.source_vocab}, true);
}

void ModelParams::initialize(std::uint64_t seed, double range) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-range, range);
  for (auto& [name, t] : named_tensors()) {
    for (auto& v : t.mutable_data()) v = dist(rng);
  }
  const std::size_t h = config.hidden_dim;
  for (auto* stack : {&encoder_forward, &encoder_backward, &decoder}) {
    for (auto& layer : *stack) {
      auto b = layer.bias.mutable_data();
      std::fill(b.begin() + h, b.begin() + 2 * h, 1.0);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("source_embedding", source_embedding);
  out.emplace_back("target_embedding", target_embedding);
  add_lstm_names(out, "encoder.forward", encoder_forward);
  add_lstm_names(out, "encoder.backward", encoder_backward);
  add_lstm_names(out, "decoder", decoder);
  out.emplace_back("attention", attention);
  out.emplace_back("mix", mix);
  out.emplace_back("target_out", target_out);
  out.emplace_back("target_bias", target_bias);
  out.emplace_back("source_out", source_out);
  out.emplace_back("source_bias", source_bias);
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (auto& t : tensors()) n += t.size();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams copy(config);
  copy.copy_from(*this);
  return copy;
}

void ModelParams::copy_from(const ModelParams& other) {
  if (!(other.config == config)) throw std::invalid_argument("copy_from: model configurations differ");
  auto dst = tensors();
  auto src = other.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::copy(src[i].data().begin(), src[i].data().end(), dst[i].mutable_data().begin());
  }
}

void ModelParams::zero_grad() {
  for (auto& t : tensors()) t.zero_grad();
}

EncoderStates encode(const ModelParams& params, std::span<const std::vector<int>> sources,
                     const ForwardOptions& opts) {
  if (sources.empty()) throw std::invalid_argument("encode: empty batch");
  const std::size_t batch = sources.size(), hd = params.config.hidden_dim;
  EncoderStates enc;
  for (const auto& s : sources) {
    if (s.empty()) throw std::invalid_argument("encode: empty source sequence");
    enc.lengths.push_back(s.size());
  }
  const std::size_t len = *std::max_element(enc.lengths.begin(), enc.lengths.end());
  const bool ragged = std::any_of(enc.lengths.begin(), enc.lengths.end(), [&](std::size_t l) { return l != len; });
  if (opts.train && opts.dropout > 0.0 && !opts.rng) throw std::invalid_argument("encode: dropout needs an rng");

  std::vector<Carry> carry(len);
  if (ragged) {
    std::vector<double> mask(batch * len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
      std::vector<double> keep(batch), hold(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        keep[b] = i < enc.lengths[b] ? 1.0 : 0.0;
        hold[b] = 1.0 - keep[b];
        if (i >= enc.lengths[b]) mask[b * len + i] = -std::numeric_limits<double>::infinity();
      }
      if (std::any_of(hold.begin(), hold.end(), [](double v) { return v != 0.0; })) {
        carry[i] = {Tensor::from({batch, 1}, keep), Tensor::from({batch, 1}, hold)};
      }
    }
    enc.score_mask = Tensor::from({batch, len}, std::move(mask));
  }

  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<int> ids(batch);
    for (std::size_t b = 0; b < batch; ++b) ids[b] = i < sources[b].size() ? sources[b][i] : 0;
    inputs.push_back(embedding(params.source_embedding, ids));
  }

  std::mt19937_64 unused;
  std::mt19937_64& rng = opts.rng ? *opts.rng : unused;
  const Tensor zero = Tensor::zeros({batch, hd});
  std::vector<Tensor> fwd(len), bwd(len);
  for (std::size_t l = 0; l < params.config.layers; ++l) {
    Tensor h = zero, c = zero;
    for (std::size_t i = 0; i < len; ++i) {
      auto step = lstm_step(params.encoder_forward[l], inputs[i], h, c);
      h = blend(step.h, h, carry[i]);
      c = blend(step.c, c, carry[i]);
      fwd[i] = h;
    }
    h = zero;
    c = zero;
    for (std::size_t i = len; i-- > 0;) {
      auto step = lstm_step(params.encoder_backward[l], inputs[i], h, c);
      h = blend(step.h, h, carry[i]);
      c = blend(step.c, c, carry[i]);
      bwd[i] = h;
    }
    for (std::size_t i = 0; i < len; ++i) {
      inputs[i] = dropout(add(fwd[i], bwd[i]), opts.dropout, opts.train, rng);
    }
  }

  enc.states = std::move(inputs);
  enc.forward_last = fwd.back();
  enc.backward_first = bwd.front();
  enc.forward = std::move(fwd);
  enc.backward = std::move(bwd);
  return enc;
}

EncoderStates encode(const ModelParams& params, std::span<const int> source, const ForwardOptions& opts) {
  const std::vector<int> one(source.begin(), source.end());
  return encode(params, std::span<const std::vector<int>>(&one, 1), opts);
}

DecoderState init_decoder(const ModelParams& params, const EncoderStates& enc) {
  const std::size_t batch = enc.batch(), hd = params.config.hidden_dim;
  const Tensor zero = Tensor::zeros({batch, hd});
  DecoderState state;
  for (std::size_t l = 0; l < params.config.layers; ++l) {
    state.hidden.push_back(l == 0 ? add(enc.forward_last, enc.backward_first) : zero);
    state.cell.push_back(zero);
  }
  state.feed = zero;
  return state;
}

StepOutput decode_step(const ModelParams& params, std::span<const int> prev_ids, const DecoderState& state,
                       const EncoderStates& enc, const ForwardOptions& opts, bool source_head) {
  if (prev_ids.size() != enc.batch()) {
    throw DimensionError("decode_step: " + std::to_string(prev_ids.size()) + " previous tokens for batch of " +
                         std::to_string(enc.batch()));
  }
  if (opts.train && opts.dropout > 0.0 && !opts.rng) throw std::invalid_argument("decode_step: dropout needs an rng");
  std::mt19937_64 unused;
  std::mt19937_64& rng = opts.rng ? *opts.rng : unused;

  StepOutput out;
  Tensor input = concat({embedding(params.target_embedding, prev_ids), state.feed});
  for (std::size_t l = 0; l < params.config.layers; ++l) {
    auto step = lstm_step(params.decoder[l], input, state.hidden[l], state.cell[l]);
    out.state.hidden.push_back(step.h);
    out.state.cell.push_back(step.c);
    input = dropout(step.h, opts.dropout, opts.train, rng);
  }
  const Tensor& query = input;  // z⃗_j

  // α_j[i] ∝ exp(h_i · W z⃗_j)
  const Tensor projected = matmul(query, transpose(params.attention));
  std::vector<Tensor> scores;
  scores.reserve(enc.max_length());
  for (const auto& h : enc.states) scores.push_back(rowdot(h, projected));
  Tensor logits = concat(std::span<const Tensor>(scores));
  if (enc.score_mask.defined()) logits = add(logits, enc.score_mask);
  out.attention = softmax(logits);

  Tensor context = scale_rows(enc.states[0], slice(out.attention, 0, 1));
  for (std::size_t i = 1; i < enc.max_length(); ++i) {
    context = add(context, scale_rows(enc.states[i], slice(out.attention, i, i + 1)));
  }

  out.mixed = tanh(matmul(concat({context, query}), params.mix));
  const Tensor z = dropout(out.mixed, opts.dropout, opts.train, rng);
  out.target_probs = softmax(add_bias(matmul(z, params.target_out), params.target_bias));
  if (source_head) out.source_probs = softmax(add_bias(matmul(z, params.source_out), params.source_bias));
  out.state.feed = out.mixed;
  return out;
}

}  // namespace spm
