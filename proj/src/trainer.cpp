#include "spm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace spm {

namespace {

std::string normalize_key(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (!(C > 0)) throw std::invalid_argument("C must be positive");
  if (!(clip_norm > 0)) throw std::invalid_argument("clip_norm must be positive");
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(decay_factor > 0)) throw std::invalid_argument("decay_factor must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (max_epochs < 0) throw std::invalid_argument("max_epochs must be non-negative");
  if (dropout_rate < 0 || dropout_rate >= 1) throw std::invalid_argument("dropout_rate must lie in [0, 1)");
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
}

bool TrainConfig::set(const std::string& raw_key, const std::string& value) {
  const std::string key = normalize_key(raw_key);
  if (key == "C" || key == "c") C = std::stod(value);
  else if (key == "learning_rate") learning_rate = std::stod(value);
  else if (key == "decay_factor") decay_factor = std::stod(value);
  else if (key == "decay_start_epoch") decay_start_epoch = std::stoi(value);
  else if (key == "clip_norm") clip_norm = std::stod(value);
  else if (key == "batch_size") batch_size = std::stoull(value);
  else if (key == "max_epochs") max_epochs = std::stoi(value);
  else if (key == "dropout_rate") dropout_rate = std::stod(value);
  else if (key == "spm_enabled") spm_enabled = parse_bool(value);
  else if (key == "early_stopping") early_stopping = parse_bool(value);
  else if (key == "patience") patience = std::stoi(value);
  else if (key == "seed") seed = std::stoull(value);
  else return false;
  return true;
}

double TrainConfig::learning_rate_at(int epoch) const {
  const int decays = std::max(0, epoch - decay_start_epoch);
  return learning_rate * std::pow(decay_factor, decays);
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {{"C", format_double(C)},
          {"learning_rate", format_double(learning_rate)},
          {"decay_factor", format_double(decay_factor)},
          {"decay_start_epoch", std::to_string(decay_start_epoch)},
          {"clip_norm", format_double(clip_norm)},
          {"batch_size", std::to_string(batch_size)},
          {"max_epochs", std::to_string(max_epochs)},
          {"dropout_rate", format_double(dropout_rate)},
          {"spm_enabled", spm_enabled ? "true" : "false"},
          {"early_stopping", early_stopping ? "true" : "false"},
          {"patience", std::to_string(patience)},
          {"seed", std::to_string(seed)}};
}

std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    out[normalize_key(trim(line.substr(0, eq)))] = trim(line.substr(eq + 1));
  }
  return out;
}

PaddedTarget build_padded_target(std::span<const int> framed_target, std::size_t source_length,
                                 const SpecialIds& specials) {
  if (framed_target.size() < 2 || framed_target.front() != specials.bos || framed_target.back() != specials.eos) {
    throw std::invalid_argument("build_padded_target: target must be framed by <bos> ... <eos>");
  }
  const std::size_t j = framed_target.size() - 2;
  if (j + 1 > source_length) {
    throw FilteredInputError("build_padded_target: target needs " + std::to_string(j + 1) +
                             " steps but the source has only " + std::to_string(source_length) +
                             " tokens; such pairs must be filtered out");
  }
  PaddedTarget out{{framed_target.begin(), framed_target.end()}};
  out.ids.resize(source_length + 1, specials.pad);
  return out;
}

std::vector<double> bag_of_words(std::span<const int> source, std::size_t vocab_size) {
  std::vector<double> counts(vocab_size, 0.0);
  for (int id : source) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw std::out_of_range("bag_of_words: id " + std::to_string(id) + " outside vocabulary");
    }
    counts[id] += 1.0;
  }
  return counts;
}

Tensor target_loss(std::span<const Tensor> target_probs, const PaddedTarget& yprime) {
  if (target_probs.size() + 1 != yprime.ids.size()) {
    throw DimensionError("target_loss: " + std::to_string(target_probs.size()) + " distributions for " +
                         std::to_string(yprime.ids.size() - 1) + " target positions");
  }
  Tensor total;
  for (std::size_t j = 0; j < target_probs.size(); ++j) {
    const int gold = yprime.ids[j + 1];
    Tensor term = log(gather(target_probs[j], std::span<const int>(&gold, 1)));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(sum(total), -1.0);
}

Tensor spm_loss(std::span<const Tensor> source_probs, std::span<const int> source, double C) {
  if (source_probs.size() != source.size() || source.empty()) {
    throw DimensionError("spm_loss: " + std::to_string(source_probs.size()) + " distributions for a source of " +
                         std::to_string(source.size()) + " tokens");
  }
  Tensor qsum = source_probs[0];
  for (std::size_t j = 1; j < source_probs.size(); ++j) qsum = add(qsum, source_probs[j]);
  const Tensor bag = Tensor::from(qsum.shape(), bag_of_words(source, qsum.cols()));
  const Tensor diff = sub(qsum, bag);
  return scale(sum(mul(diff, diff)), 1.0 / C);
}

Objective compute_objective(const ModelParams& params, std::span<const Example* const> batch, double C,
                            bool spm_enabled, const SpecialIds& specials, const ForwardOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("compute_objective: empty batch");
  const std::size_t n = batch.size();
  std::vector<std::vector<int>> sources;
  std::vector<PaddedTarget> targets;
  std::size_t len = 0;
  Objective obj;
  for (const Example* ex : batch) {
    sources.push_back(ex->source);
    targets.push_back(build_padded_target(ex->target, ex->source.size(), specials));
    len = std::max(len, ex->source.size());
    obj.target_tokens += ex->source.size();
  }

  const EncoderStates enc = encode(params, sources, opts);
  DecoderState state = init_decoder(params, enc);

  Tensor log_likelihood, qsum;
  std::vector<int> prev(n), gold(n);
  for (std::size_t j = 1; j <= len; ++j) {
    std::vector<double> weight(n);
    for (std::size_t b = 0; b < n; ++b) {
      const bool live = j <= sources[b].size();
      prev[b] = live ? targets[b].ids[j - 1] : specials.pad;
      gold[b] = live ? targets[b].ids[j] : specials.pad;
      weight[b] = live ? 1.0 : 0.0;
    }
    const bool ragged = std::any_of(weight.begin(), weight.end(), [](double w) { return w == 0.0; });
    const Tensor mask = ragged ? Tensor::from({n, 1}, weight) : Tensor();

    StepOutput step = decode_step(params, prev, state, enc, opts, spm_enabled);
    Tensor lp = log(gather(step.target_probs, gold));
    Tensor term = ragged ? sum(mul(lp, mask)) : sum(lp);
    log_likelihood = log_likelihood.defined() ? add(log_likelihood, term) : term;
    if (spm_enabled) {
      Tensor q = ragged ? scale_rows(step.source_probs, mask) : step.source_probs;
      qsum = qsum.defined() ? add(qsum, q) : q;
    }
    state = std::move(step.state);
  }

  obj.target = scale(log_likelihood, -1.0 / static_cast<double>(n));
  if (spm_enabled) {
    const std::size_t vs = params.config.source_vocab;
    std::vector<double> bags(n * vs, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      auto bag = bag_of_words(sources[b], vs);
      std::copy(bag.begin(), bag.end(), bags.begin() + b * vs);
    }
    const Tensor diff = sub(qsum, Tensor::from({n, vs}, std::move(bags)));
    obj.source = scale(sum(mul(diff, diff)), 1.0 / (C * static_cast<double>(n)));
    obj.total = add(obj.target, obj.source);
  } else {
    obj.total = obj.target;
  }
  return obj;
}

Objective compute_objective(const ModelParams& params, std::span<const Example> batch, double C, bool spm_enabled,
                            const SpecialIds& specials, const ForwardOptions& opts) {
  std::vector<const Example*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return compute_objective(params, ptrs, C, spm_enabled, specials, opts);
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.shape()));
    v_.push_back(Tensor::zeros(p.shape()));
  }
}

void Adam::step(double learning_rate) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k].mutable_data();
    auto g = params_[k].grad();
    auto m = m_[k].mutable_data();
    auto v = v_[k].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

double clip_global_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

std::string format_epoch_line(const EpochStats& s) {
  std::ostringstream out;
  out << s.epoch << '\t' << std::setprecision(8) << s.train_loss << '\t';
  if (std::isnan(s.val_loss)) out << "nan";
  else out << s.val_loss;
  out << '\t' << s.learning_rate;
  return out.str();
}

Trainer::Trainer(ModelParams& params, TrainConfig cfg, SpecialIds specials)
    : params_(params), best_(params.clone()), cfg_(cfg), specials_(specials), adam_(params.tensors()) {
  cfg_.validate();
}

std::vector<std::vector<const Example*>> Trainer::make_batches(const std::vector<Example>& data, int epoch) const {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                    static_cast<std::uint32_t>(epoch), 1u};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data[a].source.size() < data[b].source.size(); });
  std::vector<std::vector<const Example*>> batches;
  for (std::size_t i = 0; i < order.size(); i += cfg_.batch_size) {
    auto& batch = batches.emplace_back();
    for (std::size_t k = i; k < std::min(order.size(), i + cfg_.batch_size); ++k) batch.push_back(&data[order[k]]);
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

EpochStats Trainer::run_epoch(const std::vector<Example>& data, int epoch) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                    static_cast<std::uint32_t>(epoch), 2u};
  std::mt19937_64 dropout_rng(seq);
  const ForwardOptions opts{true, cfg_.dropout_rate, &dropout_rng};

  EpochStats stats;
  stats.epoch = epoch;
  stats.learning_rate = cfg_.learning_rate_at(epoch);
  auto tensors = params_.tensors();
  double nll = 0.0, objective = 0.0;
  std::size_t tokens = 0, sentences = 0, batch_index = 0;
  for (const auto& batch : make_batches(data, epoch)) {
    params_.zero_grad();
    Objective obj = compute_objective(params_, batch, cfg_.C, cfg_.spm_enabled, specials_, opts);
    const double loss = obj.total.item();
    if (!std::isfinite(loss)) {
      Tape::active().clear();
      throw std::runtime_error("non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                               ", batch " + std::to_string(batch_index) + " (l_trg " +
                               std::to_string(obj.target.item()) + ")");
    }
    backward(obj.total);
    clip_global_norm(tensors, cfg_.clip_norm);
    adam_.step(stats.learning_rate);

    nll += obj.target.item() * static_cast<double>(batch.size());
    objective += loss * static_cast<double>(batch.size());
    tokens += obj.target_tokens;
    sentences += batch.size();
    ++batch_index;
  }
  params_.zero_grad();
  stats.train_loss = nll / static_cast<double>(tokens);
  stats.train_objective = objective / static_cast<double>(sentences);
  return stats;
}

double Trainer::evaluate(const std::vector<Example>& data) const {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  NoGradGuard no_grad;
  std::vector<const Example*> sorted;
  for (const auto& ex : data) sorted.push_back(&ex);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const Example* a, const Example* b) { return a->source.size() < b->source.size(); });
  double nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < sorted.size(); i += cfg_.batch_size) {
    std::span<const Example* const> batch(sorted.data() + i, std::min(cfg_.batch_size, sorted.size() - i));
    Objective obj = compute_objective(params_, batch, cfg_.C, false, specials_);
    nll += obj.target.item() * static_cast<double>(batch.size());
    tokens += obj.target_tokens;
  }
  return nll / static_cast<double>(tokens);
}

TrainReport Trainer::fit(const std::vector<Example>& data, const std::vector<Example>* valid,
                         const EpochCallback& on_epoch) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const bool validate = valid && !valid->empty();
  TrainReport report;
  bool stop = false;
  while (!stop && epochs_done_ < cfg_.max_epochs) {
    const int epoch = epochs_done_ + 1;
    EpochStats stats = run_epoch(data, epoch);
    if (validate) {
      stats.val_loss = evaluate(*valid);
      if (stats.val_loss < best_val_) {
        best_val_ = stats.val_loss;
        best_epoch_ = epoch;
        bad_epochs_ = 0;
        best_.copy_from(params_);
      } else if (cfg_.early_stopping && ++bad_epochs_ >= cfg_.patience) {
        stop = true;
      }
    } else {
      best_epoch_ = epoch;
      best_.copy_from(params_);
    }
    epochs_done_ = epoch;
    history_.push_back(stats);
    if (on_epoch) on_epoch(stats, *this);
  }
  if (validate && best_epoch_ > 0) params_.copy_from(best_);
  report.epochs = history_;
  report.best_epoch = best_epoch_;
  report.best_val = best_val_;
  report.stopped_early = stop;
  return report;
}

std::map<std::string, std::string> Trainer::state() const {
  return {{"epochs_done", std::to_string(epochs_done_)},
          {"best_epoch", std::to_string(best_epoch_)},
          {"best_val", format_double(best_val_)},
          {"bad_epochs", std::to_string(bad_epochs_)},
          {"adam_steps", std::to_string(adam_.steps())}};
}

std::vector<std::pair<std::string, Tensor>> Trainer::optimizer_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto names = params_.named_tensors();
  for (std::size_t k = 0; k < names.size(); ++k) {
    out.emplace_back("adam.m/" + names[k].first, adam_.first_moments()[k]);
    out.emplace_back("adam.v/" + names[k].first, adam_.second_moments()[k]);
  }
  return out;
}

void Trainer::restore(const std::map<std::string, std::string>& state,
                      const std::vector<std::pair<std::string, Tensor>>& optimizer, const ModelParams& best) {
  epochs_done_ = std::stoi(state.at("epochs_done"));
  best_epoch_ = std::stoi(state.at("best_epoch"));
  best_val_ = std::stod(state.at("best_val"));
  bad_epochs_ = std::stoi(state.at("bad_epochs"));
  adam_.set_steps(std::stoull(state.at("adam_steps")));
  std::map<std::string, Tensor> by_name(optimizer.begin(), optimizer.end());
  const auto names = params_.named_tensors();
  for (std::size_t k = 0; k < names.size(); ++k) {
    for (auto [prefix, moments] : {std::pair{"adam.m/", &adam_.first_moments()},
                                   std::pair{"adam.v/", &adam_.second_moments()}}) {
      auto it = by_name.find(prefix + names[k].first);
      if (it == by_name.end()) throw std::runtime_error(std::string("resume: missing optimizer tensor ") + prefix + names[k].first);
      auto& dst = (*moments)[k];
      if (it->second.shape() != dst.shape()) throw std::runtime_error("resume: optimizer shape mismatch");
      std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
    }
  }
  best_.copy_from(best);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<Example> ingest(std::span<const std::string> source_lines, std::span<const std::string> target_lines,
                            const Vocabulary& vocab, IngestReport* report) {
  if (source_lines.size() != target_lines.size()) {
    throw std::invalid_argument("ingest: source has " + std::to_string(source_lines.size()) +
                                " lines but target has " + std::to_string(target_lines.size()));
  }
  IngestReport local;
  IngestReport& rep = report ? *report : local;
  rep = {};
  std::vector<Example> out;
  for (std::size_t i = 0; i < source_lines.size(); ++i) {
    ++rep.total;
    Example ex;
    ex.source = vocab.encode(source_lines[i]);
    if (ex.source.empty()) {
      ++rep.dropped_empty;
      rep.warnings.push_back("line " + std::to_string(i + 1) + ": empty source, dropped");
      continue;
    }
    ex.target = frame_target(vocab.encode(target_lines[i]), vocab.specials());
    if (ex.target.size() - 1 > ex.source.size()) {
      ++rep.dropped_longer;
      continue;
    }
    out.push_back(std::move(ex));
  }
  rep.kept = out.size();
  return out;
}

std::vector<Example> ingest(const std::filesystem::path& source_file, const std::filesystem::path& target_file,
                            const Vocabulary& vocab, IngestReport* report) {
  const auto src = read_lines(source_file);
  const auto tgt = read_lines(target_file);
  return ingest(src, tgt, vocab, report);
}

}  // namespace spm
