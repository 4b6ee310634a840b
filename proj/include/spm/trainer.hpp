#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spm/model.hpp"
#include "spm/vocab.hpp"

namespace spm {

// Defaults follow the reference headline-generation setup.
struct TrainConfig {
  double C = 10.0;  // SPM loss sensitivity: l_src = ||q~ - x~||^2 / C
  double learning_rate = 0.001;
  double decay_factor = 0.5;
  int decay_start_epoch = 9;  // lr is multiplied by decay_factor for every epoch after this one
  double clip_norm = 5.0;
  std::size_t batch_size = 256;
  int max_epochs = 15;
  double dropout_rate = 0.3;
  bool spm_enabled = true;
  bool early_stopping = true;
  int patience = 3;
  std::uint64_t seed = 20180101;

  void validate() const;
  // Sets a field from its name, e.g. "learning_rate" or "learning-rate".
  // Returns false for unknown keys.
  bool set(const std::string& key, const std::string& value);
  double learning_rate_at(int epoch) const;
  std::map<std::string, std::string> to_map() const;
};

// Reads "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path);

struct Example {
  std::vector<int> source;  // x_1..x_I
  std::vector<int> target;  // <bos> y_1..y_J <eos>
};

// Y' = y_0..y_I: the framed target followed by <pad> up to the source length.
struct PaddedTarget {
  std::vector<int> ids;
};

class FilteredInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

PaddedTarget build_padded_target(std::span<const int> framed_target, std::size_t source_length,
                                 const SpecialIds& specials);

// x~: occurrence counts of each source id.
std::vector<double> bag_of_words(std::span<const int> source, std::size_t vocab_size);

// -sum_{j=1..I} log o_j[y'_j] for one sequence.
Tensor target_loss(std::span<const Tensor> target_probs, const PaddedTarget& yprime);

// ||sum_j q_j - x~||^2 / C for one sequence.
Tensor spm_loss(std::span<const Tensor> source_probs, std::span<const int> source, double C);

struct Objective {
  Tensor target;  // batch mean of l_trg over Y'
  Tensor source;  // batch mean of l_src; undefined when the SPM is off
  Tensor total;   // target + source (or target alone)
  std::size_t target_tokens = 0;
};

// Teacher-forced forward pass over Y' for a batch of examples of any lengths.
Objective compute_objective(const ModelParams& params, std::span<const Example* const> batch, double C,
                            bool spm_enabled, const SpecialIds& specials, const ForwardOptions& opts = {});
Objective compute_objective(const ModelParams& params, std::span<const Example> batch, double C, bool spm_enabled,
                            const SpecialIds& specials, const ForwardOptions& opts = {});

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(double learning_rate);
  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  double beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
};

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor> params, double max_norm);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;       // per-token l_trg over Y', training mode
  double train_objective = 0.0;  // mean per-sentence objective
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // per-token l_trg, eval mode
  double learning_rate = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
};

// "epoch<TAB>train-loss<TAB>val-loss<TAB>lr"
std::string format_epoch_line(const EpochStats& stats);

class Trainer {
 public:
  Trainer(ModelParams& params, TrainConfig cfg, SpecialIds specials);

  using EpochCallback = std::function<void(const EpochStats&, const Trainer&)>;

  // Runs epochs until max_epochs or early stopping. With a validation set
  // the parameters end at the best validation epoch.
  TrainReport fit(const std::vector<Example>& data, const std::vector<Example>* valid = nullptr,
                  const EpochCallback& on_epoch = {});

  EpochStats run_epoch(const std::vector<Example>& data, int epoch);

  // Per-token l_trg in evaluation mode.
  double evaluate(const std::vector<Example>& data) const;

  const ModelParams& params() const { return params_; }
  const ModelParams& best_params() const { return best_; }
  const TrainConfig& config() const { return cfg_; }
  int epochs_done() const { return epochs_done_; }

  // Everything needed to resume: progress counters and optimizer moments.
  std::map<std::string, std::string> state() const;
  std::vector<std::pair<std::string, Tensor>> optimizer_tensors() const;
  void restore(const std::map<std::string, std::string>& state,
               const std::vector<std::pair<std::string, Tensor>>& optimizer, const ModelParams& best);

 private:
  std::vector<std::vector<const Example*>> make_batches(const std::vector<Example>& data, int epoch) const;

  ModelParams& params_;
  ModelParams best_;
  TrainConfig cfg_;
  SpecialIds specials_;
  Adam adam_;
  int epochs_done_ = 0;
  int best_epoch_ = 0;
  double best_val_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  std::vector<EpochStats> history_;
};

struct IngestReport {
  std::size_t total = 0;
  std::size_t kept = 0;
  std::size_t dropped_longer = 0;  // J + 1 > I after BPE
  std::size_t dropped_empty = 0;
  std::vector<std::string> warnings;
};

std::vector<Example> ingest(std::span<const std::string> source_lines, std::span<const std::string> target_lines,
                            const Vocabulary& vocab, IngestReport* report = nullptr);
std::vector<Example> ingest(const std::filesystem::path& source_file, const std::filesystem::path& target_file,
                            const Vocabulary& vocab, IngestReport* report = nullptr);

std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace spm
