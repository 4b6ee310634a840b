#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spm/model.hpp"
#include "spm/vocab.hpp"

namespace spm {

struct BeamConfig {
  std::size_t beam_size = 20;
  std::size_t max_steps = 0;  // 0: use the source length
  bool length_normalize = true;
};

struct Hypothesis {
  std::vector<int> ids;  // emitted tokens, <bos> excluded
  double logp = 0.0;
  DecoderState state;
  bool finished = false;
};

// logp / emitted length when normalizing, raw logp otherwise.
double score(const Hypothesis& hyp, bool length_normalize);

struct BeamResult {
  std::vector<int> ids;  // emitted tokens including the final <eos> when finished
  double logp = 0.0;
  double score = 0.0;
  bool truncated = false;  // no hypothesis finished within max_steps
  std::size_t expansions = 0;  // decoder steps evaluated over the whole search
};

// Shrinking beam: each step keeps the `width` best extensions of all live
// hypotheses; every extension that emits <eos> is moved to the finished pool
// and permanently reduces width by one. Only the target head is evaluated.
// <pad> and <bos> are never emitted; equal scores prefer the lower token id.
BeamResult beam_search(std::span<const int> source, const ModelParams& params, const BeamConfig& cfg,
                       const SpecialIds& specials);

// Token log-probabilities used for search, log(max(p, 1e-12)).
std::vector<double> step_log_probs(const StepOutput& step);

}  // namespace spm
