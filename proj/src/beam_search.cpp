#include "spm/beam_search.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spm {

double score(const Hypothesis& hyp, bool length_normalize) {
  if (!length_normalize || hyp.ids.empty()) return hyp.logp;
  return hyp.logp / static_cast<double>(hyp.ids.size());
}

std::vector<double> step_log_probs(const StepOutput& step) {
  auto probs = step.target_probs.data();
  std::vector<double> out(probs.size());
  for (std::size_t t = 0; t < probs.size(); ++t) out[t] = std::log(std::max(probs[t], kLogClamp));
  return out;
}

namespace {

struct Candidate {
  std::size_t parent;
  int token;
  double logp;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.logp != b.logp) return a.logp > b.logp;
  if (a.token != b.token) return a.token < b.token;
  return a.parent < b.parent;
}

BeamResult to_result(const Hypothesis& h, bool normalize, bool truncated, std::size_t expansions) {
  return {h.ids, h.logp, score(h, normalize), truncated, expansions};
}

}  // namespace

BeamResult beam_search(std::span<const int> source, const ModelParams& params, const BeamConfig& cfg,
                       const SpecialIds& specials) {
  if (cfg.beam_size == 0) throw std::invalid_argument("beam_search: beam_size must be at least 1");
  NoGradGuard no_grad;
  const EncoderStates enc = encode(params, source);
  const std::size_t max_steps = cfg.max_steps ? cfg.max_steps : source.size();

  std::vector<Hypothesis> live(1);
  live[0].state = init_decoder(params, enc);
  std::vector<Hypothesis> finished;
  std::size_t width = cfg.beam_size;
  std::size_t expansions = 0;

  for (std::size_t step = 0; step < max_steps && width > 0 && !live.empty(); ++step) {
    std::vector<Candidate> candidates;
    std::vector<StepOutput> outputs;
    outputs.reserve(live.size());
    expansions += live.size();
    for (std::size_t h = 0; h < live.size(); ++h) {
      const int prev = live[h].ids.empty() ? specials.bos : live[h].ids.back();
      outputs.push_back(decode_step(params, std::span<const int>(&prev, 1), live[h].state, enc, {}, false));
      const auto logp = step_log_probs(outputs.back());
      for (std::size_t t = 0; t < logp.size(); ++t) {
        const int tok = static_cast<int>(t);
        if (tok == specials.pad || tok == specials.bos) continue;
        candidates.push_back({h, tok, live[h].logp + logp[t]});
      }
    }
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);

    std::vector<Hypothesis> next;
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = candidates[k];
      Hypothesis hyp;
      hyp.ids = live[c.parent].ids;
      hyp.ids.push_back(c.token);
      hyp.logp = c.logp;
      if (c.token == specials.eos) {
        hyp.finished = true;
        finished.push_back(std::move(hyp));
        --width;
      } else {
        hyp.state = outputs[c.parent].state;
        next.push_back(std::move(hyp));
      }
    }
    live = std::move(next);
  }

  auto best_of = [&](const std::vector<Hypothesis>& pool) {
    return std::max_element(pool.begin(), pool.end(), [&](const Hypothesis& a, const Hypothesis& b) {
      const double sa = score(a, cfg.length_normalize), sb = score(b, cfg.length_normalize);
      if (sa != sb) return sa < sb;
      return b.ids < a.ids;  // prefer the lexicographically smaller id sequence
    });
  };
  if (!finished.empty()) return to_result(*best_of(finished), cfg.length_normalize, false, expansions);
  if (live.empty()) throw std::logic_error("beam_search: no hypotheses left");
  return to_result(*best_of(live), cfg.length_normalize, true, expansions);
}

}  // namespace spm
