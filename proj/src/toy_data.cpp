#include "spm/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

namespace spm {

std::string toy_word(std::size_t index) {
  // Two letters keep every word a distinct, short BPE unit.
  std::string w;
  w += static_cast<char>('a' + index / 26 % 26);
  w += static_cast<char>('a' + index % 26);
  return w;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

CopyDeletionTask generate_copy_deletion(const CopyDeletionConfig& cfg) {
  if (cfg.vocab < 2 || cfg.min_length < 2 || cfg.max_length < cfg.min_length) {
    throw std::invalid_argument("gen-toy: need vocab >= 2 and 2 <= min_length <= max_length");
  }
  if (!(cfg.deletion_rate > 0.0 && cfg.deletion_rate < 1.0)) {
    throw std::invalid_argument("gen-toy: deletion rate must lie in (0, 1)");
  }
  std::mt19937_64 rng(cfg.seed);
  CopyDeletionTask task;
  for (std::size_t k = 0; k < cfg.vocab; ++k) task.words.push_back(toy_word(k));

  std::vector<std::size_t> order(cfg.vocab);
  for (std::size_t k = 0; k < cfg.vocab; ++k) order[k] = k;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_drop = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(cfg.deletion_rate * static_cast<double>(cfg.vocab))), 1, cfg.vocab - 1);
  std::set<std::size_t> droppable(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_drop));
  for (auto k : droppable) task.droppable.push_back(task.words[k]);

  std::uniform_int_distribution<std::size_t> length(cfg.min_length, cfg.max_length);
  std::uniform_int_distribution<std::size_t> word(0, cfg.vocab - 1);
  while (task.pairs.size() < cfg.pairs) {
    CopyDeletionPair p;
    const std::size_t len = length(rng);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t k = word(rng);
      p.source.push_back(task.words[k]);
      if (droppable.contains(k)) {
        p.deleted.push_back(i);
      } else {
        p.kept.push_back(i);
        p.target.push_back(task.words[k]);
      }
    }
    // Need at least one word on each side so J >= 1 and J + 1 <= I.
    if (p.kept.empty() || p.deleted.empty()) continue;
    task.pairs.push_back(std::move(p));
  }
  return task;
}

}  // namespace spm
