#include "spm/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>
#include <unordered_set>

namespace spm {

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0 && lead < 0xF8) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    if (lead >= 0xF8 || i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> words;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) words.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return words;
}

std::vector<int> frame_target(std::span<const int> ids, const SpecialIds& specials) {
  std::vector<int> framed;
  framed.reserve(ids.size() + 2);
  framed.push_back(specials.bos);
  framed.insert(framed.end(), ids.begin(), ids.end());
  framed.push_back(specials.eos);
  return framed;
}

namespace {

std::vector<std::string> initial_symbols(std::string_view word) {
  auto chars = utf8_chars(word);
  chars.back() += Vocabulary::kEndOfWord;
  return chars;
}

struct PairHash {
  std::size_t operator()(const MergeRule& p) const {
    const std::size_t h = std::hash<std::string>{}(p.first);
    return h ^ (std::hash<std::string>{}(p.second) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  }
};

// Pair statistics with O(log n) access to the best pair.
class PairStats {
 public:
  void adjust(const MergeRule& pair, long delta, std::size_t word) {
    auto& count = counts_[pair];
    if (count > 0) ranked_.erase({-count, pair});
    count += delta;
    if (count > 0) ranked_.insert({-count, pair});
    if (delta > 0) where_[pair].insert(word);
  }

  bool empty() const { return ranked_.empty(); }
  const MergeRule& best() const { return ranked_.begin()->second; }

  std::vector<std::size_t> words_with(const MergeRule& pair) const {
    auto it = where_.find(pair);
    if (it == where_.end()) return {};
    std::vector<std::size_t> out(it->second.begin(), it->second.end());
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::unordered_map<MergeRule, long, PairHash> counts_;
  std::set<std::pair<long, MergeRule>> ranked_;  // (-count, pair): best first, ties lexicographic
  std::unordered_map<MergeRule, std::unordered_set<std::size_t>, PairHash> where_;
};

void count_word(PairStats& stats, const std::vector<std::string>& syms, long freq, long sign, std::size_t word) {
  for (std::size_t i = 0; i + 1 < syms.size(); ++i) stats.adjust({syms[i], syms[i + 1]}, sign * freq, word);
}

std::vector<std::string> apply_merge(const std::vector<std::string>& syms, const MergeRule& rule) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == rule.first && syms[i + 1] == rule.second) {
      out.push_back(syms[i] + syms[i + 1]);
      ++i;
    } else {
      out.push_back(syms[i]);
    }
  }
  return out;
}

}  // namespace

void Vocabulary::add_token(const std::string& token) {
  if (ids_.contains(token)) return;
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

void Vocabulary::index_merges() {
  merge_rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) merge_rank_.emplace(merges_[r], r);
}

Vocabulary Vocabulary::learn(std::span<const std::string> lines, std::size_t num_merges) {
  std::map<std::string, long> word_freq;
  for (const auto& line : lines) {
    for (auto& w : split_whitespace(line)) {
      if (w.find(kEndOfWord) != std::string::npos) {
        throw std::invalid_argument("learn_bpe: corpus word '" + w + "' contains the end-of-word marker");
      }
      ++word_freq[w];
    }
  }
  if (word_freq.empty()) throw std::invalid_argument("learn_bpe: corpus is empty");

  std::vector<std::vector<std::string>> words;
  std::vector<long> freqs;
  std::set<std::string> alphabet;
  for (const auto& [w, f] : word_freq) {
    words.push_back(initial_symbols(w));
    freqs.push_back(f);
    alphabet.insert(words.back().begin(), words.back().end());
  }

  PairStats stats;
  for (std::size_t w = 0; w < words.size(); ++w) count_word(stats, words[w], freqs[w], +1, w);

  Vocabulary voc;
  while (voc.merges_.size() < num_merges && !stats.empty()) {
    const MergeRule rule = stats.best();
    for (std::size_t w : stats.words_with(rule)) {
      auto merged = apply_merge(words[w], rule);
      if (merged.size() == words[w].size()) continue;
      count_word(stats, words[w], freqs[w], -1, w);
      words[w] = std::move(merged);
      count_word(stats, words[w], freqs[w], +1, w);
    }
    voc.merges_.push_back(rule);
  }

  for (auto s : {kPad, kBos, kEos, kUnk}) voc.add_token(std::string(s));
  for (const auto& sym : alphabet) voc.add_token(sym);
  for (const auto& [l, r] : voc.merges_) voc.add_token(l + r);
  voc.index_merges();
  return voc;
}

Vocabulary Vocabulary::load(const std::filesystem::path& merges_file, const std::filesystem::path& vocab_file) {
  std::ifstream mf(merges_file);
  if (!mf) throw std::runtime_error("cannot open merge table " + merges_file.string());
  std::ifstream vf(vocab_file);
  if (!vf) throw std::runtime_error("cannot open vocabulary " + vocab_file.string());

  Vocabulary voc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(mf, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos) {
      throw std::runtime_error(merges_file.string() + ":" + std::to_string(lineno) + ": expected 'left right'");
    }
    voc.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }

  std::vector<std::pair<int, std::string>> entries;
  lineno = 0;
  while (std::getline(vf, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error(vocab_file.string() + ":" + std::to_string(lineno) + ": expected 'token<TAB>id'");
    }
    entries.emplace_back(std::stoi(line.substr(tab + 1)), line.substr(0, tab));
  }
  std::sort(entries.begin(), entries.end());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != static_cast<int>(i)) {
      throw std::runtime_error(vocab_file.string() + ": ids must be dense from 0, missing " + std::to_string(i));
    }
    if (voc.ids_.contains(entries[i].second)) {
      throw std::runtime_error(vocab_file.string() + ": duplicate token '" + entries[i].second + "'");
    }
    voc.add_token(entries[i].second);
  }
  if (voc.tokens_.size() < 4 || voc.tokens_[0] != kPad || voc.tokens_[1] != kBos || voc.tokens_[2] != kEos ||
      voc.tokens_[3] != kUnk) {
    throw std::runtime_error(vocab_file.string() + ": ids 0-3 must be <pad> <bos> <eos> <unk>");
  }
  voc.index_merges();
  return voc;
}

void Vocabulary::save(const std::filesystem::path& merges_file, const std::filesystem::path& vocab_file) const {
  std::ofstream mf(merges_file, std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write " + merges_file.string());
  for (const auto& [l, r] : merges_) mf << l << ' ' << r << '\n';
  std::ofstream vf(vocab_file, std::ios::binary);
  if (!vf) throw std::runtime_error("cannot write " + vocab_file.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) vf << tokens_[i] << '\t' << i << '\n';
}

std::vector<std::string> Vocabulary::segment_word(std::string_view word) const {
  auto syms = initial_symbols(word);
  while (syms.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    const MergeRule* best = nullptr;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = merge_rank_.find({syms[i], syms[i + 1]});
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = &it->first;
      }
    }
    if (!best) break;
    syms = apply_merge(syms, *best);
  }
  return syms;
}

std::vector<std::string> Vocabulary::segment(std::string_view line) const {
  std::vector<std::string> out;
  for (const auto& w : split_whitespace(line)) {
    auto syms = segment_word(w);
    out.insert(out.end(), std::make_move_iterator(syms.begin()), std::make_move_iterator(syms.end()));
  }
  return out;
}

std::vector<int> Vocabulary::encode(std::string_view line) const {
  std::vector<int> ids;
  for (const auto& s : segment(line)) ids.push_back(id(s));
  return ids;
}

std::string Vocabulary::restore(std::span<const int> ids) const {
  std::string out;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    if (!out.empty()) out += ' ';
    out += word;
    word.clear();
  };
  for (int i : ids) {
    if (i == specials_.pad || i == specials_.bos || i == specials_.eos) continue;
    const std::string& tok = token(i);
    if (tok.size() >= kEndOfWord.size() && tok.ends_with(kEndOfWord)) {
      word.append(tok, 0, tok.size() - kEndOfWord.size());
      flush();
    } else {
      word += tok;
    }
  }
  flush();
  return out;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? specials_.unk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

std::string Vocabulary::display(int id) const {
  std::string tok = token(id);
  if (tok.ends_with(kEndOfWord)) tok.resize(tok.size() - kEndOfWord.size());
  return tok;
}

}  // namespace spm
