#include "spm/rouge.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "spm/vocab.hpp"

namespace spm {

namespace {

RougeScore make_score(double overlap, std::size_t sys_count, std::size_t ref_count) {
  RougeScore s;
  s.empty_reference = ref_count == 0;
  if (sys_count == 0 || ref_count == 0) return s;
  s.precision = overlap / static_cast<double>(sys_count);
  s.recall = overlap / static_cast<double>(ref_count);
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::map<WordList, std::size_t> ngram_counts(const WordList& words, std::size_t n) {
  std::map<WordList, std::size_t> counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) ++counts[WordList(words.begin() + i, words.begin() + i + n)];
  return counts;
}

}  // namespace

WordList rouge_tokenize(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return split_whitespace(lower);
}

RougeScore rouge_n(const WordList& sys, const WordList& ref, int n) {
  if (n != 1 && n != 2) throw std::invalid_argument("rouge_n: n must be 1 or 2");
  const auto un = static_cast<std::size_t>(n);
  const auto sys_grams = ngram_counts(sys, un);
  const auto ref_grams = ngram_counts(ref, un);
  std::size_t overlap = 0;
  for (const auto& [gram, count] : sys_grams) {
    auto it = ref_grams.find(gram);
    if (it != ref_grams.end()) overlap += std::min(count, it->second);
  }
  const std::size_t sys_total = sys.size() >= un ? sys.size() - un + 1 : 0;
  const std::size_t ref_total = ref.size() >= un ? ref.size() - un + 1 : 0;
  auto s = make_score(static_cast<double>(overlap), sys_total, ref_total);
  s.empty_reference = ref.empty();
  return s;
}

std::size_t lcs_length(const WordList& a, const WordList& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const WordList& sys, const WordList& ref) {
  return make_score(static_cast<double>(lcs_length(sys, ref)), sys.size(), ref.size());
}

CorpusRouge corpus_rouge(std::span<const std::pair<WordList, WordList>> pairs) {
  if (pairs.empty()) throw std::invalid_argument("corpus_rouge: no sentence pairs");
  CorpusRouge total;
  auto accumulate = [](RougeScore& acc, const RougeScore& s) {
    acc.precision += s.precision;
    acc.recall += s.recall;
    acc.f1 += s.f1;
    acc.empty_reference = acc.empty_reference || s.empty_reference;
  };
  for (const auto& [sys, ref] : pairs) {
    accumulate(total.rouge1, rouge_n(sys, ref, 1));
    accumulate(total.rouge2, rouge_n(sys, ref, 2));
    accumulate(total.rougeL, rouge_l(sys, ref));
  }
  const double n = static_cast<double>(pairs.size());
  for (auto* s : {&total.rouge1, &total.rouge2, &total.rougeL}) {
    s->precision /= n;
    s->recall /= n;
    s->f1 /= n;
  }
  return total;
}

std::string format_rouge_table(const CorpusRouge& scores) {
  std::string out;
  char buf[128];
  for (auto [name, s] : {std::pair{"ROUGE-1", &scores.rouge1}, std::pair{"ROUGE-2", &scores.rouge2},
                         std::pair{"ROUGE-L", &scores.rougeL}}) {
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\n", name, s->precision, s->recall, s->f1);
    out += buf;
  }
  return out;
}

}  // namespace spm
