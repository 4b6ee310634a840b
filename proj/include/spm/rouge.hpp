#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace spm {

using WordList = std::vector<std::string>;

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool empty_reference = false;
};

// Lowercased whitespace tokens.
WordList rouge_tokenize(std::string_view text);

// Clipped n-gram overlap, n in {1, 2}.
RougeScore rouge_n(const WordList& sys, const WordList& ref, int n);
RougeScore rouge_l(const WordList& sys, const WordList& ref);
std::size_t lcs_length(const WordList& a, const WordList& b);

struct CorpusRouge {
  RougeScore rouge1;
  RougeScore rouge2;
  RougeScore rougeL;
};

// Macro average of per-pair precision, recall and F1.
CorpusRouge corpus_rouge(std::span<const std::pair<WordList, WordList>> pairs);

// "ROUGE-1<TAB>P<TAB>R<TAB>F1" rows.
std::string format_rouge_table(const CorpusRouge& scores);

}  // namespace spm
