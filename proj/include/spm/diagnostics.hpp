#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spm/model.hpp"
#include "spm/rouge.hpp"
#include "spm/vocab.hpp"

namespace spm {

// Excess occurrences of a word type: max(0, count - 1). The repeat count of
// an output is sum_t max(0, excess_sys(t) - excess_ref(t)), so a system
// output equal to its reference always scores zero.
long repeat_count(const WordList& sys, const WordList& ref);

// |ref| - |sys|; negative when the output is longer.
long length_deficit(const WordList& sys, const WordList& ref);

struct OddGenReport {
  std::vector<long> repeat;
  std::vector<long> deficit;
  long total_repeat = 0;
  long total_deficit = 0;
};

OddGenReport oddgen_report(std::span<const std::pair<WordList, WordList>> pairs);

// Header comment line, one "index<TAB>repeat_count<TAB>length_deficit" line
// per sentence, then a "total" line.
std::string format_oddgen_report(const OddGenReport& report);

struct AlignmentMatrix {
  std::vector<std::string> row_labels;  // emitted (gold) token per step
  std::vector<std::string> col_labels;
  std::vector<std::vector<double>> values;
  std::vector<std::string> aligned;   // label of the argmax per row
  std::vector<int> aligned_index;     // attention: source position; SPM: source-vocabulary id
  std::vector<std::vector<double>> full;  // SPM only: q_j over the whole source vocabulary

  // First row: column labels. First column: "step:emitted(aligned)".
  // Cells use 6 decimals.
  std::string to_tsv() const;
};

struct Alignments {
  AlignmentMatrix attention;  // steps 1..J+1 over source positions
  AlignmentMatrix spm;        // steps 1..I over source tokens plus "<other>"
};

// Teacher-forced pass over Y' (gold target padded to the source length).
// vocab may be null, in which case ids label rows and columns.
Alignments extract_alignments(std::span<const int> source, std::span<const int> framed_target,
                              const ModelParams& params, const SpecialIds& specials,
                              const Vocabulary* vocab = nullptr);

struct TokenPair {
  int target = 0;     // y'_j
  int predicted = 0;  // argmax q_j over the source vocabulary
  bool operator==(const TokenPair&) const = default;
};

// One pair per decoding step 1..I of every (source, framed target) example.
std::vector<TokenPair> harvest_pairs(std::span<const std::pair<std::vector<int>, std::vector<int>>> examples,
                                     const ModelParams& params, const SpecialIds& specials);

struct PairCount {
  TokenPair pair;
  std::size_t count = 0;
};

// Most frequent first; ties by (target, predicted) id.
std::vector<PairCount> pair_frequencies(std::span<const TokenPair> pairs);

}  // namespace spm
