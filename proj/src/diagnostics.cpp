#include "spm/diagnostics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "spm/trainer.hpp"

namespace spm {

long repeat_count(const WordList& sys, const WordList& ref) {
  std::map<std::string, long> sys_counts, ref_counts;
  for (const auto& w : sys) ++sys_counts[w];
  for (const auto& w : ref) ++ref_counts[w];
  long total = 0;
  for (const auto& [word, count] : sys_counts) {
    const long excess_sys = std::max(0L, count - 1);
    auto it = ref_counts.find(word);
    const long excess_ref = it == ref_counts.end() ? 0 : std::max(0L, it->second - 1);
    total += std::max(0L, excess_sys - excess_ref);
  }
  return total;
}

long length_deficit(const WordList& sys, const WordList& ref) {
  return static_cast<long>(ref.size()) - static_cast<long>(sys.size());
}

OddGenReport oddgen_report(std::span<const std::pair<WordList, WordList>> pairs) {
  OddGenReport r;
  for (const auto& [sys, ref] : pairs) {
    r.repeat.push_back(repeat_count(sys, ref));
    r.deficit.push_back(length_deficit(sys, ref));
    r.total_repeat += r.repeat.back();
    r.total_deficit += r.deficit.back();
  }
  return r;
}

std::string format_oddgen_report(const OddGenReport& report) {
  std::string out =
      "# repeat_count = sum over word types t of max(0, excess_sys(t) - excess_ref(t)), "
      "excess(t) = max(0, count(t) - 1); length_deficit = |ref| - |sys|\n"
      "index\trepeat_count\tlength_deficit\n";
  for (std::size_t i = 0; i < report.repeat.size(); ++i) {
    out += std::to_string(i + 1) + "\t" + std::to_string(report.repeat[i]) + "\t" +
           std::to_string(report.deficit[i]) + "\n";
  }
  out += "total\t" + std::to_string(report.total_repeat) + "\t" + std::to_string(report.total_deficit) + "\n";
  return out;
}

std::string AlignmentMatrix::to_tsv() const {
  std::string out;
  for (const auto& c : col_labels) out += "\t" + c;
  out += "\n";
  char buf[32];
  for (std::size_t r = 0; r < values.size(); ++r) {
    out += std::to_string(r + 1) + ":" + row_labels[r] + "(" + aligned[r] + ")";
    for (double v : values[r]) {
      std::snprintf(buf, sizeof buf, "\t%.6f", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

namespace {

struct Trace {
  PaddedTarget yprime;
  std::vector<std::vector<double>> attention;  // I rows over positions
  std::vector<std::vector<double>> source;     // I rows over V_s
};

Trace teacher_forced_trace(std::span<const int> source, std::span<const int> framed_target,
                           const ModelParams& params, const SpecialIds& specials) {
  NoGradGuard no_grad;
  Trace tr{build_padded_target(framed_target, source.size(), specials), {}, {}};
  const EncoderStates enc = encode(params, source);
  DecoderState state = init_decoder(params, enc);
  for (std::size_t j = 1; j <= source.size(); ++j) {
    const int prev = tr.yprime.ids[j - 1];
    StepOutput step = decode_step(params, std::span<const int>(&prev, 1), state, enc, {}, true);
    tr.attention.emplace_back(step.attention.data().begin(), step.attention.data().end());
    tr.source.emplace_back(step.source_probs.data().begin(), step.source_probs.data().end());
    state = std::move(step.state);
  }
  return tr;
}

// First index of the maximum.
std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

Alignments extract_alignments(std::span<const int> source, std::span<const int> framed_target,
                              const ModelParams& params, const SpecialIds& specials, const Vocabulary* vocab) {
  auto label = [&](int id) { return vocab ? vocab->display(id) : std::to_string(id); };
  const Trace tr = teacher_forced_trace(source, framed_target, params, specials);
  const std::size_t steps = source.size();
  const std::size_t attn_steps = framed_target.size() - 1;  // y_1 .. y_{J+1}

  Alignments out;
  auto& attn = out.attention;
  for (std::size_t i = 0; i < source.size(); ++i) attn.col_labels.push_back(std::to_string(i + 1) + ":" + label(source[i]));
  for (std::size_t j = 0; j < attn_steps; ++j) {
    const std::size_t pos = argmax(tr.attention[j]);
    attn.row_labels.push_back(label(tr.yprime.ids[j + 1]));
    attn.values.push_back(tr.attention[j]);
    attn.aligned_index.push_back(static_cast<int>(pos));
    attn.aligned.push_back(label(source[pos]));
  }

  auto& spm = out.spm;
  std::vector<int> columns;
  for (int id : source) {
    if (std::find(columns.begin(), columns.end(), id) == columns.end()) columns.push_back(id);
  }
  for (int id : columns) spm.col_labels.push_back(label(id));
  spm.col_labels.push_back("<other>");
  for (std::size_t j = 0; j < steps; ++j) {
    const auto& q = tr.source[j];
    const std::size_t best = argmax(q);
    std::vector<double> row;
    for (int id : columns) row.push_back(q[id]);
    double other = 0.0;
    for (std::size_t t = 0; t < q.size(); ++t) {
      if (std::find(columns.begin(), columns.end(), static_cast<int>(t)) == columns.end()) other = std::max(other, q[t]);
    }
    row.push_back(other);
    spm.row_labels.push_back(label(tr.yprime.ids[j + 1]));
    spm.values.push_back(std::move(row));
    spm.aligned_index.push_back(static_cast<int>(best));
    spm.aligned.push_back(label(static_cast<int>(best)));
    spm.full.push_back(q);
  }
  return out;
}

std::vector<TokenPair> harvest_pairs(std::span<const std::pair<std::vector<int>, std::vector<int>>> examples,
                                     const ModelParams& params, const SpecialIds& specials) {
  std::vector<TokenPair> pairs;
  for (const auto& [source, target] : examples) {
    const Trace tr = teacher_forced_trace(source, target, params, specials);
    for (std::size_t j = 0; j < tr.source.size(); ++j) {
      pairs.push_back({tr.yprime.ids[j + 1], static_cast<int>(argmax(tr.source[j]))});
    }
  }
  return pairs;
}

std::vector<PairCount> pair_frequencies(std::span<const TokenPair> pairs) {
  std::map<std::pair<int, int>, std::size_t> counts;
  for (const auto& p : pairs) ++counts[{p.target, p.predicted}];
  std::vector<PairCount> out;
  for (const auto& [key, count] : counts) out.push_back({{key.first, key.second}, count});
  std::stable_sort(out.begin(), out.end(), [](const PairCount& a, const PairCount& b) { return a.count > b.count; });
  return out;
}

}  // namespace spm
