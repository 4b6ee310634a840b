#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace spm {

struct SpecialIds {
  int pad = 0;
  int bos = 1;
  int eos = 2;
  int unk = 3;

  bool is_special(int id) const { return id == pad || id == bos || id == eos || id == unk; }
};

using MergeRule = std::pair<std::string, std::string>;

// Shared source/target subword inventory learned with byte-pair encoding.
//
// Words are split into UTF-8 characters and the last symbol of every word
// carries kEndOfWord, so merges never cross word boundaries and decoding
// recovers the original spacing. Ids 0..3 are the reserved specials.
class Vocabulary {
 public:
  static constexpr std::string_view kEndOfWord = "</w>";
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kUnk = "<unk>";

  // Greedy most-frequent-pair merging; ties go to the lexicographically
  // smallest (left, right) pair. Stops early once no adjacent pair remains.
  static Vocabulary learn(std::span<const std::string> lines, std::size_t num_merges);

  static Vocabulary load(const std::filesystem::path& merges_file, const std::filesystem::path& vocab_file);
  void save(const std::filesystem::path& merges_file, const std::filesystem::path& vocab_file) const;

  std::vector<std::string> segment(std::string_view line) const;
  std::vector<int> encode(std::string_view line) const;
  // Concatenates subwords, ending a word at every end-of-word marker.
  // <pad>, <bos> and <eos> are dropped; <unk> is kept as a literal token.
  std::string restore(std::span<const int> ids) const;

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  // Token with the end-of-word marker stripped, for display.
  std::string display(int id) const;
  const std::vector<MergeRule>& merges() const { return merges_; }
  const SpecialIds& specials() const { return specials_; }

 private:
  Vocabulary() = default;
  void add_token(const std::string& token);
  void index_merges();
  std::vector<std::string> segment_word(std::string_view word) const;

  std::vector<MergeRule> merges_;
  std::map<MergeRule, std::size_t> merge_rank_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  SpecialIds specials_;
};

// Splits a UTF-8 string into code-point substrings. Invalid bytes stand alone.
std::vector<std::string> utf8_chars(std::string_view text);

std::vector<std::string> split_whitespace(std::string_view line);

// Wraps encoded target ids as <bos> ... <eos>.
std::vector<int> frame_target(std::span<const int> ids, const SpecialIds& specials);

}  // namespace spm
