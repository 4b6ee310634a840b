#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace spm {

// Synthetic copy-with-deletion corpus. A fixed subset of the word inventory
// (deletion_rate of it) is "droppable"; every target is its source with the
// droppable words removed, so the planted alignment is known exactly.
struct CopyDeletionConfig {
  std::size_t pairs = 2000;
  std::size_t vocab = 50;
  double deletion_rate = 0.3;
  std::size_t min_length = 6;
  std::size_t max_length = 12;
  std::uint64_t seed = 7;
};

struct CopyDeletionPair {
  std::vector<std::string> source;
  std::vector<std::string> target;
  std::vector<std::size_t> kept;     // source position (0-based) of each target word
  std::vector<std::size_t> deleted;  // source positions with no target counterpart
};

struct CopyDeletionTask {
  std::vector<std::string> words;
  std::vector<std::string> droppable;
  std::vector<CopyDeletionPair> pairs;
};

std::string toy_word(std::size_t index);

CopyDeletionTask generate_copy_deletion(const CopyDeletionConfig& cfg);

std::string join_words(const std::vector<std::string>& words);

}  // namespace spm
