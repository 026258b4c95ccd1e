#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "diffwin/rng.hpp"

// Desk-scale task generators. Every sample is a pure function of
// (seed, split, index); the train and eval streams draw from disjoint key
// spaces so held-out data never leaks into training.

namespace diffwin::tasks {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

enum class Split { train, eval };

// Key for one sample; distinct splits use distinct tags.
std::uint64_t sample_key(std::uint64_t seed, Split split, std::uint64_t index);

struct Sample {
  std::vector<int> src;  // input tokens
  std::vector<int> tgt;  // copy: target sequence; char_lm: next-token targets
  int label = -1;        // toy_sva
};

class Generator {
 public:
  virtual ~Generator() = default;
  virtual Sample sample(Split split, std::uint64_t index) const = 0;
  virtual int vocab_size() const = 0;
};

// Uniform random sequences; target equals source.
class CopyTask : public Generator {
 public:
  CopyTask(std::uint64_t seed, int vocab, int len_min, int len_max);
  Sample sample(Split split, std::uint64_t index) const override;
  int vocab_size() const override { return vocab_; }

 private:
  std::uint64_t seed_;
  int vocab_, len_min_, len_max_;
};

// SUBJ_{sg|pl} (ATTR)* (DISTRACTOR_{sg|pl})^depth VERB_{sg|pl};
// label = 1 iff subject and verb numbers agree. Labels are balanced by
// construction; distractor nouns carry their own number marking.
class SvaTask : public Generator {
 public:
  SvaTask(std::uint64_t seed, int depth);
  Sample sample(Split split, std::uint64_t index) const override;
  int vocab_size() const override;
  static int num_classes() { return 2; }

  // Recomputes the agreement label from a token sequence (test hook).
  static int label_of(const std::vector<int>& tokens);

  static constexpr int kSubjSg = 1, kSubjPl = 2, kVerbSg = 3, kVerbPl = 4;

 private:
  std::uint64_t seed_;
  int depth_;
};

// Contiguous character windows over a UTF-8 corpus; targets are the inputs
// shifted by one. Window starts tile the corpus at seq_len strides and are
// hash-partitioned into train and eval sets.
class CharLmTask : public Generator {
 public:
  CharLmTask(std::string corpus_utf8, std::uint64_t seed, int seq_len);
  Sample sample(Split split, std::uint64_t index) const override;
  int vocab_size() const override { return static_cast<int>(vocab_.size()); }

  int seq_len() const { return seq_len_; }
  std::size_t replaced_bytes() const { return replaced_; }  // invalid UTF-8 count
  std::size_t window_count(Split split) const;
  const std::vector<std::size_t>& window_starts() const { return starts_; }

  // Mean negative log-likelihood per token of the add-one-smoothed unigram
  // distribution fitted on the train split and scored on the given split.
  double unigram_nll(Split split) const;

 private:
  Sample window_at(std::size_t start) const;

  std::vector<std::uint32_t> text_;       // code points
  std::vector<std::uint32_t> vocab_;      // sorted unique code points
  std::vector<int> ids_;                  // text_ mapped to vocab indices
  std::vector<std::size_t> starts_;       // all window starts (tiling)
  std::vector<std::size_t> train_windows_, eval_windows_;
  std::uint64_t seed_;
  int seq_len_;
  std::size_t replaced_ = 0;
};

// Decodes UTF-8, replacing invalid bytes with U+FFFD; counts replacements.
std::vector<std::uint32_t> decode_utf8(const std::string& bytes, std::size_t* replaced);

}  // namespace diffwin::tasks
