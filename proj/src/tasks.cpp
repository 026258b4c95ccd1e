#include "diffwin/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace diffwin::tasks {

namespace {
constexpr std::uint64_t kTrainTag = 0x747261696eULL;
constexpr std::uint64_t kEvalTag = 0x6576616cULL;
}  // namespace

std::uint64_t sample_key(std::uint64_t seed, Split split, std::uint64_t index) {
  return mix_key(mix_key(seed, split == Split::train ? kTrainTag : kEvalTag), index);
}

// ---------------------------------------------------------------------------
// CopyTask

CopyTask::CopyTask(std::uint64_t seed, int vocab, int len_min, int len_max)
    : seed_(seed), vocab_(vocab), len_min_(len_min), len_max_(len_max) {
  if (vocab < 3) throw std::invalid_argument("copy: vocab must reserve pad/bos/eos (>= 3)");
  if (len_min < 1 || len_max < len_min) throw std::invalid_argument("copy: empty length range");
}

Sample CopyTask::sample(Split split, std::uint64_t index) const {
  Rng rng(sample_key(seed_, split, index));
  const int len = rng.uniform_int(len_min_, len_max_);
  Sample s;
  s.src.reserve(len);
  for (int i = 0; i < len; ++i) s.src.push_back(rng.uniform_int(3, vocab_ - 1));
  s.tgt = s.src;
  return s;
}

// ---------------------------------------------------------------------------
// SvaTask

namespace {
constexpr int kAttrBase = 5;
constexpr int kAttrCount = 8;
constexpr int kDistSgBase = kAttrBase + kAttrCount;  // 13..16
constexpr int kDistCount = 4;
constexpr int kDistPlBase = kDistSgBase + kDistCount;  // 17..20
}  // namespace

SvaTask::SvaTask(std::uint64_t seed, int depth) : seed_(seed), depth_(depth) {
  if (depth < 0) throw std::invalid_argument("toy_sva: depth must be >= 0");
}

int SvaTask::vocab_size() const { return kDistPlBase + kDistCount; }

Sample SvaTask::sample(Split split, std::uint64_t index) const {
  Rng rng(sample_key(seed_, split, index));
  const bool subj_plural = rng.next_u64() & 1;
  const bool agree = rng.next_u64() & 1;
  const bool verb_plural = agree ? subj_plural : !subj_plural;

  Sample s;
  s.src.push_back(subj_plural ? kSubjPl : kSubjSg);
  const int attrs = rng.uniform_int(0, 3);
  for (int i = 0; i < attrs; ++i) s.src.push_back(kAttrBase + rng.uniform_int(0, kAttrCount - 1));
  for (int i = 0; i < depth_; ++i) {
    const bool dist_plural = rng.next_u64() & 1;
    const int base = dist_plural ? kDistPlBase : kDistSgBase;
    s.src.push_back(base + rng.uniform_int(0, kDistCount - 1));
  }
  s.src.push_back(verb_plural ? kVerbPl : kVerbSg);
  s.label = agree ? 1 : 0;
  return s;
}

int SvaTask::label_of(const std::vector<int>& tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("toy_sva: sequence too short");
  const int subj = tokens.front();
  const int verb = tokens.back();
  const bool subj_plural = subj == kSubjPl;
  const bool verb_plural = verb == kVerbPl;
  if ((subj != kSubjSg && subj != kSubjPl) || (verb != kVerbSg && verb != kVerbPl))
    throw std::invalid_argument("toy_sva: malformed sequence");
  return subj_plural == verb_plural ? 1 : 0;
}

// ---------------------------------------------------------------------------
// CharLmTask

std::vector<std::uint32_t> decode_utf8(const std::string& bytes, std::size_t* replaced) {
  std::vector<std::uint32_t> out;
  out.reserve(bytes.size());
  std::size_t bad = 0;
  std::size_t i = 0;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  while (i < n) {
    const unsigned char c = p[i];
    int extra;
    std::uint32_t cp;
    if (c < 0x80) {
      extra = 0;
      cp = c;
    } else if ((c & 0xe0) == 0xc0) {
      extra = 1;
      cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      extra = 2;
      cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      ++bad;
      out.push_back(0xfffd);
      ++i;
      continue;
    }
    if (i + static_cast<std::size_t>(extra) >= n) {  // truncated tail
      ++bad;
      out.push_back(0xfffd);
      ++i;
      continue;
    }
    bool ok = true;
    for (int k = 1; k <= extra; ++k) {
      if ((p[i + k] & 0xc0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (p[i + k] & 0x3f);
    }
    if (!ok) {
      ++bad;
      out.push_back(0xfffd);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += extra + 1;
  }
  if (replaced) *replaced = bad;
  return out;
}

CharLmTask::CharLmTask(std::string corpus_utf8, std::uint64_t seed, int seq_len)
    : seed_(seed), seq_len_(seq_len) {
  if (seq_len < 2) throw std::invalid_argument("char_lm: seq_len must be >= 2");
  text_ = decode_utf8(corpus_utf8, &replaced_);
  if (text_.size() < static_cast<std::size_t>(10) * seq_len)
    throw std::invalid_argument("char_lm: corpus shorter than 10 x seq_len characters");

  vocab_.assign(text_.begin(), text_.end());
  std::sort(vocab_.begin(), vocab_.end());
  vocab_.erase(std::unique(vocab_.begin(), vocab_.end()), vocab_.end());
  std::map<std::uint32_t, int> index;
  for (std::size_t i = 0; i < vocab_.size(); ++i) index[vocab_[i]] = static_cast<int>(i);
  ids_.reserve(text_.size());
  for (auto cp : text_) ids_.push_back(index[cp]);

  // Windows tile the corpus at seq_len strides; each needs seq_len + 1
  // characters for the shifted targets.
  for (std::size_t start = 0; start + seq_len + 1 <= text_.size();
       start += static_cast<std::size_t>(seq_len))
    starts_.push_back(start);
  for (std::size_t w = 0; w < starts_.size(); ++w) {
    if (mix_key(seed_, w) % 8 == 0)
      eval_windows_.push_back(starts_[w]);
    else
      train_windows_.push_back(starts_[w]);
  }
  if (train_windows_.empty() || eval_windows_.empty())
    throw std::invalid_argument("char_lm: corpus too small to split train/eval windows");
}

std::size_t CharLmTask::window_count(Split split) const {
  return split == Split::train ? train_windows_.size() : eval_windows_.size();
}

Sample CharLmTask::window_at(std::size_t start) const {
  Sample s;
  s.src.assign(ids_.begin() + start, ids_.begin() + start + seq_len_);
  s.tgt.assign(ids_.begin() + start + 1, ids_.begin() + start + seq_len_ + 1);
  return s;
}

Sample CharLmTask::sample(Split split, std::uint64_t index) const {
  if (split == Split::train) {
    const std::uint64_t key = sample_key(seed_, split, index);
    return window_at(train_windows_[key % train_windows_.size()]);
  }
  return window_at(eval_windows_[index % eval_windows_.size()]);
}

double CharLmTask::unigram_nll(Split split) const {
  std::vector<double> counts(vocab_.size(), 1.0);  // add-one smoothing
  double total = static_cast<double>(vocab_.size());
  for (std::size_t start : train_windows_) {
    for (int t = 0; t < seq_len_; ++t) counts[ids_[start + t]] += 1.0;
    total += seq_len_;
  }
  const auto& windows = split == Split::train ? train_windows_ : eval_windows_;
  double nll = 0.0;
  std::size_t n = 0;
  for (std::size_t start : windows) {
    for (int t = 1; t <= seq_len_; ++t) {  // score the prediction targets
      nll -= std::log(counts[ids_[start + t]] / total);
      ++n;
    }
  }
  return nll / static_cast<double>(n);
}

}  // namespace diffwin::tasks
