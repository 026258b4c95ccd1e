#pragma once

#include <cstdint>
#include <string>

// Built-in text corpus for the character language-modeling task: a bundle of
// public-domain passages expanded to the requested size by deterministic
// sentence shuffling, so runs are reproducible without network access.

namespace diffwin::corpus {

// The raw seed passages (a few KB of public-domain English prose and verse).
const std::string& seed_text();

// At least min_bytes of text assembled from shuffled seed sentences.
std::string builtin_corpus(std::size_t min_bytes, std::uint64_t seed);

}  // namespace diffwin::corpus
