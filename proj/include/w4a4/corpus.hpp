#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace w4a4 {

/// Byte-level tokens (0..255).
std::vector<std::int32_t> byte_tokens(std::string_view text);
/// Throws InputError if the file is missing or empty.
std::vector<std::int32_t> load_tokens(const std::filesystem::path& path);

struct Corpus {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> eval;
};

/// The last `eval_fraction` of the stream is held out.
Corpus split_corpus(std::vector<std::int32_t> tokens, double eval_fraction = 0.1);

/// Random windows of `len + 1` tokens; inputs are the first len, targets the last len.
class BatchSampler {
 public:
  BatchSampler(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t len, std::uint64_t seed);

  void next(std::vector<std::int32_t>& inputs, std::vector<std::int32_t>& targets);
  std::size_t batch() const { return batch_; }
  std::size_t len() const { return len_; }

  /// Serialized engine state (std::mt19937_64 stream format).
  std::string rng_state() const;
  void set_rng_state(const std::string& s);

 private:
  std::span<const std::int32_t> tokens_;
  std::size_t batch_, len_;
  std::mt19937_64 rng_;
};

}  // namespace w4a4
