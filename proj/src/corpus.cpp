#include "w4a4/corpus.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

#include "w4a4/errors.hpp"

namespace w4a4 {

std::vector<std::int32_t> byte_tokens(std::string_view text) {
  std::vector<std::int32_t> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

std::vector<std::int32_t> load_tokens(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read corpus " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (text.empty()) throw InputError("corpus " + path.string() + " is empty");
  return byte_tokens(text);
}

Corpus split_corpus(std::vector<std::int32_t> tokens, double eval_fraction) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval fraction must be in (0, 1)");
  const auto n_eval = static_cast<std::size_t>(static_cast<double>(tokens.size()) * eval_fraction);
  if (n_eval < 2 || tokens.size() - n_eval < 2) throw InputError("corpus too small to split");
  Corpus c;
  c.eval.assign(tokens.end() - static_cast<std::ptrdiff_t>(n_eval), tokens.end());
  tokens.resize(tokens.size() - n_eval);
  c.train = std::move(tokens);
  return c;
}

BatchSampler::BatchSampler(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t len, std::uint64_t seed)
    : tokens_(tokens), batch_(batch), len_(len), rng_(seed) {
  if (batch == 0 || len == 0) throw ConfigError("batch sampler: batch and len must be >= 1");
  if (tokens.size() < len + 1) {
    throw InputError("batch sampler: corpus of " + std::to_string(tokens.size()) + " tokens is shorter than a window");
  }
}

void BatchSampler::next(std::vector<std::int32_t>& inputs, std::vector<std::int32_t>& targets) {
  inputs.resize(batch_ * len_);
  targets.resize(batch_ * len_);
  const std::uint64_t span = tokens_.size() - len_;
  for (std::size_t b = 0; b < batch_; ++b) {
    // Modulo keeps the draw independent of the library's distribution code.
    const std::size_t off = static_cast<std::size_t>(rng_() % span);
    for (std::size_t t = 0; t < len_; ++t) {
      inputs[b * len_ + t] = tokens_[off + t];
      targets[b * len_ + t] = tokens_[off + t + 1];
    }
  }
}

std::string BatchSampler::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void BatchSampler::set_rng_state(const std::string& s) {
  std::istringstream is(s);
  is >> rng_;
  if (!is) throw InputError("batch sampler: malformed rng state");
}

}  // namespace w4a4
