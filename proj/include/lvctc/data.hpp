#pragma once

// Synthetic utterances, character tokenization, padded batching and
// token-side time masking.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lvctc/blocks.hpp"
#include "lvctc/ctc.hpp"
#include "lvctc/random.hpp"
#include "lvctc/tensor.hpp"

namespace lvctc {

struct SyntheticTaskSpec {
  std::size_t vocab_size = 8;
  std::size_t n_min = 3, n_max = 10;  // tokens per utterance
  std::size_t r_min = 2, r_max = 4;   // prototype copies per token
  std::size_t d_feat = 16;
  // Raw frames per prototype copy. With the 1/4-rate frontend, 4 makes each
  // copy one subsampled frame.
  std::size_t frame_repeat = 4;
  double noise_std = 0.1;
  std::uint64_t prototype_seed = 1;

  void validate() const;
};

struct Utterance {
  std::string id;
  Tensor features;  // [T, d_feat]
  TokenSequence tokens;

  std::size_t frames() const { return features.dim(0); }
};

// Holds the fixed per-token prototype vectors drawn from prototype_seed.
class SyntheticTask {
 public:
  explicit SyntheticTask(const SyntheticTaskSpec &spec);

  const SyntheticTaskSpec &spec() const { return spec_; }
  const std::vector<double> &prototype(TokenId token) const { return prototypes_.at(token - 1); }

  Utterance generate(Rng &rng, std::string id) const;
  // n utterances from a stream seeded by `seed`, ids "<prefix>-<index>".
  std::vector<Utterance> generate_set(std::size_t n, std::uint64_t seed,
                                      const std::string &prefix) const;

 private:
  SyntheticTaskSpec spec_;
  std::vector<std::vector<double>> prototypes_;
};

Utterance generate_utterance(const SyntheticTaskSpec &spec, Rng &rng);

// Characters map to ids 1..|alphabet| in alphabet order; 0 is the blank.
class Tokenizer {
 public:
  explicit Tokenizer(std::string alphabet);
  // First `vocab_size` symbols of a-z, A-Z, 0-9.
  static Tokenizer for_vocab(std::size_t vocab_size);

  TokenSequence tokenize(std::string_view text) const;
  std::string detokenize(const TokenSequence &tokens) const;
  std::size_t vocab_size() const { return alphabet_.size(); }

 private:
  std::string alphabet_;
};

struct Batch {
  Tensor features;  // [B, T_max, d_feat], zero padded
  SequenceMask frames;
  std::vector<TokenSequence> tokens;
  SequenceMask token_mask;
  std::vector<std::string> ids;

  std::size_t size() const { return tokens.size(); }
  // Padded id matrix [B, N_max]; padding uses id 0.
  std::vector<std::size_t> padded_token_ids() const;
};

Batch make_batch(std::span<const Utterance> utterances);
Batch make_batch(std::span<const Utterance *const> utterances);
// Shuffles with `rng`, then chunks; the last batch may be smaller.
std::vector<Batch> make_batches(const std::vector<Utterance> &utterances,
                                std::size_t batch_size, Rng &rng);

// Number of masked token positions for a sequence of n tokens.
std::size_t token_mask_count(std::size_t n, double fraction);
// Zeroes ceil(fraction·N) distinct rows of [N, d] embeddings.
Tensor token_time_mask(const Tensor &embeddings, Rng &rng, double fraction = 0.10);
// Batched form over [B, N_max, d] using each sequence's own length and its
// own stream, so a sequence's mask does not depend on its batch mates.
Tensor token_time_mask(const Tensor &embeddings, const SequenceMask &mask,
                       std::span<Rng> rngs, double fraction = 0.10);

// One record per line: id \t ids \t base64(f32 LE features) \t T \t d_feat
void write_utterances(std::ostream &os, const std::vector<Utterance> &utterances);
std::vector<Utterance> read_utterances(std::istream &is);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace lvctc
