#include "lvctc/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace lvctc {

static_assert(std::endian::native == std::endian::little,
              "utterance and checkpoint payloads assume a little-endian host");

void SyntheticTaskSpec::validate() const {
  if (vocab_size == 0) throw ConfigError("data.vocab_size", "vocab_size must be >= 1");
  if (n_min < 1) throw ConfigError("data.n_min", "n_min must be >= 1");
  if (n_max < n_min) throw ConfigError("data.n_max", "n_max must be >= n_min");
  if (r_min < 1) throw ConfigError("data.r_min", "r_min must be >= 1");
  if (r_max < r_min) throw ConfigError("data.r_max", "r_max must be >= r_min");
  if (d_feat == 0) throw ConfigError("data.d_feat", "d_feat must be >= 1");
  if (frame_repeat == 0) throw ConfigError("data.frame_repeat", "frame_repeat must be >= 1");
  if (!(noise_std >= 0.0)) throw ConfigError("data.noise_std", "noise_std must be >= 0");
}

SyntheticTask::SyntheticTask(const SyntheticTaskSpec &spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec_.prototype_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  prototypes_.resize(spec_.vocab_size);
  for (auto &p : prototypes_) {
    p.resize(spec_.d_feat);
    for (double &v : p) v = normal(rng);
  }
}

Utterance SyntheticTask::generate(Rng &rng, std::string id) const {
  std::uniform_int_distribution<std::size_t> len(spec_.n_min, spec_.n_max);
  std::uniform_int_distribution<TokenId> tok(1, spec_.vocab_size);
  std::uniform_int_distribution<std::size_t> rep(spec_.r_min, spec_.r_max);
  std::normal_distribution<double> noise(0.0, 1.0);

  Utterance u;
  u.id = std::move(id);
  u.tokens.resize(len(rng));
  for (auto &c : u.tokens) c = tok(rng);

  std::vector<double> frames;
  std::size_t count = 0;
  for (TokenId c : u.tokens) {
    const auto &proto = prototypes_[c - 1];
    const std::size_t copies = rep(rng) * spec_.frame_repeat;
    for (std::size_t r = 0; r < copies; ++r) {
      for (double p : proto) {
        frames.push_back(spec_.noise_std > 0.0 ? p + spec_.noise_std * noise(rng) : p);
      }
      ++count;
    }
  }
  u.features = Tensor::from({count, spec_.d_feat}, std::move(frames));
  return u;
}

std::vector<Utterance> SyntheticTask::generate_set(std::size_t n, std::uint64_t seed,
                                                   const std::string &prefix) const {
  Rng rng(seed);
  std::vector<Utterance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate(rng, prefix + "-" + std::to_string(i)));
  return out;
}

Utterance generate_utterance(const SyntheticTaskSpec &spec, Rng &rng) {
  return SyntheticTask(spec).generate(rng, "utt");
}

// ---- tokenizer --------------------------------------------------------------

Tokenizer::Tokenizer(std::string alphabet) : alphabet_(std::move(alphabet)) {
  std::string sorted = alphabet_;
  std::sort(sorted.begin(), sorted.end());
  if (alphabet_.empty() || std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractError("tokenizer alphabet must be non-empty with distinct symbols");
  }
}

Tokenizer Tokenizer::for_vocab(std::size_t vocab_size) {
  static const std::string symbols =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  if (vocab_size == 0 || vocab_size > symbols.size()) {
    throw ContractError("character tokenizer supports 1.." + std::to_string(symbols.size()) +
                        " symbols, got " + std::to_string(vocab_size));
  }
  return Tokenizer(symbols.substr(0, vocab_size));
}

TokenSequence Tokenizer::tokenize(std::string_view text) const {
  if (text.empty()) throw ContractError("cannot tokenize an empty string");
  TokenSequence out;
  for (char ch : text) {
    const auto pos = alphabet_.find(ch);
    if (pos == std::string::npos) {
      throw ContractError(std::string("unknown character '") + ch + "'");
    }
    out.push_back(pos + 1);
  }
  return out;
}

std::string Tokenizer::detokenize(const TokenSequence &tokens) const {
  std::string out;
  for (TokenId c : tokens) {
    if (c == kBlank || c > alphabet_.size()) {
      throw IndexError("token id " + std::to_string(c) + " outside the alphabet");
    }
    out.push_back(alphabet_[c - 1]);
  }
  return out;
}

// ---- batching ---------------------------------------------------------------

std::vector<std::size_t> Batch::padded_token_ids() const {
  std::vector<std::size_t> ids(size() * token_mask.max_len, 0);
  for (std::size_t b = 0; b < size(); ++b)
    std::copy(tokens[b].begin(), tokens[b].end(), ids.begin() + static_cast<std::ptrdiff_t>(b * token_mask.max_len));
  return ids;
}

Batch make_batch(std::span<const Utterance *const> utterances) {
  if (utterances.empty()) throw ContractError("cannot batch zero utterances");
  const std::size_t d_feat = utterances[0]->features.dim(1);
  std::vector<std::size_t> frame_lengths, token_lengths;
  Batch batch;
  for (const Utterance *u : utterances) {
    if (u->features.rank() != 2 || u->features.dim(1) != d_feat) {
      throw DimensionError("utterance " + u->id + " has features " +
                           shape_string(u->features.shape()) + ", expected d_feat " +
                           std::to_string(d_feat));
    }
    frame_lengths.push_back(u->frames());
    token_lengths.push_back(u->tokens.size());
    batch.tokens.push_back(u->tokens);
    batch.ids.push_back(u->id);
  }
  batch.frames = SequenceMask(frame_lengths);
  batch.token_mask = SequenceMask(token_lengths);
  const std::size_t t_max = batch.frames.max_len;
  std::vector<double> feats(utterances.size() * t_max * d_feat, 0.0);
  for (std::size_t b = 0; b < utterances.size(); ++b) {
    auto src = utterances[b]->features.data();
    std::copy(src.begin(), src.end(), feats.begin() + static_cast<std::ptrdiff_t>(b * t_max * d_feat));
  }
  batch.features = Tensor::from({utterances.size(), t_max, d_feat}, std::move(feats));
  return batch;
}

Batch make_batch(std::span<const Utterance> utterances) {
  std::vector<const Utterance *> ptrs;
  for (const auto &u : utterances) ptrs.push_back(&u);
  return make_batch(std::span<const Utterance *const>(ptrs));
}

std::vector<Batch> make_batches(const std::vector<Utterance> &utterances,
                                std::size_t batch_size, Rng &rng) {
  if (utterances.empty()) throw ContractError("make_batches: no utterances");
  if (batch_size == 0) throw ContractError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(utterances.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<const Utterance *> chunk;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      chunk.push_back(&utterances[order[i]]);
    }
    batches.push_back(make_batch(std::span<const Utterance *const>(chunk)));
  }
  return batches;
}

// ---- token masking ----------------------------------------------------------

std::size_t token_mask_count(std::size_t n, double fraction) {
  if (fraction < 0.0 || fraction > 1.0) {
    throw ContractError("token mask fraction must lie in [0, 1]");
  }
  // 0.1 * 30 is 3.0000000000000004 in binary; absorb that before the ceiling.
  const double raw = fraction * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

namespace {
void choose_masked_rows(std::size_t n, std::size_t offset, double fraction, Rng &rng,
                        std::vector<double> &factors) {
  const std::size_t k = token_mask_count(n, fraction);
  if (k == 0) return;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t i = 0; i < k; ++i) factors[offset + idx[i]] = 0.0;
}
}  // namespace

Tensor token_time_mask(const Tensor &embeddings, Rng &rng, double fraction) {
  if (embeddings.rank() != 2) throw DimensionError("token_time_mask expects [N, d]");
  const std::size_t n = embeddings.dim(0);
  if (token_mask_count(n, fraction) == 0) return embeddings;
  std::vector<double> factors(n, 1.0);
  choose_masked_rows(n, 0, fraction, rng, factors);
  return scale_rows(embeddings, factors);
}

Tensor token_time_mask(const Tensor &embeddings, const SequenceMask &mask,
                       std::span<Rng> rngs, double fraction) {
  if (embeddings.rank() != 3 || embeddings.dim(0) != mask.batch() ||
      embeddings.dim(1) != mask.max_len) {
    throw DimensionError("token_time_mask: embeddings " + shape_string(embeddings.shape()) +
                         " do not match the token mask");
  }
  if (rngs.size() != mask.batch()) throw ContractError("token_time_mask: one rng per sequence");
  std::vector<double> factors(mask.batch() * mask.max_len, 1.0);
  for (std::size_t b = 0; b < mask.batch(); ++b) {
    choose_masked_rows(mask.lengths[b], b * mask.max_len, fraction, rngs[b], factors);
  }
  return scale_rows(embeddings, factors);
}

// ---- dump / load ------------------------------------------------------------

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += {kB64[(v >> 18) & 63], kB64[(v >> 12) & 63], kB64[(v >> 6) & 63], kB64[v & 63]};
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += {kB64[(v >> 18) & 63], kB64[(v >> 12) & 63], '=', '='};
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += {kB64[(v >> 18) & 63], kB64[(v >> 12) & 63], kB64[(v >> 6) & 63], '='};
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ContractError("base64 payload length is not a multiple of 4");
  auto value = [](char c) -> std::uint32_t {
    const char *p = std::strchr(kB64, c);
    if (c == '\0' || p == nullptr) throw ContractError(std::string("invalid base64 character '") + c + "'");
    return static_cast<std::uint32_t>(p - kB64);
  };
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const std::size_t pad = (text[i + 3] == '=') + (text[i + 2] == '=');
    if (pad && i + 4 != text.size()) throw ContractError("base64 padding before the end");
    std::uint32_t v = (value(text[i]) << 18) | (value(text[i + 1]) << 12);
    if (pad < 2) v |= value(text[i + 2]) << 6;
    if (pad < 1) v |= value(text[i + 3]);
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

void write_utterances(std::ostream &os, const std::vector<Utterance> &utterances) {
  for (const auto &u : utterances) {
    std::vector<std::uint8_t> bytes(u.features.numel() * sizeof(float));
    for (std::size_t i = 0; i < u.features.numel(); ++i) {
      const float f = static_cast<float>(u.features.data()[i]);
      std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
    }
    os << u.id << '\t';
    for (std::size_t i = 0; i < u.tokens.size(); ++i) os << (i ? " " : "") << u.tokens[i];
    os << '\t' << base64_encode(bytes) << '\t' << u.features.dim(0) << '\t' << u.features.dim(1)
       << '\n';
  }
}

std::vector<Utterance> read_utterances(std::istream &is) {
  std::vector<Utterance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 5) {
      throw ContractError("utterance line " + std::to_string(lineno) + ": expected 5 tab-separated fields");
    }
    Utterance u;
    u.id = fields[0];
    std::istringstream ids(fields[1]);
    for (std::size_t id; ids >> id;) u.tokens.push_back(id);
    const std::size_t frames = std::stoul(fields[3]);
    const std::size_t d_feat = std::stoul(fields[4]);
    const auto bytes = base64_decode(fields[2]);
    if (bytes.size() != frames * d_feat * sizeof(float)) {
      throw DimensionError("utterance " + u.id + ": payload of " + std::to_string(bytes.size()) +
                           " bytes does not match " + std::to_string(frames) + " x " +
                           std::to_string(d_feat));
    }
    std::vector<double> values(frames * d_feat);
    for (std::size_t i = 0; i < values.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
      values[i] = f;
    }
    u.features = Tensor::from({frames, d_feat}, std::move(values));
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace lvctc
