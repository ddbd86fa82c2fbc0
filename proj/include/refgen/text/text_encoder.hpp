#pragma once

// Hashing-vocabulary caption embedder: fixed-length token ids, a lookup table
// and positional vectors.

#include <array>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "refgen/core/archive.hpp"
#include "refgen/nn/layers.hpp"

namespace refgen::text {

inline constexpr int kSeqLen = 50;
inline constexpr int kVocab = 4096;
inline constexpr int kPadId = 0;
inline constexpr int kNullId = 1;

using TokenSequence = std::array<int, kSeqLen>;

/// Lowercases, splits on ASCII whitespace and punctuation, hashes each token into
/// [2, kVocab). Bytes >= 0x80 count as word characters, so any UTF-8 is accepted.
inline std::vector<std::string> split_words(std::string_view caption) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : caption) {
    if (c >= 0x80 || std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline int token_id(std::string_view word) {
  return 2 + static_cast<int>(fnv1a(word) % static_cast<std::uint64_t>(kVocab - 2));
}

inline TokenSequence tokenize(std::string_view caption) {
  TokenSequence ids;
  const auto words = split_words(caption);
  if (words.empty()) {
    ids.fill(kNullId);
    return ids;
  }
  ids.fill(kPadId);
  for (std::size_t i = 0; i < words.size() && i < kSeqLen; ++i) ids[i] = token_id(words[i]);
  return ids;
}

/// Table (kVocab, d) and positions (kSeqLen, d).
template <class T>
struct TextEncoder {
  int d_text = 256;
  nn::ParamSet<T> params;
  nn::Var<T> table, positions;

  explicit TextEncoder(int d = 256, std::uint64_t seed = 0) : d_text(d) {
    REFGEN_CHECK(d > 0, "text width must be positive");
    Rng rng(derive_seed(seed, "text-encoder"));
    table = params.add("text.table", Tensor<T>::randn({kVocab, d}, rng));
    positions = params.add("text.pos", Tensor<T>::randn({kSeqLen, d}, rng, T(0.1)));
  }

  /// (kSeqLen, d) embedding; differentiable w.r.t. table and positions.
  nn::Var<T> embed(std::string_view caption) const {
    const auto ids = tokenize(caption);
    return nn::add(nn::gather_rows(table, std::vector<int>(ids.begin(), ids.end())), positions);
  }

  /// (K * kSeqLen, d): per-slot embeddings stacked in slot order.
  Tensor<T> bundle(const std::vector<std::string>& captions, int k_max) const {
    if (static_cast<int>(captions.size()) != k_max)
      throw ValidationError("bundle_references: expected " + std::to_string(k_max) + " captions, got " +
                            std::to_string(captions.size()));
    nn::NoGradGuard ng;
    Tensor<T> out({k_max * kSeqLen, d_text});
    for (int k = 0; k < k_max; ++k) {
      auto e = embed(captions[k]).value();
      std::copy(e.data.begin(), e.data.end(), out.data.begin() + static_cast<std::size_t>(k) * kSeqLen * d_text);
    }
    return out;
  }

  Tensor<T> embed_value(std::string_view caption) const {
    nn::NoGradGuard ng;
    return embed(caption).value();
  }

  void store(Archive& ar) const {
    for (const auto& [name, v] : params.items()) ar.tensors[name] = v.value().template cast<float>();
    ar.strings["text.d"] = std::to_string(d_text);
  }

  static TextEncoder restore(const Archive& ar) {
    TextEncoder enc(std::stoi(ar.string("text.d")));
    for (auto& [name, v] : enc.params.items()) {
      const auto& t = ar.tensor(name);
      require_same_shape(t.shape, v.shape(), name.c_str());
      v.mutable_value() = t.template cast<T>();
    }
    return enc;
  }
};

/// Transposes a (L, d) row-major embedding into the channel-major (d, L) layout
/// the cross-attention blocks consume.
template <class T>
Tensor<T> channel_major(const Tensor<T>& rows) {
  const int l = rows.dim(0), d = rows.dim(1);
  Tensor<T> out({d, l});
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < d; ++j) out.data[static_cast<std::size_t>(j) * l + i] = rows.data[static_cast<std::size_t>(i) * d + j];
  return out;
}

}  // namespace refgen::text
