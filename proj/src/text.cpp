#include "emorag/text.hpp"

#include <cctype>
#include <cmath>

#include "emorag/errors.hpp"
#include "emorag/hash.hpp"

namespace emorag::text {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (u < 0x80 && !std::isalnum(u)) {
      if (!current.empty()) {
        tokens.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::uint64_t token_hash(std::string_view token, std::uint64_t seed) {
  std::uint64_t h = kFnvOffset;
  for (int shift = 0; shift < 64; shift += 8) {
    const unsigned char byte = static_cast<unsigned char>((seed >> shift) & 0xff);
    h = (h ^ byte) * kFnvPrime;
  }
  return fnv1a64(token.data(), token.size(), h);
}

int token_bucket(std::string_view token, std::uint64_t seed, int n_buckets) {
  if (n_buckets <= 0) throw PreconditionError("token_bucket needs positive bucket count");
  return static_cast<int>(token_hash(token, seed) % static_cast<std::uint64_t>(n_buckets));
}

HashingEmbedder::HashingEmbedder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw PreconditionError("embedding dim must be positive");
}

std::string HashingEmbedder::name() const {
  return "hashing-d" + std::to_string(dim_) + "-s" + std::to_string(seed_);
}

std::vector<double> HashingEmbedder::embed(std::string_view text) const {
  if (text.empty()) throw PreconditionError("cannot embed empty text");
  const std::vector<std::string> tokens = tokenize(text);
  if (tokens.empty()) {
    throw PreconditionError("text has no tokens after normalization");
  }
  std::vector<double> v(dim_, 0.0);
  for (const std::string& tok : tokens) {
    const std::uint64_t h = token_hash(tok, seed_);
    const int bucket = static_cast<int>(h % static_cast<std::uint64_t>(dim_));
    const double sign = ((h >> 32) & 1ull) ? 1.0 : -1.0;
    v[bucket] += sign;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    throw PreconditionError("token signs cancel to a zero vector; cannot normalize");
  }
  for (double& x : v) x /= norm;
  return v;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine over mismatched lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace emorag::text
