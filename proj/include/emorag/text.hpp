#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace emorag::text {

// Lowercases, maps every non-alphanumeric byte to a space, splits on runs of
// whitespace. ASCII-only case folding; multibyte UTF-8 stays intact inside
// tokens.
std::vector<std::string> tokenize(std::string_view text);

// Seed-dependent token hash shared by the retrieval embedder and the model's
// vocabulary hashing.
std::uint64_t token_hash(std::string_view token, std::uint64_t seed);
int token_bucket(std::string_view token, std::uint64_t seed, int n_buckets);

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual int dim() const = 0;
  // Stable identifier, folded into index fingerprints.
  virtual std::string name() const = 0;
  // Unit-norm embedding; throws PreconditionError on empty/tokenless text.
  virtual std::vector<double> embed(std::string_view text) const = 0;
};

// Signed feature hashing over the token bag: each token adds +-1 to one of
// dim buckets, then the vector is L2-normalized.
class HashingEmbedder final : public TextEmbedder {
 public:
  explicit HashingEmbedder(int dim = 256, std::uint64_t seed = 0);
  int dim() const override { return dim_; }
  std::string name() const override;
  std::vector<double> embed(std::string_view text) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace emorag::text
