#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "emorag/corpus.hpp"
#include "emorag/text.hpp"

namespace emorag::retrieval {

struct RetrievalHit {
  std::string record_id;
  double similarity = 0.0;  // cosine, clamped to [-1, 1]
  int rank = 0;             // 1-based
};

enum class Backend { flat, ivf };

// Immutable vector index over corpus texts. Vectors are quantized to 32-bit
// floats at build time (the on-disk representation) and queried through
// double-precision promotions renormalized to unit length, so an index and
// its save/load round-trip behave identically.
class EmbeddingIndex {
 public:
  static EmbeddingIndex build(const std::vector<corpus::SentimentRecord>& records,
                              const text::TextEmbedder& embedder, Backend backend,
                              int n_lists = 0, int n_probe = 0);

  int dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  Backend backend() const { return backend_; }
  int n_lists() const { return n_lists_; }
  int n_probe() const { return n_probe_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<int>& assignments() const { return assignments_; }

  // Sorted by similarity descending, ties by ascending record_id. IVF probes
  // extra lists when needed so the hit count only shrinks below k if the
  // corpus itself is smaller.
  std::vector<RetrievalHit> top_k(const std::vector<double>& query, int k) const;

  void save(const std::filesystem::path& path) const;
  static EmbeddingIndex load(const std::filesystem::path& path);

  // Content hash of the canonical serialized image.
  std::string fingerprint() const;

  // Rechecks the structural invariants; throws ValidationError.
  void validate() const;

 private:
  std::vector<std::uint8_t> serialize() const;
  void rebuild_working_vectors();

  int dim_ = 0;
  Backend backend_ = Backend::flat;
  int n_lists_ = 0;
  int n_probe_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> vectors_f32_;     // canonical, n x dim
  std::vector<double> vectors_;        // unit-renormalized promotion
  std::vector<float> centroids_f32_;   // ivf only, n_lists x dim
  std::vector<double> centroids_;
  std::vector<int> assignments_;       // ivf only, list id per vector
};

// Full-scan oracle: embeds every record on the fly, never touches an index.
std::vector<RetrievalHit> brute_force_top_k(
    const std::vector<corpus::SentimentRecord>& records,
    const text::TextEmbedder& embedder, const std::string& query_text, int k);

struct RetrievalCache {
  int k = 0;
  std::string index_fingerprint;
  std::map<std::string, std::vector<RetrievalHit>> entries;  // sample_id -> hits
};

RetrievalCache precompute_cache(const corpus::Dataset& dataset,
                                const EmbeddingIndex& index,
                                const text::TextEmbedder& embedder, int k);
void save_cache(const RetrievalCache& cache, const std::filesystem::path& path);
// Throws StaleCacheError when the stored fingerprint differs from expected;
// pass an empty expectation to skip the check. Malformed files raise
// CorruptionError.
RetrievalCache load_cache(const std::filesystem::path& path,
                          const std::string& expected_fingerprint = "");

}  // namespace emorag::retrieval
