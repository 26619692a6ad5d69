#include "emorag/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <unordered_set>

#include "emorag/errors.hpp"
#include "emorag/hash.hpp"
#include "emorag/bytes.hpp"
#include "emorag/kernels.hpp"
#include "emorag/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace emorag::retrieval {

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint64_t kKmeansSeed = 20240101;
constexpr int kKmeansIterations = 25;
constexpr int kKmeansRestarts = 8;

void sort_hits(std::vector<RetrievalHit>& hits) {
  std::sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.record_id < b.record_id;
  });
  for (std::size_t i = 0; i < hits.size(); ++i) hits[i].rank = static_cast<int>(i) + 1;
}

double clamp_sim(double s) { return std::clamp(s, -1.0, 1.0); }

double sq_dist(const double* a, const double* b, int dim) {
  double s = 0.0;
  for (int j = 0; j < dim; ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

int nearest_centroid(const double* v, const std::vector<double>& centroids, int n_lists,
                     int dim) {
  int best = 0;
  double best_d = sq_dist(v, centroids.data(), dim);
  for (int c = 1; c < n_lists; ++c) {
    const double d = sq_dist(v, centroids.data() + static_cast<std::size_t>(c) * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

// One seeded k-means++ init then fixed Lloyd iterations; empty clusters reseed
// to the point farthest from its current centroid.
std::vector<double> kmeans_once(const std::vector<double>& points, std::size_t n, int dim,
                                int n_lists, Rng& rng) {
  std::vector<double> centroids(static_cast<std::size_t>(n_lists) * dim);
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());

  auto point = [&](std::size_t i) { return points.data() + i * dim; };
  auto centroid = [&](int c) { return centroids.data() + static_cast<std::size_t>(c) * dim; };

  std::size_t first = rng.below(n);
  std::copy(point(first), point(first) + dim, centroid(0));
  for (int c = 1; c < n_lists; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_d[i] = std::min(min_d[i], sq_dist(point(i), centroid(c - 1), dim));
      total += min_d[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_d[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    std::copy(point(pick), point(pick) + dim, centroid(c));
  }

  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < kKmeansIterations; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = nearest_centroid(point(i), centroids, n_lists, dim);
    }
    std::vector<double> sums(static_cast<std::size_t>(n_lists) * dim, 0.0);
    std::vector<int> counts(n_lists, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double* s = sums.data() + static_cast<std::size_t>(assign[i]) * dim;
      const double* v = point(i);
      for (int j = 0; j < dim; ++j) s[j] += v[j];
      ++counts[assign[i]];
    }
    for (int c = 0; c < n_lists; ++c) {
      if (counts[c] > 0) {
        double* dst = centroid(c);
        const double* s = sums.data() + static_cast<std::size_t>(c) * dim;
        for (int j = 0; j < dim; ++j) dst[j] = s[j] / counts[c];
      } else {
        std::size_t farthest = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(point(i), centroid(assign[i]), dim);
          if (d > far_d) {
            far_d = d;
            farthest = i;
          }
        }
        std::copy(point(farthest), point(farthest) + dim, centroid(c));
      }
    }
  }
  return centroids;
}

// Local optima vary a lot in list balance, so several seeded restarts run and
// the clustering with the lowest within-cluster squared distance wins. Ties
// keep the earliest restart, so the result is a pure function of the inputs.
std::vector<double> kmeans(const std::vector<double>& points, std::size_t n, int dim,
                           int n_lists) {
  std::vector<double> best;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < kKmeansRestarts; ++restart) {
    Rng rng(Rng::mix(Rng::mix(kKmeansSeed, static_cast<std::uint64_t>(n_lists)),
                     static_cast<std::uint64_t>(restart)));
    std::vector<double> centroids = kmeans_once(points, n, dim, n_lists, rng);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* v = points.data() + i * dim;
      const int c = nearest_centroid(v, centroids, n_lists, dim);
      inertia += sq_dist(v, centroids.data() + static_cast<std::size_t>(c) * dim, dim);
    }
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best = std::move(centroids);
    }
  }
  return best;
}

}  // namespace

void EmbeddingIndex::rebuild_working_vectors() {
  const std::size_t n = ids_.size();
  vectors_.assign(static_cast<std::size_t>(n) * dim_, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    const std::size_t base = i * dim_;
    for (int j = 0; j < dim_; ++j) {
      const double v = static_cast<double>(vectors_f32_[base + j]);
      vectors_[base + j] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      throw ValidationError("index vector " + std::to_string(i) + " has zero norm");
    }
    for (int j = 0; j < dim_; ++j) vectors_[base + j] /= norm;
  }
  centroids_.assign(centroids_f32_.begin(), centroids_f32_.end());
}

EmbeddingIndex EmbeddingIndex::build(const std::vector<corpus::SentimentRecord>& records,
                                     const text::TextEmbedder& embedder, Backend backend,
                                     int n_lists, int n_probe) {
  if (records.empty()) throw PreconditionError("cannot build an index over zero records");
  const std::size_t n = records.size();
  if (backend == Backend::ivf) {
    if (n_lists < 1 || static_cast<std::size_t>(n_lists) > n) {
      throw PreconditionError("ivf n_lists must be in [1, n]");
    }
    if (n_probe < 1 || n_probe > n_lists) {
      throw PreconditionError("ivf n_probe must be in [1, n_lists]");
    }
  }

  EmbeddingIndex idx;
  idx.dim_ = embedder.dim();
  idx.backend_ = backend;
  idx.n_lists_ = backend == Backend::ivf ? n_lists : 0;
  idx.n_probe_ = backend == Backend::ivf ? n_probe : 0;
  idx.ids_.reserve(n);
  idx.vectors_f32_.reserve(n * static_cast<std::size_t>(idx.dim_));

  std::unordered_set<std::string> seen;
  for (const corpus::SentimentRecord& r : records) {
    if (!seen.insert(r.id).second) {
      throw ValidationError("duplicate record id '" + r.id + "' in index build");
    }
    idx.ids_.push_back(r.id);
    const std::vector<double> v = embedder.embed(r.text);
    for (double x : v) idx.vectors_f32_.push_back(static_cast<float>(x));
  }
  idx.rebuild_working_vectors();

  if (backend == Backend::ivf) {
    std::vector<double> centroids = kmeans(idx.vectors_, n, idx.dim_, n_lists);
    idx.centroids_f32_.assign(centroids.begin(), centroids.end());
    // Promote the quantized centroids before assigning, so assignments match
    // what a loaded copy of this index would compute.
    idx.centroids_.assign(idx.centroids_f32_.begin(), idx.centroids_f32_.end());
    idx.assignments_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      idx.assignments_[i] = nearest_centroid(idx.vectors_.data() + i * idx.dim_,
                                             idx.centroids_, n_lists, idx.dim_);
    }
  }
  return idx;
}

std::vector<RetrievalHit> EmbeddingIndex::top_k(const std::vector<double>& query,
                                                int k) const {
  if (k < 1) throw PreconditionError("top_k needs k >= 1");
  if (static_cast<int>(query.size()) != dim_) {
    throw ShapeError("query dim " + std::to_string(query.size()) + " vs index dim " +
                     std::to_string(dim_));
  }
  const std::size_t n = ids_.size();
  std::vector<RetrievalHit> hits;

  if (backend_ == Backend::flat) {
    std::vector<double> sims(n);
    kernels::dot_scan(vectors_.data(), n, dim_, query.data(), sims.data());
    hits.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      hits.push_back({ids_[i], clamp_sim(sims[i]), 0});
    }
  } else {
    std::vector<std::pair<double, int>> by_dist(n_lists_);
    for (int c = 0; c < n_lists_; ++c) {
      by_dist[c] = {sq_dist(query.data(), centroids_.data() + static_cast<std::size_t>(c) * dim_,
                            dim_),
                    c};
    }
    std::sort(by_dist.begin(), by_dist.end());

    std::vector<std::vector<std::size_t>> lists(n_lists_);
    for (std::size_t i = 0; i < n; ++i) lists[assignments_[i]].push_back(i);

    // Probe the configured number of lists, then keep going only if the
    // candidate pool is still smaller than k.
    int probed = 0;
    for (const auto& [dist, c] : by_dist) {
      if (probed >= n_probe_ && hits.size() >= static_cast<std::size_t>(k)) break;
      for (std::size_t i : lists[c]) {
        double s = 0.0;
        const double* v = vectors_.data() + i * dim_;
        for (int j = 0; j < dim_; ++j) s += query[j] * v[j];
        hits.push_back({ids_[i], clamp_sim(s), 0});
      }
      ++probed;
    }
  }

  sort_hits(hits);
  if (hits.size() > static_cast<std::size_t>(k)) hits.resize(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < hits.size(); ++i) hits[i].rank = static_cast<int>(i) + 1;
  return hits;
}

std::vector<std::uint8_t> EmbeddingIndex::serialize() const {
  std::vector<std::uint8_t> out;
  out.push_back('E');
  out.push_back('M');
  out.push_back('I');
  out.push_back('X');
  bytes::put_u32(out, kFormatVersion);
  bytes::put_u32(out, static_cast<std::uint32_t>(dim_));
  out.push_back(backend_ == Backend::flat ? 0 : 1);
  if (backend_ == Backend::ivf) {
    bytes::put_u32(out, static_cast<std::uint32_t>(n_lists_));
    bytes::put_u32(out, static_cast<std::uint32_t>(n_probe_));
  }
  bytes::put_u64(out, ids_.size());
  for (const std::string& id : ids_) {
    bytes::put_u32(out, static_cast<std::uint32_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
  }
  for (float v : vectors_f32_) bytes::put_f32(out, v);
  if (backend_ == Backend::ivf) {
    for (float v : centroids_f32_) bytes::put_f32(out, v);
    for (int a : assignments_) bytes::put_u32(out, static_cast<std::uint32_t>(a));
  }
  return out;
}

void EmbeddingIndex::save(const fs::path& path) const {
  const std::vector<std::uint8_t> bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write index file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestError("short write to index file " + path.string());
}

EmbeddingIndex EmbeddingIndex::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("missing index file " + path.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  bytes::Reader r{raw.data(), raw.size(), 0, path.string()};

  r.need(4);
  if (std::memcmp(raw.data(), "EMIX", 4) != 0) {
    throw CorruptionError(path.string() + ": bad magic");
  }
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw CorruptionError(path.string() + ": unsupported version " +
                          std::to_string(version));
  }
  EmbeddingIndex idx;
  idx.dim_ = static_cast<int>(r.u32());
  if (idx.dim_ <= 0) throw CorruptionError(path.string() + ": non-positive dim");
  const std::uint8_t tag = r.u8();
  if (tag > 1) throw CorruptionError(path.string() + ": unknown backend tag");
  idx.backend_ = tag == 0 ? Backend::flat : Backend::ivf;
  if (idx.backend_ == Backend::ivf) {
    idx.n_lists_ = static_cast<int>(r.u32());
    idx.n_probe_ = static_cast<int>(r.u32());
    if (idx.n_lists_ < 1 || idx.n_probe_ < 1 || idx.n_probe_ > idx.n_lists_) {
      throw CorruptionError(path.string() + ": bad ivf parameters");
    }
  }
  const std::uint64_t n = r.u64();
  idx.ids_.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) idx.ids_.push_back(r.str());
  idx.vectors_f32_.resize(n * static_cast<std::size_t>(idx.dim_));
  for (float& v : idx.vectors_f32_) v = r.f32();
  if (idx.backend_ == Backend::ivf) {
    idx.centroids_f32_.resize(static_cast<std::size_t>(idx.n_lists_) * idx.dim_);
    for (float& v : idx.centroids_f32_) v = r.f32();
    idx.assignments_.resize(n);
    for (int& a : idx.assignments_) {
      const std::uint32_t v = r.u32();
      if (v >= static_cast<std::uint32_t>(idx.n_lists_)) {
        throw CorruptionError(path.string() + ": assignment out of range");
      }
      a = static_cast<int>(v);
    }
  }
  if (r.pos != raw.size()) {
    throw CorruptionError(path.string() + ": trailing bytes after payload");
  }
  idx.rebuild_working_vectors();
  return idx;
}

std::string EmbeddingIndex::fingerprint() const {
  const std::vector<std::uint8_t> bytes = serialize();
  return to_hex16(fnv1a64(bytes.data(), bytes.size()));
}

void EmbeddingIndex::validate() const {
  std::unordered_set<std::string> seen;
  for (const std::string& id : ids_) {
    if (!seen.insert(id).second) throw ValidationError("duplicate id '" + id + "'");
  }
  const std::size_t n = ids_.size();
  if (vectors_.size() != n * static_cast<std::size_t>(dim_)) {
    throw ValidationError("vector storage does not match n x dim");
  }
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int j = 0; j < dim_; ++j) {
      const double v = vectors_[i * dim_ + j];
      norm += v * v;
    }
    if (std::fabs(std::sqrt(norm) - 1.0) > 1e-9) {
      throw ValidationError("vector " + std::to_string(i) + " norm deviates from 1");
    }
  }
  if (backend_ == Backend::ivf) {
    if (assignments_.size() != n) throw ValidationError("assignment count mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      const int want = nearest_centroid(vectors_.data() + i * dim_, centroids_, n_lists_,
                                        dim_);
      if (want != assignments_[i]) {
        throw ValidationError("vector " + std::to_string(i) +
                              " not assigned to its nearest centroid");
      }
    }
  }
}

std::vector<RetrievalHit> brute_force_top_k(
    const std::vector<corpus::SentimentRecord>& records,
    const text::TextEmbedder& embedder, const std::string& query_text, int k) {
  if (k < 1) throw PreconditionError("top_k needs k >= 1");
  if (records.empty()) throw PreconditionError("cannot scan zero records");
  const std::vector<double> q = embedder.embed(query_text);
  std::vector<RetrievalHit> hits;
  hits.reserve(records.size());
  for (const corpus::SentimentRecord& r : records) {
    // Quantize exactly like the index so the oracle sees the same geometry.
    const std::vector<double> full = embedder.embed(r.text);
    std::vector<double> v(full.size());
    double norm = 0.0;
    for (std::size_t j = 0; j < full.size(); ++j) {
      v[j] = static_cast<double>(static_cast<float>(full[j]));
      norm += v[j] * v[j];
    }
    norm = std::sqrt(norm);
    double s = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) s += q[j] * (v[j] / norm);
    hits.push_back({r.id, clamp_sim(s), 0});
  }
  sort_hits(hits);
  if (hits.size() > static_cast<std::size_t>(k)) hits.resize(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < hits.size(); ++i) hits[i].rank = static_cast<int>(i) + 1;
  return hits;
}

RetrievalCache precompute_cache(const corpus::Dataset& dataset,
                                const EmbeddingIndex& index,
                                const text::TextEmbedder& embedder, int k) {
  if (k < 1) throw PreconditionError("cache needs k >= 1");
  RetrievalCache cache;
  cache.k = k;
  cache.index_fingerprint = index.fingerprint();
  for (const corpus::Sample& s : dataset.samples) {
    cache.entries[s.id] = index.top_k(embedder.embed(s.text), k);
  }
  return cache;
}

void save_cache(const RetrievalCache& cache, const fs::path& path) {
  nlohmann::ordered_json j;
  j["k"] = cache.k;
  j["index_fingerprint"] = cache.index_fingerprint;
  nlohmann::ordered_json entries = nlohmann::ordered_json::object();
  for (const auto& [sample_id, hits] : cache.entries) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const RetrievalHit& h : hits) {
      arr.push_back({{"record_id", h.record_id},
                     {"similarity", h.similarity},
                     {"rank", h.rank}});
    }
    entries[sample_id] = std::move(arr);
  }
  j["entries"] = std::move(entries);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write cache file " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IngestError("short write to cache file " + path.string());
}

RetrievalCache load_cache(const fs::path& path, const std::string& expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("missing cache file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw CorruptionError("cache " + path.string() + ": " + e.what());
  }
  RetrievalCache cache;
  try {
    cache.k = j.at("k").get<int>();
    cache.index_fingerprint = j.at("index_fingerprint").get<std::string>();
    for (const auto& [sample_id, arr] : j.at("entries").items()) {
      std::vector<RetrievalHit> hits;
      for (const auto& h : arr) {
        hits.push_back({h.at("record_id").get<std::string>(),
                        h.at("similarity").get<double>(), h.at("rank").get<int>()});
      }
      cache.entries[sample_id] = std::move(hits);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("cache " + path.string() + ": " + e.what());
  }
  for (const auto& [sample_id, hits] : cache.entries) {
    for (std::size_t i = 0; i < hits.size(); ++i) {
      if (hits[i].rank != static_cast<int>(i) + 1) {
        throw CorruptionError("cache " + path.string() + ": entry " + sample_id +
                              " has non-consecutive ranks");
      }
    }
  }
  if (!expected_fingerprint.empty() && cache.index_fingerprint != expected_fingerprint) {
    throw StaleCacheError("cache " + path.string() + " was built against index " +
                          cache.index_fingerprint + ", expected " + expected_fingerprint +
                          "; rebuild upstream");
  }
  return cache;
}

}  // namespace emorag::retrieval
