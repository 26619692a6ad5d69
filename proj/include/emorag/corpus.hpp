#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace emorag::corpus {

enum class Split { train, validation, test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct Sample {
  std::string id;
  Split split = Split::train;
  std::string text;
  // Row-major T x d frame matrices.
  std::vector<double> audio_features;
  int audio_frames = 0;
  int audio_dim = 0;
  std::vector<double> video_features;
  int video_frames = 0;
  int video_dim = 0;
  int severity = 0;  // PHQ-8 range [0, 24]
  std::string gender;
};

struct SentimentRecord {
  std::string id;
  std::string text;
  double sentiment = 0.0;  // [-3, 3]
};

struct DatasetManifest {
  std::string name;
  int train_count = 0;
  int validation_count = 0;
  int test_count = 0;
  int audio_dim = 0;
  int video_dim = 0;
  bool synthetic = false;
  std::int64_t seed = 0;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;

  std::vector<const Sample*> split_view(Split split) const;
};

// Expects manifest.json, labels.csv, transcripts/<id>.txt, audio/<id>.csv,
// video/<id>.csv under root. Fails atomically: either every sample validates
// or nothing is returned.
Dataset load_depression_dataset(const std::filesystem::path& root);

// corpus.jsonl, one {"id", "text", "sentiment"} object per line. Order kept.
std::vector<SentimentRecord> load_sentiment_corpus(const std::filesystem::path& path);

struct FixtureSpec {
  std::int64_t seed = 7;
  int n_samples = 180;
  int n_corpus = 200;
  int audio_dim = 20;
  int video_dim = 17;
};

// Writes a complete synthetic dataset tree plus corpus.jsonl and a
// fixture_truth.json sidecar. Severity is a noisy monotone map of the mean
// sentiment of the sample's topic-mates in the corpus, so retrieval carries
// real signal. Byte-identical for equal specs; refuses a non-empty target.
void generate_fixture(const FixtureSpec& spec, const std::filesystem::path& out_root);

}  // namespace emorag::corpus
