#include "emorag/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "emorag/errors.hpp"
#include "emorag/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace emorag::corpus {

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  throw ValidationError("unknown split enum value");
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  throw ValidationError("unknown split '" + name + "'");
}

std::vector<const Sample*> Dataset::split_view(Split split) const {
  std::vector<const Sample*> view;
  for (const Sample& s : samples) {
    if (s.split == split) view.push_back(&s);
  }
  return view;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string read_text_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("missing " + what + ": " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_lines(const std::string& blob) {
  std::vector<std::string> lines;
  std::string cur;
  for (char ch : blob) {
    if (ch == '\n') {
      if (!cur.empty() && cur.back() == '\r') cur.pop_back();
      lines.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) lines.push_back(std::move(cur));
  return lines;
}

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

int parse_int_field(const std::string& s, const std::string& context) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    throw FormatError(context + ": '" + s + "' is not an integer");
  }
  if (pos != s.size()) throw FormatError(context + ": '" + s + "' is not an integer");
  return v;
}

double parse_double_field(const std::string& s, const std::string& context) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw FormatError(context + ": '" + s + "' is not a number");
  }
  if (pos != s.size()) throw FormatError(context + ": '" + s + "' is not a number");
  return v;
}

// T x d feature table; every row must have the same width.
void load_feature_csv(const fs::path& path, const std::string& sample_id,
                      std::vector<double>& out, int& frames, int& dim) {
  const std::string blob = read_text_file(path, "feature table for sample " + sample_id);
  const std::vector<std::string> lines = split_lines(blob);
  out.clear();
  frames = 0;
  dim = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) {
      throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": empty row");
    }
    const std::vector<std::string> fields = split_csv_row(lines[i]);
    if (dim == 0) {
      dim = static_cast<int>(fields.size());
    } else if (static_cast<int>(fields.size()) != dim) {
      throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": ragged row, " +
                        std::to_string(fields.size()) + " columns vs " + std::to_string(dim));
    }
    for (const std::string& f : fields) {
      out.push_back(
          parse_double_field(f, path.string() + ":" + std::to_string(i + 1)));
    }
    ++frames;
  }
  if (frames == 0) {
    throw ValidationError("feature table for sample " + sample_id + " is empty: " +
                          path.string());
  }
}

DatasetManifest parse_manifest(const fs::path& path) {
  const std::string blob = read_text_file(path, "manifest");
  ordered_json j;
  try {
    j = ordered_json::parse(blob);
  } catch (const std::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.synthetic = j.at("source").at("synthetic").get<bool>();
    m.seed = j.at("source").at("seed").get<std::int64_t>();
    m.audio_dim = j.at("feature_dims").at("audio").get<int>();
    m.video_dim = j.at("feature_dims").at("video").get<int>();
    m.train_count = j.at("split_counts").at("train").get<int>();
    m.validation_count = j.at("split_counts").at("validation").get<int>();
    m.test_count = j.at("split_counts").at("test").get<int>();
  } catch (const std::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace

Dataset load_depression_dataset(const fs::path& root) {
  Dataset ds;
  ds.manifest = parse_manifest(root / "manifest.json");

  const std::string labels_blob = read_text_file(root / "labels.csv", "labels table");
  const std::vector<std::string> lines = split_lines(labels_blob);
  if (lines.empty() || lines[0] != "id,split,severity,gender") {
    throw FormatError("labels.csv must start with header 'id,split,severity,gender'");
  }

  std::unordered_set<std::string> seen_ids;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string context = "labels.csv:" + std::to_string(i + 1);
    const std::vector<std::string> fields = split_csv_row(lines[i]);
    if (fields.size() != 4) {
      throw FormatError(context + ": expected 4 fields, got " +
                        std::to_string(fields.size()));
    }
    Sample s;
    s.id = fields[0];
    if (s.id.empty()) throw ValidationError(context + ": empty sample id");
    if (!seen_ids.insert(s.id).second) {
      throw ValidationError(context + ": duplicate sample id '" + s.id + "'");
    }
    s.split = split_from_string(fields[1]);
    s.severity = parse_int_field(fields[2], context);
    if (s.severity < 0 || s.severity > 24) {
      throw ValidationError("sample " + s.id + ": severity " +
                            std::to_string(s.severity) + " outside [0, 24]");
    }
    s.gender = fields[3];

    s.text = read_text_file(root / "transcripts" / (s.id + ".txt"),
                            "transcript for sample " + s.id);
    if (s.text.empty()) {
      throw ValidationError("sample " + s.id + ": transcript is empty");
    }
    load_feature_csv(root / "audio" / (s.id + ".csv"), s.id, s.audio_features,
                     s.audio_frames, s.audio_dim);
    load_feature_csv(root / "video" / (s.id + ".csv"), s.id, s.video_features,
                     s.video_frames, s.video_dim);
    if (s.audio_dim != ds.manifest.audio_dim) {
      throw ValidationError("sample " + s.id + ": audio dim " +
                            std::to_string(s.audio_dim) + " vs manifest " +
                            std::to_string(ds.manifest.audio_dim));
    }
    if (s.video_dim != ds.manifest.video_dim) {
      throw ValidationError("sample " + s.id + ": video dim " +
                            std::to_string(s.video_dim) + " vs manifest " +
                            std::to_string(ds.manifest.video_dim));
    }
    ds.samples.push_back(std::move(s));
  }

  int counts[3] = {0, 0, 0};
  for (const Sample& s : ds.samples) ++counts[static_cast<int>(s.split)];
  if (counts[0] != ds.manifest.train_count || counts[1] != ds.manifest.validation_count ||
      counts[2] != ds.manifest.test_count) {
    throw ValidationError(
        "split counts disagree with manifest: loaded train/validation/test = " +
        std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + "/" +
        std::to_string(counts[2]));
  }
  return ds;
}

std::vector<SentimentRecord> load_sentiment_corpus(const fs::path& path) {
  const std::string blob = read_text_file(path, "sentiment corpus");
  std::vector<std::string> lines = split_lines(blob);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();

  std::vector<SentimentRecord> records;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = path.filename().string() + ":" + std::to_string(i + 1);
    if (lines[i].empty()) throw FormatError(where + ": empty line");
    ordered_json j;
    try {
      j = ordered_json::parse(lines[i]);
    } catch (const std::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    SentimentRecord r;
    try {
      r.id = j.at("id").get<std::string>();
      r.text = j.at("text").get<std::string>();
      r.sentiment = j.at("sentiment").get<double>();
    } catch (const std::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (r.id.empty()) throw ValidationError(where + ": empty record id");
    if (r.text.empty()) throw ValidationError(where + ": empty record text");
    if (r.sentiment < -3.0 || r.sentiment > 3.0) {
      throw ValidationError(where + ": sentiment " + fmt_double(r.sentiment) +
                            " outside [-3, 3]");
    }
    if (!seen.insert(r.id).second) {
      throw ValidationError(where + ": duplicate record id '" + r.id + "'");
    }
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Fixture generation
// ---------------------------------------------------------------------------

namespace {

struct Topic {
  const char* name;
  const char* keywords[10];
};

// Valence rises with topic index: valence(i) = -2.5 + 5 i / 9.
constexpr Topic kTopics[10] = {
    {"despair",
     {"hopeless", "worthless", "drowning", "despair", "numb", "emptiness", "darkness",
      "crying", "broken", "exhausted"}},
    {"grief",
     {"funeral", "grief", "mourning", "loss", "missing", "farewell", "ashes", "widow",
      "regret", "sorrow"}},
    {"stress",
     {"deadline", "pressure", "overwhelmed", "panic", "workload", "insomnia", "tension",
      "burnout", "scrambling", "frantic"}},
    {"illness",
     {"symptoms", "diagnosis", "hospital", "medication", "fatigue", "aching", "clinic",
      "relapse", "treatment", "dizzy"}},
    {"money",
     {"rent", "debt", "bills", "overdraft", "budget", "eviction", "loan", "paycheck",
      "expenses", "savings"}},
    {"routine",
     {"laundry", "groceries", "commute", "errands", "schedule", "chores", "tidying",
      "cooking", "dishes", "mundane"}},
    {"hobby",
     {"painting", "guitar", "puzzle", "gardening", "chess", "knitting", "sketching",
      "baking", "collecting", "crafting"}},
    {"nature",
     {"sunrise", "forest", "river", "birdsong", "meadow", "hiking", "blossom", "breeze",
      "seaside", "trail"}},
    {"friends",
     {"reunion", "laughter", "companionship", "buddies", "gathering", "toast", "banter",
      "hugs", "camaraderie", "picnic"}},
    {"joy",
     {"delighted", "thrilled", "celebration", "wonderful", "grateful", "radiant", "bliss",
      "cheerful", "triumphant", "overjoyed"}},
};

constexpr const char* kFillers[30] = {
    "today",    "yesterday", "morning", "evening",  "really",  "quite",
    "maybe",    "somehow",   "about",   "around",   "thinking", "talking",
    "started",  "finished",  "little",  "often",    "always",  "sometimes",
    "usually",  "week",      "month",   "house",    "room",    "people",
    "things",   "trying",    "getting", "keeping",  "feeling", "moment",
};

double topic_valence(int topic) { return -2.5 + 5.0 * topic / 9.0; }

std::string corpus_text(int topic, int record_index) {
  const Topic& t = kTopics[topic];
  const char* k[5];
  for (int j = 0; j < 5; ++j) k[j] = t.keywords[(record_index + j) % 10];
  const char* f0 = kFillers[record_index % 30];
  const char* f1 = kFillers[(record_index + 11) % 30];
  std::ostringstream ss;
  ss << "Lately it has been " << f0 << " " << k[0] << " and " << k[1] << ". The " << k[2]
     << " keeps coming back while " << k[3] << " and " << k[4] << " fill the " << f1
     << ".";
  return ss.str();
}

std::string sample_text(int topic, int sample_index) {
  const Topic& t = kTopics[topic];
  const char* k[6];
  for (int j = 0; j < 6; ++j) k[j] = t.keywords[(sample_index + j) % 10];
  const Topic& d1 = kTopics[(topic + 3) % 10];
  const Topic& d2 = kTopics[(topic + 7) % 10];
  const char* x0 = d1.keywords[sample_index % 10];
  const char* x1 = d1.keywords[(sample_index + 4) % 10];
  const char* x2 = d2.keywords[sample_index % 10];
  const char* x3 = d2.keywords[(sample_index + 4) % 10];
  const char* f[8];
  for (int j = 0; j < 8; ++j) f[j] = kFillers[(sample_index * 7 + j * 3) % 30];
  std::ostringstream ss;
  // First two keywords repeated so token counts mark them as salient.
  ss << "I spent the " << f[0] << " " << f[1] << " about " << k[0] << ", honestly "
     << k[0] << " again, and " << k[1] << ", " << f[2] << " " << k[1] << ". There was "
     << k[2] << " and some " << k[3] << ", then " << k[4] << " along with " << k[5]
     << ". Someone mentioned " << x0 << " and " << x1 << ", even " << x2 << " and " << x3
     << ". " << f[3] << " " << f[4] << " it was " << f[5] << " " << f[6] << " " << f[7]
     << ".";
  return ss.str();
}

std::string pad_id(const char* prefix, int n) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%04d", prefix, n);
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << content;
  if (!out) throw IngestError("short write to " + path.string());
}

std::string feature_csv(Rng& rng, int frames, int dim) {
  std::ostringstream ss;
  for (int r = 0; r < frames; ++r) {
    for (int c = 0; c < dim; ++c) {
      if (c) ss << ',';
      ss << fmt_double(rng.normal());
    }
    ss << '\n';
  }
  return ss.str();
}

}  // namespace

void generate_fixture(const FixtureSpec& spec, const fs::path& out_root) {
  if (spec.n_samples <= 0 || spec.n_corpus <= 0 || spec.audio_dim <= 0 ||
      spec.video_dim <= 0) {
    throw PreconditionError("fixture sizes must all be positive");
  }
  if (fs::exists(out_root) && !fs::is_empty(out_root)) {
    throw PreconditionError("fixture target " + out_root.string() +
                            " exists and is not empty");
  }
  fs::create_directories(out_root / "transcripts");
  fs::create_directories(out_root / "audio");
  fs::create_directories(out_root / "video");

  Rng sentiment_rng(Rng::mix(spec.seed, 1));
  Rng severity_rng(Rng::mix(spec.seed, 2));
  Rng audio_rng(Rng::mix(spec.seed, 3));
  Rng video_rng(Rng::mix(spec.seed, 4));
  Rng frames_rng(Rng::mix(spec.seed, 5));

  // Corpus records round-robin over topics; sentiment = topic valence plus
  // bounded noise.
  std::ostringstream corpus_out;
  std::vector<double> topic_sum(10, 0.0);
  std::vector<int> topic_count(10, 0);
  ordered_json truth_corpus = ordered_json::array();
  for (int i = 0; i < spec.n_corpus; ++i) {
    const int topic = i % 10;
    double sentiment = topic_valence(topic) + sentiment_rng.uniform(-0.3, 0.3);
    sentiment = std::clamp(sentiment, -3.0, 3.0);
    topic_sum[topic] += sentiment;
    topic_count[topic] += 1;
    ordered_json rec;
    rec["id"] = pad_id("c", i + 1);
    rec["text"] = corpus_text(topic, i / 10);
    rec["sentiment"] = sentiment;
    corpus_out << rec.dump() << '\n';
    truth_corpus.push_back(
        {{"id", rec["id"]}, {"topic", kTopics[topic].name}, {"sentiment", sentiment}});
  }
  write_file(out_root / "corpus.jsonl", corpus_out.str());

  std::vector<double> planted(10, 0.0);
  for (int t = 0; t < 10; ++t) {
    planted[t] = topic_count[t] ? topic_sum[t] / topic_count[t] : topic_valence(t);
  }

  const int n_train = spec.n_samples * 70 / 100;
  const int n_val = spec.n_samples * 15 / 100;

  std::ostringstream labels;
  labels << "id,split,severity,gender\n";
  ordered_json truth_samples = ordered_json::array();
  for (int i = 0; i < spec.n_samples; ++i) {
    const int topic = i % 10;
    const std::string id = pad_id("s", i + 1);
    const Split split = i < n_train              ? Split::train
                        : i < n_train + n_val    ? Split::validation
                                                 : Split::test;
    const double raw = 12.0 - 4.0 * planted[topic] + severity_rng.normal() * 1.2;
    const int severity =
        static_cast<int>(std::clamp(std::lround(raw), 0l, 24l));
    const char* gender = (i % 2) ? "f" : "m";
    labels << id << ',' << to_string(split) << ',' << severity << ',' << gender << '\n';

    write_file(out_root / "transcripts" / (id + ".txt"), sample_text(topic, i / 10));
    const int audio_frames = frames_rng.uniform_int(20, 40);
    const int video_frames = frames_rng.uniform_int(16, 32);
    write_file(out_root / "audio" / (id + ".csv"),
               feature_csv(audio_rng, audio_frames, spec.audio_dim));
    write_file(out_root / "video" / (id + ".csv"),
               feature_csv(video_rng, video_frames, spec.video_dim));

    truth_samples.push_back({{"id", id},
                             {"topic", kTopics[topic].name},
                             {"planted", planted[topic]},
                             {"severity", severity},
                             {"split", to_string(split)}});
  }
  write_file(out_root / "labels.csv", labels.str());

  ordered_json manifest;
  manifest["name"] = "synthetic-fixture";
  manifest["source"] = {{"synthetic", true}, {"seed", spec.seed}};
  manifest["feature_dims"] = {{"audio", spec.audio_dim}, {"video", spec.video_dim}};
  manifest["split_counts"] = {{"train", n_train},
                              {"validation", n_val},
                              {"test", spec.n_samples - n_train - n_val}};
  write_file(out_root / "manifest.json", manifest.dump(2) + "\n");

  ordered_json truth;
  truth["seed"] = spec.seed;
  truth["n_samples"] = spec.n_samples;
  truth["n_corpus"] = spec.n_corpus;
  truth["mapping"] = {{"intercept", 12.0}, {"slope", -4.0}, {"noise_sd", 1.2}};
  ordered_json topics = ordered_json::array();
  for (int t = 0; t < 10; ++t) {
    ordered_json topic;
    topic["name"] = kTopics[t].name;
    topic["valence"] = topic_valence(t);
    topic["planted"] = planted[t];
    topic["keywords"] = ordered_json::array();
    for (const char* kw : kTopics[t].keywords) topic["keywords"].push_back(kw);
    topics.push_back(std::move(topic));
  }
  truth["topics"] = std::move(topics);
  truth["corpus_records"] = std::move(truth_corpus);
  truth["samples"] = std::move(truth_samples);
  write_file(out_root / "fixture_truth.json", truth.dump(2) + "\n");
}

}  // namespace emorag::corpus
