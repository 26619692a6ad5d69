#include "emorag/promptgen.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "emorag/errors.hpp"
#include "emorag/hash.hpp"
#include "emorag/text.hpp"
#include "httplib.h"
#include "json.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace emorag::promptgen {

namespace {

constexpr std::size_t kRetrievedTextBudget = 500;

// The two analysis instructions plus the answer directive, rendered verbatim
// into every request. Changing this wording invalidates golden files.
const char* const kInstructionBlock =
    "First, formulate a question that assesses the subject's depression level and its "
    "potential causes, drawing on both the subject statement and the reference texts.\n"
    "Second, formulate a question that analyzes emotional patterns across the subject "
    "statement and the reference texts, focusing on shared themes, contrasting sentiments, "
    "and underlying emotional implications.\n"
    "Answer both questions in full.";

std::string format2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

const char* sign_word(double sentiment) {
  if (sentiment > 0.0) return "positive";
  if (sentiment < 0.0) return "negative";
  return "neutral";
}

bool is_code_point_start(unsigned char byte) { return (byte & 0xC0) != 0x80; }

// Crude but deterministic content-word test: particles and glue words are
// almost always short.
bool is_content_token(const std::string& token) { return token.size() >= 4; }

std::string compute_request_hash(const std::string& original_text,
                                 const std::vector<RetrievedItem>& retrieved,
                                 const std::string& instruction_block) {
  Hasher h;
  h.str("prompt-request-v1");
  h.str(original_text);
  h.u64(retrieved.size());
  for (const RetrievedItem& item : retrieved) {
    h.str(item.record_id);
    h.str(item.text);
    h.f64(item.sentiment);
    h.f64(item.similarity);
  }
  h.str(instruction_block);
  return h.hex();
}

std::string source_tag(const EmotionPrompt& p) {
  return p.source == PromptSource::mock ? std::string("mock") : "live:" + p.model;
}

}  // namespace

std::string truncate_text(const std::string& text, std::size_t budget) {
  std::size_t points = 0;
  for (unsigned char c : text) points += is_code_point_start(c);
  if (points <= budget) return text;

  const std::size_t keep = budget > 3 ? budget - 3 : 0;
  std::size_t seen = 0;
  std::size_t cut = 0;
  while (cut < text.size()) {
    if (is_code_point_start(static_cast<unsigned char>(text[cut]))) {
      if (seen == keep) break;
      ++seen;
    }
    ++cut;
  }
  return text.substr(0, cut) + "...";
}

std::vector<std::string> salient_tokens(const std::string& input, std::size_t count) {
  std::vector<std::string> tokens = text::tokenize(input);
  const bool any_content =
      std::any_of(tokens.begin(), tokens.end(), [](const std::string& t) { return is_content_token(t); });
  if (any_content) {
    std::erase_if(tokens, [](const std::string& t) { return !is_content_token(t); });
  }
  std::unordered_map<std::string, std::pair<int, std::size_t>> stats;  // count, first index
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto [it, inserted] = stats.try_emplace(tokens[i], 0, i);
    ++it->second.first;
  }
  std::vector<std::string> unique;
  unique.reserve(stats.size());
  for (const auto& [tok, _] : stats) unique.push_back(tok);
  std::sort(unique.begin(), unique.end(), [&](const std::string& a, const std::string& b) {
    const auto& sa = stats.at(a);
    const auto& sb = stats.at(b);
    if (sa.first != sb.first) return sa.first > sb.first;
    return sa.second < sb.second;
  });
  if (unique.size() > count) unique.resize(count);
  return unique;
}

PromptRequest build_request(const std::string& original_text,
                            const std::vector<retrieval::RetrievalHit>& hits,
                            const std::vector<corpus::SentimentRecord>& corpus_records) {
  if (hits.empty()) throw PreconditionError("cannot build a prompt request from zero hits");

  std::unordered_map<std::string, const corpus::SentimentRecord*> by_id;
  for (const auto& r : corpus_records) by_id.emplace(r.id, &r);

  std::vector<retrieval::RetrievalHit> ordered = hits;
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.rank < b.rank; });

  PromptRequest req;
  req.original_text = original_text;
  req.retrieved.reserve(ordered.size());
  for (const auto& hit : ordered) {
    const auto it = by_id.find(hit.record_id);
    if (it == by_id.end()) {
      throw ProvenanceError("retrieval hit \"" + hit.record_id +
                            "\" does not resolve in the sentiment corpus");
    }
    RetrievedItem item;
    item.record_id = hit.record_id;
    item.text = truncate_text(it->second->text, kRetrievedTextBudget);
    item.sentiment = it->second->sentiment;
    item.similarity = hit.similarity;
    req.retrieved.push_back(std::move(item));
  }
  req.instruction_block = kInstructionBlock;
  req.request_hash = compute_request_hash(req.original_text, req.retrieved, req.instruction_block);
  return req;
}

std::string render_request(const PromptRequest& request) {
  std::ostringstream out;
  out << "Subject statement:\n" << request.original_text << "\n\n";
  out << "Retrieved reference texts with sentiment in [-3, 3], most similar first:\n";
  for (std::size_t i = 0; i < request.retrieved.size(); ++i) {
    const RetrievedItem& item = request.retrieved[i];
    out << "[" << (i + 1) << "] sentiment " << format2(item.sentiment) << ": " << item.text
        << "\n";
  }
  out << "\n" << request.instruction_block << "\n";
  return out.str();
}

std::string mock_complete(const PromptRequest& request) {
  double mean = 0.0;
  for (const RetrievedItem& item : request.retrieved) mean += item.sentiment;
  if (!request.retrieved.empty()) mean /= static_cast<double>(request.retrieved.size());

  const std::vector<std::string> salient = salient_tokens(request.original_text, 3);
  const std::vector<std::string> original_tokens = text::tokenize(request.original_text);
  const std::set<std::string> original_set(original_tokens.begin(), original_tokens.end());

  std::ostringstream out;
  out << "Q1: Based on the statement and the references, how severe is the speaker's "
         "depression and what may be causing it?\n";
  out << "A1: The statement centers on ";
  if (salient.empty()) {
    out << "nothing salient";
  } else {
    for (std::size_t i = 0; i < salient.size(); ++i) {
      if (i) out << ", ";
      out << "\"" << salient[i] << "\"";
    }
  }
  out << "; the references read " << sign_word(mean) << " overall with mean sentiment "
      << format2(mean) << ".\n";

  out << "Q2: What emotional patterns connect the statement and the references?\n";
  out << "A2:";
  for (std::size_t i = 0; i < request.retrieved.size(); ++i) {
    const RetrievedItem& item = request.retrieved[i];
    std::vector<std::string> shared;
    std::set<std::string> taken;
    for (const std::string& tok : text::tokenize(item.text)) {
      if (shared.size() == 3) break;
      if (is_content_token(tok) && original_set.count(tok) && taken.insert(tok).second) {
        shared.push_back(tok);
      }
    }
    out << " [" << (i + 1) << "] ";
    if (shared.empty()) {
      out << "shares no content tokens";
    } else {
      out << "shares ";
      for (std::size_t j = 0; j < shared.size(); ++j) {
        if (j) out << ", ";
        out << "\"" << shared[j] << "\"";
      }
    }
    out << " and reads " << sign_word(item.sentiment) << " (" << format2(item.sentiment)
        << ").";
  }
  out << "\n";
  return out.str();
}

HttpLlmClient::HttpLlmClient(HttpLlmOptions options) : options_(std::move(options)) {
  const std::string& url = options_.base_url;
  const std::size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw PreconditionError("base_url must look like scheme://host[:port][/path], got \"" +
                            url + "\"");
  }
  const std::size_t path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) {
    host_ = url;
  } else {
    host_ = url.substr(0, path_start);
    path_prefix_ = url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  }
  if (options_.max_attempts < 1) throw PreconditionError("max_attempts must be at least 1");
  if (const char* tok = std::getenv("EMORAG_LLM_TOKEN")) token_ = tok;
}

std::string HttpLlmClient::complete(const PromptRequest& request) {
  const std::string path = path_prefix_ + "/chat/completions";
  ordered_json body{{"model", options_.model},
                    {"messages", ordered_json::array({ordered_json{
                                     {"role", "user"}, {"content", render_request(request)}}})},
                    {"temperature", 0}};
  const std::string payload = body.dump();

  httplib::Headers headers;
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

  std::string last_failure;
  for (int attempt = 0; attempt < options_.max_attempts; ++attempt) {
    if (attempt > 0) {
      const auto delay = std::chrono::milliseconds(
          static_cast<long long>(options_.retry_base_ms) << (attempt - 1));
      std::this_thread::sleep_for(delay);
    }
    httplib::Client client(host_);
    client.set_connection_timeout(options_.timeout_s);
    client.set_read_timeout(options_.timeout_s);
    client.set_write_timeout(options_.timeout_s);

    httplib::Result res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_failure = "HTTP status " + std::to_string(res->status);
      continue;
    }
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError("endpoint returned unparseable JSON: " + std::string(e.what()));
    }
    if (!parsed.contains("choices") || !parsed["choices"].is_array() ||
        parsed["choices"].empty()) {
      throw ProtocolError("endpoint response has no choices array");
    }
    const auto& first = parsed["choices"][0];
    if (!first.contains("message") || !first["message"].contains("content") ||
        !first["message"]["content"].is_string()) {
      throw ProtocolError("endpoint response lacks choices[0].message.content");
    }
    return first["message"]["content"].get<std::string>();
  }
  throw EndpointError("POST " + host_ + path + " failed after " +
                      std::to_string(options_.max_attempts) + " attempts; last failure: " +
                      last_failure);
}

EmotionPrompt generate(const PromptRequest& request, LlmClient& client) {
  const std::string completion = client.complete(request);
  if (completion.empty()) {
    throw ProtocolError("LLM returned an empty completion for request " + request.request_hash);
  }
  EmotionPrompt prompt;
  prompt.text = completion;
  prompt.source = client.is_mock() ? PromptSource::mock : PromptSource::live;
  if (!client.is_mock()) prompt.model = client.model_name();
  prompt.request_hash = request.request_hash;
  prompt.retrieved_ids.reserve(request.retrieved.size());
  for (const RetrievedItem& item : request.retrieved) prompt.retrieved_ids.push_back(item.record_id);
  return prompt;
}

std::vector<EmotionPrompt> generate_batch(const std::vector<PromptRequest>& requests,
                                          LlmClient& client, int max_in_flight) {
  if (max_in_flight < 1) throw PreconditionError("max_in_flight must be at least 1");
  const std::size_t n = requests.size();
  std::vector<EmotionPrompt> results(n);
  std::vector<std::exception_ptr> failures(n);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        results[i] = generate(requests[i], client);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };

  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(max_in_flight), n);
  std::vector<std::thread> pool;
  pool.reserve(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  for (std::size_t i = 0; i < n; ++i) {
    if (failures[i]) std::rethrow_exception(failures[i]);
  }
  return results;
}

std::vector<EmotionPrompt> generate_for_dataset(
    const corpus::Dataset& dataset, const std::vector<corpus::SentimentRecord>& corpus_records,
    const retrieval::RetrievalCache& cache, LlmClient& client, int max_in_flight) {
  std::vector<PromptRequest> requests;
  requests.reserve(dataset.samples.size());
  for (const corpus::Sample& sample : dataset.samples) {
    const auto it = cache.entries.find(sample.id);
    if (it == cache.entries.end()) {
      throw ProvenanceError("no retrieval cache entry for sample \"" + sample.id + "\"");
    }
    requests.push_back(build_request(sample.text, it->second, corpus_records));
  }
  std::vector<EmotionPrompt> prompts = generate_batch(requests, client, max_in_flight);
  for (std::size_t i = 0; i < prompts.size(); ++i) prompts[i].sample_id = dataset.samples[i].id;
  return prompts;
}

void persist_prompts(const std::vector<EmotionPrompt>& prompts, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IngestError("cannot open " + path.string() + " for writing");
  for (const EmotionPrompt& p : prompts) {
    ordered_json line{{"sample_id", p.sample_id},
                      {"text", p.text},
                      {"source", source_tag(p)},
                      {"request_hash", p.request_hash},
                      {"retrieved_ids", p.retrieved_ids}};
    out << line.dump() << "\n";
  }
  if (!out.flush()) throw IngestError("failed writing " + path.string());
}

std::vector<EmotionPrompt> load_prompts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("prompt store not found: " + path.string());

  std::vector<EmotionPrompt> prompts;
  std::set<std::string> seen_ids;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& why) -> CorruptionError {
    return CorruptionError(path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      // Only trailing blank lines are tolerated; content after one means the
      // store was spliced or truncated mid-write.
      std::string rest;
      while (std::getline(in, rest)) {
        ++line_no;
        if (!rest.empty()) throw fail("blank line inside prompt store");
      }
      break;
    }
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("unparseable line: ") + e.what());
    }
    if (!parsed.is_object()) throw fail("line is not an object");
    for (const char* key : {"sample_id", "text", "source", "request_hash"}) {
      if (!parsed.contains(key) || !parsed[key].is_string()) {
        throw fail(std::string("missing or non-string field \"") + key + "\"");
      }
    }
    if (!parsed.contains("retrieved_ids") || !parsed["retrieved_ids"].is_array()) {
      throw fail("missing retrieved_ids array");
    }

    EmotionPrompt p;
    p.sample_id = parsed["sample_id"].get<std::string>();
    p.text = parsed["text"].get<std::string>();
    p.request_hash = parsed["request_hash"].get<std::string>();
    const std::string source = parsed["source"].get<std::string>();
    if (source == "mock") {
      p.source = PromptSource::mock;
    } else if (source.rfind("live:", 0) == 0 && source.size() > 5) {
      p.source = PromptSource::live;
      p.model = source.substr(5);
    } else {
      throw fail("unrecognized source \"" + source + "\"");
    }
    for (const auto& id : parsed["retrieved_ids"]) {
      if (!id.is_string()) throw fail("retrieved_ids entry is not a string");
      p.retrieved_ids.push_back(id.get<std::string>());
    }

    if (p.text.empty()) throw fail("empty prompt text");
    if (p.retrieved_ids.empty()) throw fail("empty retrieved_ids");
    if (p.request_hash.size() != 16 ||
        p.request_hash.find_first_not_of("0123456789abcdef") != std::string::npos) {
      throw fail("request_hash is not 16 hex digits");
    }
    if (!seen_ids.insert(p.sample_id).second) {
      throw fail("duplicate sample_id \"" + p.sample_id + "\"");
    }
    prompts.push_back(std::move(p));
  }
  return prompts;
}

std::map<std::string, EmotionPrompt> index_prompts(const std::vector<EmotionPrompt>& prompts) {
  std::map<std::string, EmotionPrompt> by_id;
  for (const EmotionPrompt& p : prompts) {
    if (!by_id.emplace(p.sample_id, p).second) {
      throw CorruptionError("duplicate prompt for sample \"" + p.sample_id + "\"");
    }
  }
  return by_id;
}

void verify_prompt(const EmotionPrompt& prompt, const PromptRequest& request) {
  if (prompt.request_hash != request.request_hash) {
    throw CorruptionError("prompt for sample \"" + prompt.sample_id +
                          "\" carries request hash " + prompt.request_hash +
                          " but the rebuilt request hashes to " + request.request_hash);
  }
  if (prompt.retrieved_ids.size() != request.retrieved.size()) {
    throw CorruptionError("prompt for sample \"" + prompt.sample_id + "\" lists " +
                          std::to_string(prompt.retrieved_ids.size()) +
                          " retrieved ids but the request has " +
                          std::to_string(request.retrieved.size()));
  }
  for (std::size_t i = 0; i < prompt.retrieved_ids.size(); ++i) {
    if (prompt.retrieved_ids[i] != request.retrieved[i].record_id) {
      throw CorruptionError("prompt for sample \"" + prompt.sample_id + "\" retrieved id " +
                            std::to_string(i + 1) + " is \"" + prompt.retrieved_ids[i] +
                            "\" but the request resolved \"" + request.retrieved[i].record_id +
                            "\"");
    }
  }
}

}  // namespace emorag::promptgen
