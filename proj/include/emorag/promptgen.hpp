#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "emorag/corpus.hpp"
#include "emorag/retrieval.hpp"

namespace emorag::promptgen {

// One retrieved corpus text as it enters the request: text already truncated
// to the per-item budget, sentiment and similarity as retrieved.
struct RetrievedItem {
  std::string record_id;
  std::string text;
  double sentiment = 0.0;
  double similarity = 0.0;
};

// Everything the LLM request is built from. request_hash is a pure function
// of the other fields, so equal inputs always carry equal hashes.
struct PromptRequest {
  std::string original_text;
  std::vector<RetrievedItem> retrieved;
  std::string instruction_block;
  std::string request_hash;
};

enum class PromptSource { live, mock };

struct EmotionPrompt {
  std::string sample_id;
  std::string text;
  PromptSource source = PromptSource::mock;
  std::string model;  // non-empty iff source == live
  std::string request_hash;
  std::vector<std::string> retrieved_ids;
};

// Truncates to `budget` code points; longer texts are cut and end with "...",
// which counts against the budget.
std::string truncate_text(const std::string& text, std::size_t budget);

// Up to `count` tokens ranked by frequency, ties broken by first occurrence.
std::vector<std::string> salient_tokens(const std::string& text, std::size_t count);

// Assembles the request from retrieval hits, resolving each hit against the
// sentiment corpus. Hits are consumed in rank order.
PromptRequest build_request(const std::string& original_text,
                            const std::vector<retrieval::RetrievalHit>& hits,
                            const std::vector<corpus::SentimentRecord>& corpus_records);

// The exact message content sent to the LLM, derived from the request fields.
std::string render_request(const PromptRequest& request);

// Deterministic offline stand-in for the LLM: a two-part Q&A whose wording
// moves with the original text's salient tokens and every retrieved
// sentiment, so downstream encoders receive real signal in mock mode.
std::string mock_complete(const PromptRequest& request);

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string model_name() const = 0;
  virtual bool is_mock() const = 0;
  virtual std::string complete(const PromptRequest& request) = 0;
};

class MockLlmClient final : public LlmClient {
 public:
  std::string model_name() const override { return "mock"; }
  bool is_mock() const override { return true; }
  std::string complete(const PromptRequest& request) override { return mock_complete(request); }
};

struct HttpLlmOptions {
  std::string base_url;  // scheme://host[:port][/prefix]
  std::string model;
  int timeout_s = 60;
  int max_attempts = 3;
  int retry_base_ms = 250;
};

// Chat-completions style endpoint. Transport failures and non-200 statuses
// are retried with exponential backoff up to max_attempts, then raise
// EndpointError; a response that parses but violates the expected shape
// raises ProtocolError without retrying. The bearer token is read from
// EMORAG_LLM_TOKEN at construction; requests go out unauthenticated when the
// variable is unset.
class HttpLlmClient final : public LlmClient {
 public:
  explicit HttpLlmClient(HttpLlmOptions options);
  std::string model_name() const override { return options_.model; }
  bool is_mock() const override { return false; }
  std::string complete(const PromptRequest& request) override;

 private:
  HttpLlmOptions options_;
  std::string host_;         // scheme://host[:port]
  std::string path_prefix_;  // leading path from base_url, possibly empty
  std::string token_;
};

// Runs the client over one request. An empty completion raises ProtocolError.
EmotionPrompt generate(const PromptRequest& request, LlmClient& client);

// Completes all requests with at most max_in_flight running concurrently.
// Results come back in input order; the first failing input's error is
// rethrown after all workers stop.
std::vector<EmotionPrompt> generate_batch(const std::vector<PromptRequest>& requests,
                                          LlmClient& client, int max_in_flight = 4);

// Builds one request per dataset sample from its precomputed retrieval cache
// entry and completes them in sample order. Samples missing from the cache
// raise ProvenanceError.
std::vector<EmotionPrompt> generate_for_dataset(const corpus::Dataset& dataset,
                                                const std::vector<corpus::SentimentRecord>& corpus_records,
                                                const retrieval::RetrievalCache& cache,
                                                LlmClient& client, int max_in_flight = 4);

// JSON-lines store, one prompt per line, keyed by sample_id.
void persist_prompts(const std::vector<EmotionPrompt>& prompts, const std::filesystem::path& path);
std::vector<EmotionPrompt> load_prompts(const std::filesystem::path& path);

// Sample id -> prompt; duplicate ids raise CorruptionError.
std::map<std::string, EmotionPrompt> index_prompts(const std::vector<EmotionPrompt>& prompts);

// Confirms a stored prompt still matches the request it claims to come from:
// hash and retrieved id list must agree. Mismatch raises CorruptionError.
void verify_prompt(const EmotionPrompt& prompt, const PromptRequest& request);

}  // namespace emorag::promptgen
