#include "emorag/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "emorag/bytes.hpp"
#include "emorag/errors.hpp"
#include "emorag/hash.hpp"
#include "emorag/rng.hpp"
#include "emorag/text.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace emorag::fusion {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint64_t kTextHashSeed = 0;
constexpr double kClampLo = 0.0;
constexpr double kClampHi = 24.0;

void fill_uniform(Tensor& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  double* d = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) d[i] = rng.uniform(-bound, bound);
}

std::vector<int> bucket_tokens(const std::string& input, int n_buckets) {
  if (input.empty()) throw PreconditionError("cannot encode empty text");
  const std::vector<std::string> tokens = text::tokenize(input);
  if (tokens.empty()) {
    throw PreconditionError("text has no tokens to encode: \"" + input + "\"");
  }
  std::vector<int> buckets;
  buckets.reserve(tokens.size());
  for (const std::string& tok : tokens) {
    buckets.push_back(text::token_bucket(tok, kTextHashSeed, n_buckets));
  }
  return buckets;
}

// Frames laid out row-major, truncated to max_frames, as a no-grad input.
Tensor frames_tensor(const std::vector<double>& features, int n_frames, int dim,
                     int max_frames) {
  if (n_frames < 1) throw PreconditionError("sequence encoder needs at least one frame");
  if (dim < 1) throw PreconditionError("sequence encoder needs a positive frame width");
  if (features.size() != static_cast<std::size_t>(n_frames) * dim) {
    throw ShapeError("frame buffer holds " + std::to_string(features.size()) +
                     " values, expected " + std::to_string(n_frames) + "x" +
                     std::to_string(dim));
  }
  const int kept = std::min(n_frames, max_frames);
  Tensor x(kept, dim);
  std::copy(features.begin(), features.begin() + static_cast<std::size_t>(kept) * dim,
            x.data());
  return x;
}

Tensor affine_tanh(const Tensor& x, const Tensor& w, const Tensor& b) {
  return numkit::tanh_t(numkit::add_row(numkit::matmul(x, w), b));
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 1) throw PreconditionError("d_model must be positive");
  if (n_heads < 1) throw PreconditionError("n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw PreconditionError("d_model " + std::to_string(d_model) +
                            " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_frames < 1) throw PreconditionError("max_frames must be at least 1");
  if (text_vocab_hash_dim < 1) throw PreconditionError("text_vocab_hash_dim must be positive");
  if (audio_dim < 1 || video_dim < 1) {
    throw PreconditionError("modality input widths must be positive");
  }
}

std::vector<Tensor> ModelParams::all() const {
  std::vector<Tensor> out = text_encoder_group();
  const std::vector<Tensor> rest = rest_group();
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::vector<Tensor> ModelParams::text_encoder_group() const {
  return {text_embed, text_proj_w, text_proj_b};
}

std::vector<Tensor> ModelParams::rest_group() const {
  return {audio_w,       audio_b,       video_w,       video_b,      audio_att.wq,
          audio_att.wk,  audio_att.wv,  audio_att.wo,  video_att.wq, video_att.wk,
          video_att.wv,  video_att.wo,  prompt_att.wq, prompt_att.wk, prompt_att.wv,
          prompt_att.wo, pred_w1,       pred_b1,       pred_w2,      pred_b2};
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  return {{"text_embed", text_embed},
          {"text_proj_w", text_proj_w},
          {"text_proj_b", text_proj_b},
          {"audio_w", audio_w},
          {"audio_b", audio_b},
          {"video_w", video_w},
          {"video_b", video_b},
          {"audio_att_wq", audio_att.wq},
          {"audio_att_wk", audio_att.wk},
          {"audio_att_wv", audio_att.wv},
          {"audio_att_wo", audio_att.wo},
          {"video_att_wq", video_att.wq},
          {"video_att_wk", video_att.wk},
          {"video_att_wv", video_att.wv},
          {"video_att_wo", video_att.wo},
          {"prompt_att_wq", prompt_att.wq},
          {"prompt_att_wk", prompt_att.wk},
          {"prompt_att_wv", prompt_att.wv},
          {"prompt_att_wo", prompt_att.wo},
          {"pred_w1", pred_w1},
          {"pred_b1", pred_b1},
          {"pred_w2", pred_w2},
          {"pred_b2", pred_b2}};
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.config = config;
  out.text_embed = text_embed.clone();
  out.text_proj_w = text_proj_w.clone();
  out.text_proj_b = text_proj_b.clone();
  out.audio_w = audio_w.clone();
  out.audio_b = audio_b.clone();
  out.video_w = video_w.clone();
  out.video_b = video_b.clone();
  out.audio_att = {audio_att.wq.clone(), audio_att.wk.clone(), audio_att.wv.clone(),
                   audio_att.wo.clone()};
  out.video_att = {video_att.wq.clone(), video_att.wk.clone(), video_att.wv.clone(),
                   video_att.wo.clone()};
  out.prompt_att = {prompt_att.wq.clone(), prompt_att.wk.clone(), prompt_att.wv.clone(),
                    prompt_att.wo.clone()};
  out.pred_w1 = pred_w1.clone();
  out.pred_b1 = pred_b1.clone();
  out.pred_w2 = pred_w2.clone();
  out.pred_b2 = pred_b2.clone();
  return out;
}

void ModelParams::validate_finite() const {
  for (const auto& [name, t] : named()) {
    const double* d = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!std::isfinite(d[i])) {
        throw ValidationError("parameter " + name + " holds a non-finite value");
      }
    }
  }
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const int d = config.d_model;

  ModelParams p;
  p.config = config;
  p.text_embed = Tensor(config.text_vocab_hash_dim, d, true);
  p.text_proj_w = Tensor(d, d, true);
  p.text_proj_b = Tensor(1, d, true);
  p.audio_w = Tensor(config.audio_dim, d, true);
  p.audio_b = Tensor(1, d, true);
  p.video_w = Tensor(config.video_dim, d, true);
  p.video_b = Tensor(1, d, true);
  for (AttentionBlock* block : {&p.audio_att, &p.video_att, &p.prompt_att}) {
    block->wq = Tensor(d, d, true);
    block->wk = Tensor(d, d, true);
    block->wv = Tensor(d, d, true);
    block->wo = Tensor(d, d, true);
  }
  p.pred_w1 = Tensor(4 * d, d, true);
  p.pred_b1 = Tensor(1, d, true);
  p.pred_w2 = Tensor(d, 1, true);
  p.pred_b2 = Tensor(1, 1, true);

  // Draw order is the all() order; each bias uses its layer's input width.
  Rng rng(seed);
  fill_uniform(p.text_embed, config.text_vocab_hash_dim, rng);
  fill_uniform(p.text_proj_w, d, rng);
  fill_uniform(p.text_proj_b, d, rng);
  fill_uniform(p.audio_w, config.audio_dim, rng);
  fill_uniform(p.audio_b, config.audio_dim, rng);
  fill_uniform(p.video_w, config.video_dim, rng);
  fill_uniform(p.video_b, config.video_dim, rng);
  for (AttentionBlock* block : {&p.audio_att, &p.video_att, &p.prompt_att}) {
    fill_uniform(block->wq, d, rng);
    fill_uniform(block->wk, d, rng);
    fill_uniform(block->wv, d, rng);
    fill_uniform(block->wo, d, rng);
  }
  fill_uniform(p.pred_w1, 4 * d, rng);
  fill_uniform(p.pred_b1, 4 * d, rng);
  fill_uniform(p.pred_w2, d, rng);
  fill_uniform(p.pred_b2, d, rng);
  return p;
}

Tensor encode_text(const std::string& input, const ModelParams& params) {
  const std::vector<int> buckets =
      bucket_tokens(input, params.config.text_vocab_hash_dim);
  const Tensor bag = numkit::embed_mean(params.text_embed, buckets);
  return numkit::add_row(numkit::matmul(bag, params.text_proj_w), params.text_proj_b);
}

Tensor encode_sequence(const std::vector<double>& features, int n_frames, int dim,
                       const Tensor& w, const Tensor& b, int max_frames) {
  return numkit::mean_rows(encode_frames(features, n_frames, dim, w, b, max_frames));
}

Tensor encode_frames(const std::vector<double>& features, int n_frames, int dim,
                     const Tensor& w, const Tensor& b, int max_frames) {
  return affine_tanh(frames_tensor(features, n_frames, dim, max_frames), w, b);
}

Tensor cross_attention(const Tensor& query, const Tensor& keys_values,
                       const AttentionBlock& block, const ModelConfig& config) {
  if (query.rows() != 1 || query.cols() != config.d_model) {
    throw ShapeError("attention query must be 1x" + std::to_string(config.d_model) +
                     ", got " + query.shape_str());
  }
  if (keys_values.cols() != config.d_model || keys_values.rows() < 1) {
    throw ShapeError("attention keys/values must be Px" + std::to_string(config.d_model) +
                     " with P >= 1, got " + keys_values.shape_str());
  }
  const int dh = config.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  const Tensor q = numkit::matmul(query, block.wq);
  const Tensor k = numkit::matmul(keys_values, block.wk);
  const Tensor v = numkit::matmul(keys_values, block.wv);

  std::vector<Tensor> heads;
  heads.reserve(config.n_heads);
  for (int h = 0; h < config.n_heads; ++h) {
    const Tensor qh = numkit::slice_cols(q, h * dh, dh);
    const Tensor kh = numkit::slice_cols(k, h * dh, dh);
    const Tensor vh = numkit::slice_cols(v, h * dh, dh);
    const Tensor scores = numkit::scale(numkit::matmul_nt(qh, kh), inv_sqrt_dh);
    const Tensor weights = numkit::softmax_rows(scores);
    heads.push_back(numkit::matmul(weights, vh));
  }
  return numkit::matmul(numkit::concat_cols(heads), block.wo);
}

ForwardTrace forward(const corpus::Sample& sample, const std::string& prompt_text,
                     const ModelParams& params) {
  const ModelConfig& config = params.config;
  config.validate();
  if (sample.audio_dim != config.audio_dim) {
    throw ShapeError("sample audio width " + std::to_string(sample.audio_dim) +
                     " does not match model audio width " + std::to_string(config.audio_dim));
  }
  if (sample.video_dim != config.video_dim) {
    throw ShapeError("sample video width " + std::to_string(sample.video_dim) +
                     " does not match model video width " + std::to_string(config.video_dim));
  }

  ForwardTrace trace;
  trace.h_t = encode_text(sample.text, params);
  trace.h_a = encode_sequence(sample.audio_features, sample.audio_frames, sample.audio_dim,
                              params.audio_w, params.audio_b, config.max_frames);
  trace.h_v = encode_sequence(sample.video_features, sample.video_frames, sample.video_dim,
                              params.video_w, params.video_b, config.max_frames);
  trace.h_a_att = cross_attention(trace.h_t, trace.h_a, params.audio_att, config);
  trace.h_v_att = cross_attention(trace.h_t, trace.h_v, params.video_att, config);

  if (config.use_emotion_prompt) {
    trace.h_p = encode_text(prompt_text, params);
    trace.h_p_att = cross_attention(trace.h_t, trace.h_p, params.prompt_att, config);
  } else {
    // Fixed layout across ablations: the prompt slot stays, as zeros.
    trace.h_p = Tensor(1, config.d_model);
    trace.h_p_att = Tensor(1, config.d_model);
  }

  trace.h_final =
      numkit::concat_cols({trace.h_t, trace.h_a_att, trace.h_v_att, trace.h_p_att});
  const Tensor hidden = numkit::tanh_t(
      numkit::add_row(numkit::matmul(trace.h_final, params.pred_w1), params.pred_b1));
  trace.raw_prediction =
      numkit::add_row(numkit::matmul(hidden, params.pred_w2), params.pred_b2);

  trace.prediction = trace.raw_prediction.value();
  if (config.prediction_clamp) {
    trace.prediction = std::clamp(trace.prediction, kClampLo, kClampHi);
  }
  return trace;
}

Tensor ccc_loss(const Tensor& predictions, const Tensor& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw ShapeError("prediction batch " + predictions.shape_str() +
                     " does not match target batch " + targets.shape_str());
  }
  if (predictions.size() < 2) {
    throw PreconditionError("concordance needs a batch of at least 2");
  }

  const Tensor mean_p = numkit::mean_all(predictions);
  const Tensor mean_t = numkit::mean_all(targets);
  const Tensor dp = numkit::sub_scalar(predictions, mean_p);
  const Tensor dt = numkit::sub_scalar(targets, mean_t);
  const Tensor cov = numkit::mean_all(numkit::mul(dp, dt));
  const Tensor var_p = numkit::mean_all(numkit::mul(dp, dp));
  const Tensor var_t = numkit::mean_all(numkit::mul(dt, dt));
  const Tensor mean_gap = numkit::sub(mean_p, mean_t);
  const Tensor denom =
      numkit::add(numkit::add(var_p, var_t), numkit::mul(mean_gap, mean_gap));

  // Both variances zero with equal means: concordance is defined as 0.
  if (denom.value() == 0.0) return Tensor::scalar(1.0);

  return numkit::add_const(numkit::scale(numkit::divide(cov, denom), -2.0), 1.0);
}

void save_checkpoint(const ModelParams& params, const fs::path& path) {
  params.config.validate();
  params.validate_finite();

  const ordered_json config{{"d_model", params.config.d_model},
                            {"n_heads", params.config.n_heads},
                            {"max_frames", params.config.max_frames},
                            {"text_vocab_hash_dim", params.config.text_vocab_hash_dim},
                            {"audio_dim", params.config.audio_dim},
                            {"video_dim", params.config.video_dim},
                            {"use_emotion_prompt", params.config.use_emotion_prompt},
                            {"prediction_clamp", params.config.prediction_clamp}};
  const std::string header = config.dump();

  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'E', 'M', 'C', 'K'});
  bytes::put_u32(out, kCheckpointVersion);
  bytes::put_str(out, header);
  const auto tensors = params.named();
  bytes::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    bytes::put_str(out, name);
    bytes::put_u32(out, static_cast<std::uint32_t>(t.rows()));
    bytes::put_u32(out, static_cast<std::uint32_t>(t.cols()));
    const double* d = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) bytes::put_f64(out, d[i]);
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IngestError("cannot write checkpoint " + path.string());
  file.write(reinterpret_cast<const char*>(out.data()),
             static_cast<std::streamsize>(out.size()));
  if (!file) throw IngestError("short write to checkpoint " + path.string());
}

ModelParams load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("missing checkpoint " + path.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  bytes::Reader r{raw.data(), raw.size(), 0, path.string()};

  r.need(4);
  if (std::memcmp(raw.data(), "EMCK", 4) != 0) {
    throw CorruptionError(path.string() + ": bad magic");
  }
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CorruptionError(path.string() + ": unsupported version " + std::to_string(version));
  }

  ModelConfig config;
  try {
    const auto header = nlohmann::json::parse(r.str());
    config.d_model = header.at("d_model").get<int>();
    config.n_heads = header.at("n_heads").get<int>();
    config.max_frames = header.at("max_frames").get<int>();
    config.text_vocab_hash_dim = header.at("text_vocab_hash_dim").get<int>();
    config.audio_dim = header.at("audio_dim").get<int>();
    config.video_dim = header.at("video_dim").get<int>();
    config.use_emotion_prompt = header.at("use_emotion_prompt").get<bool>();
    config.prediction_clamp = header.at("prediction_clamp").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": bad config header: " + e.what());
  }
  try {
    config.validate();
  } catch (const Error& e) {
    throw CorruptionError(path.string() + ": invalid config: " + e.what());
  }

  ModelParams params = init_params(config, 0);
  const auto tensors = params.named();
  const std::uint32_t count = r.u32();
  if (count != tensors.size()) {
    throw CorruptionError(path.string() + ": expected " + std::to_string(tensors.size()) +
                          " tensors, found " + std::to_string(count));
  }
  for (const auto& [name, t] : tensors) {
    const std::string stored = r.str();
    if (stored != name) {
      throw CorruptionError(path.string() + ": tensor \"" + stored + "\" where \"" + name +
                            "\" was expected");
    }
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows != static_cast<std::uint32_t>(t.rows()) ||
        cols != static_cast<std::uint32_t>(t.cols())) {
      throw CorruptionError(path.string() + ": tensor \"" + name + "\" is " +
                            std::to_string(rows) + "x" + std::to_string(cols) +
                            ", expected " + t.shape_str());
    }
    double* d = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = r.f64();
  }
  if (r.pos != raw.size()) {
    throw CorruptionError(path.string() + ": trailing bytes after payload");
  }
  try {
    params.validate_finite();
  } catch (const Error& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
  return params;
}

std::string checkpoint_fingerprint(const fs::path& path) {
  return fingerprint_file(path);
}

}  // namespace emorag::fusion
