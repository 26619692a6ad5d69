#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "emorag/corpus.hpp"
#include "emorag/numkit.hpp"

namespace emorag::fusion {

using numkit::Tensor;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int max_frames = 128;
  int text_vocab_hash_dim = 1024;
  int audio_dim = 20;
  int video_dim = 17;
  bool use_emotion_prompt = true;
  bool prediction_clamp = true;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct AttentionBlock {
  Tensor wq, wk, wv, wo;  // each d_model x d_model, no biases
};

// All trainable state. The text encoder (embedding table + projection) is the
// single encoder shared by the text and prompt paths.
struct ModelParams {
  ModelConfig config;
  Tensor text_embed;   // hash_dim x d_model
  Tensor text_proj_w;  // d_model x d_model
  Tensor text_proj_b;  // 1 x d_model
  Tensor audio_w, audio_b;
  Tensor video_w, video_b;
  AttentionBlock audio_att, video_att, prompt_att;
  Tensor pred_w1, pred_b1;  // 4d -> d
  Tensor pred_w2, pred_b2;  // d -> 1

  std::vector<Tensor> all() const;
  // Optimizer groups: the shared text/prompt encoder versus everything else.
  std::vector<Tensor> text_encoder_group() const;
  std::vector<Tensor> rest_group() const;
  std::vector<std::pair<std::string, Tensor>> named() const;
  ModelParams clone() const;
  void validate_finite() const;
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for every tensor, drawn in all()
// order from one seeded stream.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Hashed-bag encoder: bucket tokens, average their table rows, project.
Tensor encode_text(const std::string& input, const ModelParams& params);

// First min(n_frames, max_frames) frames through affine + tanh, mean-pooled.
Tensor encode_sequence(const std::vector<double>& features, int n_frames, int dim,
                       const Tensor& w, const Tensor& b, int max_frames);
// Same encoding without the pooling: one row per kept frame (sequence-mode
// attention input).
Tensor encode_frames(const std::vector<double>& features, int n_frames, int dim,
                     const Tensor& w, const Tensor& b, int max_frames);

// Multi-head scaled dot-product attention, query 1 x d, keys/values P x d
// (P >= 1; P == 1 degenerates to weight 1 on the only position).
Tensor cross_attention(const Tensor& query, const Tensor& keys_values,
                       const AttentionBlock& block, const ModelConfig& config);

struct ForwardTrace {
  Tensor h_t, h_a, h_v, h_p;
  Tensor h_a_att, h_v_att, h_p_att;
  Tensor h_final;         // 1 x 4d, ordered (h_t, h_a_att, h_v_att, h_p_att)
  Tensor raw_prediction;  // 1 x 1, pre-clamp, differentiable
  double prediction = 0.0;  // reported score, clamped to [0, 24] when configured
};

// With use_emotion_prompt the prompt text must encode to at least one token;
// ablated, the prompt input is ignored and both prompt slots are zero.
ForwardTrace forward(const corpus::Sample& sample, const std::string& prompt_text,
                     const ModelParams& params);

// 1 - CCC with population moments, differentiable through predictions. Both
// variances zero with equal means is defined as loss 1.
Tensor ccc_loss(const Tensor& predictions, const Tensor& targets);

// Versioned binary: JSON config header + named tensors. Fingerprint hashes
// the exact file bytes.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_fingerprint(const std::filesystem::path& path);

}  // namespace emorag::fusion
