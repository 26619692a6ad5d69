#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "emorag/corpus.hpp"
#include "emorag/fusion.hpp"
#include "emorag/promptgen.hpp"

namespace emorag::trainer {

struct TrainConfig {
  int batch_size = 32;
  int epochs = 400;
  double base_lr = 6e-4;
  double lr_decay = 0.1;
  int lr_decay_epochs = 100;
  double text_encoder_lr_multiplier = 0.1;
  std::uint64_t seed = 0;
  int k_retrieved = 5;
  bool shuffle = true;

  // batch_size >= 2 (loss precondition), epochs >= 1, positive rates.
  void validate() const;
};

struct LearningRates {
  double main = 0.0;
  double text_encoder = 0.0;
};

// Step schedule: base_lr shrinks by lr_decay every lr_decay_epochs, and the
// text encoder always runs at the multiplier times the main rate. Computed in
// decimal (integer mantissa, power-of-ten exponent) so each plateau equals the
// rate as written, not a drifted product of inexact doubles.
LearningRates lr_at_epoch(int epoch, const TrainConfig& config);

// Population-moment concordance in [-1, 1]; a zero denominator reports 0.
double ccc_metric(const std::vector<double>& predictions,
                  const std::vector<double>& targets);
double mae_metric(const std::vector<double>& predictions,
                  const std::vector<double>& targets);

struct PerSample {
  std::string id;
  double prediction = 0.0;
  double target = 0.0;
};

struct MetricsReport {
  std::string split;
  double ccc = 0.0;
  double mae = 0.0;
  int n = 0;
  std::vector<PerSample> per_sample;
};

struct RunRecord {
  TrainConfig train_config;
  fusion::ModelConfig model_config;
  std::vector<double> epoch_losses;  // mean batch loss per epoch
  std::vector<double> val_ccc;
  std::vector<double> val_mae;
  int best_epoch = -1;
  long total_steps = 0;
  std::string checkpoint_fingerprint;  // set once the winner is on disk
  double wall_clock_s = 0.0;
  std::map<std::string, MetricsReport> final_metrics;  // split name -> report
};

using PromptMap = std::map<std::string, promptgen::EmotionPrompt>;

// Seeded-shuffle minibatch training with a concordance loss, two Adam groups
// (text encoder at the multiplier rate), per-epoch validation, and selection
// of the epoch with the best validation concordance. Returns the selected
// parameters; final_metrics holds reports for all three splits under them.
std::pair<fusion::ModelParams, RunRecord> train(const corpus::Dataset& dataset,
                                                const PromptMap& prompts,
                                                const fusion::ModelParams& params_init,
                                                const TrainConfig& config);

// Inference pass over one split, deterministic, clamped per the model config.
MetricsReport evaluate(const fusion::ModelParams& params, const corpus::Dataset& dataset,
                       corpus::Split split, const PromptMap& prompts);

// run.json: everything in RunRecord except per-sample rows.
void write_run_record(const RunRecord& record, const std::filesystem::path& path);
RunRecord load_run_record(const std::filesystem::path& path);

// metrics_<split>.json plus predictions_<split>.csv (id,prediction,target),
// doubles printed with round-trip precision.
void write_metrics(const MetricsReport& report, const std::filesystem::path& dir);

}  // namespace emorag::trainer
