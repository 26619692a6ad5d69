#include "emorag/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "emorag/errors.hpp"
#include "emorag/numkit.hpp"
#include "emorag/rng.hpp"
#include "json.hpp"

namespace emorag::trainer {

namespace {

using numkit::Tensor;
using ordered_json = nlohmann::ordered_json;

// Shortest-decimal decomposition: value = mantissa * 10^exponent, trailing
// zeros folded into the exponent. ok is false when the value has no short
// decimal form worth special-casing.
struct Decimal {
  long long mantissa = 0;
  int exponent = 0;
  bool ok = false;
};

Decimal to_decimal(double value) {
  Decimal d;
  if (!(value > 0.0) || !std::isfinite(value)) return d;
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::scientific);
  if (res.ec != std::errc()) return d;
  const std::string s(buf, res.ptr);
  const std::size_t e_pos = s.find('e');
  if (e_pos == std::string::npos) return d;

  long long mantissa = 0;
  int frac_digits = 0;
  bool seen_dot = false;
  for (std::size_t i = 0; i < e_pos; ++i) {
    if (s[i] == '.') {
      seen_dot = true;
      continue;
    }
    if (mantissa > (1LL << 52) / 10) return d;
    mantissa = mantissa * 10 + (s[i] - '0');
    if (seen_dot) ++frac_digits;
  }
  int exp10 = 0;
  if (std::from_chars(s.data() + e_pos + 1, s.data() + s.size(), exp10).ec != std::errc()) {
    return d;
  }
  d.exponent = exp10 - frac_digits;
  while (mantissa % 10 == 0 && mantissa != 0) {
    mantissa /= 10;
    ++d.exponent;
  }
  d.mantissa = mantissa;
  d.ok = mantissa > 0;
  return d;
}

// Exact powers of ten fit a double up to 10^22; the schedule stays far below.
bool exact_pow10(int exp, double& out) {
  if (exp < 0 || exp > 22) return false;
  out = 1.0;
  for (int i = 0; i < exp; ++i) out *= 10.0;
  return true;
}

// mantissa * 10^exponent with one correctly rounded operation, so the result
// is the double nearest the decimal value, i.e. the value as written.
bool from_decimal(long long mantissa, int exponent, double& out) {
  double p = 1.0;
  if (exponent >= 0) {
    if (!exact_pow10(exponent, p)) return false;
    if (static_cast<double>(mantissa) > (1LL << 52) / p) return false;
    out = static_cast<double>(mantissa) * p;
    return true;
  }
  if (!exact_pow10(-exponent, p)) return false;
  out = static_cast<double>(mantissa) / p;
  return true;
}

// mantissa product with overflow guard; exponents add.
bool decimal_mul(Decimal& acc, const Decimal& factor) {
  if (!acc.ok || !factor.ok) return false;
  if (acc.mantissa > (1LL << 52) / factor.mantissa) return false;
  acc.mantissa *= factor.mantissa;
  acc.exponent += factor.exponent;
  return true;
}

double checked_metric_input(const std::vector<double>& predictions,
                            const std::vector<double>& targets, std::size_t min_len) {
  if (predictions.size() != targets.size()) {
    throw ShapeError("metric inputs differ in length: " +
                     std::to_string(predictions.size()) + " vs " +
                     std::to_string(targets.size()));
  }
  if (predictions.size() < min_len) {
    throw PreconditionError("metric needs at least " + std::to_string(min_len) +
                            " samples, got " + std::to_string(predictions.size()));
  }
  return static_cast<double>(predictions.size());
}

const promptgen::EmotionPrompt* prompt_for(const PromptMap& prompts,
                                           const corpus::Sample& sample) {
  const auto it = prompts.find(sample.id);
  if (it == prompts.end()) {
    throw ProvenanceError("no emotion prompt for sample \"" + sample.id + "\"");
  }
  return &it->second;
}

MetricsReport report_for(const fusion::ModelParams& params,
                         const std::vector<const corpus::Sample*>& view,
                         const PromptMap& prompts, const std::string& split_name) {
  if (view.size() < 2) {
    throw PreconditionError("split \"" + split_name + "\" has " +
                            std::to_string(view.size()) +
                            " samples; evaluation needs at least 2");
  }
  numkit::NoGradGuard guard;
  MetricsReport report;
  report.split = split_name;
  std::vector<double> predictions, targets;
  for (const corpus::Sample* sample : view) {
    std::string prompt_text;
    if (params.config.use_emotion_prompt) {
      prompt_text = prompt_for(prompts, *sample)->text;
    }
    const fusion::ForwardTrace trace = fusion::forward(*sample, prompt_text, params);
    report.per_sample.push_back(
        {sample->id, trace.prediction, static_cast<double>(sample->severity)});
    predictions.push_back(trace.prediction);
    targets.push_back(static_cast<double>(sample->severity));
  }
  report.n = static_cast<int>(view.size());
  report.ccc = ccc_metric(predictions, targets);
  report.mae = mae_metric(predictions, targets);
  return report;
}

std::string round_trip(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

ordered_json config_json(const TrainConfig& c) {
  return ordered_json{{"batch_size", c.batch_size},
                      {"epochs", c.epochs},
                      {"base_lr", c.base_lr},
                      {"lr_decay", c.lr_decay},
                      {"lr_decay_epochs", c.lr_decay_epochs},
                      {"text_encoder_lr_multiplier", c.text_encoder_lr_multiplier},
                      {"seed", c.seed},
                      {"k_retrieved", c.k_retrieved},
                      {"shuffle", c.shuffle}};
}

TrainConfig config_from_json(const ordered_json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.base_lr = j.at("base_lr").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.lr_decay_epochs = j.at("lr_decay_epochs").get<int>();
  c.text_encoder_lr_multiplier = j.at("text_encoder_lr_multiplier").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.k_retrieved = j.at("k_retrieved").get<int>();
  c.shuffle = j.at("shuffle").get<bool>();
  return c;
}

ordered_json model_config_json(const fusion::ModelConfig& c) {
  return ordered_json{{"d_model", c.d_model},
                      {"n_heads", c.n_heads},
                      {"max_frames", c.max_frames},
                      {"text_vocab_hash_dim", c.text_vocab_hash_dim},
                      {"audio_dim", c.audio_dim},
                      {"video_dim", c.video_dim},
                      {"use_emotion_prompt", c.use_emotion_prompt},
                      {"prediction_clamp", c.prediction_clamp}};
}

fusion::ModelConfig model_config_from_json(const ordered_json& j) {
  fusion::ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.max_frames = j.at("max_frames").get<int>();
  c.text_vocab_hash_dim = j.at("text_vocab_hash_dim").get<int>();
  c.audio_dim = j.at("audio_dim").get<int>();
  c.video_dim = j.at("video_dim").get<int>();
  c.use_emotion_prompt = j.at("use_emotion_prompt").get<bool>();
  c.prediction_clamp = j.at("prediction_clamp").get<bool>();
  return c;
}

ordered_json metrics_json(const MetricsReport& r) {
  return ordered_json{{"split", r.split}, {"ccc", r.ccc}, {"mae", r.mae}, {"n", r.n}};
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 2) {
    throw PreconditionError("batch_size must be >= 2, got " + std::to_string(batch_size));
  }
  if (epochs < 1) {
    throw PreconditionError("epochs must be >= 1, got " + std::to_string(epochs));
  }
  if (!(base_lr > 0.0) || !(lr_decay > 0.0) || !(text_encoder_lr_multiplier > 0.0)) {
    throw PreconditionError("learning rates and decay must be positive");
  }
  if (lr_decay_epochs < 1) {
    throw PreconditionError("lr_decay_epochs must be >= 1, got " +
                            std::to_string(lr_decay_epochs));
  }
  if (k_retrieved < 1) {
    throw PreconditionError("k_retrieved must be >= 1, got " + std::to_string(k_retrieved));
  }
}

LearningRates lr_at_epoch(int epoch, const TrainConfig& config) {
  config.validate();
  if (epoch < 0 || epoch >= config.epochs) {
    throw PreconditionError("epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(config.epochs) + ")");
  }
  const int plateau = epoch / config.lr_decay_epochs;

  Decimal main_d = to_decimal(config.base_lr);
  const Decimal decay_d = to_decimal(config.lr_decay);
  bool exact = main_d.ok && decay_d.ok;
  for (int i = 0; exact && i < plateau; ++i) exact = decimal_mul(main_d, decay_d);

  LearningRates rates;
  if (exact && from_decimal(main_d.mantissa, main_d.exponent, rates.main)) {
    Decimal text_d = main_d;
    const Decimal mult_d = to_decimal(config.text_encoder_lr_multiplier);
    if (mult_d.ok && decimal_mul(text_d, mult_d) &&
        from_decimal(text_d.mantissa, text_d.exponent, rates.text_encoder)) {
      return rates;
    }
    rates.text_encoder = config.text_encoder_lr_multiplier * rates.main;
    return rates;
  }
  rates.main = config.base_lr * std::pow(config.lr_decay, plateau);
  rates.text_encoder = config.text_encoder_lr_multiplier * rates.main;
  return rates;
}

double ccc_metric(const std::vector<double>& predictions,
                  const std::vector<double>& targets) {
  const double n = checked_metric_input(predictions, targets, 2);
  double mean_p = 0.0, mean_t = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    mean_p += predictions[i];
    mean_t += targets[i];
  }
  mean_p /= n;
  mean_t /= n;
  double cov = 0.0, var_p = 0.0, var_t = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double dp = predictions[i] - mean_p;
    const double dt = targets[i] - mean_t;
    cov += dp * dt;
    var_p += dp * dp;
    var_t += dt * dt;
  }
  cov /= n;
  var_p /= n;
  var_t /= n;
  const double gap = mean_p - mean_t;
  const double denom = var_p + var_t + gap * gap;
  if (denom == 0.0) return 0.0;
  return 2.0 * cov / denom;
}

double mae_metric(const std::vector<double>& predictions,
                  const std::vector<double>& targets) {
  const double n = checked_metric_input(predictions, targets, 1);
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    total += std::abs(predictions[i] - targets[i]);
  }
  return total / n;
}

std::pair<fusion::ModelParams, RunRecord> train(const corpus::Dataset& dataset,
                                                const PromptMap& prompts,
                                                const fusion::ModelParams& params_init,
                                                const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  config.validate();
  params_init.config.validate();

  const auto train_view = dataset.split_view(corpus::Split::train);
  const auto val_view = dataset.split_view(corpus::Split::validation);
  if (train_view.empty()) throw PreconditionError("train split is empty");
  if (val_view.size() < 2) {
    throw PreconditionError("validation split needs at least 2 samples, got " +
                            std::to_string(val_view.size()));
  }
  if (static_cast<std::size_t>(config.batch_size) > train_view.size()) {
    throw PreconditionError("batch_size " + std::to_string(config.batch_size) +
                            " exceeds train split size " +
                            std::to_string(train_view.size()));
  }
  if (params_init.config.use_emotion_prompt) {
    for (const corpus::Sample* sample : train_view) prompt_for(prompts, *sample);
  }

  fusion::ModelParams params = params_init.clone();
  std::vector<Tensor> text_group = params.text_encoder_group();
  std::vector<Tensor> rest_group = params.rest_group();
  std::vector<Tensor> all_params = params.all();
  numkit::AdamState text_state = numkit::AdamState::init(text_group);
  numkit::AdamState rest_state = numkit::AdamState::init(rest_group);

  RunRecord record;
  record.train_config = config;
  record.model_config = params.config;

  fusion::ModelParams best_params = params.clone();
  double best_ccc = -2.0;  // below any reachable concordance

  std::vector<std::size_t> order(train_view.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.shuffle) {
      Rng rng(Rng::mix(config.seed, static_cast<std::uint64_t>(epoch)));
      rng.shuffle(order);
    }
    const LearningRates rates = lr_at_epoch(epoch, config);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      if (end - begin < 2) break;  // a concordance loss over one sample is undefined

      numkit::zero_grad(all_params);
      double batch_loss = 0.0;
      try {
        std::vector<Tensor> predictions;
        std::vector<double> targets;
        for (std::size_t i = begin; i < end; ++i) {
          const corpus::Sample* sample = train_view[order[i]];
          std::string prompt_text;
          if (params.config.use_emotion_prompt) {
            prompt_text = prompt_for(prompts, *sample)->text;
          }
          predictions.push_back(
              fusion::forward(*sample, prompt_text, params).raw_prediction);
          targets.push_back(static_cast<double>(sample->severity));
        }
        Tensor loss = fusion::ccc_loss(
            numkit::concat_cols(predictions),
            Tensor::from(1, static_cast<int>(targets.size()), targets));
        if (!std::isfinite(loss.value())) throw NumericError("non-finite loss");
        numkit::backward(loss);
        numkit::adam_step(text_group, text_state, rates.text_encoder);
        numkit::adam_step(rest_group, rest_state, rates.main);
        batch_loss = loss.value();
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": " + e.what());
      }
      loss_sum += batch_loss;
      ++batches;
      ++record.total_steps;
    }
    record.epoch_losses.push_back(loss_sum / static_cast<double>(batches));

    const MetricsReport val = report_for(params, val_view, prompts, "validation");
    record.val_ccc.push_back(val.ccc);
    record.val_mae.push_back(val.mae);
    if (val.ccc > best_ccc) {  // strict: ties keep the earliest epoch
      best_ccc = val.ccc;
      record.best_epoch = epoch;
      best_params = params.clone();
    }
  }

  for (const corpus::Split split :
       {corpus::Split::train, corpus::Split::validation, corpus::Split::test}) {
    const std::string name = corpus::to_string(split);
    record.final_metrics[name] =
        report_for(best_params, dataset.split_view(split), prompts, name);
  }
  record.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(best_params), std::move(record)};
}

MetricsReport evaluate(const fusion::ModelParams& params, const corpus::Dataset& dataset,
                       corpus::Split split, const PromptMap& prompts) {
  params.config.validate();
  return report_for(params, dataset.split_view(split), prompts, corpus::to_string(split));
}

void write_run_record(const RunRecord& record, const std::filesystem::path& path) {
  ordered_json j;
  j["train_config"] = config_json(record.train_config);
  j["model_config"] = model_config_json(record.model_config);
  j["selection"] = "best validation ccc";
  j["epoch_losses"] = record.epoch_losses;
  j["val_ccc"] = record.val_ccc;
  j["val_mae"] = record.val_mae;
  j["best_epoch"] = record.best_epoch;
  j["total_steps"] = record.total_steps;
  j["checkpoint_fingerprint"] = record.checkpoint_fingerprint;
  j["wall_clock_s"] = record.wall_clock_s;
  ordered_json finals = ordered_json::object();
  for (const auto& [name, report] : record.final_metrics) finals[name] = metrics_json(report);
  j["final_metrics"] = finals;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

RunRecord load_run_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot read " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
  try {
    RunRecord record;
    record.train_config = config_from_json(j.at("train_config"));
    record.model_config = model_config_from_json(j.at("model_config"));
    record.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
    record.val_ccc = j.at("val_ccc").get<std::vector<double>>();
    record.val_mae = j.at("val_mae").get<std::vector<double>>();
    record.best_epoch = j.at("best_epoch").get<int>();
    record.total_steps = j.at("total_steps").get<long>();
    record.checkpoint_fingerprint = j.at("checkpoint_fingerprint").get<std::string>();
    record.wall_clock_s = j.at("wall_clock_s").get<double>();
    for (const auto& [name, m] : j.at("final_metrics").items()) {
      MetricsReport report;
      report.split = m.at("split").get<std::string>();
      report.ccc = m.at("ccc").get<double>();
      report.mae = m.at("mae").get<double>();
      report.n = m.at("n").get<int>();
      record.final_metrics[name] = std::move(report);
    }
    const std::size_t epochs = static_cast<std::size_t>(record.train_config.epochs);
    if (record.epoch_losses.size() != epochs || record.val_ccc.size() != epochs ||
        record.val_mae.size() != epochs) {
      throw CorruptionError(path.string() + ": per-epoch series do not match epochs=" +
                            std::to_string(epochs));
    }
    if (record.best_epoch < 0 || record.best_epoch >= record.train_config.epochs) {
      throw CorruptionError(path.string() + ": best_epoch out of range");
    }
    return record;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
}

void write_metrics(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / ("metrics_" + report.split + ".json"),
                      std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write metrics under " + dir.string());
    out << metrics_json(report).dump(2) << "\n";
  }
  std::ofstream csv(dir / ("predictions_" + report.split + ".csv"),
                    std::ios::binary | std::ios::trunc);
  if (!csv) throw IngestError("cannot write predictions under " + dir.string());
  csv << "id,prediction,target\n";
  for (const PerSample& row : report.per_sample) {
    csv << row.id << "," << round_trip(row.prediction) << "," << round_trip(row.target)
        << "\n";
  }
}

}  // namespace emorag::trainer
