#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "emorag/corpus.hpp"
#include "emorag/errors.hpp"
#include "emorag/fusion.hpp"
#include "emorag/numkit.hpp"
#include "emorag/rng.hpp"
#include "emorag/text.hpp"

namespace fs = std::filesystem;
using namespace emorag;
using fusion::ModelConfig;
using fusion::ModelParams;
using numkit::Tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.max_frames = 8;
  c.text_vocab_hash_dim = 64;
  c.audio_dim = 5;
  c.video_dim = 4;
  return c;
}

corpus::Sample make_sample(const std::string& id, const std::string& text, int audio_frames,
                           int video_frames, const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  corpus::Sample s;
  s.id = id;
  s.text = text;
  s.audio_frames = audio_frames;
  s.audio_dim = config.audio_dim;
  s.audio_features.resize(static_cast<std::size_t>(audio_frames) * config.audio_dim);
  for (double& v : s.audio_features) v = rng.normal();
  s.video_frames = video_frames;
  s.video_dim = config.video_dim;
  s.video_features.resize(static_cast<std::size_t>(video_frames) * config.video_dim);
  for (double& v : s.video_features) v = rng.normal();
  s.severity = static_cast<int>(rng.below(25));
  return s;
}

// Plain-loop projection: out = x W + b for a single row x.
std::vector<double> project_row(const std::vector<double>& x, const Tensor& w,
                                const Tensor& b) {
  const int in = w.rows();
  const int out_dim = w.cols();
  REQUIRE(static_cast<int>(x.size()) == in);
  std::vector<double> out(out_dim, 0.0);
  for (int j = 0; j < out_dim; ++j) {
    double s = 0.0;
    for (int i = 0; i < in; ++i) s += x[i] * w.at(i, j);
    out[j] = s + (b.defined() ? b.at(0, j) : 0.0);
  }
  return out;
}

// Straight-line reimplementation of the hashed-bag text encoder.
std::vector<double> oracle_encode_text(const std::string& input, const ModelParams& p) {
  const auto tokens = text::tokenize(input);
  REQUIRE(!tokens.empty());
  std::vector<double> bag(p.config.d_model, 0.0);
  for (const auto& tok : tokens) {
    const int bucket = text::token_bucket(tok, 0, p.config.text_vocab_hash_dim);
    for (int j = 0; j < p.config.d_model; ++j) bag[j] += p.text_embed.at(bucket, j);
  }
  for (double& v : bag) v /= static_cast<double>(tokens.size());
  return project_row(bag, p.text_proj_w, p.text_proj_b);
}

// Straight-line reimplementation of the sequence encoder.
std::vector<double> oracle_encode_sequence(const std::vector<double>& feats, int frames,
                                           int dim, const Tensor& w, const Tensor& b,
                                           int max_frames) {
  const int kept = std::min(frames, max_frames);
  const int d = w.cols();
  std::vector<double> mean(d, 0.0);
  for (int t = 0; t < kept; ++t) {
    const std::vector<double> row(feats.begin() + static_cast<std::size_t>(t) * dim,
                                  feats.begin() + static_cast<std::size_t>(t + 1) * dim);
    const std::vector<double> enc = project_row(row, w, b);
    for (int j = 0; j < d; ++j) mean[j] += std::tanh(enc[j]);
  }
  for (double& v : mean) v /= static_cast<double>(kept);
  return mean;
}

// Straight-line multi-head attention for a 1 x d query over P x d keys/values.
std::vector<double> oracle_attention(const std::vector<double>& query,
                                     const std::vector<std::vector<double>>& kv_rows,
                                     const fusion::AttentionBlock& block,
                                     const ModelConfig& config) {
  const int d = config.d_model;
  const int dh = config.head_dim();
  const std::vector<double> q = project_row(query, block.wq, Tensor());
  std::vector<std::vector<double>> k, v;
  for (const auto& row : kv_rows) {
    k.push_back(project_row(row, block.wk, Tensor()));
    v.push_back(project_row(row, block.wv, Tensor()));
  }
  std::vector<double> merged(d, 0.0);
  for (int h = 0; h < config.n_heads; ++h) {
    const int off = h * dh;
    std::vector<double> scores(kv_rows.size(), 0.0);
    double max_score = -1e300;
    for (std::size_t pos = 0; pos < kv_rows.size(); ++pos) {
      double s = 0.0;
      for (int j = 0; j < dh; ++j) s += q[off + j] * k[pos][off + j];
      scores[pos] = s / std::sqrt(static_cast<double>(dh));
      max_score = std::max(max_score, scores[pos]);
    }
    double z = 0.0;
    for (double& s : scores) {
      s = std::exp(s - max_score);
      z += s;
    }
    for (std::size_t pos = 0; pos < kv_rows.size(); ++pos) {
      const double weight = scores[pos] / z;
      for (int j = 0; j < dh; ++j) merged[off + j] += weight * v[pos][off + j];
    }
  }
  return project_row(merged, block.wo, Tensor());
}

double oracle_ccc_loss(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  cov /= n;
  va /= n;
  vb /= n;
  const double denom = va + vb + (ma - mb) * (ma - mb);
  if (denom == 0.0) return 1.0;
  return 1.0 - 2.0 * cov / denom;
}

void check_close(const Tensor& got, const std::vector<double>& want, double tol) {
  REQUIRE(got.size() == want.size());
  const double* d = got.data();
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(d[i] == doctest::Approx(want[i]).epsilon(tol).scale(1.0));
  }
}

}  // namespace

TEST_CASE("config invariants are enforced") {
  ModelConfig c = small_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), PreconditionError);
  c = small_config();
  c.max_frames = 0;
  CHECK_THROWS_AS(c.validate(), PreconditionError);
  c = small_config();
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("initialization is seeded, bounded, and clones deeply") {
  const ModelConfig config = small_config();
  ModelParams a = fusion::init_params(config, 11);
  ModelParams b = fusion::init_params(config, 11);
  ModelParams c = fusion::init_params(config, 12);

  const auto an = a.named();
  const auto bn = b.named();
  bool any_differs_from_c = false;
  const auto cn = c.named();
  for (std::size_t i = 0; i < an.size(); ++i) {
    REQUIRE(an[i].second.size() == bn[i].second.size());
    CHECK(std::memcmp(an[i].second.data(), bn[i].second.data(),
                      an[i].second.size() * sizeof(double)) == 0);
    if (std::memcmp(an[i].second.data(), cn[i].second.data(),
                    an[i].second.size() * sizeof(double)) != 0) {
      any_differs_from_c = true;
    }
    CHECK(an[i].second.requires_grad());
  }
  CHECK(any_differs_from_c);
  a.validate_finite();

  // Bound check against the declared fan-in rule.
  const double embed_bound = 1.0 / std::sqrt(static_cast<double>(config.text_vocab_hash_dim));
  for (std::size_t i = 0; i < a.text_embed.size(); ++i) {
    CHECK(std::abs(a.text_embed.data()[i]) <= embed_bound);
  }

  ModelParams deep = a.clone();
  deep.pred_b2.set(0, 0, 123.0);
  CHECK(a.pred_b2.value() != 123.0);
}

TEST_CASE("text encoder matches the hand-traced bucket average") {
  const ModelConfig config = small_config();
  const ModelParams p = fusion::init_params(config, 3);

  const std::string three = "calm bright morning";
  check_close(fusion::encode_text(three, p), oracle_encode_text(three, p), 1e-12);

  SUBCASE("bag property: token order is irrelevant") {
    const Tensor x = fusion::encode_text("calm bright morning", p);
    const Tensor y = fusion::encode_text("morning calm bright", p);
    CHECK(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
  }

  SUBCASE("single token is that bucket row projected") {
    const int bucket = text::token_bucket("calm", 0, config.text_vocab_hash_dim);
    std::vector<double> row(config.d_model);
    for (int j = 0; j < config.d_model; ++j) row[j] = p.text_embed.at(bucket, j);
    check_close(fusion::encode_text("calm", p),
                project_row(row, p.text_proj_w, p.text_proj_b), 1e-12);
  }

  SUBCASE("textless inputs are refused") {
    CHECK_THROWS_AS(fusion::encode_text("", p), PreconditionError);
    CHECK_THROWS_AS(fusion::encode_text("?!", p), PreconditionError);
  }
}

TEST_CASE("sequence encoder matches the straight-line oracle") {
  const ModelConfig config = small_config();
  const ModelParams p = fusion::init_params(config, 4);
  Rng rng(99);

  SUBCASE("one frame is tanh of its affine map") {
    std::vector<double> frame(config.audio_dim);
    for (double& v : frame) v = rng.normal();
    const auto proj = project_row(frame, p.audio_w, p.audio_b);
    std::vector<double> want(proj.size());
    for (std::size_t j = 0; j < proj.size(); ++j) want[j] = std::tanh(proj[j]);
    check_close(fusion::encode_sequence(frame, 1, config.audio_dim, p.audio_w, p.audio_b,
                                        config.max_frames),
                want, 1e-12);
  }

  SUBCASE("identical frames pool to the single-frame encoding") {
    std::vector<double> frame(config.audio_dim);
    for (double& v : frame) v = rng.normal();
    std::vector<double> four;
    for (int i = 0; i < 4; ++i) four.insert(four.end(), frame.begin(), frame.end());
    const Tensor one = fusion::encode_sequence(frame, 1, config.audio_dim, p.audio_w,
                                               p.audio_b, config.max_frames);
    const Tensor many = fusion::encode_sequence(four, 4, config.audio_dim, p.audio_w,
                                                p.audio_b, config.max_frames);
    check_close(many, std::vector<double>(one.data(), one.data() + one.size()), 1e-12);
  }

  SUBCASE("random 5-frame input matches the oracle") {
    std::vector<double> feats(5 * config.audio_dim);
    for (double& v : feats) v = rng.normal();
    check_close(fusion::encode_sequence(feats, 5, config.audio_dim, p.audio_w, p.audio_b,
                                        config.max_frames),
                oracle_encode_sequence(feats, 5, config.audio_dim, p.audio_w, p.audio_b,
                                       config.max_frames),
                1e-12);
  }

  SUBCASE("extra frames past max_frames are ignored") {
    std::vector<double> feats(5 * config.audio_dim);
    for (double& v : feats) v = rng.normal();
    check_close(fusion::encode_sequence(feats, 5, config.audio_dim, p.audio_w, p.audio_b, 3),
                oracle_encode_sequence(feats, 5, config.audio_dim, p.audio_w, p.audio_b, 3),
                1e-12);
  }

  SUBCASE("width mismatch is a shape error") {
    std::vector<double> feats(3 * (config.audio_dim + 1));
    CHECK_THROWS_AS(fusion::encode_sequence(feats, 3, config.audio_dim + 1, p.audio_w,
                                            p.audio_b, config.max_frames),
                    ShapeError);
  }

  SUBCASE("zero frames are refused") {
    CHECK_THROWS_AS(
        fusion::encode_sequence({}, 0, config.audio_dim, p.audio_w, p.audio_b, 4),
        PreconditionError);
  }
}

TEST_CASE("cross attention degenerates and generalizes per the algebra") {
  const ModelConfig config = small_config();
  const ModelParams p = fusion::init_params(config, 5);
  Rng rng(1234);

  std::vector<double> qa(config.d_model), qb(config.d_model), kv(config.d_model);
  for (double& v : qa) v = rng.normal();
  for (double& v : qb) v = rng.normal();
  for (double& v : kv) v = rng.normal();
  const Tensor query_a = Tensor::from(1, config.d_model, qa);
  const Tensor query_b = Tensor::from(1, config.d_model, qb);
  const Tensor kv_one = Tensor::from(1, config.d_model, kv);

  SUBCASE("single position: weight one, query-independent") {
    const Tensor out_a = fusion::cross_attention(query_a, kv_one, p.audio_att, config);
    const Tensor out_b = fusion::cross_attention(query_b, kv_one, p.audio_att, config);
    CHECK(std::memcmp(out_a.data(), out_b.data(), out_a.size() * sizeof(double)) == 0);

    const auto vproj = project_row(kv, p.audio_att.wv, Tensor());
    check_close(out_a, project_row(vproj, p.audio_att.wo, Tensor()), 1e-12);
  }

  SUBCASE("identical rows collapse to the single-position case") {
    std::vector<double> tripled;
    for (int i = 0; i < 3; ++i) tripled.insert(tripled.end(), kv.begin(), kv.end());
    const Tensor kv_three = Tensor::from(3, config.d_model, tripled);
    const Tensor one = fusion::cross_attention(query_a, kv_one, p.audio_att, config);
    const Tensor three = fusion::cross_attention(query_a, kv_three, p.audio_att, config);
    check_close(three, std::vector<double>(one.data(), one.data() + one.size()), 1e-12);
  }

  SUBCASE("two positions, one head, d=2: hand-computed weights") {
    ModelConfig tiny;
    tiny.d_model = 2;
    tiny.n_heads = 1;
    tiny.audio_dim = 2;
    tiny.video_dim = 2;
    fusion::AttentionBlock block;
    block.wq = Tensor::from(2, 2, {0.3, -0.2, 0.5, 0.7}, true);
    block.wk = Tensor::from(2, 2, {-0.4, 0.6, 0.1, 0.2}, true);
    block.wv = Tensor::from(2, 2, {0.9, -0.1, 0.2, 0.8}, true);
    block.wo = Tensor::from(2, 2, {1.1, 0.3, -0.5, 0.4}, true);
    const std::vector<double> q{0.7, -1.2};
    const std::vector<std::vector<double>> rows{{0.4, 0.9}, {-1.0, 0.3}};

    const Tensor got = fusion::cross_attention(
        Tensor::from(1, 2, q), Tensor::from(2, 2, {0.4, 0.9, -1.0, 0.3}), block, tiny);
    check_close(got, oracle_attention(q, rows, block, tiny), 1e-12);
  }

  SUBCASE("multi-head random case matches the oracle") {
    std::vector<double> flat;
    std::vector<std::vector<double>> rows;
    for (int pos = 0; pos < 4; ++pos) {
      std::vector<double> row(config.d_model);
      for (double& v : row) v = rng.normal();
      rows.push_back(row);
      flat.insert(flat.end(), row.begin(), row.end());
    }
    const Tensor got = fusion::cross_attention(
        query_a, Tensor::from(4, config.d_model, flat), p.video_att, config);
    check_close(got, oracle_attention(qa, rows, p.video_att, config), 1e-12);
  }

  SUBCASE("width mismatches are shape errors") {
    CHECK_THROWS_AS(
        fusion::cross_attention(Tensor::from(1, 3, {1, 2, 3}), kv_one, p.audio_att, config),
        ShapeError);
  }
}

TEST_CASE("forward composes the trace exactly") {
  ModelConfig config = small_config();
  const ModelParams p = fusion::init_params(config, 21);
  const corpus::Sample sample =
      make_sample("s1", "heavy rain kept falling over the harbor", 6, 5, config, 77);
  const std::string prompt = "the mood reads negative with themes of rain and harbor";

  fusion::ForwardTrace trace = fusion::forward(sample, prompt, p);

  SUBCASE("text passes through the concatenation untouched") {
    REQUIRE(trace.h_final.cols() == 4 * config.d_model);
    CHECK(std::memcmp(trace.h_final.data(), trace.h_t.data(),
                      static_cast<std::size_t>(config.d_model) * sizeof(double)) == 0);
  }

  SUBCASE("full trace matches a straight-line oracle") {
    const std::vector<double> h_t = oracle_encode_text(sample.text, p);
    const std::vector<double> h_p = oracle_encode_text(prompt, p);
    const std::vector<double> h_a =
        oracle_encode_sequence(sample.audio_features, sample.audio_frames, sample.audio_dim,
                               p.audio_w, p.audio_b, config.max_frames);
    const std::vector<double> h_v =
        oracle_encode_sequence(sample.video_features, sample.video_frames, sample.video_dim,
                               p.video_w, p.video_b, config.max_frames);
    check_close(trace.h_t, h_t, 1e-10);
    check_close(trace.h_a, h_a, 1e-10);
    check_close(trace.h_v, h_v, 1e-10);
    check_close(trace.h_p, h_p, 1e-10);

    const std::vector<double> a_att = oracle_attention(h_t, {h_a}, p.audio_att, config);
    const std::vector<double> v_att = oracle_attention(h_t, {h_v}, p.video_att, config);
    const std::vector<double> p_att = oracle_attention(h_t, {h_p}, p.prompt_att, config);
    check_close(trace.h_a_att, a_att, 1e-10);
    check_close(trace.h_v_att, v_att, 1e-10);
    check_close(trace.h_p_att, p_att, 1e-10);

    std::vector<double> h_final;
    for (const auto* part : {&h_t, &a_att, &v_att, &p_att}) {
      h_final.insert(h_final.end(), part->begin(), part->end());
    }
    check_close(trace.h_final, h_final, 1e-10);

    std::vector<double> hidden = project_row(h_final, p.pred_w1, p.pred_b1);
    for (double& v : hidden) v = std::tanh(v);
    const std::vector<double> raw = project_row(hidden, p.pred_w2, p.pred_b2);
    CHECK(trace.raw_prediction.value() == doctest::Approx(raw[0]).epsilon(1e-10));
  }

  SUBCASE("ablated runs zero the prompt slot and ignore the prompt") {
    ModelConfig ablated = config;
    ablated.use_emotion_prompt = false;
    ModelParams pa = p.clone();
    pa.config = ablated;

    fusion::ForwardTrace t1 = fusion::forward(sample, "gloomy words", pa);
    fusion::ForwardTrace t2 = fusion::forward(sample, "cheerful words entirely", pa);
    CHECK(t1.raw_prediction.value() == t2.raw_prediction.value());
    CHECK(t1.prediction == t2.prediction);
    for (int j = 0; j < ablated.d_model; ++j) {
      CHECK(t1.h_p_att.at(0, j) == 0.0);
      CHECK(t1.h_final.at(0, 3 * ablated.d_model + j) == 0.0);
    }
  }

  SUBCASE("prompt is mandatory when the prompt arm is on") {
    CHECK_THROWS_AS(fusion::forward(sample, "", p), PreconditionError);
  }

  SUBCASE("clamping applies to the report, never the tape") {
    ModelParams bent = p.clone();
    for (std::size_t i = 0; i < bent.pred_w2.size(); ++i) bent.pred_w2.data()[i] = 0.0;
    bent.pred_b2.set(0, 0, 31.2);
    fusion::ForwardTrace t = fusion::forward(sample, prompt, bent);
    CHECK(t.raw_prediction.value() == 31.2);
    CHECK(t.prediction == 24.0);

    bent.pred_b2.set(0, 0, -3.0);
    CHECK(fusion::forward(sample, prompt, bent).prediction == 0.0);

    bent.config.prediction_clamp = false;
    CHECK(fusion::forward(sample, prompt, bent).prediction == -3.0);
  }

  SUBCASE("modality width mismatch is a shape error") {
    corpus::Sample bad = sample;
    bad.audio_dim = config.audio_dim + 1;
    bad.audio_features.resize(static_cast<std::size_t>(bad.audio_frames) * bad.audio_dim);
    CHECK_THROWS_AS(fusion::forward(bad, prompt, p), ShapeError);
  }
}

TEST_CASE("ccc loss matches its definition") {
  SUBCASE("anchors") {
    const Tensor y = Tensor::from(1, 4, {1.0, 2.0, 3.0, 4.0});
    CHECK(fusion::ccc_loss(y, y).value() == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));

    const Tensor flat = Tensor::from(1, 4, {2.0, 2.0, 2.0, 2.0});
    CHECK(fusion::ccc_loss(flat, y).value() == 1.0);

    const Tensor up = Tensor::from(1, 3, {1.0, 2.0, 3.0});
    const Tensor down = Tensor::from(1, 3, {3.0, 2.0, 1.0});
    CHECK(fusion::ccc_loss(up, down).value() ==
          doctest::Approx(2.0).epsilon(1e-12).scale(1.0));
  }

  SUBCASE("random batches agree with the from-definition oracle") {
    Rng rng(31);
    for (int round = 0; round < 60; ++round) {
      const int n = rng.uniform_int(2, 64);
      std::vector<double> a(n), b(n);
      for (double& v : a) v = rng.uniform(-5.0, 5.0);
      for (double& v : b) v = rng.uniform(0.0, 24.0);
      const double got =
          fusion::ccc_loss(Tensor::from(1, n, a), Tensor::from(1, n, b)).value();
      CHECK(got == doctest::Approx(oracle_ccc_loss(a, b)).epsilon(1e-12).scale(1.0));
    }
  }

  SUBCASE("symmetric in its arguments") {
    Rng rng(32);
    for (int round = 0; round < 10; ++round) {
      const int n = rng.uniform_int(2, 16);
      std::vector<double> a(n), b(n);
      for (double& v : a) v = rng.normal();
      for (double& v : b) v = rng.normal();
      const Tensor ta = Tensor::from(1, n, a);
      const Tensor tb = Tensor::from(1, n, b);
      CHECK(fusion::ccc_loss(ta, tb).value() == fusion::ccc_loss(tb, ta).value());
    }
  }

  SUBCASE("invariant under joint affine maps, not per-argument scaling") {
    const std::vector<double> a{0.4, 1.9, -0.7, 2.2, 0.1};
    const std::vector<double> b{1.0, 2.5, -0.2, 1.8, 0.9};
    auto map = [](const std::vector<double>& xs, double m, double c) {
      std::vector<double> out;
      for (double x : xs) out.push_back(m * x + c);
      return out;
    };
    const double base =
        fusion::ccc_loss(Tensor::from(1, 5, a), Tensor::from(1, 5, b)).value();
    const double joint = fusion::ccc_loss(Tensor::from(1, 5, map(a, 2.0, -3.0)),
                                          Tensor::from(1, 5, map(b, 2.0, -3.0)))
                             .value();
    CHECK(joint == doctest::Approx(base).epsilon(1e-12).scale(1.0));

    const double lopsided =
        fusion::ccc_loss(Tensor::from(1, 5, map(a, 2.0, 0.0)), Tensor::from(1, 5, b)).value();
    CHECK(std::abs(lopsided - base) > 1e-6);
  }

  SUBCASE("degenerate batches and bad shapes") {
    const Tensor same = Tensor::from(1, 3, {5.0, 5.0, 5.0});
    CHECK(fusion::ccc_loss(same, same).value() == 1.0);
    CHECK_THROWS_AS(
        fusion::ccc_loss(Tensor::from(1, 1, {1.0}), Tensor::from(1, 1, {1.0})),
        PreconditionError);
    CHECK_THROWS_AS(
        fusion::ccc_loss(Tensor::from(1, 3, {1, 2, 3}), Tensor::from(1, 2, {1, 2})),
        ShapeError);
  }

  SUBCASE("gradients flow through predictions") {
    Tensor preds = Tensor::from(1, 4, {0.5, 1.5, 2.0, 3.5}, true);
    const Tensor targets = Tensor::from(1, 4, {1.0, 2.0, 2.5, 3.0});
    std::vector<Tensor> params{preds};
    const double err = numkit::grad_check(
        params, [&] { return fusion::ccc_loss(preds, targets); }, 1e-6);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("full-model gradient check on both arms") {
  ModelConfig config = small_config();
  std::vector<corpus::Sample> batch;
  std::vector<std::string> prompts;
  const char* texts[] = {
      "rain and fatigue kept pressing down all week",
      "sunny mornings with friends felt light and warm",
      "the bills and the stress keep stacking up",
      "walks in the forest calmed everything down",
  };
  const char* prompt_texts[] = {
      "references read negative with themes of fatigue and rain",
      "references read positive with themes of friends and warmth",
      "references read negative around money and stress",
      "references read positive around nature and calm",
  };
  // Targets near the raw-prediction scale keep the concordance denominator small,
  // so every parameter gradient stays large enough for the finite-difference
  // probe to resolve at h = 1e-5.
  const int severities[] = {2, 0, 3, 1};
  std::vector<double> targets_raw;
  for (int i = 0; i < 4; ++i) {
    batch.push_back(make_sample("g" + std::to_string(i), texts[i], 4 + i, 3 + i, config,
                                1000 + static_cast<std::uint64_t>(i)));
    batch.back().severity = severities[i];
    prompts.emplace_back(prompt_texts[i]);
    targets_raw.push_back(static_cast<double>(batch.back().severity));
  }
  const Tensor targets = Tensor::from(1, 4, targets_raw);

  for (const bool with_prompt : {true, false}) {
    CAPTURE(with_prompt);
    config.use_emotion_prompt = with_prompt;
    ModelParams params = fusion::init_params(config, 24);
    std::vector<Tensor> flat = params.all();
    const double err = numkit::grad_check(
        flat,
        [&] {
          std::vector<Tensor> preds;
          for (std::size_t i = 0; i < batch.size(); ++i) {
            preds.push_back(fusion::forward(batch[i], prompts[i], params).raw_prediction);
          }
          return fusion::ccc_loss(numkit::concat_cols(preds), targets);
        },
        1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("checkpoints round-trip bitwise and fingerprint their content") {
  const fs::path dir =
      fs::temp_directory_path() / ("emorag_ckpt_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);

  const ModelConfig config = small_config();
  ModelParams params = fusion::init_params(config, 8);
  const fs::path file = dir / "model.ckpt";
  fusion::save_checkpoint(params, file);

  SUBCASE("load restores every tensor and the config") {
    ModelParams loaded = fusion::load_checkpoint(file);
    CHECK(loaded.config.d_model == config.d_model);
    CHECK(loaded.config.n_heads == config.n_heads);
    CHECK(loaded.config.use_emotion_prompt == config.use_emotion_prompt);
    const auto got = loaded.named();
    const auto want = params.named();
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(got[i].first == want[i].first);
      REQUIRE(got[i].second.size() == want[i].second.size());
      CHECK(std::memcmp(got[i].second.data(), want[i].second.data(),
                        want[i].second.size() * sizeof(double)) == 0);
      CHECK(got[i].second.requires_grad());
    }
  }

  SUBCASE("fingerprint is stable across saves, moved by any weight") {
    const std::string fp = fusion::checkpoint_fingerprint(file);
    fusion::save_checkpoint(params, file);
    CHECK(fusion::checkpoint_fingerprint(file) == fp);

    params.pred_b2.set(0, 0, params.pred_b2.value() + 1e-9);
    fusion::save_checkpoint(params, file);
    CHECK(fusion::checkpoint_fingerprint(file) != fp);
  }

  SUBCASE("corruption is loud") {
    std::ifstream in(file, std::ios::binary);
    std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
    in.close();

    std::ofstream(dir / "short.ckpt", std::ios::binary)
        .write(raw.data(), static_cast<std::streamsize>(raw.size() / 2));
    CHECK_THROWS_AS(fusion::load_checkpoint(dir / "short.ckpt"), CorruptionError);

    std::vector<char> bad_magic = raw;
    bad_magic[0] = 'X';
    std::ofstream(dir / "magic.ckpt", std::ios::binary)
        .write(bad_magic.data(), static_cast<std::streamsize>(bad_magic.size()));
    CHECK_THROWS_AS(fusion::load_checkpoint(dir / "magic.ckpt"), CorruptionError);

    std::vector<char> trailing = raw;
    trailing.push_back('\0');
    std::ofstream(dir / "trail.ckpt", std::ios::binary)
        .write(trailing.data(), static_cast<std::streamsize>(trailing.size()));
    CHECK_THROWS_AS(fusion::load_checkpoint(dir / "trail.ckpt"), CorruptionError);

    CHECK_THROWS_AS(fusion::load_checkpoint(dir / "absent.ckpt"), IngestError);
  }

  fs::remove_all(dir);
}
