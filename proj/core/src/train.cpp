#include "cgdetr/train.hpp"

#include "cgdetr/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cgdetr {

namespace {

enum Purpose : int { kShuffle = 0, kDropout = 1, kPairs = 2 };

}  // namespace

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"model", c.model}, {"loss", c.loss}, {"train", c.train}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const char* section : {"model", "loss", "train"}) {
    if (!j.contains(section)) {
      throw ConfigError(std::string("missing config field '") + section + "'");
    }
  }
  c.model = j.at("model").get<ModelConfig>();
  c.loss = j.at("loss").get<LossWeights>();
  c.train = j.at("train").get<TrainOptions>();
}

RunConfig synthetic_preset() {
  RunConfig c;
  ModelConfig& m = c.model;
  m.feature_dim = 64;
  m.hidden = 32;
  m.n_heads = 4;
  m.ffn_dim = 64;
  m.num_dummies = 4;
  m.pool_size = 10;
  m.top_k = 1;
  m.n_moment_queries = 5;
  m.enc_layers = 2;
  m.dec_layers = 2;
  m.aca_layers = 2;
  m.dummy_enc_layers = 1;
  c.train.lr = 1e-3;
  c.train.batch_size = 16;
  c.train.epochs = 100;
  c.train.eval_every = 10;
  c.train.checkpoint_every = 50;
  return c;
}

RunConfig qvhighlights_preset() {
  RunConfig c;
  c.model = qvhighlights_config();
  return c;
}

std::mt19937_64 derive_rng(std::uint64_t seed, int epoch, long long step, int purpose) {
  const auto u = [](auto v) { return static_cast<std::uint32_t>(static_cast<std::uint64_t>(v)); };
  std::seed_seq seq{u(seed), u(seed >> 32), u(epoch), u(step), u(static_cast<std::uint64_t>(step) >> 32),
                    u(purpose)};
  return std::mt19937_64(seq);
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch}, {"loss", r.loss}};
  if (r.eval) {
    nlohmann::json e = *r.eval;
    e.erase("per_query");
    j["eval"] = e;
  }
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.loss = j.at("loss").get<std::map<std::string, double>>();
  r.eval.reset();
  if (j.contains("eval")) {
    nlohmann::json e = j.at("eval");
    e["per_query"] = nlohmann::json::array();
    r.eval = e.get<evalkit::MetricReport>();
  }
}

std::vector<Prediction> predict_all(const Model& model,
                                    const std::vector<data::DatasetRecord>& records) {
  std::vector<Prediction> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(model.predict(r));
  return out;
}

evalkit::MetricReport evaluate_model(const Model& model,
                                     const std::vector<data::DatasetRecord>& records,
                                     int positive_threshold) {
  std::vector<Prediction> preds = predict_all(model, records);
  std::vector<GroundTruth> gts;
  gts.reserve(records.size());
  for (const auto& r : records) gts.push_back(r.gt);
  return evalkit::evaluate(preds, gts, positive_threshold);
}

Trainer::Trainer(const RunConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  validate_config(cfg.model);
  validate_weights(cfg.loss);
  if (cfg.train.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.train.lr > 0.0)) throw ConfigError("lr must be positive");
  model_ = std::make_unique<Model>(cfg.model, seed);
  optim::Adam::Options o;
  o.lr = cfg.train.lr;
  o.weight_decay = cfg.train.weight_decay;
  adam_ = std::make_unique<optim::Adam>(model_->parameters(), o);
}

void Trainer::restore_progress(int epoch, long long step, std::vector<EpochRecord> history) {
  epoch_ = epoch;
  step_ = step;
  history_ = std::move(history);
}

void Trainer::train(const std::vector<data::DatasetRecord>& train_set,
                    const std::vector<data::DatasetRecord>* eval_set, int epochs,
                    const EpochCallback& on_epoch) {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (epochs > 0 && train_set.empty()) throw ConfigError("training set is empty");
  const auto& opts = cfg_.train;
  const int target = epoch_ + epochs;
  nn::ParameterStore& ps = model_->parameters();

  while (epoch_ < target) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_rng = derive_rng(seed_, epoch_, -1, kShuffle);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    std::map<std::string, double> sums;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(opts.batch_size));
      std::vector<const data::DatasetRecord*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&train_set[order[k]]);

      auto dropout_rng = derive_rng(seed_, epoch_, step_, kDropout);
      auto pair_rng = derive_rng(seed_, epoch_, step_, kPairs);
      StepOptions so;
      so.dropout_rng = &dropout_rng;
      so.pair_rng = &pair_rng;
      ps.zero_grad();
      BatchLoss loss = batch_loss(*model_, batch, cfg_.loss, so);
      const double value = loss.total.item();
      if (!std::isfinite(value)) {
        throw NumericsError("non-finite loss at epoch " + std::to_string(epoch_ + 1) + ", step " +
                            std::to_string(step_));
      }
      loss.total.backward();
      for (const auto& [name, p] : ps.entries()) {
        if (!p.grad().allFinite()) {
          throw NumericsError("non-finite gradient for " + name + " at step " +
                              std::to_string(step_));
        }
      }
      if (opts.grad_clip > 0.0) optim::clip_grad_norm(ps, opts.grad_clip);
      adam_->step();
      ++step_;
      for (const auto& [k, v] : loss.breakdown()) sums[k] += v * static_cast<double>(batch.size());
      seen += batch.size();
    }
    ++epoch_;

    EpochRecord rec;
    rec.epoch = epoch_;
    for (const auto& [k, v] : sums) rec.loss[k] = v / static_cast<double>(seen);
    const bool eval_now =
        eval_set && !eval_set->empty() &&
        ((opts.eval_every > 0 && epoch_ % opts.eval_every == 0) || epoch_ == target);
    if (eval_now) rec.eval = evaluate_model(*model_, *eval_set, opts.positive_threshold);
    history_.push_back(rec);
    if (on_epoch) on_epoch(*this, history_.back());
  }
}

}  // namespace cgdetr
