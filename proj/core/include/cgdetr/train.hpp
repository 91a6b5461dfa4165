#pragma once

// Mini-batch training with Adam, deterministic per-step random streams, and
// per-epoch loss / metric history.

#include "cgdetr/evalkit.hpp"
#include "cgdetr/model.hpp"
#include "cgdetr/optim.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <vector>

namespace cgdetr {

/// The three sections of a run configuration file.
struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  TrainOptions train;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Desk-scale setup for the separable synthetic benchmark (h = 32).
RunConfig synthetic_preset();

/// Full-size model with the default optimization settings.
RunConfig qvhighlights_preset();

/// Independent stream for (seed, epoch, step, purpose); step -1 marks
/// per-epoch streams.
std::mt19937_64 derive_rng(std::uint64_t seed, int epoch, long long step, int purpose);

struct EpochRecord {
  int epoch = 0;  // 1-based count of completed epochs
  std::map<std::string, double> loss;  // batch-size weighted means
  std::optional<evalkit::MetricReport> eval;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

std::vector<Prediction> predict_all(const Model& model,
                                    const std::vector<data::DatasetRecord>& records);

evalkit::MetricReport evaluate_model(const Model& model,
                                     const std::vector<data::DatasetRecord>& records,
                                     int positive_threshold);

class Trainer {
 public:
  using EpochCallback = std::function<void(const Trainer&, const EpochRecord&)>;

  Trainer(const RunConfig& cfg, std::uint64_t seed);

  /// Trains `epochs` further epochs. Evaluates on `eval` (when given) every
  /// eval_every epochs and after the last one. A non-finite loss or gradient
  /// raises NumericsError before the update, so parameters stay at the last
  /// finite state.
  void train(const std::vector<data::DatasetRecord>& train_set,
             const std::vector<data::DatasetRecord>* eval_set, int epochs,
             const EpochCallback& on_epoch = {});

  const RunConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  int epoch() const { return epoch_; }
  long long step() const { return step_; }
  const std::vector<EpochRecord>& history() const { return history_; }

  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  optim::Adam& optimizer() { return *adam_; }
  const optim::Adam& optimizer() const { return *adam_; }

  /// Restores counters after parameters and moments were loaded.
  void restore_progress(int epoch, long long step, std::vector<EpochRecord> history);

 private:
  RunConfig cfg_;
  std::uint64_t seed_;
  std::unique_ptr<Model> model_;
  std::unique_ptr<optim::Adam> adam_;
  int epoch_ = 0;
  long long step_ = 0;
  std::vector<EpochRecord> history_;
};

}  // namespace cgdetr
