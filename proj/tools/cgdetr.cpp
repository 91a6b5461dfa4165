// cgdetr: dataset generation, training, evaluation, ablations and gradient
// checks. Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

#include "cgdetr/checkpoint.hpp"
#include "cgdetr/errors.hpp"
#include "cgdetr/gradcheck.hpp"
#include "cgdetr/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cgdetr;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerics = 3;

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

RunConfig load_run_config(const fs::path& path) {
  try {
    return read_json(path).get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string epoch_tag(int epoch) {
  std::ostringstream s;
  s << std::setw(4) << std::setfill('0') << epoch;
  return s.str();
}

// ---- gen ----------------------------------------------------------------

struct GenArgs {
  std::string spec;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  data::SynthSpec spec;
  if (!a.spec.empty()) spec = read_json(a.spec).get<data::SynthSpec>();
  const data::DatasetSplit split = data::generate_synthetic(spec);
  data::write_dataset(a.out, split, spec);
  std::cout << "wrote " << split.train.size() << " train / " << split.eval.size()
            << " eval pairs to " << a.out << "\nfingerprint " << data::dataset_fingerprint(a.out)
            << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
  int epochs = -1;
  std::string resume;
};

json run_manifest(const Trainer& t, const std::string& fingerprint) {
  json m;
  m["version"] = CGDETR_VERSION;
  m["config"] = t.config();
  m["seed"] = t.seed();
  m["dataset_fingerprint"] = fingerprint;
  m["epochs_completed"] = t.epoch();
  m["steps"] = t.step();
  m["history"] = t.history();
  return m;
}

int cmd_train(const TrainArgs& a) {
  const data::DatasetSplit ds = data::load_dataset(a.data);
  const std::string fingerprint = data::dataset_fingerprint(a.data);

  std::unique_ptr<Trainer> trainer;
  if (!a.resume.empty()) {
    trainer = checkpoint::load(a.resume);
    std::cout << "resumed from " << a.resume << " at epoch " << trainer->epoch() << "\n";
  } else {
    if (a.config.empty()) throw ConfigError("--config is required unless --resume is given");
    trainer = std::make_unique<Trainer>(load_run_config(a.config), a.seed);
  }
  const TrainOptions& opts = trainer->config().train;
  const int target = a.epochs >= 0 ? a.epochs : opts.epochs;
  const int remaining = std::max(0, target - trainer->epoch());

  const fs::path out(a.out);
  fs::create_directories(out / "reports");
  write_json(out / "config.json", trainer->config());

  auto on_epoch = [&](const Trainer& t, const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " loss " << r.loss.at("total");
    if (r.eval) {
      std::cout << " r1@0.5 " << r.eval->r1_05 << " map " << r.eval->map_avg << " hd_map "
                << r.eval->hd_map;
      write_json(out / "reports" / ("epoch_" + epoch_tag(r.epoch) + ".json"), *r.eval);
    }
    std::cout << std::endl;
    if (opts.checkpoint_every > 0 && r.epoch % opts.checkpoint_every == 0) {
      checkpoint::save(out / ("epoch_" + epoch_tag(r.epoch) + ".ckpt"), t);
      checkpoint::save(out / "last.ckpt", t);
    }
  };

  try {
    trainer->train(ds.train, &ds.eval, remaining, on_epoch);
  } catch (const NumericsError&) {
    write_json(out / "manifest.json", run_manifest(*trainer, fingerprint));
    throw;
  }
  checkpoint::save(out / "last.ckpt", *trainer);
  write_json(out / "manifest.json", run_manifest(*trainer, fingerprint));
  std::cout << "finished at epoch " << trainer->epoch() << "; outputs in " << out << "\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "eval";
  std::string out;
  std::string analysis;
  std::string predictions;
};

int cmd_eval(const EvalArgs& a) {
  std::unique_ptr<Trainer> trainer = checkpoint::load(a.ckpt);
  const Model& model = trainer->model();
  const data::DatasetSplit ds = data::load_dataset(a.data);
  const auto& records = a.split == "train" ? ds.train : ds.eval;

  std::vector<Prediction> preds = predict_all(model, records);
  std::vector<GroundTruth> gts;
  for (const auto& r : records) gts.push_back(r.gt);
  const evalkit::MetricReport report =
      evalkit::evaluate(preds, gts, trainer->config().train.positive_threshold);
  write_json(a.out, report);
  std::cout << "r1@0.5 " << report.r1_05 << " map "
            << report.map_avg << " hd_map " << report.hd_map << " hit1 " << report.hit1 << "\n";

  if (!a.predictions.empty()) data::save_predictions(preds, a.predictions);
  if (!a.analysis.empty()) {
    std::vector<Vector> a_bar;
    std::vector<double> per_query_map;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const Intermediates im = model.forward(records[i].features, ForwardOptions{nullptr, false});
      a_bar.push_back(im.attention.a_bar.defined()
                          ? Vector(im.attention.a_bar.value().col(0))
                          : Vector(Vector::Zero(records[i].features.clips.rows())));
      per_query_map.push_back(report.per_query[i].map_avg);
    }
    const evalkit::AlignmentReport ar =
        evalkit::correspondence_alignment_analysis(a_bar, gts, per_query_map);
    evalkit::write_alignment_csv(ar, a.analysis);
    if (ar.skipped > 0) std::cout << ar.skipped << " queries skipped in the analysis\n";
  }
  return 0;
}

// ---- ablate -------------------------------------------------------------

struct AblateArgs {
  std::string data;
  std::string rows = "a,b,c,d,e,f,g";
  std::string variants = "aca";
  int seeds = 3;
  std::uint64_t first_seed = 1;
  int epochs = -1;
  std::string config;
  std::string out;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const std::vector<std::pair<std::string, double evalkit::MetricReport::*>>& table_columns() {
  static const std::vector<std::pair<std::string, double evalkit::MetricReport::*>> cols{
      {"r1_0.3", &evalkit::MetricReport::r1_03}, {"r1_0.5", &evalkit::MetricReport::r1_05},
      {"r1_0.7", &evalkit::MetricReport::r1_07}, {"map_0.5", &evalkit::MetricReport::map_05},
      {"map_0.75", &evalkit::MetricReport::map_075}, {"map_avg", &evalkit::MetricReport::map_avg},
      {"miou", &evalkit::MetricReport::miou},     {"hd_map", &evalkit::MetricReport::hd_map},
      {"hit1", &evalkit::MetricReport::hit1}};
  return cols;
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
  return {m, sd};
}

int cmd_ablate(const AblateArgs& a) {
  const std::vector<std::string> rows = split_list(a.rows);
  const std::vector<std::string> variant_names = split_list(a.variants);
  if (rows.empty()) throw ConfigError("--rows is empty");
  if (variant_names.empty()) throw ConfigError("--variants is empty");
  if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
  for (const auto& r : rows) {
    if (r.size() != 1 || r[0] < 'a' || r[0] > 'g') {
      throw ConfigError("unknown ablation row '" + r + "'");
    }
  }
  std::vector<AttentionVariant> variants;
  for (const auto& v : variant_names) variants.push_back(attention_variant_from_string(v));

  const RunConfig base = a.config.empty() ? synthetic_preset() : load_run_config(a.config);
  const int epochs = a.epochs >= 0 ? a.epochs : base.train.epochs;
  const data::DatasetSplit ds = data::load_dataset(a.data);
  const fs::path out(a.out);
  fs::create_directories(out);

  json results = json::array();
  std::ostringstream table;
  table << "| row | variant |";
  for (const auto& [name, _] : table_columns()) table << " " << name << " |";
  table << "\n|---|---|";
  for (std::size_t i = 0; i < table_columns().size(); ++i) table << "---|";
  table << "\n";

  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    for (const auto& row : rows) {
      RunConfig cfg = base;
      apply_ablation_row(cfg.model, row[0]);
      cfg.model.attention_variant = variants[vi];
      cfg.train.epochs = epochs;
      std::vector<evalkit::MetricReport> reports;
      for (int s = 0; s < a.seeds; ++s) {
        const std::uint64_t seed = a.first_seed + static_cast<std::uint64_t>(s);
        Trainer t(cfg, seed);
        t.train(ds.train, nullptr, epochs);
        reports.push_back(evaluate_model(t.model(), ds.eval, cfg.train.positive_threshold));
        json rec = reports.back();
        rec.erase("per_query");
        results.push_back({{"row", row},
                           {"variant", variant_names[vi]},
                           {"seed", seed},
                           {"report", rec}});
        std::cout << "row " << row << " " << variant_names[vi] << " seed " << seed << " map "
                  << reports.back().map_avg << std::endl;
      }
      table << "| " << row << " | " << variant_names[vi] << " |";
      for (const auto& [name, field] : table_columns()) {
        std::vector<double> v;
        for (const auto& r : reports) v.push_back(r.*field);
        const auto [m, sd] = mean_sd(v);
        table << " " << std::fixed << std::setprecision(3) << m << " ± " << sd << " |";
      }
      table << "\n";
    }
  }
  write_json(out / "runs.json", {{"version", CGDETR_VERSION},
                                 {"dataset_fingerprint", data::dataset_fingerprint(a.data)},
                                 {"base_config", base},
                                 {"epochs", epochs},
                                 {"runs", results}});
  std::ofstream(out / "table.md") << table.str();
  std::cout << table.str();
  return 0;
}

// ---- gradcheck ----------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed) {
  const gradcheck::Report r = gradcheck::run(seed);
  for (const auto& t : r.terms) {
    std::cout << (t.passed ? "PASS " : "FAIL ") << t.term << " max_rel " << t.max_rel_error
              << "\n";
  }
  std::cout << "tolerance " << r.tolerance << ", " << r.seconds << " s\n";
  return r.passed() ? 0 : kExitNumerics;
}

// ---- init-config --------------------------------------------------------

int cmd_init_config(const std::string& preset, const std::string& out) {
  RunConfig cfg;
  if (preset == "synthetic") {
    cfg = synthetic_preset();
  } else if (preset == "qvhighlights") {
    cfg = qvhighlights_preset();
  } else {
    throw ConfigError("unknown preset '" + preset + "'");
  }
  const json j = cfg;
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(out, j);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Moment retrieval and highlight detection toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate the synthetic dataset");
  gen_cmd->add_option("--spec", gen.spec, "Synthetic spec JSON (defaults when omitted)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--config", train.config, "Run config JSON");
  train_cmd->add_option("--seed", train.seed, "Random seed");
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--epochs", train.epochs, "Total epochs (overrides the config)");
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "train or eval")
      ->check(CLI::IsMember({"train", "eval"}));
  eval_cmd->add_option("--out", ev.out, "Report JSON")->required();
  eval_cmd->add_option("--analysis", ev.analysis, "Alignment analysis CSV");
  eval_cmd->add_option("--predictions", ev.predictions, "Predictions JSONL");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Component ablation sweep");
  ablate_cmd->add_option("--data", ab.data, "Dataset directory")->required();
  ablate_cmd->add_option("--rows", ab.rows, "Comma-separated rows a..g");
  ablate_cmd->add_option("--variants", ab.variants, "aca,sigmoid,softmax_one,plain_softmax");
  ablate_cmd->add_option("--seeds", ab.seeds, "Number of seeds");
  ablate_cmd->add_option("--first-seed", ab.first_seed, "First seed");
  ablate_cmd->add_option("--epochs", ab.epochs, "Epochs per run (overrides the config)");
  ablate_cmd->add_option("--config", ab.config, "Base run config (synthetic preset if omitted)");
  ablate_cmd->add_option("--out", ab.out, "Output directory")->required();

  std::uint64_t gc_seed = 1;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every loss term");
  gc_cmd->add_option("--seed", gc_seed, "Perturbation seed");

  std::string preset = "synthetic";
  std::string preset_out;
  auto* init_cmd = app.add_subcommand("init-config", "Print a run config with every default");
  init_cmd->add_option("--preset", preset, "synthetic or qvhighlights");
  init_cmd->add_option("--out", preset_out, "Write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen(gen);
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(ev);
    if (*ablate_cmd) return cmd_ablate(ab);
    if (*gc_cmd) return cmd_gradcheck(gc_seed);
    if (*init_cmd) return cmd_init_config(preset, preset_out);
  } catch (const NumericsError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumerics;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
