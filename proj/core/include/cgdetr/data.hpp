#pragma once

// Synthetic grounding pairs, the CGFEAT01 feature sidecar format, and JSONL
// datasets / predictions in the QVHighlights schema.

#include "cgdetr/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cgdetr::data {

inline constexpr double kDefaultClipSeconds = 2.0;

struct SynthSpec {
  std::uint64_t seed = 7;
  int n_pairs = 200;  // training pairs
  int n_eval = 50;    // held-out pairs drawn from the same concepts
  int L_v = 32;
  int d_feat = 64;
  int n_concepts = 32;
  int words_min = 2;  // query concepts (one word each) per pair
  int words_max = 4;
  double moment_fraction_min = 0.1;
  double moment_fraction_max = 0.5;
  double noise_in = 0.05;
  double noise_out = 0.5;
  double clip_seconds = kDefaultClipSeconds;

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

/// Throws ConfigError listing every violated constraint.
void validate(const SynthSpec& spec);

/// Missing fields keep their defaults; unknown fields raise ConfigError.
void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

struct DatasetRecord {
  FeatureSequence features;
  GroundTruth gt;
  double duration_s = 0.0;
  std::string query_text;
};

struct DatasetSplit {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> eval;
};

/// Deterministic in the seed. Features are rounded to float32 so the records
/// equal what a write/read cycle through the sidecar format yields.
DatasetSplit generate_synthetic(const SynthSpec& spec);

/// CGFEAT01: 8-byte magic, u32 rows, u32 cols, little-endian float32 payload
/// in row-major order.
void write_features(const std::filesystem::path& path, const Matrix& m);
Matrix read_features(const std::filesystem::path& path);

std::filesystem::path clip_feature_path(const std::filesystem::path& feature_dir,
                                        const std::string& video_id);
std::filesystem::path word_feature_path(const std::filesystem::path& feature_dir,
                                        const std::string& query_id);

/// One JSONL line (without features) for a record.
nlohmann::json record_to_json(const DatasetRecord& r);

/// Writes records as JSONL plus sidecars under `feature_dir`.
void save_jsonl(const std::filesystem::path& path, const std::vector<DatasetRecord>& records,
                const std::filesystem::path& feature_dir);

/// Reads a JSONL dataset; sidecars are resolved in `feature_dir` (default:
/// "features" next to the file). Saliency per clip is the rounded mean over
/// annotators and L_v = ceil(duration / clip_seconds).
std::vector<DatasetRecord> load_jsonl(const std::filesystem::path& path,
                                      double clip_seconds = kDefaultClipSeconds,
                                      std::filesystem::path feature_dir = {});

/// Layout: dir/train.jsonl, dir/eval.jsonl, dir/features/, dir/manifest.json.
void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split,
                   const SynthSpec& spec);
DatasetSplit load_dataset(const std::filesystem::path& dir,
                          double clip_seconds = kDefaultClipSeconds);

/// SHA-256 over the dataset's JSONL files and sidecars, in a fixed order.
std::string dataset_fingerprint(const std::filesystem::path& dir);

/// Predictions as JSONL: qid, vid, duration, pred_relevant_windows
/// ([start_s, end_s, confidence]) and pred_saliency_scores.
void save_predictions(const std::vector<Prediction>& preds, const std::filesystem::path& path);
std::vector<Prediction> load_predictions(const std::filesystem::path& path);

}  // namespace cgdetr::data
