#pragma once

// Moment-retrieval and highlight-detection metrics, and the analysis relating
// clip-wise query correspondence to retrieval quality.

#include "cgdetr/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cgdetr::evalkit {

/// Thresholds of the averaged mAP: 0.5, 0.55, ..., 0.95.
std::vector<double> map_thresholds();

/// Fraction of queries whose top-confidence span reaches IoU >= threshold with
/// some ground-truth span. A query without predictions is a miss.
double recall_at_1(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                   double iou_threshold);

/// Interpolated average precision of one ranked list of detections against
/// its ground truth. Each ground-truth span is consumed by at most one
/// detection, greedily in confidence order.
double average_precision(std::span<const ScoredSpan> ranked, std::span<const MomentSpan> gts,
                         double iou_threshold);

struct MomentMap {
  std::vector<double> thresholds;
  std::vector<double> ap;  // per threshold, averaged over queries
  double average = 0.0;
  std::vector<double> per_query_average;  // mean over thresholds per query
};

MomentMap map_moments(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                      std::span<const double> thresholds);

/// Mean over queries of the best IoU between the top-1 span and any GT span.
double miou(std::span<const Prediction> preds, std::span<const GroundTruth> gts);

/// Non-interpolated AP of `scores` ranked against binary `positive` labels.
/// Tied scores form one threshold, so the value only depends on the order.
double ranking_ap(const Vector& scores, const std::vector<bool>& positive);

struct HighlightMetrics {
  double hd_map = 0.0;
  double hit1 = 0.0;
  int queries_used = 0;
  std::vector<double> per_query_ap;  // NaN for excluded queries
};

/// Queries without a positive clip (saliency >= positive_threshold) are
/// excluded from both values.
HighlightMetrics hd_metrics(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                            int positive_threshold = kMaxSaliencyLevel);

struct QueryDetail {
  std::string query_id;
  double top1_iou = 0.0;
  double map_avg = 0.0;
  double hd_ap = 0.0;  // NaN when excluded
  bool hit1 = false;
};

struct MetricReport {
  double r1_03 = 0.0;
  double r1_05 = 0.0;
  double r1_07 = 0.0;
  double map_05 = 0.0;
  double map_075 = 0.0;
  double map_avg = 0.0;
  double miou = 0.0;
  double hd_map = 0.0;
  double hit1 = 0.0;
  int num_queries = 0;
  std::vector<QueryDetail> per_query;
};

/// Throws ShapeError when predictions and ground truth differ in count.
MetricReport evaluate(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                      int positive_threshold = kMaxSaliencyLevel);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

struct AlignmentBin {
  double low = 0.0;
  double high = 0.0;
  int count = 0;
  double mean_map = 0.0;  // NaN when empty
};

struct AlignmentReport {
  std::vector<AlignmentBin> bins;
  std::vector<double> cosine;  // per query; NaN when skipped
  int skipped = 0;
};

/// Cosine between a_bar and the saliency levels per query, binned into
/// `num_bins` equal-width bins over the observed range, with the mean
/// per-query averaged mAP in each bin. Zero-norm vectors are skipped.
AlignmentReport correspondence_alignment_analysis(std::span<const Vector> a_bar,
                                                  std::span<const GroundTruth> gts,
                                                  std::span<const double> per_query_map,
                                                  int num_bins = 10);

/// Columns bin_low,bin_high,count,mean_map.
void write_alignment_csv(const AlignmentReport& report, const std::filesystem::path& path);

}  // namespace cgdetr::evalkit
