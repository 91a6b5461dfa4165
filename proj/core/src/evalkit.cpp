#include "cgdetr/evalkit.hpp"

#include "cgdetr/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace cgdetr::evalkit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_sizes(std::size_t preds, std::size_t gts) {
  if (preds != gts) {
    throw ShapeError(std::to_string(preds) + " predictions for " + std::to_string(gts) +
                     " ground-truth entries");
  }
}

double top1_iou(const Prediction& p, const GroundTruth& gt) {
  if (p.spans.empty()) return 0.0;
  double best = 0.0;
  for (const auto& g : gt.spans) best = std::max(best, temporal_iou(p.spans.front().span, g));
  return best;
}

std::vector<ScoredSpan> by_confidence(const std::vector<ScoredSpan>& spans) {
  std::vector<ScoredSpan> out = spans;
  std::stable_sort(out.begin(), out.end(), [](const ScoredSpan& a, const ScoredSpan& b) {
    return a.confidence > b.confidence;
  });
  return out;
}

}  // namespace

std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50.0 + 5.0 * i) / 100.0);
  return t;
}

double recall_at_1(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                   double iou_threshold) {
  check_sizes(preds.size(), gts.size());
  if (preds.empty()) return 0.0;
  int hits = 0;
  for (std::size_t q = 0; q < preds.size(); ++q) {
    if (top1_iou(preds[q], gts[q]) >= iou_threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double average_precision(std::span<const ScoredSpan> ranked, std::span<const MomentSpan> gts,
                         double iou_threshold) {
  if (gts.empty() || ranked.empty()) return 0.0;
  std::vector<char> consumed(gts.size(), 0);
  std::vector<double> precision;
  std::vector<double> recall;
  int tp = 0;
  int fp = 0;
  for (const auto& det : ranked) {
    std::vector<std::pair<double, std::size_t>> ious;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      ious.emplace_back(temporal_iou(det.span, gts[g]), g);
    }
    std::stable_sort(ious.begin(), ious.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    bool matched = false;
    for (const auto& [iou, g] : ious) {
      if (iou < iou_threshold) break;
      if (consumed[g]) continue;
      consumed[g] = 1;
      matched = true;
      break;
    }
    matched ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  // Precision envelope, integrated over recall steps.
  std::vector<double> mprec{0.0};
  std::vector<double> mrec{0.0};
  mprec.insert(mprec.end(), precision.begin(), precision.end());
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mprec.push_back(0.0);
  mrec.push_back(1.0);
  for (std::size_t i = mprec.size() - 1; i-- > 0;) mprec[i] = std::max(mprec[i], mprec[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mprec[i];
  }
  return ap;
}

MomentMap map_moments(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                      std::span<const double> thresholds) {
  check_sizes(preds.size(), gts.size());
  MomentMap m;
  m.thresholds.assign(thresholds.begin(), thresholds.end());
  m.ap.assign(thresholds.size(), 0.0);
  m.per_query_average.assign(preds.size(), 0.0);
  if (preds.empty() || thresholds.empty()) return m;
  for (std::size_t q = 0; q < preds.size(); ++q) {
    const auto ranked = by_confidence(preds[q].spans);
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const double ap = average_precision(ranked, gts[q].spans, thresholds[t]);
      m.ap[t] += ap;
      m.per_query_average[q] += ap;
    }
    m.per_query_average[q] /= static_cast<double>(thresholds.size());
  }
  for (double& ap : m.ap) ap /= static_cast<double>(preds.size());
  m.average = std::accumulate(m.ap.begin(), m.ap.end(), 0.0) / static_cast<double>(m.ap.size());
  return m;
}

double miou(std::span<const Prediction> preds, std::span<const GroundTruth> gts) {
  check_sizes(preds.size(), gts.size());
  if (preds.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < preds.size(); ++q) total += top1_iou(preds[q], gts[q]);
  return total / static_cast<double>(preds.size());
}

double ranking_ap(const Vector& scores, const std::vector<bool>& positive) {
  if (static_cast<std::size_t>(scores.size()) != positive.size()) {
    throw ShapeError("ranking_ap: score and label lengths differ");
  }
  const auto n_pos = std::count(positive.begin(), positive.end(), true);
  if (n_pos == 0) return kNaN;
  std::vector<int> order(positive.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  double prev_recall = 0.0;
  int tp = 0;
  int seen = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    ++seen;
    if (positive[static_cast<std::size_t>(order[k])]) ++tp;
    const bool end_of_tie =
        k + 1 == order.size() || scores[order[k + 1]] != scores[order[k]];
    if (!end_of_tie) continue;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (recall - prev_recall) * static_cast<double>(tp) / seen;
    prev_recall = recall;
  }
  return ap;
}

HighlightMetrics hd_metrics(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                            int positive_threshold) {
  check_sizes(preds.size(), gts.size());
  HighlightMetrics h;
  h.per_query_ap.assign(preds.size(), kNaN);
  int hits = 0;
  double ap_sum = 0.0;
  for (std::size_t q = 0; q < preds.size(); ++q) {
    const auto& sal = gts[q].saliency;
    if (preds[q].saliency.size() != sal.size()) {
      throw ShapeError("saliency prediction length differs from ground truth for query " +
                       preds[q].query_id);
    }
    std::vector<bool> pos(static_cast<std::size_t>(sal.size()));
    for (Eigen::Index i = 0; i < sal.size(); ++i) {
      pos[static_cast<std::size_t>(i)] = sal[i] >= positive_threshold;
    }
    if (std::none_of(pos.begin(), pos.end(), [](bool b) { return b; })) continue;
    const double ap = ranking_ap(preds[q].saliency, pos);
    h.per_query_ap[q] = ap;
    ap_sum += ap;
    Eigen::Index top = 0;
    preds[q].saliency.maxCoeff(&top);
    if (pos[static_cast<std::size_t>(top)]) ++hits;
    ++h.queries_used;
  }
  if (h.queries_used > 0) {
    h.hd_map = ap_sum / h.queries_used;
    h.hit1 = static_cast<double>(hits) / h.queries_used;
  }
  return h;
}

MetricReport evaluate(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                      int positive_threshold) {
  check_sizes(preds.size(), gts.size());
  MetricReport r;
  r.num_queries = static_cast<int>(preds.size());
  r.r1_03 = recall_at_1(preds, gts, 0.3);
  r.r1_05 = recall_at_1(preds, gts, 0.5);
  r.r1_07 = recall_at_1(preds, gts, 0.7);
  const auto thresholds = map_thresholds();
  MomentMap m = map_moments(preds, gts, thresholds);
  r.map_05 = m.ap[0];
  r.map_075 = m.ap[5];
  r.map_avg = m.average;
  r.miou = miou(preds, gts);
  HighlightMetrics h = hd_metrics(preds, gts, positive_threshold);
  r.hd_map = h.hd_map;
  r.hit1 = h.hit1;
  for (std::size_t q = 0; q < preds.size(); ++q) {
    QueryDetail d;
    d.query_id = preds[q].query_id;
    d.top1_iou = top1_iou(preds[q], gts[q]);
    d.map_avg = m.per_query_average[q];
    d.hd_ap = h.per_query_ap[q];
    if (!std::isnan(d.hd_ap)) {
      Eigen::Index top = 0;
      preds[q].saliency.maxCoeff(&top);
      d.hit1 = gts[q].saliency[top] >= positive_threshold;
    }
    r.per_query.push_back(d);
  }
  return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& d : r.per_query) {
    rows.push_back({{"qid", d.query_id},
                    {"top1_iou", d.top1_iou},
                    {"map_avg", d.map_avg},
                    {"hd_ap", std::isnan(d.hd_ap) ? nlohmann::json(nullptr) : nlohmann::json(d.hd_ap)},
                    {"hit1", d.hit1}});
  }
  j = {{"r1", {{"0.3", r.r1_03}, {"0.5", r.r1_05}, {"0.7", r.r1_07}}},
       {"map", {{"0.5", r.map_05}, {"0.75", r.map_075}}},
       {"map_avg", r.map_avg},
       {"miou", r.miou},
       {"hd_map", r.hd_map},
       {"hit1", r.hit1},
       {"num_queries", r.num_queries},
       {"per_query", rows}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.r1_03 = j.at("r1").at("0.3").get<double>();
  r.r1_05 = j.at("r1").at("0.5").get<double>();
  r.r1_07 = j.at("r1").at("0.7").get<double>();
  r.map_05 = j.at("map").at("0.5").get<double>();
  r.map_075 = j.at("map").at("0.75").get<double>();
  r.map_avg = j.at("map_avg").get<double>();
  r.miou = j.at("miou").get<double>();
  r.hd_map = j.at("hd_map").get<double>();
  r.hit1 = j.at("hit1").get<double>();
  r.num_queries = j.at("num_queries").get<int>();
  r.per_query.clear();
  for (const auto& row : j.at("per_query")) {
    QueryDetail d;
    d.query_id = row.at("qid").get<std::string>();
    d.top1_iou = row.at("top1_iou").get<double>();
    d.map_avg = row.at("map_avg").get<double>();
    d.hd_ap = row.at("hd_ap").is_null() ? kNaN : row.at("hd_ap").get<double>();
    d.hit1 = row.at("hit1").get<bool>();
    r.per_query.push_back(d);
  }
}

AlignmentReport correspondence_alignment_analysis(std::span<const Vector> a_bar,
                                                  std::span<const GroundTruth> gts,
                                                  std::span<const double> per_query_map,
                                                  int num_bins) {
  check_sizes(a_bar.size(), gts.size());
  check_sizes(per_query_map.size(), gts.size());
  if (num_bins < 1) throw ConfigError("num_bins must be positive");
  AlignmentReport rep;
  rep.cosine.assign(a_bar.size(), kNaN);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t q = 0; q < a_bar.size(); ++q) {
    const Vector s = gts[q].saliency.cast<double>();
    if (s.size() != a_bar[q].size()) throw ShapeError("a_bar length differs from saliency");
    const double na = a_bar[q].norm();
    const double ns = s.norm();
    if (na == 0.0 || ns == 0.0) {
      ++rep.skipped;
      continue;
    }
    const double c = a_bar[q].dot(s) / (na * ns);
    rep.cosine[q] = c;
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  if (rep.skipped == static_cast<int>(a_bar.size())) return rep;
  const double width = (hi - lo) / num_bins;
  std::vector<double> sums(static_cast<std::size_t>(num_bins), 0.0);
  rep.bins.resize(static_cast<std::size_t>(num_bins));
  for (int b = 0; b < num_bins; ++b) {
    rep.bins[static_cast<std::size_t>(b)].low = lo + b * width;
    rep.bins[static_cast<std::size_t>(b)].high = b + 1 == num_bins ? hi : lo + (b + 1) * width;
  }
  for (std::size_t q = 0; q < a_bar.size(); ++q) {
    if (std::isnan(rep.cosine[q])) continue;
    int b = width > 0.0 ? static_cast<int>(std::floor((rep.cosine[q] - lo) / width)) : num_bins - 1;
    b = std::clamp(b, 0, num_bins - 1);
    rep.bins[static_cast<std::size_t>(b)].count += 1;
    sums[static_cast<std::size_t>(b)] += per_query_map[q];
  }
  for (std::size_t b = 0; b < rep.bins.size(); ++b) {
    rep.bins[b].mean_map = rep.bins[b].count ? sums[b] / rep.bins[b].count : kNaN;
  }
  return rep;
}

void write_alignment_csv(const AlignmentReport& report, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "bin_low,bin_high,count,mean_map\n";
  f.precision(10);
  for (const auto& b : report.bins) {
    f << b.low << ',' << b.high << ',' << b.count << ',';
    if (b.count) f << b.mean_map;
    f << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace cgdetr::evalkit
