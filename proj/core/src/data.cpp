#include "cgdetr/data.hpp"

#include "cgdetr/errors.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

namespace cgdetr::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic{'C', 'G', 'F', 'E', 'A', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "sidecar I/O assumes a little-endian host");

Eigen::VectorXd gaussian(std::mt19937_64& rng, int n, double sigma) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = nd(rng);
  return v * sigma;
}

Eigen::RowVectorXd to_float_precision(const Eigen::VectorXd& v) {
  return v.cast<float>().cast<double>().transpose();
}

}  // namespace

void validate(const SynthSpec& s) {
  std::vector<std::string> bad;
  if (s.n_pairs < 1) bad.emplace_back("n_pairs must be >= 1");
  if (s.n_eval < 0) bad.emplace_back("n_eval must be >= 0");
  if (s.L_v < 2) bad.emplace_back("L_v must be >= 2");
  if (s.d_feat < 1) bad.emplace_back("d_feat must be >= 1");
  if (s.words_min < 1 || s.words_max < s.words_min) {
    bad.emplace_back("need 1 <= words_min <= words_max");
  }
  if (s.n_concepts <= s.words_max) bad.emplace_back("n_concepts must exceed words_max");
  if (!(s.moment_fraction_min > 0.0 && s.moment_fraction_max < 1.0 &&
        s.moment_fraction_min <= s.moment_fraction_max)) {
    bad.emplace_back("moment_fraction range must lie in (0, 1)");
  }
  if (!(s.noise_in >= 0.0) || !(s.noise_out >= 0.0)) bad.emplace_back("noise must be >= 0");
  if (!(s.clip_seconds > 0.0)) bad.emplace_back("clip_seconds must be positive");
  if (!bad.empty()) {
    std::string msg = "invalid synthetic spec:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

void to_json(json& j, const SynthSpec& s) {
  j = json{{"seed", s.seed},
           {"n_pairs", s.n_pairs},
           {"n_eval", s.n_eval},
           {"L_v", s.L_v},
           {"d_feat", s.d_feat},
           {"n_concepts", s.n_concepts},
           {"words_per_query", {s.words_min, s.words_max}},
           {"moment_fraction", {s.moment_fraction_min, s.moment_fraction_max}},
           {"noise_in", s.noise_in},
           {"noise_out", s.noise_out},
           {"clip_seconds", s.clip_seconds}};
}

void from_json(const json& j, SynthSpec& s) {
  if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  static const std::set<std::string> known{"seed",       "n_pairs",         "n_eval",
                                           "L_v",        "d_feat",          "n_concepts",
                                           "words_per_query", "moment_fraction", "noise_in",
                                           "noise_out",  "clip_seconds"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("unknown synthetic spec field '" + k + "'");
  }
  try {
    SynthSpec d;
    s.seed = j.value("seed", d.seed);
    s.n_pairs = j.value("n_pairs", d.n_pairs);
    s.n_eval = j.value("n_eval", d.n_eval);
    s.L_v = j.value("L_v", d.L_v);
    s.d_feat = j.value("d_feat", d.d_feat);
    s.n_concepts = j.value("n_concepts", d.n_concepts);
    if (j.contains("words_per_query")) {
      const auto& r = j.at("words_per_query");
      s.words_min = r.at(0).get<int>();
      s.words_max = r.at(1).get<int>();
    }
    if (j.contains("moment_fraction")) {
      const auto& r = j.at("moment_fraction");
      s.moment_fraction_min = r.at(0).get<double>();
      s.moment_fraction_max = r.at(1).get<double>();
    }
    s.noise_in = j.value("noise_in", d.noise_in);
    s.noise_out = j.value("noise_out", d.noise_out);
    s.clip_seconds = j.value("clip_seconds", d.clip_seconds);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
}

DatasetSplit generate_synthetic(const SynthSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  const int d = spec.d_feat;

  std::vector<Eigen::VectorXd> concepts;
  for (int c = 0; c < spec.n_concepts; ++c) {
    Eigen::VectorXd v = gaussian(rng, d, 1.0);
    concepts.push_back(v / v.norm());
  }
  Eigen::VectorXd eos = gaussian(rng, d, 1.0);
  eos /= eos.norm();

  const double expected_noise = spec.noise_in * std::sqrt(static_cast<double>(d));
  DatasetSplit out;
  const int total = spec.n_pairs + spec.n_eval;
  for (int p = 0; p < total; ++p) {
    std::vector<int> order(static_cast<std::size_t>(spec.n_concepts));
    for (int c = 0; c < spec.n_concepts; ++c) order[static_cast<std::size_t>(c)] = c;
    std::shuffle(order.begin(), order.end(), rng);
    const int k = std::uniform_int_distribution<int>(spec.words_min, spec.words_max)(rng);
    std::vector<int> query(order.begin(), order.begin() + k);
    std::vector<int> others(order.begin() + k, order.end());

    DatasetRecord r;
    r.features.video_id = "vid" + std::to_string(p);
    r.features.query_id = "q" + std::to_string(p);
    r.features.words.resize(k + 1, d);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (int w = 0; w < k; ++w) {
      const auto& c = concepts[static_cast<std::size_t>(query[static_cast<std::size_t>(w)])];
      mean += c;
      r.features.words.row(w) = to_float_precision(c + gaussian(rng, d, spec.noise_in));
      r.query_text += (w ? " " : "") + std::string("concept") +
                      std::to_string(query[static_cast<std::size_t>(w)]);
    }
    mean /= static_cast<double>(k);
    r.features.words.row(k) = to_float_precision(eos);

    const double frac = std::uniform_real_distribution<double>(spec.moment_fraction_min,
                                                               spec.moment_fraction_max)(rng);
    const int len = std::clamp(static_cast<int>(std::lround(frac * spec.L_v)), 1, spec.L_v);
    const int start = std::uniform_int_distribution<int>(0, spec.L_v - len)(rng);

    r.features.clips.resize(spec.L_v, d);
    Eigen::VectorXi saliency = Eigen::VectorXi::Zero(spec.L_v);
    std::uniform_int_distribution<std::size_t> pick_other(0, others.size() - 1);
    for (int i = 0; i < spec.L_v; ++i) {
      if (i >= start && i < start + len) {
        Eigen::VectorXd eps = gaussian(rng, d, spec.noise_in);
        r.features.clips.row(i) = to_float_precision(mean + eps);
        // One level lost per quarter of noise beyond its expected magnitude.
        int level = kMaxSaliencyLevel;
        if (expected_noise > 0.0) {
          const double excess = std::max(0.0, eps.norm() / expected_noise - 1.0);
          level = std::max(1, kMaxSaliencyLevel - static_cast<int>(std::floor(4.0 * excess)));
        }
        saliency[i] = level;
      } else {
        const auto& c = concepts[static_cast<std::size_t>(others[pick_other(rng)])];
        r.features.clips.row(i) = to_float_precision(c + gaussian(rng, d, spec.noise_out));
      }
    }
    r.duration_s = spec.L_v * spec.clip_seconds;
    MomentSpan span = span_se_to_cw(static_cast<double>(start) / spec.L_v,
                                    static_cast<double>(start + len) / spec.L_v);
    r.gt = GroundTruth::make({span}, saliency);
    (p < spec.n_pairs ? out.train : out.eval).push_back(std::move(r));
  }
  return out;
}

void write_features(const fs::path& path, const Matrix& m) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(kMagic.data(), kMagic.size());
  const auto rows = static_cast<std::uint32_t>(m.rows());
  const auto cols = static_cast<std::uint32_t>(m.cols());
  f.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  f.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> payload = m.cast<float>();
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw IoError("write failed: " + path.string());
}

Matrix read_features(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::array<char, 8> magic{};
  f.read(magic.data(), magic.size());
  if (!f || magic != kMagic) throw IoError(path.string() + ": not a CGFEAT01 file");
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  f.read(reinterpret_cast<char*>(&rows), sizeof rows);
  f.read(reinterpret_cast<char*>(&cols), sizeof cols);
  if (!f) throw IoError(path.string() + ": truncated header");
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> payload(rows, cols);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw IoError(path.string() + ": truncated payload");
  return payload.cast<double>();
}

fs::path clip_feature_path(const fs::path& feature_dir, const std::string& video_id) {
  return feature_dir / (video_id + ".clips.cgf");
}

fs::path word_feature_path(const fs::path& feature_dir, const std::string& query_id) {
  return feature_dir / (query_id + ".words.cgf");
}

json record_to_json(const DatasetRecord& r) {
  json windows = json::array();
  for (const auto& s : r.gt.spans) {
    auto [start, end] = span_cw_to_se(s);
    windows.push_back({start * r.duration_s, end * r.duration_s});
  }
  json clip_ids = json::array();
  json scores = json::array();
  for (Eigen::Index i = 0; i < r.gt.saliency.size(); ++i) {
    if (r.gt.saliency[i] > 0) {
      clip_ids.push_back(i);
      scores.push_back(json::array({r.gt.saliency[i]}));
    }
  }
  return json{{"qid", r.features.query_id},
              {"query", r.query_text},
              {"vid", r.features.video_id},
              {"duration", r.duration_s},
              {"relevant_windows", windows},
              {"relevant_clip_ids", clip_ids},
              {"saliency_scores", scores}};
}

void save_jsonl(const fs::path& path, const std::vector<DatasetRecord>& records,
                const fs::path& feature_dir) {
  fs::create_directories(feature_dir);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) {
    f << record_to_json(r).dump() << '\n';
    write_features(clip_feature_path(feature_dir, r.features.video_id), r.features.clips);
    write_features(word_feature_path(feature_dir, r.features.query_id), r.features.words);
  }
  if (!f) throw IoError("write failed: " + path.string());
}

namespace {

int rounded_mean(const json& scores) {
  if (scores.is_number()) return scores.get<int>();
  if (!scores.is_array() || scores.empty()) throw std::invalid_argument("empty annotator list");
  double sum = 0.0;
  for (const auto& s : scores) sum += s.get<double>();
  return static_cast<int>(std::lround(sum / static_cast<double>(scores.size())));
}

DatasetRecord parse_record(const json& j, double clip_seconds, const fs::path& feature_dir,
                           std::size_t line) {
  DatasetRecord r;
  const auto str = [](const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  };
  r.features.query_id = str(j.at("qid"));
  r.features.video_id = str(j.at("vid"));
  r.query_text = j.value("query", std::string{});
  r.duration_s = j.at("duration").get<double>();
  if (!(r.duration_s > 0.0)) throw RangeError("line " + std::to_string(line) + ": duration <= 0");
  const int n_clips = static_cast<int>(std::ceil(r.duration_s / clip_seconds - 1e-9));

  std::vector<MomentSpan> spans;
  for (const auto& w : j.at("relevant_windows")) {
    const double s = w.at(0).get<double>();
    const double e = w.at(1).get<double>();
    if (s < 0.0 || e > r.duration_s || s > e) {
      throw RangeError("line " + std::to_string(line) + ": window [" + std::to_string(s) + ", " +
                       std::to_string(e) + "] outside [0, " + std::to_string(r.duration_s) + "]");
    }
    spans.push_back(span_se_to_cw(s / r.duration_s, e / r.duration_s));
  }

  Eigen::VectorXi saliency = Eigen::VectorXi::Zero(n_clips);
  const json& scores = j.at("saliency_scores");
  if (j.contains("relevant_clip_ids")) {
    const json& ids = j.at("relevant_clip_ids");
    if (ids.size() != scores.size()) {
      throw RangeError("line " + std::to_string(line) +
                       ": relevant_clip_ids and saliency_scores differ in length");
    }
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const int id = ids[k].get<int>();
      if (id < 0 || id >= n_clips) {
        throw RangeError("line " + std::to_string(line) + ": clip id " + std::to_string(id) +
                         " outside 0.." + std::to_string(n_clips - 1));
      }
      saliency[id] = rounded_mean(scores[k]);
    }
  } else {
    if (static_cast<int>(scores.size()) != n_clips) {
      throw RangeError("line " + std::to_string(line) + ": expected " + std::to_string(n_clips) +
                       " saliency entries");
    }
    for (int i = 0; i < n_clips; ++i) saliency[i] = rounded_mean(scores[static_cast<std::size_t>(i)]);
  }
  r.gt = GroundTruth::make(std::move(spans), std::move(saliency));

  r.features.clips = read_features(clip_feature_path(feature_dir, r.features.video_id));
  r.features.words = read_features(word_feature_path(feature_dir, r.features.query_id));
  if (r.features.clips.rows() != n_clips) {
    throw ShapeError("line " + std::to_string(line) + ": " + std::to_string(r.features.clips.rows()) +
                     " clip features for " + std::to_string(n_clips) + " clips");
  }
  validate_features(r.features);
  return r;
}

}  // namespace

std::vector<DatasetRecord> load_jsonl(const fs::path& path, double clip_seconds,
                                      fs::path feature_dir) {
  if (!(clip_seconds > 0.0)) throw ConfigError("clip_seconds must be positive");
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  if (feature_dir.empty()) feature_dir = path.parent_path() / "features";
  std::vector<DatasetRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(f, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(line, e.what());
    }
    try {
      out.push_back(parse_record(j, clip_seconds, feature_dir, line));
    } catch (const json::exception& e) {
      throw ParseError(line, e.what());
    } catch (const std::invalid_argument& e) {
      throw ParseError(line, e.what());
    }
  }
  return out;
}

void write_dataset(const fs::path& dir, const DatasetSplit& split, const SynthSpec& spec) {
  fs::create_directories(dir);
  save_jsonl(dir / "train.jsonl", split.train, dir / "features");
  save_jsonl(dir / "eval.jsonl", split.eval, dir / "features");
  json manifest{{"spec", spec},
                {"n_train", split.train.size()},
                {"n_eval", split.eval.size()},
                {"fingerprint", dataset_fingerprint(dir)}};
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

DatasetSplit load_dataset(const fs::path& dir, double clip_seconds) {
  if (!fs::exists(dir / "train.jsonl")) throw IoError("no train.jsonl in " + dir.string());
  DatasetSplit s;
  s.train = load_jsonl(dir / "train.jsonl", clip_seconds);
  if (fs::exists(dir / "eval.jsonl")) s.eval = load_jsonl(dir / "eval.jsonl", clip_seconds);
  return s;
}

std::string dataset_fingerprint(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const char* name : {"train.jsonl", "eval.jsonl"}) {
    if (fs::exists(dir / name)) files.push_back(dir / name);
  }
  if (fs::is_directory(dir / "features")) {
    std::vector<fs::path> sidecars;
    for (const auto& e : fs::directory_iterator(dir / "features")) sidecars.push_back(e.path());
    std::sort(sidecars.begin(), sidecars.end());
    files.insert(files.end(), sidecars.begin(), sidecars.end());
  }
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  for (const auto& p : files) {
    const std::string rel = fs::relative(p, dir).generic_string();
    EVP_DigestUpdate(ctx.get(), rel.data(), rel.size() + 1);
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open " + p.string());
    while (f.read(buf.data(), static_cast<std::streamsize>(buf.size())) || f.gcount() > 0) {
      EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(f.gcount()));
    }
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

void save_predictions(const std::vector<Prediction>& preds, const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& p : preds) {
    json windows = json::array();
    for (const auto& s : p.spans) {
      auto [start, end] = span_cw_to_se(s.span);
      windows.push_back({start * p.duration_s, end * p.duration_s, s.confidence});
    }
    json sal = json::array();
    for (Eigen::Index i = 0; i < p.saliency.size(); ++i) sal.push_back(p.saliency[i]);
    f << json{{"qid", p.query_id},
              {"vid", p.video_id},
              {"duration", p.duration_s},
              {"pred_relevant_windows", windows},
              {"pred_saliency_scores", sal}}
             .dump()
      << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<Prediction> load_predictions(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<Prediction> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(f, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(text);
      Prediction p;
      p.query_id = j.at("qid").get<std::string>();
      p.video_id = j.value("vid", std::string{});
      p.duration_s = j.at("duration").get<double>();
      for (const auto& w : j.at("pred_relevant_windows")) {
        ScoredSpan s;
        s.span = span_se_to_cw(w.at(0).get<double>() / p.duration_s,
                               w.at(1).get<double>() / p.duration_s);
        s.confidence = w.at(2).get<double>();
        p.spans.push_back(s);
      }
      const auto& sal = j.at("pred_saliency_scores");
      p.saliency.resize(static_cast<Eigen::Index>(sal.size()));
      for (std::size_t i = 0; i < sal.size(); ++i) {
        p.saliency[static_cast<Eigen::Index>(i)] = sal[i].get<double>();
      }
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError(line, e.what());
    }
  }
  return out;
}

}  // namespace cgdetr::data
