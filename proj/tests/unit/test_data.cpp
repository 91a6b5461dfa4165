#include "cgdetr/data.hpp"
#include "cgdetr/errors.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using namespace cgdetr;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("cgdetr_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d / "features");
  return d;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

data::SynthSpec small_spec() {
  data::SynthSpec s;
  s.n_pairs = 6;
  s.n_eval = 2;
  s.L_v = 12;
  s.d_feat = 8;
  s.n_concepts = 10;
  return s;
}

}  // namespace

TEST(Synthetic, DeterministicInTheSeed) {
  const auto a = data::generate_synthetic(small_spec());
  const auto b = data::generate_synthetic(small_spec());
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].features.clips, b.train[i].features.clips);
    EXPECT_EQ(a.train[i].features.words, b.train[i].features.words);
    EXPECT_EQ(a.train[i].gt.saliency, b.train[i].gt.saliency);
  }
  const fs::path d1 = fresh_dir("det1");
  const fs::path d2 = fresh_dir("det2");
  data::write_dataset(d1, a, small_spec());
  data::write_dataset(d2, b, small_spec());
  EXPECT_EQ(data::dataset_fingerprint(d1), data::dataset_fingerprint(d2));

  data::SynthSpec other = small_spec();
  other.seed = 8;
  const fs::path d3 = fresh_dir("det3");
  data::write_dataset(d3, data::generate_synthetic(other), other);
  EXPECT_NE(data::dataset_fingerprint(d1), data::dataset_fingerprint(d3));
}

TEST(Synthetic, DefaultShapes) {
  const auto s = data::generate_synthetic(data::SynthSpec{});
  EXPECT_EQ(s.train.size(), 200u);
  EXPECT_EQ(s.eval.size(), 50u);
  for (const auto& r : s.train) {
    EXPECT_EQ(r.gt.saliency.size(), 32);
    EXPECT_EQ(r.features.clips.rows(), 32);
    EXPECT_EQ(r.features.clips.cols(), 64);
    EXPECT_EQ(r.gt.spans.size(), 1u);
    EXPECT_GE(r.features.words.rows(), 3);  // at least two concepts plus the end token
    EXPECT_TRUE((r.gt.saliency.array() >= 0).all() && (r.gt.saliency.array() <= 4).all());
  }
}

TEST(Synthetic, ZeroNoiseMomentEqualsConceptMean) {
  data::SynthSpec spec = small_spec();
  spec.noise_in = 0.0;
  const auto s = data::generate_synthetic(spec);
  for (const auto& r : s.train) {
    const int k = static_cast<int>(r.features.words.rows()) - 1;
    // With zero noise each word is its concept vector; the mean is their average.
    Eigen::RowVectorXd mean = r.features.words.topRows(k).colwise().mean();
    for (Eigen::Index i = 0; i < r.gt.saliency.size(); ++i) {
      if (r.gt.saliency[i] > 0) {
        EXPECT_LT((r.features.clips.row(i) - mean).cwiseAbs().maxCoeff(), 1e-6);
        EXPECT_EQ(r.gt.saliency[i], 4);
      }
    }
  }
}

TEST(Synthetic, MomentIsContiguousAndMatchesSaliency) {
  const auto s = data::generate_synthetic(small_spec());
  for (const auto& r : s.train) {
    auto [st, en] = span_cw_to_se(r.gt.spans[0]);
    const auto n = r.gt.saliency.size();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double c = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
      EXPECT_EQ(r.gt.saliency[i] > 0, c > st && c < en);
    }
  }
}

TEST(Synthetic, InvalidSpecRejected) {
  data::SynthSpec s;
  s.L_v = 1;
  s.noise_in = -1.0;
  EXPECT_THROW(data::generate_synthetic(s), ConfigError);
  nlohmann::json j = {{"n_pairs", 3}, {"bogus", 1}};
  EXPECT_THROW((void)j.get<data::SynthSpec>(), ConfigError);
  nlohmann::json partial = {{"n_pairs", 3}};
  EXPECT_EQ(partial.get<data::SynthSpec>().n_pairs, 3);
  EXPECT_EQ(partial.get<data::SynthSpec>().L_v, data::SynthSpec{}.L_v);
}

TEST(Features, SidecarRoundTripAndCorruption) {
  const fs::path d = fresh_dir("features");
  Eigen::MatrixXd m(3, 2);
  m << 1.5, -2.0, 0.25, 4.0, 1e-3, 7.0;
  data::write_features(d / "x.cgf", m);
  EXPECT_TRUE(data::read_features(d / "x.cgf").isApprox(m, 1e-6));
  write_text(d / "bad.cgf", "NOTMAGIC");
  EXPECT_THROW(data::read_features(d / "bad.cgf"), IoError);
  EXPECT_THROW(data::read_features(d / "missing.cgf"), IoError);
}

TEST(Jsonl, WindowInSecondsBecomesNormalizedSpan) {
  const fs::path d = fresh_dir("jsonl");
  data::write_features(d / "features" / "v1.clips.cgf", Eigen::MatrixXd::Ones(10, 4));
  data::write_features(d / "features" / "q1.words.cgf", Eigen::MatrixXd::Ones(2, 4));
  write_text(d / "a.jsonl",
             R"({"qid":"q1","query":"x","vid":"v1","duration":20,"relevant_windows":[[0,10]],)"
             R"("relevant_clip_ids":[1,2],"saliency_scores":[[4,3,4],[1,2,2]]})"
             "\n");
  const auto recs = data::load_jsonl(d / "a.jsonl");
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_NEAR(recs[0].gt.spans[0].center, 0.25, 1e-12);
  EXPECT_NEAR(recs[0].gt.spans[0].width, 0.5, 1e-12);
  EXPECT_EQ(recs[0].gt.saliency[1], 4);  // rounded mean of annotators
  EXPECT_EQ(recs[0].gt.saliency[2], 2);
  EXPECT_EQ(recs[0].gt.saliency.size(), 10);
}

TEST(Jsonl, EmptyFileAndErrors) {
  const fs::path d = fresh_dir("jsonl_err");
  write_text(d / "empty.jsonl", "");
  EXPECT_TRUE(data::load_jsonl(d / "empty.jsonl").empty());

  write_text(d / "brace.jsonl", "{\n");
  try {
    data::load_jsonl(d / "brace.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }

  data::write_features(d / "features" / "v.clips.cgf", Eigen::MatrixXd::Ones(5, 2));
  data::write_features(d / "features" / "q.words.cgf", Eigen::MatrixXd::Ones(1, 2));
  write_text(d / "range.jsonl",
             R"({"qid":"q","vid":"v","duration":10,"relevant_windows":[[0,12]],)"
             R"("relevant_clip_ids":[0],"saliency_scores":[[1]]})"
             "\n");
  EXPECT_THROW(data::load_jsonl(d / "range.jsonl"), RangeError);
  write_text(d / "clips.jsonl",
             R"({"qid":"q","vid":"v","duration":20,"relevant_windows":[[0,2]],)"
             R"("relevant_clip_ids":[0],"saliency_scores":[[1]]})"
             "\n");
  EXPECT_THROW(data::load_jsonl(d / "clips.jsonl"), ShapeError);
  write_text(d / "field.jsonl", R"({"qid":"q","vid":"v"})" "\n");
  EXPECT_THROW(data::load_jsonl(d / "field.jsonl"), ParseError);
}

TEST(Jsonl, DatasetRoundTrip) {
  const fs::path d = fresh_dir("roundtrip");
  const auto split = data::generate_synthetic(small_spec());
  data::write_dataset(d, split, small_spec());
  const auto back = data::load_dataset(d);
  ASSERT_EQ(back.train.size(), split.train.size());
  ASSERT_EQ(back.eval.size(), split.eval.size());
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    EXPECT_EQ(back.train[i].features.clips, split.train[i].features.clips);
    EXPECT_EQ(back.train[i].features.words, split.train[i].features.words);
    EXPECT_EQ(back.train[i].gt.saliency, split.train[i].gt.saliency);
    EXPECT_NEAR(back.train[i].gt.spans[0].center, split.train[i].gt.spans[0].center, 1e-12);
  }
  EXPECT_TRUE(fs::exists(d / "manifest.json"));
}

TEST(Predictions, SecondsAndRoundTrip) {
  const fs::path d = fresh_dir("preds");
  Prediction p;
  p.query_id = "q";
  p.video_id = "v";
  p.duration_s = 20.0;
  p.spans.push_back({MomentSpan{0.25, 0.5}, 0.9});
  p.saliency = Eigen::VectorXd::LinSpaced(10, 0.0, 1.0);
  data::save_predictions({p}, d / "p.jsonl");
  std::ifstream f(d / "p.jsonl");
  std::string line;
  std::getline(f, line);
  const auto j = nlohmann::json::parse(line);
  EXPECT_DOUBLE_EQ(j["pred_relevant_windows"][0][0].get<double>(), 0.0);
  EXPECT_DOUBLE_EQ(j["pred_relevant_windows"][0][1].get<double>(), 10.0);
  EXPECT_DOUBLE_EQ(j["pred_relevant_windows"][0][2].get<double>(), 0.9);

  const auto back = data::load_predictions(d / "p.jsonl");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_NEAR(back[0].spans[0].span.center, 0.25, 1e-6);
  EXPECT_NEAR(back[0].spans[0].span.width, 0.5, 1e-6);
  EXPECT_TRUE(back[0].saliency.isApprox(p.saliency, 1e-9));

  data::save_predictions({}, d / "empty.jsonl");
  EXPECT_EQ(fs::file_size(d / "empty.jsonl"), 0u);
}
