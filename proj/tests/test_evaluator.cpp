#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "pal/evaluator.hpp"
#include "test_helpers.hpp"

using namespace pal;
using pal_test::TempDir;

namespace {

SimilarityMatrix make_sim(const Matrix& scores) {
  SimilarityMatrix sim;
  sim.scores = scores;
  for (std::size_t i = 0; i < scores.rows(); ++i)
    sim.row_ids.push_back(static_cast<std::uint32_t>(i));
  for (std::size_t j = 0; j < scores.cols(); ++j)
    sim.col_ids.push_back(static_cast<std::uint32_t>(j));
  return sim;
}

PairList identity_pairs(std::size_t n) {
  PairList pairs;
  for (std::size_t i = 0; i < n; ++i)
    pairs.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i));
  return pairs;
}

// Sort-based rank oracle: position of the true match after a stable sort by
// descending score (stable sort realizes the lower-index tie-break).
std::size_t rank_oracle(std::span<const double> scores, std::size_t target) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return static_cast<std::size_t>(
             std::find(order.begin(), order.end(), target) - order.begin()) + 1;
}

}  // namespace

TEST_CASE("retrieval on a dominant diagonal gives perfect recall") {
  Matrix scores(4, 4, 0.1);
  for (std::size_t i = 0; i < 4; ++i) scores(i, i) = 0.9;
  const std::size_t ks[] = {1};
  const RetrievalResult result = retrieval_eval(make_sim(scores), identity_pairs(4), ks);
  CHECK(result.recall_a_to_b[0].second == 1.0);
  CHECK(result.recall_b_to_a[0].second == 1.0);
}

TEST_CASE("constant scores resolve by the lower-index tie-break") {
  const std::size_t n = 5;
  Matrix scores(n, n, 0.5);
  const std::size_t ks[] = {1};
  const RetrievalResult result = retrieval_eval(make_sim(scores), identity_pairs(n), ks);
  // Every query ranks column 0 first; only pair (0,0) scores a hit.
  CHECK(result.recall_a_to_b[0].second == Catch::Approx(1.0 / n));
  CHECK(result.recall_b_to_a[0].second == Catch::Approx(1.0 / n));
}

TEST_CASE("retrieval matches the sort-based oracle on random scores") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  const std::size_t n = 20;
  Matrix scores(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) scores(i, j) = uni(rng);

  const std::vector<std::size_t> ks = {1, 3, 5, 10, n};
  const RetrievalResult result = retrieval_eval(make_sim(scores), identity_pairs(n), ks);

  for (std::size_t ki = 0; ki < ks.size(); ++ki) {
    std::size_t hits_ab = 0, hits_ba = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(n), col(n);
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = scores(i, j);
        col[j] = scores(j, i);
      }
      if (rank_oracle(row, i) <= ks[ki]) ++hits_ab;
      if (rank_oracle(col, i) <= ks[ki]) ++hits_ba;
    }
    CHECK(result.recall_a_to_b[ki].second ==
          Catch::Approx(static_cast<double>(hits_ab) / n));
    CHECK(result.recall_b_to_a[ki].second ==
          Catch::Approx(static_cast<double>(hits_ba) / n));
  }

  // Non-decreasing in k; recall@N = 1.
  for (std::size_t ki = 1; ki < ks.size(); ++ki)
    CHECK(result.recall_a_to_b[ki].second >= result.recall_a_to_b[ki - 1].second);
  CHECK(result.recall_a_to_b.back().second == 1.0);
}

TEST_CASE("retrieval is invariant under strictly monotone score transforms") {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Matrix scores(8, 8);
  for (std::size_t i = 0; i < scores.size(); ++i) scores.data()[i] = uni(rng);
  Matrix warped = scores;
  for (std::size_t i = 0; i < warped.size(); ++i)
    warped.data()[i] = std::exp(3.0 * warped.data()[i]) - 0.5;

  const std::vector<std::size_t> ks = {1, 2, 4};
  const RetrievalResult a = retrieval_eval(make_sim(scores), identity_pairs(8), ks);
  const RetrievalResult b = retrieval_eval(make_sim(warped), identity_pairs(8), ks);
  for (std::size_t ki = 0; ki < ks.size(); ++ki) {
    CHECK(a.recall_a_to_b[ki].second == b.recall_a_to_b[ki].second);
    CHECK(a.recall_b_to_a[ki].second == b.recall_b_to_a[ki].second);
  }
}

TEST_CASE("retrieval rejects ids missing from the matrix") {
  Matrix scores(2, 2, 0.1);
  const std::size_t ks[] = {1};
  PairList pairs = {{0, 7}};
  CHECK_THROWS_AS(retrieval_eval(make_sim(scores), pairs, ks), UsageError);
}

TEST_CASE("classification accuracy") {
  Matrix class_h(3, 4);
  class_h(0, 0) = 1.0;
  class_h(1, 1) = 1.0;
  class_h(2, 2) = 1.0;

  SECTION("exact class representations give perfect accuracy") {
    Matrix image_h = class_h;
    const std::int32_t labels[] = {0, 1, 2};
    CHECK(classify_eval(image_h, class_h, labels) == 1.0);
  }
  SECTION("adversarially permuted labels give zero accuracy") {
    Matrix image_h = class_h;
    const std::int32_t labels[] = {1, 2, 0};
    CHECK(classify_eval(image_h, class_h, labels) == 0.0);
  }
  SECTION("matches a brute-force argmax recount on random data") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Matrix image_h(10, 4);
    std::vector<std::int32_t> labels(10);
    for (std::size_t i = 0; i < 10; ++i) {
      for (std::size_t d = 0; d < 4; ++d) image_h(i, d) = uni(rng);
      labels[i] = static_cast<std::int32_t>(i % 3);
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::size_t d = 0; d < 4; ++d) s += image_h(i, d) * class_h(c, d);
        if (s > best_score) {
          best_score = s;
          best = c;
        }
      }
      if (best == static_cast<std::size_t>(labels[i])) ++correct;
    }
    CHECK(classify_eval(image_h, class_h, labels) ==
          Catch::Approx(static_cast<double>(correct) / 10.0));
  }
  SECTION("label out of range is a usage error") {
    Matrix image_h = class_h;
    const std::int32_t labels[] = {0, 1, 5};
    CHECK_THROWS_AS(classify_eval(image_h, class_h, labels), UsageError);
  }
}

TEST_CASE("dense labeling mIoU") {
  std::mt19937_64 rng(29);
  const auto anchors = pal_test::random_anchors(rng, 6, 5);

  auto seq = pal_test::random_sequence(rng, 16, 5);
  seq.grid = GridShape{4, 4};

  // Class prompts: one unit row per class in relative-representation space.
  const RelRepMatrix rel = relative_representation(seq, anchors);

  SECTION("predicting the ground truth exactly gives 1.0") {
    // Use each patch's own normalized row as its class representation: class
    // c = patch c's direction for three chosen patches, ground truth built to
    // match the resulting argmax.
    Matrix class_h(3, 6);
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> row(rel.similarity.row(c * 5).begin(),
                              rel.similarity.row(c * 5).end());
      const double n = l2_norm({row.data(), row.size()});
      for (std::size_t k = 0; k < 6; ++k) class_h(c, k) = row[k] / n;
    }
    const auto predicted = dense_predict(seq, anchors, class_h, -1.0);
    std::vector<std::int32_t> truth(predicted.begin(), predicted.end());
    const DenseResult result = dense_eval(seq, anchors, class_h, -1.0, truth);
    CHECK(result.miou_fg == 1.0);
    CHECK(result.predicted == truth);
  }

  SECTION("fully disjoint predictions give 0.0") {
    Matrix class_h(2, 6);
    for (std::size_t k = 0; k < 6; ++k) {
      class_h(0, k) = 1.0;
      class_h(1, k) = 1.0;
    }
    const auto predicted = dense_predict(seq, anchors, class_h, -1.0);
    std::vector<std::int32_t> truth(16);
    for (std::size_t t = 0; t < 16; ++t) truth[t] = predicted[t] == 0 ? 1 : 0;
    bool both_present = std::set<std::int32_t>(truth.begin(), truth.end()).size() == 2;
    const DenseResult result = dense_eval(seq, anchors, class_h, -1.0, truth);
    if (both_present) CHECK(result.miou_fg == 0.0);
  }

  SECTION("matches a hand intersection/union count on a random instance") {
    std::uniform_int_distribution<std::int32_t> cls(0, 2);
    Matrix class_h(3, 6);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t i = 0; i < class_h.size(); ++i) class_h.data()[i] = gauss(rng);
    std::vector<std::int32_t> truth(16);
    for (auto& t : truth) t = cls(rng);

    const DenseResult result = dense_eval(seq, anchors, class_h, -1.0, truth);
    double iou_sum = 0.0;
    std::set<std::int32_t> present(truth.begin(), truth.end());
    for (std::int32_t c : present) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t t = 0; t < 16; ++t) {
        const bool p = result.predicted[t] == c;
        const bool g = truth[t] == c;
        if (p && g) ++inter;
        if (p || g) ++uni;
      }
      iou_sum += uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    CHECK(result.miou_fg ==
          Catch::Approx(iou_sum / static_cast<double>(present.size())).margin(1e-12));
  }

  SECTION("missing grid is a usage error") {
    auto flat = seq;
    flat.grid.reset();
    Matrix class_h(2, 6, 0.5);
    std::vector<std::int32_t> truth(16, 0);
    CHECK_THROWS_AS(dense_eval(flat, anchors, class_h, -1.0, truth), UsageError);
  }
}

TEST_CASE("anchor overlap") {
  SECTION("identical activations overlap fully") {
    Matrix p(3, 10);
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] = uni(rng);
    const OverlapReport report = anchor_overlap(p, p, identity_pairs(3), 0);
    CHECK(report.mean_hard_overlap_matched == 1.0);
    CHECK(report.mean_dice_matched == 1.0);
  }

  SECTION("disjoint top sets have zero hard overlap") {
    Matrix p_a(1, 10), p_b(1, 10);
    for (std::size_t k = 0; k < 5; ++k) p_a(0, k) = 1.0 + static_cast<double>(k);
    for (std::size_t k = 5; k < 10; ++k) p_b(0, k) = 1.0 + static_cast<double>(k);
    const OverlapReport report = anchor_overlap(p_a, p_b, identity_pairs(1), 0);
    CHECK(report.mean_hard_overlap_matched == 0.0);
    CHECK(report.mean_dice_matched == 0.0);
  }

  SECTION("hard overlap matches explicit set intersection on random pairs") {
    std::mt19937_64 rng(37);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    const std::size_t n = 12, width = 10, k_top = 5;
    Matrix p_a(n, width), p_b(n, width);
    for (std::size_t i = 0; i < p_a.size(); ++i) {
      p_a.data()[i] = uni(rng);
      p_b.data()[i] = uni(rng);
    }
    const OverlapReport report = anchor_overlap(p_a, p_b, identity_pairs(n), 0, k_top);

    auto top5 = [&](const Matrix& m, std::size_t row) {
      std::vector<std::size_t> order(width);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return m(row, x) > m(row, y);
      });
      return std::set<std::size_t>(order.begin(), order.begin() + k_top);
    };
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto sa = top5(p_a, i);
      const auto sb = top5(p_b, i);
      std::size_t inter = 0;
      for (std::size_t idx : sb)
        if (sa.count(idx)) ++inter;
      total += static_cast<double>(inter) / k_top;
    }
    CHECK(report.mean_hard_overlap_matched == Catch::Approx(total / n).margin(1e-12));
  }

  SECTION("k_top larger than K is a usage error") {
    Matrix p(2, 4, 0.1);
    CHECK_THROWS_AS(anchor_overlap(p, p, identity_pairs(2), 0, 5), UsageError);
  }

  SECTION("mismatched sampling is deterministic per seed") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Matrix p(8, 10);
    for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] = uni(rng);
    const OverlapReport a = anchor_overlap(p, p, identity_pairs(8), 5);
    const OverlapReport b = anchor_overlap(p, p, identity_pairs(8), 5);
    CHECK(a.mean_hard_overlap_mismatched == b.mean_hard_overlap_mismatched);
    CHECK(a.mean_dice_mismatched == b.mean_dice_mismatched);
  }
}

TEST_CASE("heatmap export") {
  std::mt19937_64 rng(43);
  const auto anchors_v = pal_test::random_anchors(rng, 6, 5, ModalityTag::vision);
  const auto anchors_l = pal_test::random_anchors(rng, 6, 4, ModalityTag::language);
  auto vision = pal_test::random_sequence(rng, 16, 5);
  vision.grid = GridShape{4, 4};

  SECTION("single-token text flags attention 1.0 on every anchor") {
    const auto text = pal_test::random_sequence(rng, 1, 4);
    TempDir dir("heat1");
    const std::uint32_t ids[] = {0, 3};
    export_heatmaps(vision, anchors_v, text, anchors_l, ids, 0.03, dir.path());

    std::ifstream is(dir / "anchor_0003_text.csv");
    std::string header, line;
    std::getline(is, header);
    REQUIRE(std::getline(is, line));
    CHECK(line == "0,1,1");  // token 0, attention exactly 1, flagged
  }

  SECTION("uniform attention produces a constant graymap") {
    TokenSequence flat;
    flat.tokens = Matrix(16, 5);
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t d = 0; d < 5; ++d) flat.tokens(t, d) = d == 0 ? 1.0 : 0.25;
    flat.grid = GridShape{4, 4};
    const auto text = pal_test::random_sequence(rng, 2, 4);
    TempDir dir("heat2");
    const std::uint32_t ids[] = {1};
    export_heatmaps(flat, anchors_v, text, anchors_l, ids, 0.03, dir.path());

    const auto bytes = pal_test::read_file_bytes(dir / "anchor_0001_vision.pgm");
    // P5 header then 16 identical pixels.
    const std::string content(bytes.begin(), bytes.end());
    const auto pixel_start = content.rfind('\n') + 1;
    REQUIRE(content.size() - pixel_start == 16);
    for (std::size_t i = pixel_start + 1; i < content.size(); ++i)
      CHECK(content[i] == content[pixel_start]);
  }

  SECTION("CSV values equal the attention pipeline bit-exactly") {
    const auto text = pal_test::random_sequence(rng, 3, 4);
    TempDir dir("heat3");
    const std::uint32_t ids[] = {2};
    export_heatmaps(vision, anchors_v, text, anchors_l, ids, 0.03, dir.path());

    const ForwardResult fwd = forward(vision, anchors_v, 0.03);
    std::ifstream is(dir / "anchor_0002_vision.csv");
    std::string line;
    std::size_t t = 0;
    while (std::getline(is, line)) {
      std::istringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        CHECK(std::strtod(cell.c_str(), nullptr) == fwd.rel.attention(t, 2));
        ++t;
      }
    }
    CHECK(t == 16);
  }

  SECTION("bad anchor id or missing grid fail") {
    const auto text = pal_test::random_sequence(rng, 2, 4);
    TempDir dir("heat4");
    const std::uint32_t bad[] = {99};
    CHECK_THROWS_AS(export_heatmaps(vision, anchors_v, text, anchors_l, bad, 0.03, dir.path()),
                    UsageError);
    auto flat = vision;
    flat.grid.reset();
    const std::uint32_t ok[] = {0};
    CHECK_THROWS_AS(export_heatmaps(flat, anchors_v, text, anchors_l, ok, 0.03, dir.path()),
                    UsageError);
  }
}

TEST_CASE("metric and overlap report writers") {
  TempDir dir("reports");
  const MetricRow rows[] = {
      {"recall", "test", "i2t", "1", 0.5},
      {"top1_accuracy", "test", "", "", 0.75},
  };
  write_metrics_csv(rows, dir / "metrics.csv");
  std::ifstream is(dir / "metrics.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "metric,dataset,direction,k,value");
  std::getline(is, line);
  CHECK(line == "recall,test,i2t,1,0.5");

  OverlapReport report;
  report.mean_hard_overlap_matched = 0.25;
  write_overlap_report(report, dir / "overlap.txt");
  std::ifstream os(dir / "overlap.txt");
  std::getline(os, line);
  CHECK(line == "mean_hard_overlap_matched=0.25");
}
