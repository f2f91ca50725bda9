#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pal/embedding_io.hpp"
#include "pal/error.hpp"
#include "pal/matrix.hpp"
#include "pal/parallel.hpp"
#include "pal/relrep.hpp"
#include "pal/rng.hpp"

namespace pal {

// ---------------------------------------------------------------------------
// Pooled representations over a corpus.
// ---------------------------------------------------------------------------

// Rows are samples, in corpus order. `normalized` selects the unit-norm form;
// the raw pooled vectors are what the anchor-overlap analysis wants.
inline Matrix pooled_matrix(std::span<const TokenSequence> seqs, const AnchorSet& anchors,
                            double tau_p, PoolingVariant variant = PoolingVariant::cap,
                            bool normalized = true) {
  Matrix out(seqs.size(), anchors.count());
  parallel_for(seqs.size(), [&](std::size_t i) {
    const ForwardResult fwd = forward(seqs[i], anchors, tau_p, variant);
    const auto& src = normalized ? fwd.rep.normalized : fwd.rep.pooled;
    for (std::size_t k = 0; k < anchors.count(); ++k) out(i, k) = src[k];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Cross-modal retrieval.
// ---------------------------------------------------------------------------

struct SimilarityMatrix {
  Matrix scores;  // N_a x N_b cosine similarities between pooled unit vectors
  std::vector<std::uint32_t> row_ids;
  std::vector<std::uint32_t> col_ids;
};

inline SimilarityMatrix similarity_matrix(const Matrix& h_a, const Matrix& h_b,
                                          std::span<const std::uint32_t> row_ids = {},
                                          std::span<const std::uint32_t> col_ids = {}) {
  if (h_a.cols() != h_b.cols())
    throw UsageError("similarity_matrix: representation widths disagree");
  SimilarityMatrix sim;
  sim.scores = Matrix(h_a.rows(), h_b.rows());
  for (std::size_t i = 0; i < h_a.rows(); ++i)
    for (std::size_t j = 0; j < h_b.rows(); ++j)
      sim.scores(i, j) = dot(h_a.row(i), h_b.row(j));
  if (row_ids.empty())
    for (std::size_t i = 0; i < h_a.rows(); ++i)
      sim.row_ids.push_back(static_cast<std::uint32_t>(i));
  else
    sim.row_ids.assign(row_ids.begin(), row_ids.end());
  if (col_ids.empty())
    for (std::size_t j = 0; j < h_b.rows(); ++j)
      sim.col_ids.push_back(static_cast<std::uint32_t>(j));
  else
    sim.col_ids.assign(col_ids.begin(), col_ids.end());
  return sim;
}

struct RetrievalResult {
  std::vector<std::pair<std::size_t, double>> recall_a_to_b;  // (k, recall@k)
  std::vector<std::pair<std::size_t, double>> recall_b_to_a;
};

// Ranks each query's true match among all candidates; ties broken by lower
// index, so results are deterministic and invariant under any strictly
// monotone rescaling of the scores.
inline RetrievalResult retrieval_eval(const SimilarityMatrix& sim, const PairList& pairs,
                                      std::span<const std::size_t> ks) {
  if (pairs.empty()) throw UsageError("retrieval_eval: no pairs");
  std::map<std::uint32_t, std::size_t> row_pos, col_pos;
  for (std::size_t i = 0; i < sim.row_ids.size(); ++i) row_pos[sim.row_ids[i]] = i;
  for (std::size_t j = 0; j < sim.col_ids.size(); ++j) col_pos[sim.col_ids[j]] = j;

  auto rank_in_row = [&](std::size_t row, std::size_t target_col) {
    std::size_t rank = 1;
    const double target = sim.scores(row, target_col);
    for (std::size_t j = 0; j < sim.scores.cols(); ++j) {
      if (j == target_col) continue;
      if (sim.scores(row, j) > target || (sim.scores(row, j) == target && j < target_col))
        ++rank;
    }
    return rank;
  };
  auto rank_in_col = [&](std::size_t col, std::size_t target_row) {
    std::size_t rank = 1;
    const double target = sim.scores(target_row, col);
    for (std::size_t i = 0; i < sim.scores.rows(); ++i) {
      if (i == target_row) continue;
      if (sim.scores(i, col) > target || (sim.scores(i, col) == target && i < target_row))
        ++rank;
    }
    return rank;
  };

  std::vector<std::size_t> ranks_ab, ranks_ba;
  for (const auto& [id_a, id_b] : pairs) {
    auto ra = row_pos.find(id_a);
    auto cb = col_pos.find(id_b);
    if (ra == row_pos.end() || cb == col_pos.end())
      throw UsageError("retrieval_eval: paired id missing from similarity matrix");
    ranks_ab.push_back(rank_in_row(ra->second, cb->second));
    ranks_ba.push_back(rank_in_col(cb->second, ra->second));
  }

  RetrievalResult result;
  for (std::size_t k : ks) {
    auto recall = [&](const std::vector<std::size_t>& ranks) {
      std::size_t hits = 0;
      for (std::size_t r : ranks)
        if (r <= k) ++hits;
      return static_cast<double>(hits) / static_cast<double>(ranks.size());
    };
    result.recall_a_to_b.emplace_back(k, recall(ranks_ab));
    result.recall_b_to_a.emplace_back(k, recall(ranks_ba));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Prompt-based classification.
// ---------------------------------------------------------------------------

// Predicts argmax over class prompt representations; ties go to the lower
// class index.
inline double classify_eval(const Matrix& image_h, const Matrix& class_h,
                            std::span<const std::int32_t> labels) {
  if (image_h.rows() != labels.size())
    throw UsageError("classify_eval: label count does not match samples");
  if (image_h.cols() != class_h.cols())
    throw UsageError("classify_eval: representation widths disagree");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < image_h.rows(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_h.rows())
      throw UsageError("classify_eval: label out of range at sample " + std::to_string(i));
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < class_h.rows(); ++c) {
      const double score = dot(image_h.row(i), class_h.row(c));
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    if (best == static_cast<std::size_t>(labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(image_h.rows());
}

// ---------------------------------------------------------------------------
// Dense per-patch labeling.
// ---------------------------------------------------------------------------

struct DenseResult {
  std::vector<std::int32_t> predicted;  // -1 = below foreground threshold
  double miou_fg = 0.0;
};

// Scores each patch by the dot product between its unit-normalized relative
// representation row and the pooled class prompt representations.
inline std::vector<std::int32_t> dense_predict(const TokenSequence& seq,
                                               const AnchorSet& anchors_v,
                                               const Matrix& class_h, double fg_threshold) {
  if (!seq.grid) throw UsageError("dense labeling needs a patch grid");
  if (class_h.cols() != anchors_v.count())
    throw UsageError("class representations do not match anchor count");
  const RelRepMatrix rel = relative_representation(seq, anchors_v);
  std::vector<std::int32_t> predicted(seq.token_count(), -1);
  for (std::size_t t = 0; t < seq.token_count(); ++t) {
    std::vector<double> row(rel.similarity.row(t).begin(), rel.similarity.row(t).end());
    const double norm = kernel::pooled_norm(row);
    if (norm < kNormFloor) continue;
    for (double& v : row) v /= norm;
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < class_h.rows(); ++c) {
      const double score = dot({row.data(), row.size()}, class_h.row(c));
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    predicted[t] = best_score < fg_threshold ? -1 : static_cast<std::int32_t>(best);
  }
  return predicted;
}

// Per-class intersection/union tallies; classes are foreground ids >= 0.
struct IoUTally {
  std::map<std::int32_t, std::uint64_t> intersection;
  std::map<std::int32_t, std::uint64_t> union_;
  std::set<std::int32_t> present;  // classes appearing in ground truth

  void add(std::span<const std::int32_t> predicted, std::span<const std::int32_t> truth) {
    for (std::size_t t = 0; t < predicted.size(); ++t) {
      const std::int32_t p = predicted[t];
      const std::int32_t g = truth[t];
      if (g >= 0) present.insert(g);
      if (p == g && g >= 0) {
        intersection[g] += 1;
        union_[g] += 1;
      } else {
        if (g >= 0) union_[g] += 1;
        if (p >= 0) union_[p] += 1;
      }
    }
  }

  double mean_iou_fg() const {
    if (present.empty()) return 0.0;
    double sum = 0.0;
    for (std::int32_t c : present) {
      const auto u = union_.find(c);
      const auto i = intersection.find(c);
      const double uu = u == union_.end() ? 0.0 : static_cast<double>(u->second);
      const double ii = i == intersection.end() ? 0.0 : static_cast<double>(i->second);
      sum += uu == 0.0 ? 0.0 : ii / uu;
    }
    return sum / static_cast<double>(present.size());
  }
};

inline DenseResult dense_eval(const TokenSequence& seq, const AnchorSet& anchors_v,
                              const Matrix& class_h, double fg_threshold,
                              std::span<const std::int32_t> ground_truth) {
  if (ground_truth.size() != seq.token_count())
    throw UsageError("dense_eval: ground truth length does not match patches");
  DenseResult result;
  result.predicted = dense_predict(seq, anchors_v, class_h, fg_threshold);
  IoUTally tally;
  tally.add(result.predicted, ground_truth);
  result.miou_fg = tally.mean_iou_fg();
  return result;
}

inline double dense_eval_corpus(std::span<const TokenSequence> seqs,
                                const AnchorSet& anchors_v, const Matrix& class_h,
                                double fg_threshold,
                                std::span<const std::vector<std::int32_t>> ground_truth) {
  if (ground_truth.size() != seqs.size())
    throw UsageError("dense_eval_corpus: ground truth count does not match samples");
  IoUTally tally;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto predicted = dense_predict(seqs[i], anchors_v, class_h, fg_threshold);
    tally.add(predicted, ground_truth[i]);
  }
  return tally.mean_iou_fg();
}

// ---------------------------------------------------------------------------
// Anchor-overlap consistency between matched and mismatched pairs.
// ---------------------------------------------------------------------------

struct OverlapReport {
  double mean_hard_overlap_matched = 0.0;
  double mean_hard_overlap_mismatched = 0.0;
  double mean_dice_matched = 0.0;
  double mean_dice_mismatched = 0.0;
  std::uint32_t k_top = 5;
};

namespace detail {

// Top-k indices by value, ties to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> values,
                                              std::size_t k_top) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  order.resize(k_top);
  return order;
}

struct OverlapScores {
  double hard = 0.0;
  double dice = 0.0;
};

inline OverlapScores overlap_scores(std::span<const double> p_a, std::span<const double> p_b,
                                    std::size_t k_top) {
  const auto top_a = top_k_indices(p_a, k_top);
  const auto top_b = top_k_indices(p_b, k_top);
  std::set<std::size_t> set_a(top_a.begin(), top_a.end());
  std::size_t inter = 0;
  for (std::size_t idx : top_b)
    if (set_a.count(idx)) ++inter;

  OverlapScores scores;
  scores.hard = static_cast<double>(inter) / static_cast<double>(k_top);

  // Soft variant: mass is the activation shifted to be nonnegative, kept only
  // on each side's own top-k indices.
  const double min_a = *std::min_element(p_a.begin(), p_a.end());
  const double min_b = *std::min_element(p_b.begin(), p_b.end());
  std::vector<double> w_a(p_a.size(), 0.0), w_b(p_b.size(), 0.0);
  for (std::size_t idx : top_a) w_a[idx] = p_a[idx] - min_a;
  for (std::size_t idx : top_b) w_b[idx] = p_b[idx] - min_b;
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < w_a.size(); ++k) {
    num += 2.0 * std::min(w_a[k], w_b[k]);
    den += w_a[k] + w_b[k];
  }
  scores.dice = den > 0.0 ? num / den : scores.hard;
  return scores;
}

}  // namespace detail

// Measures whether matched pairs activate the same anchors. Inputs are the
// raw pooled activations (pre normalization), one row per sample. For every
// matched pair a mismatched partner is drawn uniformly with a seeded sampler.
inline OverlapReport anchor_overlap(const Matrix& p_a, const Matrix& p_b,
                                    const PairList& pairs, std::uint64_t sampler_seed,
                                    std::uint32_t k_top = 5) {
  if (k_top < 1 || k_top > p_a.cols())
    throw UsageError("anchor_overlap: k_top must lie in [1, K]");
  if (p_a.cols() != p_b.cols())
    throw UsageError("anchor_overlap: representation widths disagree");
  if (pairs.empty()) throw UsageError("anchor_overlap: no pairs");

  auto rng = make_rng(sampler_seed, streams::kOverlapSampler);
  OverlapReport report;
  report.k_top = k_top;
  double hard_m = 0.0, dice_m = 0.0, hard_x = 0.0, dice_x = 0.0;
  for (const auto& [ia, ib] : pairs) {
    if (ia >= p_a.rows() || ib >= p_b.rows())
      throw UsageError("anchor_overlap: pair index out of range");
    const auto matched = detail::overlap_scores(p_a.row(ia), p_b.row(ib), k_top);
    hard_m += matched.hard;
    dice_m += matched.dice;

    std::uint32_t other = ib;
    if (p_b.rows() > 1) {
      std::uniform_int_distribution<std::uint32_t> pick(
          0, static_cast<std::uint32_t>(p_b.rows()) - 2);
      other = pick(rng);
      if (other >= ib) ++other;
    }
    const auto mismatched = detail::overlap_scores(p_a.row(ia), p_b.row(other), k_top);
    hard_x += mismatched.hard;
    dice_x += mismatched.dice;
  }
  const double n = static_cast<double>(pairs.size());
  report.mean_hard_overlap_matched = hard_m / n;
  report.mean_dice_matched = dice_m / n;
  report.mean_hard_overlap_mismatched = hard_x / n;
  report.mean_dice_mismatched = dice_x / n;
  return report;
}

// ---------------------------------------------------------------------------
// Attention heatmap export.
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> pixels) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "P5\n" << cols << " " << rows << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

struct HeatmapFiles {
  std::vector<std::filesystem::path> written;
};

// Per requested anchor: the vision attention column reshaped to the patch
// grid as an 8-bit graymap (min-max scaled) plus a CSV of raw values, and the
// text-side attention list flagging entries above 0.5.
inline HeatmapFiles export_heatmaps(const TokenSequence& vision_seq,
                                    const AnchorSet& anchors_v,
                                    const TokenSequence& text_seq,
                                    const AnchorSet& anchors_l,
                                    std::span<const std::uint32_t> anchor_ids, double tau_p,
                                    const std::filesystem::path& out_dir) {
  if (!vision_seq.grid) throw UsageError("heatmap export needs a patch grid");
  for (std::uint32_t id : anchor_ids)
    if (id >= anchors_v.count())
      throw UsageError("anchor id " + std::to_string(id) + " out of range");

  const ForwardResult fwd_v = forward(vision_seq, anchors_v, tau_p);
  const ForwardResult fwd_l = forward(text_seq, anchors_l, tau_p);
  const GridShape grid = *vision_seq.grid;

  std::filesystem::create_directories(out_dir);
  HeatmapFiles files;
  char name[96];
  for (std::uint32_t id : anchor_ids) {
    // Raw vision attention values, one CSV row per grid row.
    std::snprintf(name, sizeof(name), "anchor_%04u_vision.csv", id);
    const auto csv_path = out_dir / name;
    {
      std::ofstream os(csv_path, std::ios::trunc);
      if (!os) throw IoError("cannot open for writing: " + csv_path.string());
      for (std::uint32_t r = 0; r < grid.rows; ++r) {
        for (std::uint32_t c = 0; c < grid.cols; ++c) {
          if (c) os << ',';
          char buf[40];
          std::snprintf(buf, sizeof(buf), "%.17g", fwd_v.rel.attention(r * grid.cols + c, id));
          os << buf;
        }
        os << '\n';
      }
    }
    files.written.push_back(csv_path);

    // Min-max scaled graymap.
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < vision_seq.token_count(); ++t) {
      lo = std::min(lo, fwd_v.rel.attention(t, id));
      hi = std::max(hi, fwd_v.rel.attention(t, id));
    }
    std::vector<std::uint8_t> pixels(vision_seq.token_count(), 0);
    if (hi > lo)
      for (std::size_t t = 0; t < vision_seq.token_count(); ++t)
        pixels[t] = static_cast<std::uint8_t>(
            std::lround(255.0 * (fwd_v.rel.attention(t, id) - lo) / (hi - lo)));
    std::snprintf(name, sizeof(name), "anchor_%04u_vision.pgm", id);
    const auto pgm_path = out_dir / name;
    write_pgm(pgm_path, grid.rows, grid.cols, pixels);
    files.written.push_back(pgm_path);

    // Text side: token index, attention, above-threshold flag.
    std::snprintf(name, sizeof(name), "anchor_%04u_text.csv", id);
    const auto text_path = out_dir / name;
    {
      std::ofstream os(text_path, std::ios::trunc);
      if (!os) throw IoError("cannot open for writing: " + text_path.string());
      os << "token_index,attention,flagged\n";
      for (std::size_t t = 0; t < text_seq.token_count(); ++t) {
        const double a = fwd_l.rel.attention(t, id);
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", a);
        os << t << ',' << buf << ',' << (a > 0.5 ? 1 : 0) << '\n';
      }
    }
    files.written.push_back(text_path);
  }
  return files;
}

// ---------------------------------------------------------------------------
// Report writers.
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string metric;
  std::string dataset;
  std::string direction;
  std::string k;
  double value = 0.0;
};

inline void write_metrics_csv(std::span<const MetricRow> rows,
                              const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "metric,dataset,direction,k,value\n";
  for (const auto& row : rows) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", row.value);
    os << row.metric << ',' << row.dataset << ',' << row.direction << ',' << row.k << ','
       << buf << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline void write_overlap_report(const OverlapReport& report,
                                 const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  char buf[40];
  auto emit = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << key << '=' << buf << '\n';
  };
  emit("mean_hard_overlap_matched", report.mean_hard_overlap_matched);
  emit("mean_hard_overlap_mismatched", report.mean_hard_overlap_mismatched);
  emit("mean_dice_matched", report.mean_dice_matched);
  emit("mean_dice_mismatched", report.mean_dice_mismatched);
  os << "k_top=" << report.k_top << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace pal
