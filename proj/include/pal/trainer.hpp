#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pal/binary_io.hpp"
#include "pal/embedding_io.hpp"
#include "pal/error.hpp"
#include "pal/grad.hpp"
#include "pal/relrep.hpp"
#include "pal/rng.hpp"

namespace pal {

enum class InitPolicy { data_tokens, gaussian };

inline std::string to_string(InitPolicy p) {
  return p == InitPolicy::data_tokens ? "data_tokens" : "gaussian";
}

inline InitPolicy init_policy_from_string(const std::string& s) {
  if (s == "data_tokens") return InitPolicy::data_tokens;
  if (s == "gaussian") return InitPolicy::gaussian;
  throw UsageError("unknown init policy: " + s);
}

struct TrainConfig {
  std::uint32_t anchor_count = 512;
  double tau_p = 0.03;
  double tau = 0.07;
  std::uint32_t batch_size = 64;
  std::uint32_t epochs = 10;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  InitPolicy init_policy = InitPolicy::data_tokens;
  bool shuffle = true;
  PoolingVariant variant = PoolingVariant::cap;

  void validate() const {
    if (anchor_count < 1) throw UsageError("anchor_count must be >= 1");
    if (!(tau_p > 0.0)) throw UsageError("tau_p must be positive");
    if (!(tau > 0.0)) throw UsageError("tau must be positive");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw UsageError("learning_rate must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw UsageError("moment decays must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw UsageError("adam_eps must be positive");
  }
};

struct TrainState {
  AnchorSet anchors_v;
  AnchorSet anchors_l;
  Matrix moment1_v, moment2_v;  // Adam first/second moments, per parameter
  Matrix moment1_l, moment2_l;
  std::uint64_t step = 0;
  std::uint32_t epoch = 0;
  TrainConfig config;
  std::vector<double> epoch_mean_losses;  // in-memory only, not persisted
};

// ---------------------------------------------------------------------------
// Initialization.
// ---------------------------------------------------------------------------

inline std::pair<AnchorSet, AnchorSet> init_anchors(const PairedDataset& dataset,
                                                    const TrainConfig& config) {
  config.validate();
  auto rng = make_rng(config.seed, streams::kAnchorInit);
  const std::uint32_t count = config.anchor_count;

  auto init_one = [&](const std::vector<TokenSequence>& seqs, ModalityTag tag) {
    AnchorSet set;
    set.modality = tag;
    if (config.init_policy == InitPolicy::gaussian) {
      if (seqs.empty()) throw UsageError("cannot infer anchor dimension from an empty corpus");
      const std::size_t dim = seqs[0].dim();
      std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
      set.anchors = Matrix(count, dim);
      for (std::size_t i = 0; i < set.anchors.size(); ++i) set.anchors.data()[i] = gauss(rng);
    } else {
      if (seqs.empty()) throw UsageError("data_tokens initialization needs a non-empty corpus");
      const std::size_t dim = seqs[0].dim();
      std::vector<std::pair<std::uint32_t, std::uint32_t>> pool;  // (sequence, token)
      for (std::uint32_t s = 0; s < seqs.size(); ++s)
        for (std::uint32_t t = 0; t < seqs[s].token_count(); ++t) pool.emplace_back(s, t);
      set.anchors = Matrix(count, dim);
      if (pool.size() >= count) {
        // Distinct tokens via partial Fisher-Yates.
        for (std::uint32_t k = 0; k < count; ++k) {
          std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
          std::swap(pool[k], pool[pick(rng)]);
          const auto [s, t] = pool[k];
          for (std::size_t d = 0; d < dim; ++d) set.anchors(k, d) = seqs[s].tokens(t, d);
        }
      } else {
        // Pool smaller than K: sample with replacement.
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::uint32_t k = 0; k < count; ++k) {
          const auto [s, t] = pool[pick(rng)];
          for (std::size_t d = 0; d < dim; ++d) set.anchors(k, d) = seqs[s].tokens(t, d);
        }
      }
    }
    set.validate();
    return set;
  };

  AnchorSet anchors_v = init_one(dataset.modality_a, ModalityTag::vision);
  AnchorSet anchors_l = init_one(dataset.modality_b, ModalityTag::language);
  return {std::move(anchors_v), std::move(anchors_l)};
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

// Raised when a numeric error aborts training; the state from before the
// failing step has already been written to `last_good` when one was set.
struct TrainAbortError : NumericError {
  TrainAbortError(const std::string& msg, std::filesystem::path path)
      : NumericError(msg), last_good(std::move(path)) {}
  std::filesystem::path last_good;
};

struct TrainOptions {
  std::ostream* loss_log = nullptr;                 // CSV epoch,step,loss
  std::optional<TrainState> resume;                 // continue a checkpointed run
  std::filesystem::path abort_checkpoint;           // last-good state on numeric abort
};

inline void save_checkpoint(const TrainState& state, const std::filesystem::path& path);

inline TrainState train(const PairedDataset& dataset, const TrainConfig& config,
                        const TrainOptions& options = {}) {
  config.validate();
  dataset.validate();
  if (dataset.pairs.size() < config.batch_size)
    throw UsageError("dataset has fewer pairs than one batch");
  if (config.batch_size == 1)
    std::cerr << "warning: batch_size 1 makes the contrastive objective degenerate\n";

  TrainState state;
  if (options.resume) {
    state = *options.resume;
    if (state.anchors_v.count() != config.anchor_count)
      throw UsageError("resume state anchor count does not match config");
  } else {
    auto [anchors_v, anchors_l] = init_anchors(dataset, config);
    state.anchors_v = std::move(anchors_v);
    state.anchors_l = std::move(anchors_l);
    state.moment1_v = Matrix(state.anchors_v.count(), state.anchors_v.dim());
    state.moment2_v = Matrix(state.anchors_v.count(), state.anchors_v.dim());
    state.moment1_l = Matrix(state.anchors_l.count(), state.anchors_l.dim());
    state.moment2_l = Matrix(state.anchors_l.count(), state.anchors_l.dim());
  }
  state.config = config;

  auto adam_update = [&](Matrix& params, Matrix& m1, Matrix& m2, const Matrix& grad) {
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad.data()[i];
      m1.data()[i] = config.beta1 * m1.data()[i] + (1.0 - config.beta1) * g;
      m2.data()[i] = config.beta2 * m2.data()[i] + (1.0 - config.beta2) * g * g;
      const double m_hat = m1.data()[i] / bc1;
      const double v_hat = m2.data()[i] / bc2;
      params.data()[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps);
    }
  };

  std::vector<std::size_t> order(dataset.pairs.size());
  std::vector<TokenSequence> batch_v, batch_l;
  for (std::uint32_t epoch = state.epoch; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (config.shuffle) {
      auto rng = make_rng(config.seed, streams::kShuffleBase + epoch);
      std::shuffle(order.begin(), order.end(), rng);
    }

    double epoch_loss_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::size_t size = end - start;
      // InfoNCE over a single leftover sample is degenerate; drop it. A
      // configured batch_size of 1 still runs (warned above).
      if (size < 2 && config.batch_size >= 2) continue;

      batch_v.clear();
      batch_l.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto& [ia, ib] = dataset.pairs[order[i]];
        batch_v.push_back(dataset.modality_a[ia]);
        batch_l.push_back(dataset.modality_b[ib]);
      }

      GradientSet grads;
      try {
        grads = backward_batch(batch_v, batch_l, state.anchors_v, state.anchors_l,
                               config.tau_p, config.tau, config.variant);
      } catch (const NumericError& e) {
        // The failing update was never applied; persist the last-good state.
        if (!options.abort_checkpoint.empty()) save_checkpoint(state, options.abort_checkpoint);
        throw TrainAbortError(e.what(), options.abort_checkpoint);
      }

      state.step += 1;
      adam_update(state.anchors_v.anchors, state.moment1_v, state.moment2_v,
                  grads.d_anchors_v);
      adam_update(state.anchors_l.anchors, state.moment1_l, state.moment2_l,
                  grads.d_anchors_l);
      state.anchors_v.validate();
      state.anchors_l.validate();

      epoch_loss_sum += grads.loss_value;
      epoch_steps += 1;
      if (options.loss_log) {
        char line[96];
        std::snprintf(line, sizeof(line), "%u,%llu,%.17g\n", epoch,
                      static_cast<unsigned long long>(state.step), grads.loss_value);
        (*options.loss_log) << line;
      }
    }
    state.epoch = epoch + 1;
    state.epoch_mean_losses.push_back(
        epoch_steps == 0 ? std::numeric_limits<double>::quiet_NaN()
                         : epoch_loss_sum / static_cast<double>(epoch_steps));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic 'PALC', version u32, length-prefixed UTF-8
// key=value config block, step u64, epoch u32, both anchor blocks (PALA
// format), then the four float64 moment buffers.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string encode_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "anchor_count=" << c.anchor_count << '\n'
     << "tau_p=" << format_double(c.tau_p) << '\n'
     << "tau=" << format_double(c.tau) << '\n'
     << "batch_size=" << c.batch_size << '\n'
     << "epochs=" << c.epochs << '\n'
     << "learning_rate=" << format_double(c.learning_rate) << '\n'
     << "beta1=" << format_double(c.beta1) << '\n'
     << "beta2=" << format_double(c.beta2) << '\n'
     << "adam_eps=" << format_double(c.adam_eps) << '\n'
     << "seed=" << c.seed << '\n'
     << "init_policy=" << to_string(c.init_policy) << '\n'
     << "shuffle=" << (c.shuffle ? 1 : 0) << '\n'
     << "variant=" << to_string(c.variant) << '\n';
  return os.str();
}

inline TrainConfig decode_config(const std::string& text) {
  TrainConfig c;
  std::istringstream is(text);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint config: malformed line " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto require = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("checkpoint config: missing ") + key);
    return it->second;
  };
  c.anchor_count = static_cast<std::uint32_t>(std::stoul(require("anchor_count")));
  c.tau_p = std::strtod(require("tau_p").c_str(), nullptr);
  c.tau = std::strtod(require("tau").c_str(), nullptr);
  c.batch_size = static_cast<std::uint32_t>(std::stoul(require("batch_size")));
  c.epochs = static_cast<std::uint32_t>(std::stoul(require("epochs")));
  c.learning_rate = std::strtod(require("learning_rate").c_str(), nullptr);
  c.beta1 = std::strtod(require("beta1").c_str(), nullptr);
  c.beta2 = std::strtod(require("beta2").c_str(), nullptr);
  c.adam_eps = std::strtod(require("adam_eps").c_str(), nullptr);
  c.seed = std::stoull(require("seed"));
  c.init_policy = init_policy_from_string(require("init_policy"));
  c.shuffle = require("shuffle") == "1";
  c.variant = pooling_variant_from_string(require("variant"));
  return c;
}

inline void write_moments(std::ostream& os, const Matrix& m) {
  io::write_u32(os, static_cast<std::uint32_t>(m.rows()));
  io::write_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (std::size_t i = 0; i < m.size(); ++i) io::write_f64(os, m.data()[i]);
}

inline Matrix read_moments(std::istream& is, const std::string& what) {
  std::uint32_t rows = 0, cols = 0;
  if (!io::read_u32(is, rows) || !io::read_u32(is, cols))
    throw CorruptionError(what + ": truncated moment header");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!io::read_f64(is, m.data()[i]))
      throw CorruptionError(what + ": truncated moment payload");
  return m;
}

}  // namespace detail

inline void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  auto os = io::open_output(path);
  os.write("PALC", 4);
  io::write_u32(os, kCheckpointVersion);
  const std::string config = detail::encode_config(state.config);
  io::write_u32(os, static_cast<std::uint32_t>(config.size()));
  os.write(config.data(), static_cast<std::streamsize>(config.size()));
  io::write_u64(os, state.step);
  io::write_u32(os, state.epoch);
  write_anchor_block(os, state.anchors_v, state.config.tau_p, state.config.tau);
  write_anchor_block(os, state.anchors_l, state.config.tau_p, state.config.tau);
  detail::write_moments(os, state.moment1_v);
  detail::write_moments(os, state.moment2_v);
  detail::write_moments(os, state.moment1_l);
  detail::write_moments(os, state.moment2_l);
  if (!os) throw IoError("write failed: " + path.string());
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  auto is = io::open_input(path);
  const std::string what = path.string();
  io::expect_magic(is, "PALC", what);
  std::uint32_t version = 0, config_len = 0;
  if (!io::read_u32(is, version)) throw CorruptionError(what + ": truncated header");
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  if (!io::read_u32(is, config_len)) throw CorruptionError(what + ": truncated header");
  std::string config_text(config_len, '\0');
  if (!is.read(config_text.data(), config_len))
    throw CorruptionError(what + ": truncated config block");

  TrainState state;
  state.config = detail::decode_config(config_text);
  if (!io::read_u64(is, state.step) || !io::read_u32(is, state.epoch))
    throw CorruptionError(what + ": truncated counters");
  AnchorCheckpoint av = read_anchor_block(is, what);
  AnchorCheckpoint al = read_anchor_block(is, what);
  state.anchors_v = std::move(av.anchors);
  state.anchors_l = std::move(al.anchors);
  state.moment1_v = detail::read_moments(is, what);
  state.moment2_v = detail::read_moments(is, what);
  state.moment1_l = detail::read_moments(is, what);
  state.moment2_l = detail::read_moments(is, what);
  return state;
}

}  // namespace pal
