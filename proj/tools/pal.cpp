// Command-line front end for the anchor-alignment toolkit: synthetic corpus
// generation, training, gradient checking, evaluation, anchor analysis, and
// attention heatmap export. Exit codes: 0 success, 2 usage error, 3 numeric
// abort, 4 verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pal/pal.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumericAbort = 3;
constexpr int kExitVerificationFailure = 4;

// ---------------------------------------------------------------------------
// Run manifest.
// ---------------------------------------------------------------------------

std::string fnv1a64_hex(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw pal::IoError("cannot digest input: " + path.string());
  std::uint64_t hash = 0xcbf29ce484222325ull;
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      hash ^= static_cast<unsigned char>(buf[i]);
      hash *= 0x100000001b3ull;
    }
    if (!is) break;
  }
  char out[20];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(hash));
  return out;
}

std::string now_utc_iso() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class ManifestWriter {
 public:
  ManifestWriter(std::string command, std::uint64_t seed)
      : command_(std::move(command)), seed_(seed), started_(now_utc_iso()) {}

  void set_option(const std::string& key, const std::string& value) {
    options_[key] = value;
  }
  void set_option(const std::string& key, double value) { options_[key] = value; }
  void set_option(const std::string& key, std::uint64_t value) { options_[key] = value; }
  void set_option(const std::string& key, std::int64_t value) { options_[key] = value; }
  void set_option(const std::string& key, bool value) { options_[key] = value; }

  void add_input(const fs::path& path) { inputs_[path.string()] = fnv1a64_hex(path); }

  void write(const fs::path& dir) const {
    json manifest;
    manifest["tool"] = "pal";
    manifest["version"] = pal::kVersion;
    manifest["command"] = command_;
    manifest["seed"] = seed_;
    manifest["started_utc"] = started_;
    manifest["finished_utc"] = now_utc_iso();
    manifest["options"] = options_;
    manifest["input_digests"] = inputs_;
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw pal::IoError("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::uint64_t seed_;
  std::string started_;
  json options_ = json::object();
  json inputs_ = json::object();
};

// ---------------------------------------------------------------------------
// Data directory conventions (as produced by `pal synth`).
// ---------------------------------------------------------------------------

struct SplitFiles {
  fs::path vision, language, pairs, vision_labels, language_labels;
};

SplitFiles split_files(const fs::path& dir, const std::string& split) {
  SplitFiles files;
  files.vision = dir / (split + "_vision.palt");
  files.language = dir / (split + "_language.palt");
  files.pairs = dir / (split + "_pairs.tsv");
  files.vision_labels = dir / (split + "_vision.labels");
  files.language_labels = dir / (split + "_language.labels");
  return files;
}

struct LoadedSplit {
  pal::PairedDataset dataset;
  bool has_labels = false;
};

LoadedSplit load_split(const SplitFiles& files, ManifestWriter& manifest) {
  if (!fs::exists(files.vision))
    throw pal::UsageError("missing embedding file: " + files.vision.string());
  if (!fs::exists(files.language))
    throw pal::UsageError("missing embedding file: " + files.language.string());
  if (!fs::exists(files.pairs))
    throw pal::UsageError("missing pair manifest: " + files.pairs.string());

  LoadedSplit split;
  split.dataset.modality_a = pal::read_corpus(files.vision).sequences;
  split.dataset.modality_b = pal::read_corpus(files.language).sequences;
  split.dataset.pairs = pal::read_pairs(files.pairs);
  manifest.add_input(files.vision);
  manifest.add_input(files.language);
  manifest.add_input(files.pairs);
  if (fs::exists(files.vision_labels)) {
    split.dataset.labels_a = pal::read_labels(files.vision_labels).labels;
    manifest.add_input(files.vision_labels);
    split.has_labels = true;
  }
  if (fs::exists(files.language_labels)) {
    split.dataset.labels_b = pal::read_labels(files.language_labels).labels;
    manifest.add_input(files.language_labels);
  }
  split.dataset.validate();
  return split;
}

// Majority token concept (ties to the lower id); background tokens ignored.
std::int32_t majority_label(const std::vector<std::int32_t>& labels) {
  std::map<std::int32_t, std::size_t> counts;
  for (std::int32_t l : labels)
    if (l >= 0) counts[l] += 1;
  if (counts.empty()) throw pal::UsageError("sample has no labeled tokens");
  std::int32_t best = counts.begin()->first;
  std::size_t best_count = counts.begin()->second;
  for (const auto& [label, count] : counts)
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  return best;
}

std::vector<std::size_t> parse_size_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw pal::UsageError(std::string("malformed ") + what + " list: " + text);
    }
  }
  if (out.empty()) throw pal::UsageError(std::string("empty ") + what + " list");
  return out;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  pal::SyntheticSpec spec;
  std::string out;
  int threads = 0;
};

int run_synth(const SynthArgs& args) {
  pal::set_max_threads(args.threads);
  ManifestWriter manifest("synth", args.spec.seed);
  const pal::SyntheticCorpus corpus = pal::generate_synthetic(args.spec);

  const fs::path dir(args.out);
  fs::create_directories(dir);

  auto emit_split = [&](const pal::PairedDataset& split, const std::string& name) {
    const SplitFiles files = split_files(dir, name);
    pal::write_corpus(split.modality_a, pal::ModalityTag::vision, files.vision);
    pal::write_corpus(split.modality_b, pal::ModalityTag::language, files.language);
    pal::write_pairs(split.pairs, files.pairs);
    pal::LabelSidecar labels_v, labels_l;
    for (std::size_t i = 0; i < split.modality_a.size(); ++i) {
      labels_v.sample_ids.push_back(split.modality_a[i].sample_id);
      labels_v.labels.push_back(split.labels_a[i]);
      labels_l.sample_ids.push_back(split.modality_b[i].sample_id);
      labels_l.labels.push_back(split.labels_b[i]);
    }
    pal::write_labels(labels_v, files.vision_labels);
    pal::write_labels(labels_l, files.language_labels);
  };
  emit_split(corpus.train, "train");
  emit_split(corpus.test, "test");
  pal::write_corpus(corpus.concept_prompts, pal::ModalityTag::language,
                    dir / "prompts_language.palt");

  manifest.set_option("concepts", std::uint64_t(args.spec.num_concepts));
  manifest.set_option("latent_dim", std::uint64_t(args.spec.latent_dim));
  manifest.set_option("dim_v", std::uint64_t(args.spec.dim_v));
  manifest.set_option("dim_l", std::uint64_t(args.spec.dim_l));
  manifest.set_option("tokens_min", std::uint64_t(args.spec.tokens_min));
  manifest.set_option("tokens_max", std::uint64_t(args.spec.tokens_max));
  manifest.set_option("concepts_min", std::uint64_t(args.spec.concepts_min));
  manifest.set_option("concepts_max", std::uint64_t(args.spec.concepts_max));
  manifest.set_option("sigma", args.spec.noise_sigma);
  manifest.set_option("background_fraction", args.spec.background_fraction);
  manifest.set_option("train", std::uint64_t(args.spec.num_train));
  manifest.set_option("test", std::uint64_t(args.spec.num_test));
  manifest.set_option("out", args.out);
  manifest.write(dir);

  std::cout << "synth: wrote " << corpus.train.modality_a.size() << " train and "
            << corpus.test.modality_a.size() << " test pairs to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  pal::TrainConfig config;
  std::string init = "data_tokens";
  std::string variant = "cap";
  std::string resume;
  int threads = 0;
};

int run_train(TrainArgs& args) {
  pal::set_max_threads(args.threads);
  args.config.init_policy = pal::init_policy_from_string(args.init);
  args.config.variant = pal::pooling_variant_from_string(args.variant);

  ManifestWriter manifest("train", args.config.seed);
  const LoadedSplit split = load_split(split_files(args.data, "train"), manifest);

  const fs::path dir(args.out);
  fs::create_directories(dir);
  const fs::path checkpoint_path = dir / "checkpoint.palc";
  const fs::path lastgood_path = dir / "checkpoint.lastgood.palc";

  std::ofstream loss_log(dir / "loss.csv", std::ios::trunc);
  if (!loss_log) throw pal::IoError("cannot open loss log in " + dir.string());
  loss_log << "epoch,step,loss\n";

  pal::TrainOptions options;
  options.loss_log = &loss_log;
  options.abort_checkpoint = lastgood_path;
  if (!args.resume.empty()) {
    options.resume = pal::load_checkpoint(args.resume);
    manifest.add_input(args.resume);
  }

  pal::TrainState state;
  try {
    state = pal::train(split.dataset, args.config, options);
  } catch (const pal::TrainAbortError& e) {
    std::cerr << "train: numeric abort: " << e.what() << "\n";
    std::cerr << "train: last-good checkpoint: " << e.last_good.string() << "\n";
    return kExitNumericAbort;
  }
  pal::save_checkpoint(state, checkpoint_path);

  manifest.set_option("data", args.data);
  manifest.set_option("out", args.out);
  manifest.set_option("anchors", std::uint64_t(args.config.anchor_count));
  manifest.set_option("tau_p", args.config.tau_p);
  manifest.set_option("tau", args.config.tau);
  manifest.set_option("batch", std::uint64_t(args.config.batch_size));
  manifest.set_option("epochs", std::uint64_t(args.config.epochs));
  manifest.set_option("lr", args.config.learning_rate);
  manifest.set_option("beta1", args.config.beta1);
  manifest.set_option("beta2", args.config.beta2);
  manifest.set_option("adam_eps", args.config.adam_eps);
  manifest.set_option("init", args.init);
  manifest.set_option("variant", args.variant);
  manifest.set_option("shuffle", args.config.shuffle);
  manifest.set_option("resume", args.resume);
  manifest.write(dir);

  for (std::size_t e = 0; e < state.epoch_mean_losses.size(); ++e)
    std::cout << "train: epoch " << e + (state.epoch - state.epoch_mean_losses.size())
              << " mean_loss " << state.epoch_mean_losses[e] << "\n";
  std::cout << "train: wrote " << checkpoint_path.string() << " after " << state.step
            << " steps\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradCheckArgs {
  std::size_t instances = 64;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-6;
  bool break_gradient = false;
  std::string out;
  int threads = 0;
};

int run_gradcheck_cmd(const GradCheckArgs& args) {
  pal::set_max_threads(args.threads);
  ManifestWriter manifest("gradcheck", args.seed);
  const pal::GradCheckReport report = pal::run_gradcheck(args.instances, args.seed, args.step,
                                                         args.tolerance, args.break_gradient);
  std::cout << "gradcheck: " << report.instances << " instances, max relative error "
            << report.max_rel_error << " (tolerance " << report.tolerance << ")\n";
  if (!report.passed) std::cout << "gradcheck: worst: " << report.worst_detail << "\n";
  std::cout << (report.passed ? "gradcheck: PASS\n" : "gradcheck: FAIL\n");

  if (!args.out.empty()) {
    const fs::path dir(args.out);
    fs::create_directories(dir);
    std::ofstream os(dir / "gradcheck.txt", std::ios::trunc);
    os << "instances=" << report.instances << "\n"
       << "step=" << report.step << "\n"
       << "tolerance=" << report.tolerance << "\n"
       << "max_rel_error=" << report.max_rel_error << "\n"
       << "passed=" << (report.passed ? 1 : 0) << "\n";
    if (!report.worst_detail.empty()) os << "worst=" << report.worst_detail << "\n";
    manifest.set_option("instances", std::uint64_t(args.instances));
    manifest.set_option("step", args.step);
    manifest.set_option("tolerance", args.tolerance);
    manifest.write(dir);
  }
  return report.passed ? 0 : kExitVerificationFailure;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string task;
  std::string ks = "1,5";
  double fg_threshold = -1.0;
  std::string out;
  int threads = 0;
};

int run_eval(const EvalArgs& args) {
  pal::set_max_threads(args.threads);
  const pal::TrainState state = pal::load_checkpoint(args.checkpoint);
  const double tau_p = state.config.tau_p;
  const pal::PoolingVariant variant = state.config.variant;

  ManifestWriter manifest("eval", state.config.seed);
  manifest.add_input(args.checkpoint);
  const LoadedSplit split = load_split(split_files(args.data, args.split), manifest);
  const fs::path dir(args.out);
  fs::create_directories(dir);

  std::vector<pal::MetricRow> rows;
  if (args.task == "retrieval") {
    const pal::Matrix h_v = pal::pooled_matrix(split.dataset.modality_a, state.anchors_v,
                                               tau_p, variant, true);
    const pal::Matrix h_l = pal::pooled_matrix(split.dataset.modality_b, state.anchors_l,
                                               tau_p, variant, true);
    const pal::SimilarityMatrix sim = pal::similarity_matrix(h_v, h_l);
    const auto ks = parse_size_list(args.ks, "ks");
    const pal::RetrievalResult result =
        pal::retrieval_eval(sim, split.dataset.pairs, ks);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      rows.push_back({"recall", args.split, "i2t", std::to_string(ks[i]),
                      result.recall_a_to_b[i].second});
      rows.push_back({"recall", args.split, "t2i", std::to_string(ks[i]),
                      result.recall_b_to_a[i].second});
    }
    std::cout << "eval retrieval: recall@" << ks[0] << " i2t "
              << result.recall_a_to_b[0].second << " t2i " << result.recall_b_to_a[0].second
              << "\n";
  } else if (args.task == "classify") {
    const fs::path prompts_path = fs::path(args.data) / "prompts_language.palt";
    if (!fs::exists(prompts_path))
      throw pal::UsageError("classification needs " + prompts_path.string());
    if (!split.has_labels)
      throw pal::UsageError("classification needs a label sidecar for the split");
    manifest.add_input(prompts_path);
    const auto prompts = pal::read_corpus(prompts_path).sequences;
    const pal::Matrix class_h =
        pal::pooled_matrix(prompts, state.anchors_l, tau_p, variant, true);
    const pal::Matrix image_h = pal::pooled_matrix(split.dataset.modality_a, state.anchors_v,
                                                   tau_p, variant, true);
    std::vector<std::int32_t> labels;
    for (const auto& row : split.dataset.labels_a) labels.push_back(majority_label(row));
    const double accuracy = pal::classify_eval(image_h, class_h, labels);
    rows.push_back({"top1_accuracy", args.split, "", "", accuracy});
    std::cout << "eval classify: top-1 accuracy " << accuracy << "\n";
  } else if (args.task == "dense") {
    const fs::path prompts_path = fs::path(args.data) / "prompts_language.palt";
    if (!fs::exists(prompts_path))
      throw pal::UsageError("dense labeling needs " + prompts_path.string());
    if (!split.has_labels)
      throw pal::UsageError("dense labeling needs a label sidecar for the split");
    for (const auto& seq : split.dataset.modality_a)
      if (!seq.grid) throw pal::UsageError("dense labeling needs patch grids on every sample");
    manifest.add_input(prompts_path);
    const auto prompts = pal::read_corpus(prompts_path).sequences;
    const pal::Matrix class_h =
        pal::pooled_matrix(prompts, state.anchors_l, tau_p, variant, true);
    const double miou =
        pal::dense_eval_corpus(split.dataset.modality_a, state.anchors_v, class_h,
                               args.fg_threshold, split.dataset.labels_a);
    rows.push_back({"miou_fg", args.split, "", "", miou});
    std::cout << "eval dense: mIoU-fg " << miou << "\n";
  } else {
    throw pal::UsageError("unknown task: " + args.task +
                          " (expected retrieval, classify, or dense)");
  }

  pal::write_metrics_csv(rows, dir / "metrics.csv");
  manifest.set_option("checkpoint", args.checkpoint);
  manifest.set_option("data", args.data);
  manifest.set_option("split", args.split);
  manifest.set_option("task", args.task);
  manifest.set_option("ks", args.ks);
  manifest.set_option("fg_threshold", args.fg_threshold);
  manifest.set_option("out", args.out);
  manifest.write(dir);
  return 0;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::uint32_t k_top = 5;
  std::uint64_t seed = 0;
  std::string out;
  int threads = 0;
};

int run_analyze(const AnalyzeArgs& args) {
  pal::set_max_threads(args.threads);
  const pal::TrainState state = pal::load_checkpoint(args.checkpoint);
  ManifestWriter manifest("analyze", args.seed);
  manifest.add_input(args.checkpoint);
  const LoadedSplit split = load_split(split_files(args.data, args.split), manifest);
  const fs::path dir(args.out);
  fs::create_directories(dir);

  // Overlap is measured on the raw pooled activations.
  const pal::Matrix p_v = pal::pooled_matrix(split.dataset.modality_a, state.anchors_v,
                                             state.config.tau_p, state.config.variant, false);
  const pal::Matrix p_l = pal::pooled_matrix(split.dataset.modality_b, state.anchors_l,
                                             state.config.tau_p, state.config.variant, false);
  const pal::OverlapReport report =
      pal::anchor_overlap(p_v, p_l, split.dataset.pairs, args.seed, args.k_top);
  pal::write_overlap_report(report, dir / "overlap.txt");

  manifest.set_option("checkpoint", args.checkpoint);
  manifest.set_option("data", args.data);
  manifest.set_option("split", args.split);
  manifest.set_option("k_top", std::uint64_t(args.k_top));
  manifest.set_option("out", args.out);
  manifest.write(dir);

  std::cout << "analyze: hard overlap matched " << report.mean_hard_overlap_matched
            << " mismatched " << report.mean_hard_overlap_mismatched << "\n";
  std::cout << "analyze: dice matched " << report.mean_dice_matched << " mismatched "
            << report.mean_dice_mismatched << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// heatmap
// ---------------------------------------------------------------------------

struct HeatmapArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string samples = "0";
  std::string anchors = "0";
  std::string out;
  int threads = 0;
};

int run_heatmap(const HeatmapArgs& args) {
  pal::set_max_threads(args.threads);
  const pal::TrainState state = pal::load_checkpoint(args.checkpoint);
  ManifestWriter manifest("heatmap", state.config.seed);
  manifest.add_input(args.checkpoint);
  const LoadedSplit split = load_split(split_files(args.data, args.split), manifest);
  const fs::path dir(args.out);
  fs::create_directories(dir);

  const auto samples = parse_size_list(args.samples, "samples");
  const auto anchor_list = parse_size_list(args.anchors, "anchors");
  std::vector<std::uint32_t> anchor_ids;
  for (std::size_t a : anchor_list) anchor_ids.push_back(static_cast<std::uint32_t>(a));

  for (std::size_t pair_index : samples) {
    if (pair_index >= split.dataset.pairs.size())
      throw pal::UsageError("sample index " + std::to_string(pair_index) + " out of range");
    const auto& [ia, ib] = split.dataset.pairs[pair_index];
    const fs::path sample_dir = dir / ("sample_" + std::to_string(pair_index));
    pal::export_heatmaps(split.dataset.modality_a[ia], state.anchors_v,
                         split.dataset.modality_b[ib], state.anchors_l, anchor_ids,
                         state.config.tau_p, sample_dir);
  }

  manifest.set_option("checkpoint", args.checkpoint);
  manifest.set_option("data", args.data);
  manifest.set_option("split", args.split);
  manifest.set_option("samples", args.samples);
  manifest.set_option("anchors", args.anchors);
  manifest.set_option("out", args.out);
  manifest.write(dir);
  std::cout << "heatmap: wrote attention maps for " << samples.size() << " sample(s) to "
            << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-hoc two-modality alignment via learnable anchors"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("pal ") + pal::kVersion);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic paired corpus");
  synth_cmd->add_option("--concepts", synth.spec.num_concepts, "Number of latent concepts");
  synth_cmd->add_option("--latent-dim", synth.spec.latent_dim, "Latent dimension");
  synth_cmd->add_option("--dim-v", synth.spec.dim_v, "Vision embedding dimension");
  synth_cmd->add_option("--dim-l", synth.spec.dim_l, "Language embedding dimension");
  synth_cmd->add_option("--tokens-min", synth.spec.tokens_min, "Minimum tokens per sample");
  synth_cmd->add_option("--tokens-max", synth.spec.tokens_max, "Maximum tokens per sample");
  synth_cmd->add_option("--concepts-min", synth.spec.concepts_min,
                        "Minimum concepts per sample");
  synth_cmd->add_option("--concepts-max", synth.spec.concepts_max,
                        "Maximum concepts per sample");
  synth_cmd->add_option("--sigma", synth.spec.noise_sigma, "Latent jitter scale");
  synth_cmd->add_option("--background-fraction", synth.spec.background_fraction,
                        "Fraction of unlabeled noise tokens");
  synth_cmd->add_option("--train", synth.spec.num_train, "Training pairs");
  synth_cmd->add_option("--test", synth.spec.num_test, "Held-out pairs");
  synth_cmd->add_option("--seed", synth.spec.seed, "Random seed");
  synth_cmd->add_option("--threads", synth.threads, "Worker thread cap (0 = all cores)");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->set_config("--config", "", "key=value config file (flags take precedence)");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train both anchor sets");
  train_cmd->add_option("--data", train.data, "Data directory from synth")->required();
  train_cmd->add_option("--anchors", train.config.anchor_count, "Anchor count K");
  train_cmd->add_option("--tau-p", train.config.tau_p, "Pooling temperature");
  train_cmd->add_option("--tau", train.config.tau, "Contrastive temperature");
  train_cmd->add_option("--batch", train.config.batch_size, "Batch size");
  train_cmd->add_option("--epochs", train.config.epochs, "Training epochs");
  train_cmd->add_option("--lr", train.config.learning_rate, "Learning rate");
  train_cmd->add_option("--beta1", train.config.beta1, "First moment decay");
  train_cmd->add_option("--beta2", train.config.beta2, "Second moment decay");
  train_cmd->add_option("--adam-eps", train.config.adam_eps, "Adam epsilon");
  train_cmd->add_option("--seed", train.config.seed, "Random seed");
  train_cmd->add_option("--init", train.init, "Anchor init: data_tokens or gaussian");
  train_cmd->add_option("--variant", train.variant,
                        "Pipeline variant: cap, mean_pool, or global_only");
  train_cmd->add_flag("--no-shuffle", [&](std::int64_t) { train.config.shuffle = false; },
                      "Disable per-epoch shuffling");
  train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from");
  train_cmd->add_option("--threads", train.threads, "Worker thread cap (0 = all cores)");
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->set_config("--config", "", "key=value config file (flags take precedence)");

  GradCheckArgs gradcheck;
  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "Verify analytic gradients against finite differences");
  gradcheck_cmd->add_option("--instances", gradcheck.instances, "Random instances to check");
  gradcheck_cmd->add_option("--seed", gradcheck.seed, "Random seed");
  gradcheck_cmd->add_option("--step", gradcheck.step, "Central difference step");
  gradcheck_cmd->add_option("--tolerance", gradcheck.tolerance, "Relative error bar");
  gradcheck_cmd->add_flag("--break-gradient", gradcheck.break_gradient)->group("");
  gradcheck_cmd->add_option("--threads", gradcheck.threads,
                            "Worker thread cap (0 = all cores)");
  gradcheck_cmd->add_option("--out", gradcheck.out, "Optional report directory");
  gradcheck_cmd->set_config("--config", "", "key=value config file (flags take precedence)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Trained checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "Data directory")->required();
  eval_cmd->add_option("--split", eval.split, "Split name (train or test)");
  eval_cmd->add_option("--task", eval.task, "retrieval, classify, or dense")->required();
  eval_cmd->add_option("--ks", eval.ks, "Comma-separated recall cutoffs");
  eval_cmd->add_option("--fg-threshold", eval.fg_threshold,
                       "Dense foreground score threshold");
  eval_cmd->add_option("--threads", eval.threads, "Worker thread cap (0 = all cores)");
  eval_cmd->add_option("--out", eval.out, "Output directory")->required();
  eval_cmd->set_config("--config", "", "key=value config file (flags take precedence)");

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Anchor-overlap consistency report");
  analyze_cmd->add_option("--checkpoint", analyze.checkpoint, "Trained checkpoint")
      ->required();
  analyze_cmd->add_option("--data", analyze.data, "Data directory")->required();
  analyze_cmd->add_option("--split", analyze.split, "Split name");
  analyze_cmd->add_option("--k-top", analyze.k_top, "Top anchors per modality");
  analyze_cmd->add_option("--seed", analyze.seed, "Mismatched-pair sampler seed");
  analyze_cmd->add_option("--threads", analyze.threads, "Worker thread cap (0 = all cores)");
  analyze_cmd->add_option("--out", analyze.out, "Output directory")->required();
  analyze_cmd->set_config("--config", "", "key=value config file (flags take precedence)");

  HeatmapArgs heatmap;
  auto* heatmap_cmd = app.add_subcommand("heatmap", "Export attention heatmaps");
  heatmap_cmd->add_option("--checkpoint", heatmap.checkpoint, "Trained checkpoint")
      ->required();
  heatmap_cmd->add_option("--data", heatmap.data, "Data directory")->required();
  heatmap_cmd->add_option("--split", heatmap.split, "Split name");
  heatmap_cmd->add_option("--samples", heatmap.samples, "Comma-separated pair indices");
  heatmap_cmd->add_option("--anchors", heatmap.anchors, "Comma-separated anchor ids");
  heatmap_cmd->add_option("--threads", heatmap.threads, "Worker thread cap (0 = all cores)");
  heatmap_cmd->add_option("--out", heatmap.out, "Output directory")->required();
  heatmap_cmd->set_config("--config", "", "key=value config file (flags take precedence)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (synth_cmd->parsed()) return run_synth(synth);
    if (train_cmd->parsed()) return run_train(train);
    if (gradcheck_cmd->parsed()) return run_gradcheck_cmd(gradcheck);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (analyze_cmd->parsed()) return run_analyze(analyze);
    if (heatmap_cmd->parsed()) return run_heatmap(heatmap);
  } catch (const pal::TrainAbortError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumericAbort;
  } catch (const pal::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumericAbort;
  } catch (const pal::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
