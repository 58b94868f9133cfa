// permalign: experiment harness for permutation alignment and linear mode
// connectivity studies on deterministic MLP training runs.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>

#include "permalign/align.hpp"
#include "permalign/checkpoint.hpp"
#include "permalign/config.hpp"
#include "permalign/connectivity.hpp"
#include "permalign/data.hpp"
#include "permalign/rng.hpp"
#include "permalign/sparsity.hpp"
#include "permalign/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace permalign;

namespace {

struct CommandContext {
  KeyValueConfig config;
  fs::path out;
  int jobs = 2;
  std::map<std::string, std::string> input_hashes;  // path/uri -> fnv1a hex

  void record_file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return;
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    input_hashes[path] = to_hex(fnv1a64(bytes));
  }
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void append_log(const fs::path& out, const std::string& message) {
  std::ofstream f(out / "run.log", std::ios::app);
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(
                        now.time_since_epoch())
                        .count();
  f << "[" << secs << "] " << message << '\n';
}

// Summary JSON skeleton with the resolved manifest and input hashes.
json base_summary(const CommandContext& ctx, const std::string& command) {
  json j;
  j["command"] = command;
  j["config"] = json::object();
  std::istringstream lines(ctx.config.resolved_text());
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) {
      j["config"][line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  j["input_hashes"] = ctx.input_hashes;
  return j;
}

void write_summary(const CommandContext& ctx, const json& j) {
  write_text(ctx.out / "summary.json", j.dump(2) + "\n");
}

DatasetPair load_data(CommandContext& ctx) {
  const std::string uri = ctx.config.get_string("data");
  ctx.input_hashes["data"] = uri;
  if (uri.rfind("synth://", 0) != 0) {
    fs::path dir(uri);
    if (dir.is_relative()) {
      if (const char* root = std::getenv("PERMALIGN_DATA_DIR")) {
        dir = fs::path(root) / dir;
      }
    }
    for (const char* name :
         {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
          "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
      ctx.record_file_hash((dir / name).string());
    }
  }
  return load_data_uri(uri);
}

// Appendix-D style evaluation subsets: at most eval_limit examples per split.
struct EvalData {
  Dataset train;
  Dataset test;
};

EvalData eval_subsets(CommandContext& ctx, const DatasetPair& pair) {
  const int limit = ctx.config.get_int("eval_limit", 10000);
  return EvalData{pair.train.head(limit), pair.test.head(limit)};
}

Checkpoint load_ckpt(CommandContext& ctx, const std::string& key) {
  const std::string path = ctx.config.get_string(key);
  ctx.record_file_hash(path);
  return load_checkpoint(path);
}

std::string ckpt_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_epoch_%04d.pmlc", epoch);
  return buf;
}

// Map epoch -> checkpoint path for a run directory.
std::map<int, fs::path> list_run_checkpoints(const fs::path& dir) {
  std::map<int, fs::path> out;
  if (!fs::is_directory(dir)) {
    throw ValidationError("run directory missing: " + dir.string());
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    int epoch = -1;
    if (std::sscanf(entry.path().filename().string().c_str(),
                    "ckpt_epoch_%d.pmlc", &epoch) == 1) {
      out[epoch] = entry.path();
    }
  }
  if (out.empty()) {
    throw ValidationError("no checkpoints in " + dir.string());
  }
  return out;
}

Matcher matcher_from(CommandContext& ctx) {
  const std::string method = ctx.config.get_string("method", "weight");
  if (method == "weight") return Matcher::weight;
  if (method == "activation") return Matcher::activation;
  throw ValidationError("unknown method: " + method);
}

MatchReport run_match(Matcher matcher, const NetworkParams& to,
                      const NetworkParams& from, const PermutationSpec& spec,
                      const Dataset& train, std::uint64_t seed, int max_sweeps,
                      bool include_norm_affine, const Mask* mask_a = nullptr,
                      const Mask* mask_b = nullptr) {
  if (matcher == Matcher::weight) {
    WeightMatchOptions opt;
    opt.seed = seed;
    opt.max_sweeps = max_sweeps;
    opt.include_norm_affine = include_norm_affine;
    opt.mask_a = mask_a;
    opt.mask_b = mask_b;
    return weight_match(to, from, spec, opt);
  }
  return activation_match(to, from, spec, train);
}

json curve_json(const BarrierCurve& curve) {
  json j;
  j["n_alpha"] = curve.alphas.size();
  j["barrier_loss_train"] = curve.train.barrier_loss;
  j["barrier_error_train"] = curve.train.barrier_error;
  if (curve.test) {
    j["barrier_loss_test"] = curve.test->barrier_loss;
    j["barrier_error_test"] = curve.test->barrier_error;
  }
  return j;
}

std::string curve_csv(const BarrierCurve& curve) {
  std::string csv = "alpha,split,loss,error\n";
  for (std::size_t i = 0; i < curve.alphas.size(); ++i) {
    csv += fmt(curve.alphas[i]) + ",train," + fmt(curve.train.loss[i]) + "," +
           fmt(curve.train.error[i]) + "\n";
  }
  if (curve.test) {
    for (std::size_t i = 0; i < curve.alphas.size(); ++i) {
      csv += fmt(curve.alphas[i]) + ",test," + fmt(curve.test->loss[i]) + "," +
             fmt(curve.test->error[i]) + "\n";
    }
  }
  return csv;
}

std::string barrier_columns(const BarrierCurve& c) {
  return fmt(c.train.barrier_loss) + "," + fmt(c.train.barrier_error) + "," +
         fmt(c.test ? c.test->barrier_loss : 0.0) + "," +
         fmt(c.test ? c.test->barrier_error : 0.0);
}

// Runs fn(i) for i in [0, n) across the --jobs pool. Each index owns its
// output slot; training and matching stay single-threaded inside.
template <typename Fn>
void parallel_jobs(int n, int jobs, Fn&& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int t = 0; t < jobs; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += jobs) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

void save_run_checkpoint(const fs::path& out, const Checkpoint& ckpt) {
  save_checkpoint((out / ckpt_name(ckpt.epoch)).string(), ckpt);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(CommandContext& ctx) {
  const DatasetPair data = load_data(ctx);
  TrainConfig config = parse_train_config(ctx.config);
  if (config.checkpoint_epochs.empty()) {
    config.checkpoint_epochs = {0, config.epochs};
  }
  std::optional<Mask> mask;
  if (ctx.config.has("mask")) {
    const std::string mask_path = ctx.config.get_string("mask");
    ctx.record_file_hash(mask_path);
    mask = load_mask(mask_path);
  }
  ctx.config.finish();

  std::vector<int> epochs_written;
  const auto ckpts =
      train(config, data.train, mask ? &*mask : nullptr,
            [&](const Checkpoint& ckpt) {
              save_run_checkpoint(ctx.out, ckpt);
              epochs_written.push_back(ckpt.epoch);
            });

  const EvalData eval = eval_subsets(ctx, data);
  const EvalResult train_eval = evaluate(ckpts.back().params, eval.train);
  const EvalResult test_eval = evaluate(ckpts.back().params, eval.test);

  json summary = base_summary(ctx, "train");
  summary["fingerprint"] = config.fingerprint();
  summary["checkpoint_epochs"] = epochs_written;
  summary["final"] = {{"epoch", ckpts.back().epoch},
                      {"train_loss", train_eval.mean_cross_entropy},
                      {"train_error", train_eval.error_rate},
                      {"test_loss", test_eval.mean_cross_entropy},
                      {"test_error", test_eval.error_rate}};
  write_summary(ctx, summary);
  append_log(ctx.out, "train: wrote " + std::to_string(epochs_written.size()) +
                          " checkpoints, final test error " +
                          fmt(test_eval.error_rate));
  return 0;
}

// ---------------------------------------------------------------------------
// match
// ---------------------------------------------------------------------------

int cmd_match(CommandContext& ctx) {
  const Checkpoint a = load_ckpt(ctx, "ckpt_a");
  const Checkpoint b = load_ckpt(ctx, "ckpt_b");
  if (a.params.arch != b.params.arch) {
    throw ValidationError("match: checkpoint architectures differ");
  }
  const Matcher matcher = matcher_from(ctx);
  const std::uint64_t seed = ctx.config.get_u64("seed", 0);
  const int max_sweeps = ctx.config.get_int("max_sweeps", 100);
  const bool include_norm = ctx.config.has("include_norm_affine")
                                ? ctx.config.get_bool("include_norm_affine", true)
                                : true;
  std::optional<Mask> mask_a, mask_b;
  if (ctx.config.has("mask_a")) {
    const std::string p = ctx.config.get_string("mask_a");
    ctx.record_file_hash(p);
    mask_a = load_mask(p);
  }
  if (ctx.config.has("mask_b")) {
    const std::string p = ctx.config.get_string("mask_b");
    ctx.record_file_hash(p);
    mask_b = load_mask(p);
  }

  Dataset act_data;
  if (matcher == Matcher::activation) {
    act_data = load_data(ctx).train;
  } else if (ctx.config.has("data")) {
    ctx.config.get_string("data");  // consume; unused by weight matching
  }
  ctx.config.finish();

  const PermutationSpec spec = build_mlp_spec(a.params.arch);
  const MatchReport report =
      run_match(matcher, a.params, b.params, spec, act_data, seed, max_sweeps,
                include_norm, mask_a ? &*mask_a : nullptr,
                mask_b ? &*mask_b : nullptr);

  save_permutation((ctx.out / "permutation.pmperm").string(),
                   report.permutation, spec);

  const FixedPointReport id_fp =
      fixed_points(report.permutation, Permutation::identity(spec));
  json summary = base_summary(ctx, "match");
  summary["total_similarity"] = report.total_similarity;
  summary["sweeps"] = report.sweeps;
  summary["similarity_per_sweep"] = report.similarity_per_sweep;
  summary["fixed_points_vs_identity"] = id_fp.fraction;
  summary["spec_hash"] = to_hex(spec.hash());
  write_text(ctx.out / "match_report.json", summary.dump(2) + "\n");
  write_summary(ctx, summary);
  append_log(ctx.out, "match: " + std::to_string(report.sweeps) + " sweeps");
  return 0;
}

// ---------------------------------------------------------------------------
// barrier
// ---------------------------------------------------------------------------

int cmd_barrier(CommandContext& ctx) {
  const Checkpoint a = load_ckpt(ctx, "ckpt_a");
  Checkpoint b = load_ckpt(ctx, "ckpt_b");
  const int n_alpha = ctx.config.get_int("n_alpha", 25);
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);

  if (ctx.config.has("perm")) {
    const std::string perm_path = ctx.config.get_string("perm");
    ctx.record_file_hash(perm_path);
    const PermutationSpec spec = build_mlp_spec(b.params.arch);
    const Permutation perm = load_permutation(perm_path, &spec);
    b.params = apply_permutation(b.params, spec, perm);
  }
  ctx.config.finish();

  const BarrierCurve curve =
      barrier_curve(a.params, b.params, eval.train, &eval.test, n_alpha, ctx.jobs);
  write_text(ctx.out / "barrier_curve.csv", curve_csv(curve));

  json summary = base_summary(ctx, "barrier");
  summary.update(curve_json(curve));
  summary["seeds"] = {a.seed, b.seed};
  write_summary(ctx, summary);
  append_log(ctx.out, "barrier: loss_train " + fmt(curve.train.barrier_loss));
  return 0;
}

// ---------------------------------------------------------------------------
// trajectory
// ---------------------------------------------------------------------------

int cmd_trajectory(CommandContext& ctx) {
  const fs::path run_a = ctx.config.get_string("run_a");
  const fs::path run_b = ctx.config.get_string("run_b");
  const auto ckpts_a = list_run_checkpoints(run_a);
  const auto ckpts_b = list_run_checkpoints(run_b);
  const std::string source = ctx.config.get_string("perm_source", "end");
  const int fixed_t = ctx.config.get_int("fixed_t", 0);
  const int n_alpha = ctx.config.get_int("n_alpha", 25);
  const std::uint64_t seed = ctx.config.get_u64("seed", 0);
  const Matcher matcher = matcher_from(ctx);
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);
  ctx.config.finish();

  if (source != "end" && source != "per_epoch" && source != "fixed_t") {
    throw ValidationError("trajectory: perm_source must be end|per_epoch|fixed_t");
  }

  std::vector<int> epochs;
  for (const auto& [epoch, path] : ckpts_a) {
    if (ckpts_b.count(epoch)) epochs.push_back(epoch);
  }
  if (epochs.empty()) {
    throw ValidationError("trajectory: runs share no checkpoint epochs");
  }
  if (epochs.size() != ckpts_a.size() || epochs.size() != ckpts_b.size()) {
    throw ValidationError("trajectory: checkpoint grids differ between runs");
  }
  for (const auto& [epoch, path] : ckpts_a) ctx.record_file_hash(path.string());
  for (const auto& [epoch, path] : ckpts_b) ctx.record_file_hash(path.string());

  auto load_params = [](const fs::path& p) { return load_checkpoint(p.string()).params; };

  const NetworkParams a_end = load_params(ckpts_a.rbegin()->second);
  const NetworkParams b_end = load_params(ckpts_b.rbegin()->second);
  const PermutationSpec spec = build_mlp_spec(a_end.arch);

  std::optional<Permutation> fixed_perm;
  if (source == "end") {
    fixed_perm = run_match(matcher, a_end, b_end, spec, eval.train, seed, 100,
                           true)
                     .permutation;
  } else if (source == "fixed_t") {
    if (!ckpts_a.count(fixed_t)) {
      throw ValidationError("trajectory: fixed_t epoch has no checkpoint");
    }
    fixed_perm = run_match(matcher, load_params(ckpts_a.at(fixed_t)),
                           load_params(ckpts_b.at(fixed_t)), spec, eval.train,
                           seed, 100, true)
                     .permutation;
  }

  struct Row {
    BarrierCurve permuted;
    BarrierCurve baseline;
  };
  std::vector<Row> rows(epochs.size());
  parallel_jobs(static_cast<int>(epochs.size()), ctx.jobs, [&](int i) {
    const int epoch = epochs[i];
    const NetworkParams a_t = load_params(ckpts_a.at(epoch));
    const NetworkParams b_t = load_params(ckpts_b.at(epoch));
    Permutation perm = fixed_perm ? *fixed_perm
                                  : run_match(matcher, a_t, b_t, spec,
                                              eval.train, seed, 100, true)
                                        .permutation;
    rows[i].permuted = barrier_curve(a_t, apply_permutation(b_t, spec, perm),
                                     eval.train, &eval.test, n_alpha, 1);
    rows[i].baseline = barrier_curve(a_t, b_t, eval.train, &eval.test, n_alpha, 1);
  });

  std::string csv =
      "epoch,source,barrier_loss_train,barrier_error_train,barrier_loss_test,"
      "barrier_error_test\n";
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    csv += std::to_string(epochs[i]) + "," + source + "," +
           barrier_columns(rows[i].permuted) + "\n";
    csv += std::to_string(epochs[i]) + ",none," +
           barrier_columns(rows[i].baseline) + "\n";
  }
  write_text(ctx.out / "trajectory.csv", csv);

  json summary = base_summary(ctx, "trajectory");
  summary["epochs"] = epochs;
  summary["final_permuted_barrier_error_test"] =
      rows.back().permuted.test->barrier_error;
  summary["final_baseline_barrier_error_test"] =
      rows.back().baseline.test->barrier_error;
  write_summary(ctx, summary);
  append_log(ctx.out, "trajectory: " + std::to_string(epochs.size()) + " epochs");
  return 0;
}

// ---------------------------------------------------------------------------
// imp
// ---------------------------------------------------------------------------

int cmd_imp(CommandContext& ctx) {
  const DatasetPair data = load_data(ctx);
  TrainConfig config = parse_train_config(ctx.config);
  const int levels = ctx.config.get_int("levels", 6);
  const int rewind_epoch =
      ctx.config.get_int("rewind_epoch", std::max(1, config.epochs / 10));
  const bool lr_rewind = ctx.config.get_bool("lr_rewind", false);
  ctx.config.finish();

  const ImpRun run = imp(config, data.train, data.test, levels, rewind_epoch,
                         lr_rewind);

  // Rewind-point checkpoint, reused by mask transport.
  Checkpoint rewind_ckpt;
  rewind_ckpt.params = run.rewind_params;
  rewind_ckpt.momentum = run.rewind_momentum;
  rewind_ckpt.epoch = rewind_epoch;
  rewind_ckpt.seed = config.init_seed;
  rewind_ckpt.regime = regime_name(config.regime);
  rewind_ckpt.config_fingerprint = config.fingerprint();
  save_checkpoint((ctx.out / "rewind.pmlc").string(), rewind_ckpt);

  std::string csv =
      "level,density,train_loss,train_error,test_loss,test_error\n";
  for (std::size_t level = 0; level < run.levels.size(); ++level) {
    const ImpLevel& lv = run.levels[level];
    const fs::path level_dir = ctx.out / ("level_" + std::to_string(level));
    fs::create_directories(level_dir);
    MaskMeta meta;
    meta.level = static_cast<int>(level);
    meta.density = lv.mask.density();
    meta.parent_run_id = config.fingerprint();
    save_mask((level_dir / "mask.pmsk").string(), lv.mask, meta);
    Checkpoint ckpt;
    ckpt.params = lv.params;
    ckpt.epoch = config.epochs;
    ckpt.seed = config.init_seed;
    ckpt.regime = regime_name(config.regime);
    ckpt.config_fingerprint = config.fingerprint();
    save_checkpoint((level_dir / "ckpt_final.pmlc").string(), ckpt);
    csv += std::to_string(level) + "," + fmt(lv.mask.density()) + "," +
           fmt(lv.train_eval.mean_cross_entropy) + "," +
           fmt(lv.train_eval.error_rate) + "," +
           fmt(lv.test_eval.mean_cross_entropy) + "," +
           fmt(lv.test_eval.error_rate) + "\n";
  }
  write_text(ctx.out / "imp_summary.csv", csv);

  json summary = base_summary(ctx, "imp");
  summary["levels"] = levels;
  summary["rewind_epoch"] = rewind_epoch;
  summary["lr_rewind"] = lr_rewind;
  summary["fingerprint"] = config.fingerprint();
  write_summary(ctx, summary);
  append_log(ctx.out, "imp: " + std::to_string(levels) + " levels");
  return 0;
}

// ---------------------------------------------------------------------------
// transport
// ---------------------------------------------------------------------------

int cmd_transport(CommandContext& ctx) {
  const fs::path imp_dir = ctx.config.get_string("imp_run");
  const fs::path run_b = ctx.config.get_string("run_b");
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);
  const Matcher matcher = matcher_from(ctx);
  const std::uint64_t seed = ctx.config.get_u64("seed", 0);
  const bool lr_rewind = ctx.config.get_bool("lr_rewind", false);
  const std::vector<std::uint64_t> retrain_seeds =
      ctx.config.get_u64_list("retrain_seeds", {101, 102, 103});

  // Reconstruct the training recipe; it must match the one used for the runs.
  TrainConfig config = parse_train_config(ctx.config);

  // Validate every input up front, reporting all missing paths at once.
  std::vector<std::string> missing;
  auto need = [&](const fs::path& p) {
    if (!fs::exists(p)) missing.push_back(p.string());
    return p;
  };
  const fs::path imp_summary_path = need(imp_dir / "summary.json");
  const fs::path dense_a_path = need(imp_dir / "level_0" / "ckpt_final.pmlc");
  const fs::path rewind_b_guess = run_b;
  if (!missing.empty()) {
    std::string msg = "transport: missing inputs:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }

  std::ifstream imp_summary_file(imp_summary_path);
  const json imp_summary = json::parse(imp_summary_file);
  const int rewind_epoch = imp_summary.at("rewind_epoch").get<int>();
  const int max_level = imp_summary.at("levels").get<int>();
  std::vector<int> levels;
  for (int l = 1; l <= max_level; ++l) levels.push_back(l);
  levels = ctx.config.get_int_list("levels", levels);
  ctx.config.finish();

  missing.clear();
  for (int l : levels) {
    need(imp_dir / ("level_" + std::to_string(l)) / "mask.pmsk");
  }
  const auto ckpts_b = list_run_checkpoints(run_b);
  if (!ckpts_b.count(rewind_epoch)) {
    missing.push_back((run_b / ckpt_name(rewind_epoch)).string());
  }
  if (!missing.empty()) {
    std::string msg = "transport: missing inputs:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }

  ctx.record_file_hash(dense_a_path.string());
  const NetworkParams dense_a = load_checkpoint(dense_a_path.string()).params;
  const fs::path b_final_path = ckpts_b.rbegin()->second;
  ctx.record_file_hash(b_final_path.string());
  const NetworkParams b_trained = load_checkpoint(b_final_path.string()).params;
  const fs::path b_rewind_path = ckpts_b.at(rewind_epoch);
  ctx.record_file_hash(b_rewind_path.string());
  const Checkpoint b_rewind = load_checkpoint(b_rewind_path.string());

  const PermutationSpec spec = build_mlp_spec(dense_a.arch);
  const Permutation p_dense =
      run_match(matcher, dense_a, b_trained, spec, eval.train, seed, 100, true)
          .permutation;
  save_permutation((ctx.out / "p_dense.pmperm").string(), p_dense, spec);

  struct Job {
    int level;
    std::uint64_t retrain_seed;
    TransportResult result;
  };
  std::vector<Job> jobs_list;
  for (int l : levels) {
    for (std::uint64_t rs : retrain_seeds) jobs_list.push_back({l, rs, {}});
  }

  std::vector<Mask> masks_by_level(max_level + 1);
  for (int l : levels) {
    const fs::path mask_path = imp_dir / ("level_" + std::to_string(l)) / "mask.pmsk";
    ctx.record_file_hash(mask_path.string());
    masks_by_level[l] = load_mask(mask_path.string());
  }

  parallel_jobs(static_cast<int>(jobs_list.size()), ctx.jobs, [&](int i) {
    Job& job = jobs_list[i];
    job.result = transport_mask(masks_by_level[job.level], job.level, p_dense,
                                spec, b_trained, b_rewind, config, data.train,
                                eval.test, job.retrain_seed, lr_rewind);
  });

  std::string csv = "level,density,retrain_seed,variant,test_accuracy\n";
  for (const Job& job : jobs_list) {
    const auto& r = job.result;
    const std::string prefix = std::to_string(job.level) + "," +
                               fmt(r.density) + "," +
                               std::to_string(job.retrain_seed) + ",";
    csv += prefix + "transported," + fmt(r.transported_accuracy) + "\n";
    csv += prefix + "naive," + fmt(r.naive_accuracy) + "\n";
    csv += prefix + "one_shot," + fmt(r.one_shot_accuracy) + "\n";
    csv += prefix + "dense," + fmt(r.dense_accuracy) + "\n";
  }
  write_text(ctx.out / "transport.csv", csv);

  json per_level = json::array();
  for (int l : levels) {
    double t_sum = 0, n_sum = 0, o_sum = 0, t_sq = 0, n_sq = 0, o_sq = 0;
    int count = 0;
    double density = 1.0;
    for (const Job& job : jobs_list) {
      if (job.level != l) continue;
      ++count;
      density = job.result.density;
      t_sum += job.result.transported_accuracy;
      n_sum += job.result.naive_accuracy;
      o_sum += job.result.one_shot_accuracy;
      t_sq += job.result.transported_accuracy * job.result.transported_accuracy;
      n_sq += job.result.naive_accuracy * job.result.naive_accuracy;
      o_sq += job.result.one_shot_accuracy * job.result.one_shot_accuracy;
    }
    auto mean_std = [count](double sum, double sq) {
      const double mean = sum / count;
      return json{{"mean", mean},
                  {"std", std::sqrt(std::max(0.0, sq / count - mean * mean))}};
    };
    per_level.push_back(json{{"level", l},
                             {"density", density},
                             {"transported", mean_std(t_sum, t_sq)},
                             {"naive", mean_std(n_sum, n_sq)},
                             {"one_shot", mean_std(o_sum, o_sq)}});
  }
  json summary = base_summary(ctx, "transport");
  summary["rewind_epoch"] = rewind_epoch;
  summary["per_level"] = per_level;
  write_summary(ctx, summary);
  append_log(ctx.out, "transport: " + std::to_string(jobs_list.size()) + " jobs");
  return 0;
}

// ---------------------------------------------------------------------------
// triplet
// ---------------------------------------------------------------------------

int cmd_triplet(CommandContext& ctx) {
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);
  const Matcher matcher = matcher_from(ctx);
  const int n_alpha = ctx.config.get_int("n_alpha", 25);
  const std::uint64_t seed = ctx.config.get_u64("seed", 0);

  if (ctx.config.has("ckpt_a")) {
    // Direct mode on three existing checkpoints.
    const Checkpoint a = load_ckpt(ctx, "ckpt_a");
    const Checkpoint b = load_ckpt(ctx, "ckpt_b");
    const Checkpoint c = load_ckpt(ctx, "ckpt_c");
    ctx.config.finish();
    const TripletResult r = triplet_test(a.params, b.params, c.params, matcher,
                                         eval.train, eval.test, n_alpha, seed);
    json summary = base_summary(ctx, "triplet");
    summary["direct"] = curve_json(r.direct);
    summary["indirect"] = curve_json(r.indirect);
    summary["fp_fraction"] = r.fp_fraction;
    write_summary(ctx, summary);
    return 0;
  }

  const std::vector<int> widths = ctx.config.get_int_list("widths", {64, 128, 256});
  const int replicates = ctx.config.get_int("replicates", 3);
  TrainConfig base = parse_train_config(ctx.config);
  ctx.config.finish();

  struct Cell {
    int width;
    int replicate;
    TripletResult result;
  };
  std::vector<Cell> cells;
  for (int w : widths) {
    for (int r = 0; r < replicates; ++r) cells.push_back({w, r, {}});
  }

  parallel_jobs(static_cast<int>(cells.size()), ctx.jobs, [&](int i) {
    Cell& cell = cells[i];
    TrainConfig config = base;
    config.arch.hidden_dims.assign(base.arch.hidden_dims.size(), cell.width);
    NetworkParams nets[3];
    for (int net = 0; net < 3; ++net) {
      config.init_seed = mix_seed(seed, 1000 * cell.width + 10 * cell.replicate + net);
      config.data_order_seed = mix_seed(config.init_seed, 1);
      nets[net] = train(config, data.train).back().params;
    }
    cell.result = triplet_test(nets[0], nets[1], nets[2], matcher, eval.train,
                               eval.test, n_alpha, seed);
  });

  std::string csv =
      "width,replicate,alignment,barrier_loss_train,barrier_error_train,"
      "barrier_loss_test,barrier_error_test,fp_fraction\n";
  for (const Cell& cell : cells) {
    csv += std::to_string(cell.width) + "," + std::to_string(cell.replicate) +
           ",direct," + barrier_columns(cell.result.direct) + "," +
           fmt(cell.result.fp_fraction) + "\n";
    csv += std::to_string(cell.width) + "," + std::to_string(cell.replicate) +
           ",indirect," + barrier_columns(cell.result.indirect) + "," +
           fmt(cell.result.fp_fraction) + "\n";
  }
  write_text(ctx.out / "triplet.csv", csv);

  json by_width = json::array();
  for (int w : widths) {
    double direct = 0, indirect = 0, fp = 0;
    int count = 0;
    for (const Cell& cell : cells) {
      if (cell.width != w) continue;
      direct += cell.result.direct.test->barrier_loss;
      indirect += cell.result.indirect.test->barrier_loss;
      fp += cell.result.fp_fraction;
      ++count;
    }
    by_width.push_back(json{{"width", w},
                            {"mean_direct_barrier_loss_test", direct / count},
                            {"mean_indirect_barrier_loss_test", indirect / count},
                            {"mean_fp_fraction", fp / count}});
  }
  json summary = base_summary(ctx, "triplet");
  summary["by_width"] = by_width;
  write_summary(ctx, summary);
  append_log(ctx.out, "triplet: " + std::to_string(cells.size()) + " cells");
  return 0;
}

// ---------------------------------------------------------------------------
// partial
// ---------------------------------------------------------------------------

int cmd_partial(CommandContext& ctx) {
  const fs::path run_a = ctx.config.get_string("run_a");
  const fs::path run_b = ctx.config.get_string("run_b");
  const int t = ctx.config.get_int("t");
  const Matcher matcher = matcher_from(ctx);
  const std::uint64_t seed = ctx.config.get_u64("seed", 0);
  const int n_alpha = ctx.config.get_int("n_alpha", 25);
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);

  const auto ckpts_a = list_run_checkpoints(run_a);
  const auto ckpts_b = list_run_checkpoints(run_b);
  if (!ckpts_a.count(t) || !ckpts_b.count(t)) {
    throw ValidationError("partial: no checkpoint at epoch " + std::to_string(t));
  }
  const NetworkParams a_t = load_checkpoint(ckpts_a.at(t).string()).params;
  const NetworkParams b_t = load_checkpoint(ckpts_b.at(t).string()).params;
  const NetworkParams a_end =
      load_checkpoint(ckpts_a.rbegin()->second.string()).params;
  const NetworkParams b_end =
      load_checkpoint(ckpts_b.rbegin()->second.string()).params;
  const PermutationSpec spec = build_mlp_spec(a_end.arch);

  const int n_groups = spec.num_groups();
  std::vector<int> default_ks(n_groups + 1);
  for (int k = 0; k <= n_groups; ++k) default_ks[k] = k;
  const std::vector<int> ks = ctx.config.get_int_list("ks", default_ks);
  const std::vector<std::string> mode_names = ctx.config.get_string_list(
      "modes", {"bottom_up", "top_down", "put_in", "leave_out"});
  ctx.config.finish();

  const Permutation p_t =
      run_match(matcher, a_t, b_t, spec, eval.train, seed, 100, true).permutation;
  const Permutation p_end =
      run_match(matcher, a_end, b_end, spec, eval.train, seed, 100, true)
          .permutation;

  auto end_barrier = [&](const Permutation& perm) {
    return barrier_curve(a_end, apply_permutation(b_end, spec, perm), eval.train,
                         &eval.test, n_alpha, ctx.jobs);
  };

  std::string csv =
      "mode,k,barrier_loss_train,barrier_error_train,barrier_loss_test,"
      "barrier_error_test\n";
  csv += "p_t,-1," + barrier_columns(end_barrier(p_t)) + "\n";
  csv += "p_end,-1," + barrier_columns(end_barrier(p_end)) + "\n";
  for (const std::string& mode_name : mode_names) {
    const PartialMode mode = partial_mode_from_name(mode_name);
    for (int k : ks) {
      const bool whole_range =
          mode == PartialMode::bottom_up || mode == PartialMode::top_down;
      if (!whole_range && k >= n_groups) continue;
      const Permutation perm = partial_perm(p_t, p_end, mode, k);
      csv += mode_name + "," + std::to_string(k) + "," +
             barrier_columns(end_barrier(perm)) + "\n";
    }
  }
  write_text(ctx.out / "partial.csv", csv);

  json summary = base_summary(ctx, "partial");
  summary["t"] = t;
  summary["groups"] = n_groups;
  write_summary(ctx, summary);
  append_log(ctx.out, "partial: done");
  return 0;
}

// ---------------------------------------------------------------------------
// prune-align
// ---------------------------------------------------------------------------

int cmd_prune_align(CommandContext& ctx) {
  const fs::path run_a = ctx.config.get_string("run_a");
  const fs::path run_b = ctx.config.get_string("run_b");
  const Matcher matcher = matcher_from(ctx);
  const std::uint64_t seed = ctx.config.get_u64("seed", 0);
  const int n_alpha = ctx.config.get_int("n_alpha", 25);
  const int replicates = ctx.config.get_int("replicates", 3);
  const std::vector<double> fractions =
      ctx.config.get_double_list("fractions", {0.0, 0.2, 0.5, 0.8});
  const std::vector<std::string> modes =
      ctx.config.get_string_list("modes", {"magnitude", "random"});
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);

  const auto ckpts_a = list_run_checkpoints(run_a);
  const auto ckpts_b = list_run_checkpoints(run_b);
  const int epoch = ctx.config.get_int("epoch", ckpts_a.rbegin()->first);
  ctx.config.finish();
  if (!ckpts_a.count(epoch) || !ckpts_b.count(epoch)) {
    throw ValidationError("prune-align: no checkpoint at epoch " +
                          std::to_string(epoch));
  }
  ctx.record_file_hash(ckpts_a.at(epoch).string());
  ctx.record_file_hash(ckpts_b.at(epoch).string());
  const NetworkParams a_t = load_checkpoint(ckpts_a.at(epoch).string()).params;
  const NetworkParams b_t = load_checkpoint(ckpts_b.at(epoch).string()).params;
  const PermutationSpec spec = build_mlp_spec(a_t.arch);

  struct Job {
    double fraction;
    std::string mode;
    int replicate;
    BarrierCurve curve;
  };
  std::vector<Job> jobs_list;
  for (double f : fractions) {
    for (const auto& mode : modes) {
      for (int r = 0; r < replicates; ++r) jobs_list.push_back({f, mode, r, {}});
    }
  }

  parallel_jobs(static_cast<int>(jobs_list.size()), ctx.jobs, [&](int i) {
    Job& job = jobs_list[i];
    Mask mask_a = Mask::ones_like(a_t);
    Mask mask_b = Mask::ones_like(b_t);
    if (job.fraction > 0.0) {
      if (job.mode == "magnitude") {
        mask_a = magnitude_prune(a_t, mask_a, job.fraction);
        mask_b = magnitude_prune(b_t, mask_b, job.fraction);
      } else if (job.mode == "random") {
        mask_a = random_prune(a_t, job.fraction,
                              mix_seed(seed, 2 * job.replicate));
        mask_b = random_prune(b_t, job.fraction,
                              mix_seed(seed, 2 * job.replicate + 1));
      } else {
        throw ValidationError("prune-align: unknown mode " + job.mode);
      }
    }
    const NetworkParams a_pruned = apply_mask(a_t, mask_a);
    const NetworkParams b_pruned = apply_mask(b_t, mask_b);
    const Permutation perm =
        run_match(matcher, a_pruned, b_pruned, spec, eval.train,
                  mix_seed(seed, 100 + job.replicate), 100, true, &mask_a,
                  &mask_b)
            .permutation;
    job.curve = barrier_curve(a_pruned, apply_permutation(b_pruned, spec, perm),
                              eval.train, &eval.test, n_alpha, 1);
  });

  std::string csv =
      "fraction,mode,replicate,barrier_loss_train,barrier_error_train,"
      "barrier_loss_test,barrier_error_test\n";
  for (const Job& job : jobs_list) {
    csv += fmt(job.fraction) + "," + job.mode + "," +
           std::to_string(job.replicate) + "," + barrier_columns(job.curve) +
           "\n";
  }
  write_text(ctx.out / "prune_align.csv", csv);

  json rows = json::array();
  for (double f : fractions) {
    for (const auto& mode : modes) {
      double loss = 0, err = 0;
      int count = 0;
      for (const Job& job : jobs_list) {
        if (job.fraction != f || job.mode != mode) continue;
        loss += job.curve.test->barrier_loss;
        err += job.curve.test->barrier_error;
        ++count;
      }
      rows.push_back(json{{"fraction", f},
                          {"mode", mode},
                          {"mean_barrier_loss_test", loss / count},
                          {"mean_barrier_error_test", err / count}});
    }
  }
  json summary = base_summary(ctx, "prune-align");
  summary["epoch"] = epoch;
  summary["by_cell"] = rows;
  write_summary(ctx, summary);
  append_log(ctx.out, "prune-align: " + std::to_string(jobs_list.size()) + " jobs");
  return 0;
}

// ---------------------------------------------------------------------------
// instability
// ---------------------------------------------------------------------------

int cmd_instability(CommandContext& ctx) {
  const fs::path run_a = ctx.config.get_string("run_a");
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);
  const int n_alpha = ctx.config.get_int("n_alpha", 25);
  const std::vector<std::uint64_t> child_seeds =
      ctx.config.get_u64_list("child_seeds", {1001, 1002});
  if (child_seeds.size() != 2) {
    throw ValidationError("instability: child_seeds must have two entries");
  }

  TrainConfig config = parse_train_config(ctx.config);

  const auto ckpts_a = list_run_checkpoints(run_a);
  std::vector<int> spawn_epochs;
  for (const auto& [epoch, path] : ckpts_a) spawn_epochs.push_back(epoch);
  spawn_epochs = ctx.config.get_int_list("spawn_epochs", spawn_epochs);

  // Optional cross barrier against permuted children of a second parent.
  std::optional<fs::path> run_b;
  std::optional<Permutation> p_end;
  PermutationSpec spec;
  if (ctx.config.has("run_b")) {
    run_b = fs::path(ctx.config.get_string("run_b"));
    const auto ckpts_b = list_run_checkpoints(*run_b);
    const NetworkParams a_end =
        load_checkpoint(ckpts_a.rbegin()->second.string()).params;
    const NetworkParams b_end =
        load_checkpoint(ckpts_b.rbegin()->second.string()).params;
    spec = build_mlp_spec(a_end.arch);
    const Matcher matcher = matcher_from(ctx);
    const std::uint64_t seed = ctx.config.get_u64("seed", 0);
    p_end = run_match(matcher, a_end, b_end, spec, eval.train, seed, 100, true)
                .permutation;
  } else if (ctx.config.has("method")) {
    ctx.config.get_string("method");
    ctx.config.get_u64("seed", 0);
  }
  ctx.config.finish();

  struct Row {
    int epoch;
    InstabilityResult result;
  };
  std::vector<Row> rows(spawn_epochs.size());
  const auto ckpts_b =
      run_b ? list_run_checkpoints(*run_b) : std::map<int, fs::path>{};
  parallel_jobs(static_cast<int>(spawn_epochs.size()), ctx.jobs, [&](int i) {
    const int epoch = spawn_epochs[i];
    rows[i].epoch = epoch;
    const Checkpoint parent_a = load_checkpoint(ckpts_a.at(epoch).string());
    // Each spawn epoch derives its own pair of minibatch orders.
    const std::pair<std::uint64_t, std::uint64_t> seeds = {
        mix_seed(child_seeds[0], epoch), mix_seed(child_seeds[1], epoch)};
    if (run_b && ckpts_b.count(epoch)) {
      const Checkpoint parent_b = load_checkpoint(ckpts_b.at(epoch).string());
      rows[i].result = instability(config, parent_a, seeds, data.train,
                                   eval.test, &parent_b, &*p_end, &spec, n_alpha);
    } else {
      rows[i].result = instability(config, parent_a, seeds, data.train,
                                   eval.test, nullptr, nullptr, nullptr, n_alpha);
    }
  });

  std::string csv =
      "spawn_epoch,kind,barrier_loss_train,barrier_error_train,"
      "barrier_loss_test,barrier_error_test\n";
  for (const Row& row : rows) {
    csv += std::to_string(row.epoch) + ",children," +
           barrier_columns(row.result.child_barrier) + "\n";
    if (row.result.cross_barrier) {
      csv += std::to_string(row.epoch) + ",cross_permuted," +
             barrier_columns(*row.result.cross_barrier) + "\n";
    }
  }
  write_text(ctx.out / "instability.csv", csv);

  json summary = base_summary(ctx, "instability");
  summary["spawn_epochs"] = spawn_epochs;
  write_summary(ctx, summary);
  append_log(ctx.out, "instability: " + std::to_string(rows.size()) + " epochs");
  return 0;
}

// ---------------------------------------------------------------------------
// landscape
// ---------------------------------------------------------------------------

int cmd_landscape(CommandContext& ctx) {
  const Checkpoint p0 = load_ckpt(ctx, "ckpt_p0");
  const Checkpoint p1 = load_ckpt(ctx, "ckpt_p1");
  const Checkpoint p2 = load_ckpt(ctx, "ckpt_p2");
  const int nx = ctx.config.get_int("nx", 64);
  const int ny = ctx.config.get_int("ny", 64);
  const double margin = ctx.config.get_double("margin", 0.2);
  const std::string split = ctx.config.get_string("split", "train");
  const DatasetPair data = load_data(ctx);
  const EvalData eval = eval_subsets(ctx, data);

  std::vector<NetworkParams> trajectory_params;
  std::vector<std::string> trajectory_names;
  if (ctx.config.has("trajectory_run")) {
    const fs::path run(ctx.config.get_string("trajectory_run"));
    for (const auto& [epoch, path] : list_run_checkpoints(run)) {
      trajectory_params.push_back(load_checkpoint(path.string()).params);
      trajectory_names.push_back("epoch_" + std::to_string(epoch));
    }
  }
  ctx.config.finish();

  std::vector<const NetworkParams*> trajectory;
  for (const auto& p : trajectory_params) trajectory.push_back(&p);

  const Dataset& eval_split = split == "test" ? eval.test : eval.train;
  const LandscapeProjection proj = landscape_projection(
      p0.params, p1.params, p2.params, nx, ny, margin, eval_split, trajectory,
      ctx.jobs);

  std::string csv = "x,y,loss\n";
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      csv += fmt(proj.grid_x[i]) + "," + fmt(proj.grid_y[j]) + "," +
             fmt(proj.losses(j, i)) + "\n";
    }
  }
  write_text(ctx.out / "landscape.csv", csv);

  std::string coords = "label,x,y\n";
  coords += "p0,0,0\n";
  coords += "p1," + fmt(proj.p1_x) + ",0\n";
  coords += "p2," + fmt(proj.p2_x) + "," + fmt(proj.p2_y) + "\n";
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    coords += trajectory_names[i] + "," + fmt(proj.trajectory[i].first) + "," +
              fmt(proj.trajectory[i].second) + "\n";
  }
  write_text(ctx.out / "coords.csv", coords);

  json summary = base_summary(ctx, "landscape");
  summary["nx"] = nx;
  summary["ny"] = ny;
  summary["margin"] = margin;
  summary["split"] = split;
  write_summary(ctx, summary);
  append_log(ctx.out, "landscape: grid written");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"permutation alignment and linear mode connectivity toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  int jobs = 2;

  const std::vector<std::pair<std::string, int (*)(CommandContext&)>> commands = {
      {"train", cmd_train},           {"match", cmd_match},
      {"barrier", cmd_barrier},       {"trajectory", cmd_trajectory},
      {"imp", cmd_imp},               {"transport", cmd_transport},
      {"triplet", cmd_triplet},       {"partial", cmd_partial},
      {"prune-align", cmd_prune_align}, {"instability", cmd_instability},
      {"landscape", cmd_landscape}};

  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key=value manifest file")
        ->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--jobs", jobs, "max concurrent replicate jobs");
    subs[name] = sub;
  }

  CLI11_PARSE(app, argc, argv);

  try {
    CommandContext ctx{KeyValueConfig::from_file(config_path), fs::path(out_dir),
                       jobs};
    ctx.record_file_hash(config_path);
    if (ctx.config.has("out")) ctx.out = fs::path(ctx.config.get_string("out"));
    fs::create_directories(ctx.out);
    for (const auto& [name, fn] : commands) {
      if (subs[name]->parsed()) return fn(ctx);
    }
    return 2;
  } catch (const DivergedError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const SpecError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const InvalidPermutationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
