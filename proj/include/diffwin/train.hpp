#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffwin/model.hpp"
#include "diffwin/tasks.hpp"

// Optimizer, training loop, metrics, and checkpoint averaging for the
// desk-scale tasks.

namespace diffwin::train {

struct TrainConfig {
  std::string task = "copy";  // "copy" | "toy_sva" | "char_lm"
  int steps = 3000;
  int batch = 16;
  double lr_peak = 3e-3;
  int warmup_steps = 400;
  std::uint64_t seed = 1;
  int checkpoint_interval = 500;
  int average_last_k = 5;
  int log_interval = 50;
  int eval_batches = 16;
  double clip_norm = 1.0;
  int max_nonfinite_steps = 50;

  // task knobs
  int vocab = 12;  // copy
  int len_min = 4, len_max = 16;
  int sva_depth = 2;
  int seq_len = 64;         // char_lm
  std::string corpus_path;  // char_lm; empty uses the built-in corpus
};

// Inverse-sqrt schedule with linear warmup; step is 1-based.
// lr(s) = lr_peak * min(s / warmup, sqrt(warmup / s))
double lr_at(const TrainConfig& cfg, long step);

// Named task presets bundling a tiny model shape with task defaults.
struct Preset {
  TrainConfig train;
  model::ModelConfig model;
};
const std::vector<std::string>& preset_names();  // copy-tiny, sva-tiny, charlm-tiny
Preset preset(const std::string& name);          // throws std::invalid_argument

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
  int skipped = 0;
  double beta1 = 0.9, beta2 = 0.98, eps = 1e-9;
};

void adam_init(AdamState& st, const std::vector<Tensor>& params);

// One update with bias correction. Returns false (and counts a skip) when
// any gradient is non-finite; parameters are then left untouched.
bool adam_step(std::vector<Tensor>& params, AdamState& st, double lr);

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(const std::vector<Tensor>& params, double max_norm);

struct TaskInfo {
  std::string model_kind;  // classifier | lm | seq2seq
  int vocab_size = 0;
  int num_classes = 0;
  std::size_t corpus_replaced_bytes = 0;
};

// Model-facing facts about a task (loads the corpus for char_lm).
TaskInfo task_info(const TrainConfig& cfg);

// Raised when non-finite losses persist beyond max_nonfinite_steps.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  std::map<std::string, double> final_metrics;
  int skipped_steps = 0;
  std::string metrics_path;
  std::string final_checkpoint_path;
};

// Runs the task for cfg.steps updates, writing newline-delimited JSON metric
// records and periodic checkpoints under out_dir. The returned (and final
// on-disk) model is the elementwise mean of the last average_last_k
// checkpoints.
TrainResult train_loop(model::Model& m, const TrainConfig& cfg, const std::string& out_dir);

// Held-out metrics: token/sequence accuracy (copy), accuracy (toy_sva), or
// perplexity plus the train-split unigram baseline (char_lm).
std::map<std::string, double> evaluate(const model::Model& m, const TrainConfig& cfg,
                                       int batches);

}  // namespace diffwin::train
