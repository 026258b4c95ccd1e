#include "diffwin/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>

#include "diffwin/checkpoint.hpp"
#include "diffwin/corpus.hpp"

namespace diffwin::train {

namespace {

namespace fs = std::filesystem;

constexpr std::size_t kBuiltinCorpusBytes = 1 << 20;

std::unique_ptr<tasks::Generator> make_generator(const TrainConfig& cfg,
                                                 std::size_t* replaced = nullptr) {
  if (cfg.task == "copy")
    return std::make_unique<tasks::CopyTask>(cfg.seed, cfg.vocab, cfg.len_min, cfg.len_max);
  if (cfg.task == "toy_sva") return std::make_unique<tasks::SvaTask>(cfg.seed, cfg.sva_depth);
  if (cfg.task == "char_lm") {
    std::string text;
    if (cfg.corpus_path.empty()) {
      text = corpus::builtin_corpus(kBuiltinCorpusBytes, cfg.seed);
    } else {
      std::ifstream is(cfg.corpus_path, std::ios::binary);
      if (!is) throw std::runtime_error("char_lm: cannot read corpus: " + cfg.corpus_path);
      text.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    }
    auto gen = std::make_unique<tasks::CharLmTask>(std::move(text), cfg.seed, cfg.seq_len);
    if (replaced) *replaced = gen->replaced_bytes();
    return gen;
  }
  throw std::invalid_argument("unknown task '" + cfg.task +
                              "' (expected copy, toy_sva or char_lm)");
}

struct Batch {
  model::Packed src;
  model::Packed tgt_in;             // seq2seq
  std::vector<int> flat_targets;    // CE targets (ignore = -1 at padding)
  std::vector<int> labels;          // classifier
};

Batch make_batch(const tasks::Generator& gen, const TrainConfig& cfg, tasks::Split split,
                 std::uint64_t first_index, int count) {
  Batch b;
  std::vector<std::vector<int>> srcs, tgt_ins;
  std::vector<std::vector<int>> tgt_outs;
  for (int i = 0; i < count; ++i) {
    tasks::Sample s = gen.sample(split, first_index + i);
    srcs.push_back(std::move(s.src));
    if (cfg.task == "copy") {
      std::vector<int> in{tasks::kBosId};
      in.insert(in.end(), s.tgt.begin(), s.tgt.end());
      std::vector<int> out = s.tgt;
      out.push_back(tasks::kEosId);
      tgt_ins.push_back(std::move(in));
      tgt_outs.push_back(std::move(out));
    } else if (cfg.task == "char_lm") {
      tgt_outs.push_back(std::move(s.tgt));
    } else {
      b.labels.push_back(s.label);
    }
  }
  b.src = model::pack(srcs, tasks::kPadId);
  if (cfg.task == "copy") {
    b.tgt_in = model::pack(tgt_ins, tasks::kPadId);
    b.flat_targets.assign(static_cast<std::size_t>(b.tgt_in.batch) * b.tgt_in.len, -1);
    for (int s = 0; s < b.tgt_in.batch; ++s)
      for (std::size_t t = 0; t < tgt_outs[s].size(); ++t)
        b.flat_targets[static_cast<std::size_t>(s) * b.tgt_in.len + t] = tgt_outs[s][t];
  } else if (cfg.task == "char_lm") {
    b.flat_targets.assign(static_cast<std::size_t>(b.src.batch) * b.src.len, -1);
    for (int s = 0; s < b.src.batch; ++s)
      for (std::size_t t = 0; t < tgt_outs[s].size(); ++t)
        b.flat_targets[static_cast<std::size_t>(s) * b.src.len + t] = tgt_outs[s][t];
  }
  return b;
}

Tensor batch_loss(Tape& tape, const model::Model& m, const TrainConfig& cfg, const Batch& b,
                  bool training, Rng* rng) {
  if (cfg.task == "copy") {
    Tensor logits = model::seq2seq_logits(tape, m, b.src, b.tgt_in, training, rng);
    return tape.cross_entropy(logits, b.flat_targets, -1);
  }
  if (cfg.task == "char_lm") {
    Tensor logits = model::lm_logits(tape, m, b.src, training, rng);
    return tape.cross_entropy(logits, b.flat_targets, -1);
  }
  Tensor logits = model::classifier_logits(tape, m, b.src, training, rng);
  return tape.cross_entropy(logits, b.labels, -1);
}

void log_record(std::ofstream& os, long step, double loss, const char* metric, double value,
                long wall_ms) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "{\"step\":%ld,\"loss\":%.17g,\"metric_name\":\"%s\",\"metric_value\":%.17g,"
                "\"wall_ms\":%ld}\n",
                step, loss, metric, value, wall_ms);
  os << buf;
  os.flush();
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"copy-tiny", "sva-tiny", "charlm-tiny"};
  return names;
}

Preset preset(const std::string& name) {
  Preset p;
  p.model.d_model = 128;
  p.model.heads = 4;
  p.model.ffn_dim = 512;
  p.model.encoder_layers = 2;
  p.model.decoder_layers = 2;
  if (name == "copy-tiny") {
    p.train.task = "copy";
    p.train.steps = 1500;
    p.train.batch = 16;
    p.train.lr_peak = 3e-3;
    p.train.checkpoint_interval = 100;
    p.train.eval_batches = 24;
  } else if (name == "sva-tiny") {
    p.train.task = "toy_sva";
    p.train.steps = 3000;
    p.train.batch = 16;
    p.train.lr_peak = 1e-3;
    p.train.checkpoint_interval = 200;
    p.train.eval_batches = 32;
  } else if (name == "charlm-tiny") {
    p.train.task = "char_lm";
    p.train.steps = 3000;
    p.train.batch = 8;
    p.train.lr_peak = 1e-3;
    p.train.checkpoint_interval = 200;
    p.train.eval_batches = 24;
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown preset '" + name + "' (valid presets: " + valid +
                                ")");
  }
  return p;
}

double lr_at(const TrainConfig& cfg, long step) {
  if (step < 1) throw std::invalid_argument("lr_at: step is 1-based");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  return cfg.lr_peak * std::min(s / w, std::sqrt(w / s));
}

void adam_init(AdamState& st, const std::vector<Tensor>& params) {
  st.m.clear();
  st.v.clear();
  for (const auto& p : params) {
    st.m.emplace_back(p.size(), 0.0);
    st.v.emplace_back(p.size(), 0.0);
  }
  st.step = 0;
  st.skipped = 0;
}

bool adam_step(std::vector<Tensor>& params, AdamState& st, double lr) {
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state mismatch");
  for (const auto& p : params)
    for (double g : p.grad())
      if (!std::isfinite(g)) {
        ++st.skipped;
        return false;
      }

  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].values();
    const auto& grad = params[i].grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      value[j] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
  return true;
}

double clip_global_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      auto& grad = const_cast<Tensor&>(p).grad();
      for (double& g : grad) g *= scale;
    }
  }
  return norm;
}

TaskInfo task_info(const TrainConfig& cfg) {
  TaskInfo info;
  std::size_t replaced = 0;
  auto gen = make_generator(cfg, &replaced);
  info.vocab_size = gen->vocab_size();
  info.corpus_replaced_bytes = replaced;
  if (cfg.task == "copy") {
    info.model_kind = "seq2seq";
  } else if (cfg.task == "toy_sva") {
    info.model_kind = "classifier";
    info.num_classes = tasks::SvaTask::num_classes();
  } else {
    info.model_kind = "lm";
  }
  return info;
}

TrainResult train_loop(model::Model& m, const TrainConfig& cfg, const std::string& out_dir) {
  if (cfg.steps < 1 || cfg.batch < 1 || cfg.average_last_k < 1 || cfg.warmup_steps < 1 ||
      cfg.lr_peak <= 0.0)
    throw std::invalid_argument("train_loop: invalid configuration");

  fs::create_directories(out_dir);
  auto gen = make_generator(cfg);

  TrainResult result;
  result.metrics_path = (fs::path(out_dir) / "metrics.ndjson").string();
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("train_loop: cannot write " + result.metrics_path);

  std::vector<Tensor> params = m.params();
  AdamState adam;
  adam_init(adam, params);
  Rng dropout_rng(mix_key(cfg.seed, 0x64726f70ULL));

  // Ring of the last k parameter snapshots for checkpoint averaging.
  std::deque<std::vector<std::vector<double>>> snapshots;
  auto take_snapshot = [&] {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const auto& p : params) snap.push_back(p.values());
    snapshots.push_back(std::move(snap));
    while (static_cast<int>(snapshots.size()) > cfg.average_last_k) snapshots.pop_front();
  };

  const auto t0 = std::chrono::steady_clock::now();
  auto wall_ms = [&] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - t0)
        .count();
  };

  int consecutive_bad = 0;
  std::string last_error;
  for (long step = 1; step <= cfg.steps; ++step) {
    const Batch batch = make_batch(*gen, cfg, tasks::Split::train,
                                   static_cast<std::uint64_t>(step - 1) * cfg.batch, cfg.batch);
    double loss_value = std::numeric_limits<double>::quiet_NaN();
    bool ok = false;
    try {
      Tape tape;
      Tensor loss = batch_loss(tape, m, cfg, batch, true, &dropout_rng);
      loss_value = loss.item();
      if (std::isfinite(loss_value)) {
        tape.backward(loss);
        clip_global_norm(params, cfg.clip_norm);
        ok = adam_step(params, adam, lr_at(cfg, step));
      }
    } catch (const std::runtime_error& e) {
      last_error = e.what();
    }
    for (auto& p : params) p.zero_grad();

    if (!ok) {
      ++consecutive_bad;
      ++result.skipped_steps;
      if (consecutive_bad > cfg.max_nonfinite_steps)
        throw NumericError("train_loop: non-finite loss persisted for " +
                           std::to_string(consecutive_bad) + " steps" +
                           (last_error.empty() ? "" : " (" + last_error + ")"));
    } else {
      consecutive_bad = 0;
    }

    if (step % cfg.log_interval == 0 || step == 1)
      log_record(metrics, step, loss_value, "lr", lr_at(cfg, step), wall_ms());

    if (step % cfg.checkpoint_interval == 0 || step == cfg.steps) {
      take_snapshot();
      checkpoint::save((fs::path(out_dir) / ("ckpt-" + std::to_string(step) + ".ckpt")).string(),
                       m);
    }
  }

  // Final model: elementwise mean of the last k checkpoints.
  const double inv = 1.0 / static_cast<double>(snapshots.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].values();
    std::fill(value.begin(), value.end(), 0.0);
    for (const auto& snap : snapshots)
      for (std::size_t j = 0; j < value.size(); ++j) value[j] += snap[i][j];
    for (double& v : value) v *= inv;
  }
  result.final_checkpoint_path = (fs::path(out_dir) / "model.final.ckpt").string();
  checkpoint::save(result.final_checkpoint_path, m);

  result.final_metrics = evaluate(m, cfg, cfg.eval_batches);
  for (const auto& [name, value] : result.final_metrics)
    log_record(metrics, cfg.steps, 0.0, name.c_str(), value, wall_ms());
  return result;
}

std::map<std::string, double> evaluate(const model::Model& m, const TrainConfig& cfg,
                                       int batches) {
  if (batches < 1) throw std::invalid_argument("evaluate: empty split");
  auto gen = make_generator(cfg);
  std::map<std::string, double> out;

  if (cfg.task == "copy") {
    long correct = 0, total = 0, seq_correct = 0, seqs = 0;
    for (int i = 0; i < batches * cfg.batch; ++i) {
      tasks::Sample s = gen->sample(tasks::Split::eval, i);
      const std::vector<int> decoded =
          model::greedy_decode(m, s.src, static_cast<int>(s.tgt.size()) + 4);
      bool all = decoded.size() == s.tgt.size();
      for (std::size_t t = 0; t < s.tgt.size(); ++t) {
        if (t < decoded.size() && decoded[t] == s.tgt[t])
          ++correct;
        else
          all = false;
      }
      total += static_cast<long>(s.tgt.size());
      seq_correct += all ? 1 : 0;
      ++seqs;
    }
    out["token_accuracy"] = static_cast<double>(correct) / static_cast<double>(total);
    out["sequence_accuracy"] = static_cast<double>(seq_correct) / static_cast<double>(seqs);
    return out;
  }

  if (cfg.task == "toy_sva") {
    long correct = 0, total = 0;
    for (int b = 0; b < batches; ++b) {
      const Batch batch = make_batch(*gen, cfg, tasks::Split::eval,
                                     static_cast<std::uint64_t>(b) * cfg.batch, cfg.batch);
      Tape tape(true);
      Tensor logits = model::classifier_logits(tape, m, batch.src);
      for (int s = 0; s < batch.src.batch; ++s) {
        const int pred = logits.at(s, 0) >= logits.at(s, 1) ? 0 : 1;
        correct += pred == batch.labels[s] ? 1 : 0;
        ++total;
      }
    }
    out["accuracy"] = static_cast<double>(correct) / static_cast<double>(total);
    return out;
  }

  // char_lm: teacher-forced negative log-likelihood over held-out windows.
  auto* lm = dynamic_cast<tasks::CharLmTask*>(gen.get());
  double nll = 0.0;
  long tokens = 0;
  for (int b = 0; b < batches; ++b) {
    const Batch batch = make_batch(*gen, cfg, tasks::Split::eval,
                                   static_cast<std::uint64_t>(b) * cfg.batch, cfg.batch);
    Tape tape(true);
    Tensor logits = model::lm_logits(tape, m, batch.src);
    Tensor loss = tape.cross_entropy(logits, batch.flat_targets, -1);
    long n = 0;
    for (int t : batch.flat_targets) n += t >= 0 ? 1 : 0;
    nll += loss.item() * static_cast<double>(n);
    tokens += n;
  }
  out["perplexity"] = std::exp(nll / static_cast<double>(tokens));
  out["unigram_baseline_perplexity"] = std::exp(lm->unigram_nll(tasks::Split::eval));
  return out;
}

}  // namespace diffwin::train
