// diffwin command line: train / eval / gradcheck / maskdump / make-corpus.
//
// Exit codes: 0 success, 1 invalid configuration, 2 I/O failure,
// 3 numeric failure, 4 gradient-check violation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "diffwin/checkpoint.hpp"
#include "diffwin/corpus.hpp"
#include "diffwin/gradcheck.hpp"
#include "diffwin/model.hpp"
#include "diffwin/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace diffwin;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitGradcheck = 4;

struct RunConfig {
  train::TrainConfig train;
  model::ModelConfig model;
  std::string out_dir = "runs/latest";
};

RunConfig preset_defaults(const std::string& name) {
  const train::Preset p = train::preset(name);
  return {p.train, p.model, "runs/latest"};
}

// Strict config file: every key must be known.
void apply_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw checkpoint::IoError("cannot read config file: " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file " + path + ": " + e.what());
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "model") rc.model.attention = value.get<std::string>();
    else if (key == "steps") rc.train.steps = value.get<int>();
    else if (key == "seed") rc.train.seed = value.get<std::uint64_t>();
    else if (key == "batch") rc.train.batch = value.get<int>();
    else if (key == "segment_size") rc.model.segment_size = value.get<int>();
    else if (key == "out") rc.out_dir = value.get<std::string>();
    else if (key == "corpus") rc.train.corpus_path = value.get<std::string>();
    else if (key == "task") rc.train.task = value.get<std::string>();
    else if (key == "d_model") rc.model.d_model = value.get<int>();
    else if (key == "heads") rc.model.heads = value.get<int>();
    else if (key == "ffn_dim") rc.model.ffn_dim = value.get<int>();
    else if (key == "encoder_layers") rc.model.encoder_layers = value.get<int>();
    else if (key == "decoder_layers") rc.model.decoder_layers = value.get<int>();
    else if (key == "dropout") rc.model.dropout = value.get<double>();
    else if (key == "windowed_layers") rc.model.windowed_layers = value.get<int>();
    else if (key == "lr_peak") rc.train.lr_peak = value.get<double>();
    else if (key == "warmup_steps") rc.train.warmup_steps = value.get<int>();
    else if (key == "checkpoint_interval") rc.train.checkpoint_interval = value.get<int>();
    else if (key == "average_last_k") rc.train.average_last_k = value.get<int>();
    else if (key == "log_interval") rc.train.log_interval = value.get<int>();
    else if (key == "eval_batches") rc.train.eval_batches = value.get<int>();
    else if (key == "vocab") rc.train.vocab = value.get<int>();
    else if (key == "len_min") rc.train.len_min = value.get<int>();
    else if (key == "len_max") rc.train.len_max = value.get<int>();
    else if (key == "sva_depth") rc.train.sva_depth = value.get<int>();
    else if (key == "seq_len") rc.train.seq_len = value.get<int>();
    else throw std::invalid_argument("config file " + path + ": unknown key '" + key + "'");
  }
}

std::string metrics_json(const std::map<std::string, double>& metrics) {
  json j;
  for (const auto& [k, v] : metrics) j[k] = v;
  return j.dump();
}

std::vector<int> parse_id_list(const std::string& s) {
  std::vector<int> ids;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) ids.push_back(std::stoi(item));
  }
  if (ids.empty()) throw std::invalid_argument("empty id list: '" + s + "'");
  return ids;
}

// ---------------------------------------------------------------------------

int cmd_train(RunConfig rc) {
  const train::TaskInfo info = train::task_info(rc.train);
  rc.model.kind = info.model_kind;
  rc.model.vocab_size = info.vocab_size;
  if (info.num_classes > 0) rc.model.num_classes = info.num_classes;
  if (info.corpus_replaced_bytes > 0)
    std::cerr << "corpus: replaced " << info.corpus_replaced_bytes
              << " invalid UTF-8 bytes\n";

  model::Model m = model::build(rc.model, rc.train.seed);
  std::cerr << "task=" << rc.train.task << " attention=" << rc.model.attention
            << " params=" << m.parameter_count() << " steps=" << rc.train.steps
            << " seed=" << rc.train.seed << "\n";

  const train::TrainResult result = train::train_loop(m, rc.train, rc.out_dir);
  std::cerr << "final checkpoint: " << result.final_checkpoint_path << "\n";
  std::cout << metrics_json(result.final_metrics) << "\n";
  return 0;
}

int cmd_eval(const std::string& model_path, train::TrainConfig cfg, int batches) {
  model::Model m = checkpoint::load(model_path);
  cfg.vocab = m.config.vocab_size;
  const auto metrics = train::evaluate(m, cfg, batches);
  std::cout << metrics_json(metrics) << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& scope, bool self_test_negative) {
  if (!scope.empty() && scope != "ops" && scope != "attention" && scope != "model")
    throw std::invalid_argument("gradcheck scope must be ops, attention or model");

  bool any_fail = false;
  std::vector<std::string> failing;
  for (const auto& unit : standard_gradcheck_units(self_test_negative)) {
    if (!scope.empty() && unit.scope != scope) continue;
    const double err = unit.run();
    const bool pass = err <= unit.threshold;
    json j;
    j["unit"] = unit.name;
    j["scope"] = unit.scope;
    j["max_rel_err"] = err;
    j["threshold"] = unit.threshold;
    j["pass"] = pass;
    std::cout << j.dump() << "\n";
    std::fprintf(stderr, "%-34s %-10s worst %.3e (<= %.0e) %s\n", unit.name.c_str(),
                 unit.scope.c_str(), err, unit.threshold, pass ? "ok" : "FAIL");
    if (!pass) {
      any_fail = true;
      failing.push_back(unit.name);
    }
  }
  if (any_fail) {
    std::fprintf(stderr, "gradient check failed:");
    for (const auto& name : failing) std::fprintf(stderr, " %s", name.c_str());
    std::fprintf(stderr, "\n");
    return kExitGradcheck;
  }
  return 0;
}

int cmd_maskdump(const std::string& model_path, const std::string& input,
                 const std::string& target, int layer, int head, const std::string& site_name,
                 const std::string& out_dir) {
  model::Model m = checkpoint::load(model_path);

  attention::Site site;
  if (site_name == "encoder_self") site = attention::Site::encoder_self;
  else if (site_name == "decoder_self") site = attention::Site::decoder_self;
  else if (site_name == "cross") site = attention::Site::cross;
  else throw std::invalid_argument("site must be encoder_self, decoder_self or cross");

  const auto spec = m.spec_for(site, layer - 1);
  if (spec.variant == attention::Variant::global) {
    std::cerr << "maskdump: " << site_name << " layer " << layer
              << " uses global attention; there is no window mask to dump. "
                 "Pick a windowed site (see the model's attention policy: "
              << m.config.attention << ")\n";
    return kExitConfig;
  }
  if (head < 1 || head > m.config.heads)
    throw std::invalid_argument("head index out of range (model has " +
                                std::to_string(m.config.heads) + " heads)");

  const std::vector<int> src = parse_id_list(input);
  model::TraceRequest trace;
  trace.site = site;
  trace.layer = layer - 1;

  Tape tape(true);
  if (m.config.kind == "classifier") {
    model::classifier_logits(tape, m, model::pack({src}), false, nullptr, &trace);
  } else if (m.config.kind == "lm") {
    model::lm_logits(tape, m, model::pack({src}), false, nullptr, &trace);
  } else {
    std::vector<int> tgt = target.empty() ? src : parse_id_list(target);
    std::vector<int> tgt_in{tasks::kBosId};
    tgt_in.insert(tgt_in.end(), tgt.begin(), tgt.end());
    model::seq2seq_logits(tape, m, model::pack({src}), model::pack({tgt_in}), false, nullptr,
                          &trace);
  }
  if (!trace.filled)
    throw std::invalid_argument("requested site/layer does not exist in this model");

  const attention::HeadTrace& h = trace.heads.at(head - 1);
  fs::create_directories(out_dir);
  auto write = [&](const char* name, const std::vector<double>& data) {
    const std::string path = (fs::path(out_dir) / name).string();
    std::ofstream os(path);
    if (!os) throw checkpoint::IoError("cannot write " + path);
    windowmask::write_mask_csv(os, data.data(), h.m, h.n);
    std::cerr << "wrote " << path << " (" << h.m << "x" << h.n << ")\n";
  };
  write("mask.csv", h.mask);
  write("attention_scores.csv", h.softmax_scores);
  write("attention_weights.csv", h.final_weights);
  return 0;
}

int cmd_make_corpus(const std::string& out_path, std::size_t min_bytes, std::uint64_t seed) {
  const std::string text = corpus::builtin_corpus(min_bytes, seed);
  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw checkpoint::IoError("cannot write " + out_path);
  os << text;
  std::cerr << "wrote " << out_path << " (" << text.size() << " bytes)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable window attention workbench"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a desk-scale task");
  std::string preset = "copy-tiny", config_path, model_spec, out_dir, corpus_path;
  std::optional<int> steps, batch, segment_size;
  std::optional<std::uint64_t> seed;
  train_cmd->add_option("--preset", preset, "task preset: copy-tiny, sva-tiny, charlm-tiny");
  train_cmd->add_option("--config", config_path, "JSON config file (strict keys)");
  train_cmd->add_option("--model", model_spec,
                        "attention policy, e.g. global or Enc(AW)-Cr(AW,Seg)-Dec(MW)");
  train_cmd->add_option("--steps", steps, "training updates");
  train_cmd->add_option("--seed", seed, "run seed");
  train_cmd->add_option("--batch", batch, "batch size");
  train_cmd->add_option("--segment-size", segment_size, "segment size b for segment masking");
  train_cmd->add_option("--out", out_dir, "output directory");
  train_cmd->add_option("--corpus", corpus_path, "UTF-8 corpus file for char_lm");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  std::string eval_model_path, eval_task = "copy", eval_split = "eval", eval_corpus;
  int eval_batches = 16;
  std::uint64_t eval_seed = 1;
  eval_cmd->add_option("--model-path", eval_model_path, "checkpoint file")->required();
  eval_cmd->add_option("--task", eval_task, "copy, toy_sva or char_lm");
  eval_cmd->add_option("--split", eval_split, "eval (held-out) or train");
  eval_cmd->add_option("--batches", eval_batches, "number of evaluation batches");
  eval_cmd->add_option("--seed", eval_seed, "data stream seed");
  eval_cmd->add_option("--corpus", eval_corpus, "UTF-8 corpus file for char_lm");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string scope;
  bool self_test_negative = false;
  grad_cmd->add_option("scope", scope, "ops, attention or model (default: all)");
  grad_cmd->add_flag("--self-test-negative", self_test_negative,
                     "include a deliberately broken unit; the command must then fail");

  // maskdump
  auto* mask_cmd = app.add_subcommand("maskdump", "dump mask / attention CSVs for one site");
  std::string md_model, md_input, md_target, md_site = "decoder_self", md_out = "maskdump";
  int md_layer = 1, md_head = 1;
  mask_cmd->add_option("--model-path", md_model, "checkpoint file")->required();
  mask_cmd->add_option("--input", md_input, "comma-separated input token ids")->required();
  mask_cmd->add_option("--target", md_target, "target ids (seq2seq sites; default: input)");
  mask_cmd->add_option("--layer", md_layer, "1-based layer index");
  mask_cmd->add_option("--head", md_head, "1-based head index");
  mask_cmd->add_option("--site", md_site, "encoder_self, decoder_self or cross");
  mask_cmd->add_option("--out", md_out, "output directory");

  // make-corpus
  auto* corpus_cmd = app.add_subcommand("make-corpus", "write the built-in text corpus");
  std::string mc_out = "corpus.txt";
  std::size_t mc_bytes = 1 << 20;
  std::uint64_t mc_seed = 0;
  corpus_cmd->add_option("--out", mc_out, "output file");
  corpus_cmd->add_option("--min-bytes", mc_bytes, "minimum corpus size");
  corpus_cmd->add_option("--seed", mc_seed, "shuffling seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      RunConfig rc = preset_defaults(preset);
      if (!config_path.empty()) apply_config_file(rc, config_path);
      if (!model_spec.empty()) rc.model.attention = model_spec;
      if (steps) rc.train.steps = *steps;
      if (seed) rc.train.seed = *seed;
      if (batch) rc.train.batch = *batch;
      if (segment_size) rc.model.segment_size = *segment_size;
      if (!out_dir.empty()) rc.out_dir = out_dir;
      if (!corpus_path.empty()) rc.train.corpus_path = corpus_path;
      model::parse_attention_policy(rc.model.attention);  // validate early
      return cmd_train(std::move(rc));
    }
    if (eval_cmd->parsed()) {
      train::TrainConfig cfg;
      cfg.task = eval_task;
      cfg.seed = eval_seed;
      cfg.corpus_path = eval_corpus;
      if (eval_split != "eval")
        throw std::invalid_argument("only the held-out 'eval' split is supported");
      return cmd_eval(eval_model_path, cfg, eval_batches);
    }
    if (grad_cmd->parsed()) return cmd_gradcheck(scope, self_test_negative);
    if (mask_cmd->parsed())
      return cmd_maskdump(md_model, md_input, md_target, md_layer, md_head, md_site, md_out);
    if (corpus_cmd->parsed()) return cmd_make_corpus(mc_out, mc_bytes, mc_seed);
  } catch (const train::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const checkpoint::IoError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return kExitIo;
  } catch (const checkpoint::FormatError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}
