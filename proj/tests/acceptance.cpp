// Acceptance suite: one pass/fail line per criterion. Run with no arguments
// for the full suite or with criterion numbers to run a subset, e.g.
// `acceptance 1 2 3`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "diffwin/attention.hpp"
#include "diffwin/gradcheck.hpp"
#include "diffwin/model.hpp"
#include "diffwin/train.hpp"
#include "diffwin/windowmask.hpp"
#include "support/oracles.hpp"

using namespace diffwin;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor distribution_row(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor::from_data({1, n}, std::move(v));
}

windowmask::BoundaryScores fixed_scores(std::vector<double> l, std::vector<double> r) {
  return {distribution_row(std::move(l)), distribution_row(std::move(r))};
}

fs::path run_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "diffwin_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

std::string strip_wall_ms(const std::string& text) {
  return std::regex_replace(text, std::regex("\"wall_ms\":[0-9]+"), "\"wall_ms\":_");
}

// --------------------------------------------------------------------------
// 1. Oracle equivalence: soft_mask == expectation oracle within 1e-12 over
//    100 random draws for each n in 1..16; runtime under 10 s.
Outcome criterion1() {
  const auto t0 = Clock::now();
  Rng rng(1001);
  double worst = 0.0;
  for (int n = 1; n <= 16; ++n) {
    for (int rep = 0; rep < 100; ++rep) {
      const auto pl = oracles::random_distribution(rng, n);
      const auto pr = oracles::random_distribution(rng, n);
      Tape tape;
      const auto m = windowmask::soft_mask(tape, fixed_scores(pl, pr));
      const auto expected = oracles::expectation_mask(pl, pr, n);
      for (int j = 0; j < n; ++j)
        worst = std::max(worst, std::fabs(m.values.values()[j] - expected[j]));
    }
  }
  const double secs = seconds_since(t0);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "max |soft - oracle| = %.3e (<= 1e-12), %.1f s (< 10 s)",
                worst, secs);
  return {worst <= 1e-12 && secs < 10.0, buf};
}

// --------------------------------------------------------------------------
// 2. Discrete consistency: one-hot boundaries with l < r match discrete_mask
//    exactly for n <= 12, and the n=10, l=3, r=8 case gives the known vector.
Outcome criterion2() {
  for (int n = 1; n <= 12; ++n)
    for (int l = 1; l <= n; ++l)
      for (int r = l + 1; r <= n; ++r) {
        std::vector<double> pl(n, 0.0), pr(n, 0.0);
        pl[l - 1] = 1.0;
        pr[r - 1] = 1.0;
        Tape tape;
        const auto m = windowmask::soft_mask(tape, fixed_scores(pl, pr));
        if (m.values.values() != windowmask::discrete_mask(l, r, n))
          return {false, "soft/discrete mismatch at n=" + std::to_string(n) + " l=" +
                             std::to_string(l) + " r=" + std::to_string(r)};
      }
  const std::vector<double> fig{0, 0, 1, 1, 1, 1, 1, 1, 0, 0};
  if (windowmask::discrete_mask(3, 8, 10) != fig)
    return {false, "n=10, l=3, r=8 does not give (0,0,1,1,1,1,1,1,0,0)"};
  return {true, "all (l < r, n <= 12) pairs exact; n=10 l=3 r=8 case verified"};
}

// --------------------------------------------------------------------------
// 3. Segment constancy and degeneracy for b in {1,2,3,5}, n in 1..16; b=1
//    equals the token mask exactly; b=2 cumulative-sum identities to 1e-12.
Outcome criterion3() {
  Rng rng(1003);
  for (int n = 1; n <= 16; ++n)
    for (int b : {1, 2, 3, 5}) {
      if (b > n) continue;
      const auto pl = oracles::random_distribution(rng, n);
      const auto pr = oracles::random_distribution(rng, n);
      Tape tape;
      const auto seg = windowmask::segment_soft_mask(tape, fixed_scores(pl, pr), b);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (i / b == j / b && seg.values.values()[i] != seg.values.values()[j])
            return {false, "segment values differ within a segment at n=" +
                               std::to_string(n) + " b=" + std::to_string(b)};
      if (b == 1) {
        const auto token = windowmask::soft_mask(tape, fixed_scores(pl, pr));
        if (seg.values.values() != token.values.values())
          return {false, "b=1 does not equal the token mask at n=" + std::to_string(n)};
      }
    }

  // phi^T J and phi^T J^T identities for b=2 on random vectors.
  double worst = 0.0;
  for (int n : {4, 6, 7, 12, 16}) {
    const auto a = oracles::random_distribution(rng, n);
    Tape tape;
    Tensor phi = distribution_row(a);
    const auto& s = windowmask::build_structure(n, 2);
    Tensor J = Tensor::from_data({n, n}, s.J);
    Tensor viaJ = tape.matmul(phi, J);
    Tensor viaJt = tape.matmul(phi, tape.transpose(J));
    for (int j = 1; j <= n; ++j) {
      const int seg_end = std::min(2 * ((j + 1) / 2), n);
      double prefix = 0.0;
      for (int i = 1; i <= seg_end; ++i) prefix += a[i - 1];
      const int seg_start = 2 * ((j - 1) / 2) + 1;
      double suffix = 0.0;
      for (int i = seg_start; i <= n; ++i) suffix += a[i - 1];
      worst = std::max(worst, std::fabs(viaJ.at(0, j - 1) - prefix));
      worst = std::max(worst, std::fabs(viaJt.at(0, j - 1) - suffix));
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "constancy and b=1 degeneracy hold; b=2 identities off by %.3e (<= 1e-12)",
                worst);
  return {worst <= 1e-12, buf};
}

// --------------------------------------------------------------------------
// 4. Gradient suite: every unit at its threshold, under 5 minutes.
Outcome criterion4() {
  const auto t0 = Clock::now();
  std::string failures;
  double worst_ops = 0.0, worst_model = 0.0;
  for (const auto& unit : standard_gradcheck_units()) {
    const double err = unit.run();
    if (unit.scope == "model")
      worst_model = std::max(worst_model, err);
    else
      worst_ops = std::max(worst_ops, err);
    if (err > unit.threshold) failures += " " + unit.name;
  }
  const double secs = seconds_since(t0);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "worst ops/attention %.2e (<= 1e-6), worst model %.2e (<= 1e-5), %.0f s (< "
                "300 s)%s%s",
                worst_ops, worst_model, secs, failures.empty() ? "" : "; failing:",
                failures.c_str());
  return {failures.empty() && secs < 300.0, buf};
}

// --------------------------------------------------------------------------
// 5. Reductions: M==1 makes MW equal global exactly; M==0 makes AW equal
//    global under the glb weights; AW rows sum to 1 within 1e-9.
Outcome criterion5() {
  Rng rng(1005);
  const int d = 8, m = 5, n = 6;
  auto mw = attention::make_attention_params(d, 1, attention::Variant::multiplicative_window,
                                             rng);
  Tensor Q = Tensor::uniform({m, d}, -1, 1, rng);
  Tensor K = Tensor::uniform({n, d}, -1, 1, rng);
  Tensor V = Tensor::uniform({n, d}, -1, 1, rng);
  Tape tape;
  windowmask::MaskMatrix ones{Tensor::constant({m, n}, 1.0), windowmask::MaskMode::soft_token,
                              1};
  windowmask::MaskMatrix zeros{Tensor::constant({m, n}, 0.0),
                               windowmask::MaskMode::soft_token, 1};
  Tensor mw_out = attention::multiplicative_window_attention(tape, Q, K, V, mw, ones, false);
  Tensor glb_out = attention::global_attention(tape, Q, K, V, mw, false);
  if (mw_out.values() != glb_out.values()) return {false, "MW with M==1 differs from global"};

  auto aw = attention::make_attention_params(d, 1, attention::Variant::additive_window, rng);
  attention::AttentionParams glb;
  glb.heads = 1;
  glb.Wq = aw.Wq_glb;
  glb.Wk = aw.Wk_glb;
  glb.Wv = aw.Wv;
  Tensor aw_out = attention::additive_window_attention(tape, Q, K, V, aw, zeros, false);
  Tensor glb2 = attention::global_attention(tape, Q, K, V, glb, false);
  if (aw_out.values() != glb2.values())
    return {false, "AW with M==0 differs from global under glb weights"};

  // AW weight normalization through the multi-head path
  auto aw2 = attention::make_attention_params(8, 2, attention::Variant::additive_window, rng);
  attention::SiteSpec spec{attention::Site::cross, attention::Variant::additive_window,
                           attention::Masking::token, 1};
  std::vector<attention::HeadTrace> trace;
  attention::multi_head(tape, Q, K, V, aw2, spec, false, nullptr, &trace);
  double worst = 0.0;
  for (const auto& h : trace)
    for (int i = 0; i < h.m; ++i) {
      double sum = 0.0;
      for (int j = 0; j < h.n; ++j) sum += h.final_weights[i * h.n + j];
      worst = std::max(worst, std::fabs(sum - 1.0));
    }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "MW and AW reductions exact; AW row sums off by %.2e (<= 1e-9)", worst);
  return {worst <= 1e-9, buf};
}

// --------------------------------------------------------------------------
// 6. Causality: 50 random trials per decoder-self variant; outputs at
//    positions <= t are bit-invariant to perturbations after t.
Outcome criterion6() {
  Rng rng(1006);
  const int d = 8, n = 7;
  for (auto variant : {attention::Variant::global, attention::Variant::multiplicative_window,
                       attention::Variant::additive_window}) {
    auto p = attention::make_attention_params(d, 2, variant, rng);
    attention::SiteSpec spec{attention::Site::decoder_self, variant,
                             attention::Masking::token, 1};
    for (int trial = 0; trial < 50; ++trial) {
      const int cut = 1 + static_cast<int>(rng.next_below(n - 1));
      Tensor X = Tensor::uniform({n, d}, -1, 1, rng);
      Tape tape;
      Tensor out1 = attention::multi_head(tape, X, X, X, p, spec, true);
      Tensor X2 = X.clone_values();
      for (int i = cut; i < n; ++i)
        for (int j = 0; j < d; ++j) X2.values()[i * d + j] = rng.uniform(-3, 3);
      Tensor out2 = attention::multi_head(tape, X2, X2, X2, p, spec, true);
      for (int i = 0; i < cut; ++i)
        for (int j = 0; j < d; ++j)
          if (std::memcmp(&out1.values()[i * d + j], &out2.values()[i * d + j],
                          sizeof(double)) != 0)
            return {false, attention::variant_name(variant) +
                               " leaked future information at trial " +
                               std::to_string(trial)};
    }
  }
  return {true, "50 trials per variant (global, MW, AW), bit-exact prefixes"};
}

// --------------------------------------------------------------------------
// 7. Length invariance: one boundary parameter set runs at n=8 and n=64; the
//    masks at both lengths satisfy the oracle, constancy and degeneracy
//    checks of criteria 1-3.
Outcome criterion7() {
  Rng rng(1007);
  const int d = 16;
  Tensor Wlq = Tensor::uniform({d, d}, -0.5, 0.5, rng);
  Tensor Wlk = Tensor::uniform({d, d}, -0.5, 0.5, rng);
  Tensor Wrq = Tensor::uniform({d, d}, -0.5, 0.5, rng);
  Tensor Wrk = Tensor::uniform({d, d}, -0.5, 0.5, rng);
  auto p = attention::make_attention_params(d, 2, attention::Variant::additive_window, rng);

  for (int n : {8, 64}) {
    Tensor Q = Tensor::uniform({n, d}, -1, 1, rng);
    Tensor K = Tensor::uniform({n, d}, -1, 1, rng);
    Tape tape;
    const auto bs = windowmask::boundary_scores(tape, Q, K, Wlq, Wlk, Wrq, Wrk);
    const auto mask = windowmask::soft_mask(tape, bs);
    if (mask.values.shape() != Shape{n, n})
      return {false, "unexpected mask shape at n=" + std::to_string(n)};

    // oracle equivalence on the model-produced distributions
    for (int i = 0; i < n; ++i) {
      std::vector<double> pl(n), pr(n);
      for (int j = 0; j < n; ++j) {
        pl[j] = bs.phi_left.at(i, j);
        pr[j] = bs.phi_right.at(i, j);
      }
      const auto expected = oracles::expectation_mask(pl, pr, n);
      for (int j = 0; j < n; ++j)
        if (std::fabs(mask.values.at(i, j) - expected[j]) > 1e-12)
          return {false, "oracle mismatch at n=" + std::to_string(n)};
    }

    // segment constancy and b=1 degeneracy at this length
    for (int b : {1, 2, 3, 5}) {
      const auto seg = windowmask::segment_soft_mask(tape, bs, b);
      for (int i = 0; i < n; ++i)
        for (int j1 = 0; j1 < n; ++j1)
          for (int j2 = j1 + 1; j2 < n && j1 / b == j2 / b; ++j2)
            if (seg.values.at(i, j1) != seg.values.at(i, j2))
              return {false, "segment constancy failed at n=" + std::to_string(n)};
      if (b == 1 && seg.values.values() != mask.values.values())
        return {false, "b=1 degeneracy failed at n=" + std::to_string(n)};
    }

    // the same attention parameters also run at both lengths
    attention::SiteSpec spec{attention::Site::cross, attention::Variant::additive_window,
                             attention::Masking::segment, 5};
    Tensor out = attention::multi_head(tape, Q, K, K, p, spec, false);
    if (out.shape() != Shape{n, d})
      return {false, "attention shape changed at n=" + std::to_string(n)};
  }
  return {true, "same parameters at n=8 and n=64; masks pass oracle/constancy/degeneracy"};
}

// --------------------------------------------------------------------------
// Desk-scale training helpers

// Seed-1 metrics logs from criteria 8-10, reused by the determinism check.
std::map<std::string, std::string>& seed1_logs() {
  static std::map<std::string, std::string> logs;
  return logs;
}

train::TrainResult run_training(const std::string& preset_name, const std::string& attention,
                                std::uint64_t seed, const std::string& dir_name) {
  train::Preset p = train::preset(preset_name);
  p.train.seed = seed;
  p.model.attention = attention;
  const train::TaskInfo info = train::task_info(p.train);
  p.model.kind = info.model_kind;
  p.model.vocab_size = info.vocab_size;
  if (info.num_classes > 0) p.model.num_classes = info.num_classes;
  model::Model m = model::build(p.model, seed);
  train::TrainResult res = train::train_loop(m, p.train, run_dir(dir_name).string());
  if (seed == 1) seed1_logs()[preset_name + "/" + attention] = res.metrics_path;
  return res;
}

// 8. Copy task: Cr(AW,Seg)-Dec(MW) reaches 99% held-out token accuracy for
//    three seeds within the step budget, all inside 30 minutes.
Outcome criterion8() {
  const auto t0 = Clock::now();
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto res = run_training("copy-tiny", "Cr(AW,Seg)-Dec(MW)", seed,
                                  "copy_seed" + std::to_string(seed));
    const double acc = res.final_metrics.at("token_accuracy");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "seed %llu: %.4f ",
                  static_cast<unsigned long long>(seed), acc);
    detail += buf;
    pass = pass && acc >= 0.99;
  }
  const double secs = seconds_since(t0);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "(>= 0.99 each, %d steps, %.0f s < 1800 s)",
                train::preset("copy-tiny").train.steps, secs);
  return {pass && secs < 1800.0, detail + buf};
}

// 9. Toy SVA: Enc(AW) reaches 97% at distractor depth 2; the global baseline
//    is reported alongside (not gated).
Outcome criterion9() {
  const auto aw = run_training("sva-tiny", "Enc(AW)", 1, "sva_aw");
  const double acc_aw = aw.final_metrics.at("accuracy");
  const auto glb = run_training("sva-tiny", "global", 1, "sva_global");
  const double acc_glb = glb.final_metrics.at("accuracy");
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "Enc(AW) accuracy %.4f (>= 0.97); global baseline %.4f (reported, not gated)",
                acc_aw, acc_glb);
  return {acc_aw >= 0.97, buf};
}

// 10. Character LM: Dec(MW) beats the train-split unigram baseline on
//     held-out perplexity within the step budget on a >= 1 MB corpus.
Outcome criterion10() {
  const auto res = run_training("charlm-tiny", "Dec(MW)", 1, "charlm");
  const double ppl = res.final_metrics.at("perplexity");
  const double baseline = res.final_metrics.at("unigram_baseline_perplexity");
  char buf[160];
  std::snprintf(buf, sizeof(buf), "model perplexity %.3f vs unigram baseline %.3f", ppl,
                baseline);
  return {ppl < baseline, buf};
}

// 11. Determinism: rerunning one seed of each training criterion reproduces
//     the metrics log byte for byte (wall-clock fields excluded).
Outcome criterion11() {
  struct Case {
    const char* preset;
    const char* attention;
    const char* name;
  };
  const Case cases[] = {{"copy-tiny", "Cr(AW,Seg)-Dec(MW)", "copy"},
                        {"sva-tiny", "Enc(AW)", "sva"},
                        {"charlm-tiny", "Dec(MW)", "charlm"}};
  for (const auto& c : cases) {
    // first seed-1 log: reuse the run from criteria 8-10 when available
    const std::string key = std::string(c.preset) + "/" + c.attention;
    std::string first_log;
    if (auto it = seed1_logs().find(key); it != seed1_logs().end()) {
      first_log = it->second;
    } else {
      first_log =
          run_training(c.preset, c.attention, 1, std::string(c.name) + "_rerun_a").metrics_path;
    }
    const auto b = run_training(c.preset, c.attention, 1, std::string(c.name) + "_rerun_b");
    const std::string la = strip_wall_ms(read_file(first_log));
    const std::string lb = strip_wall_ms(read_file(b.metrics_path));
    if (la.empty() || la != lb)
      return {false, std::string(c.name) + " logs differ between reruns"};
  }
  return {true, "copy, sva and charlm logs identical across reruns (wall_ms excluded)"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  struct Criterion {
    int number;
    const char* title;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "oracle equivalence of the soft mask", criterion1},
      {2, "discrete consistency of one-hot boundaries", criterion2},
      {3, "segment constancy and degeneracy", criterion3},
      {4, "gradient suite", criterion4},
      {5, "attention reductions", criterion5},
      {6, "decoder-self causality", criterion6},
      {7, "length invariance", criterion7},
      {8, "copy task at 99% over three seeds", criterion8},
      {9, "toy subject-verb agreement at 97%", criterion9},
      {10, "character LM beats the unigram baseline", criterion10},
      {11, "training determinism", criterion11},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.number)) continue;
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %2d %-4s %s: %s\n", c.number, outcome.pass ? "PASS" : "FAIL",
                c.title, outcome.detail.c_str());
    std::fflush(stdout);
    if (!outcome.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
