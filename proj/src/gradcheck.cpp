#include "diffwin/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "diffwin/attention.hpp"
#include "diffwin/model.hpp"
#include "diffwin/windowmask.hpp"

namespace diffwin {

double rel_err(double analytic, double numeric) {
  const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
  return std::fabs(analytic - numeric) / denom;
}

namespace {

double numeric_partial(const std::function<Tensor(Tape&)>& f, Tensor& param,
                       std::size_t index, double h) {
  auto& value = param.values();
  const double orig = value[index];
  value[index] = orig + h;
  Tape tp(true);
  const double fp = f(tp).item();
  value[index] = orig - h;
  Tape tm(true);
  const double fm = f(tm).item();
  value[index] = orig;
  return (fp - fm) / (2.0 * h);
}

}  // namespace

double grad_check_coords(const std::function<Tensor(Tape&)>& f,
                         const std::vector<Tensor>& params,
                         const std::vector<CoordRef>& coords, double step) {
  for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
    for (const auto& p : params) analytic.push_back(p.grad());
  }

  double worst = 0.0;
  for (const auto& c : coords) {
    const double numeric =
        numeric_partial(f, const_cast<Tensor&>(params[c.param]), c.index, step);
    worst = std::max(worst, rel_err(analytic[c.param][c.index], numeric));
  }
  for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
  return worst;
}

double grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& params,
                  double step) {
  std::vector<CoordRef> coords;
  for (int p = 0; p < static_cast<int>(params.size()); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) coords.push_back({p, i});
  return grad_check_coords(f, params, coords, step);
}

std::vector<CoordRef> sample_coords(const std::vector<Tensor>& params, double fraction,
                                    std::uint64_t seed) {
  Rng rng(mix_key(seed, 0x636f6f7264ULL));
  std::vector<CoordRef> coords;
  for (int p = 0; p < static_cast<int>(params.size()); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i)
      if (rng.next_double() < fraction) coords.push_back({p, i});
  if (coords.empty() && !params.empty()) coords.push_back({0, 0});
  return coords;
}

// ---------------------------------------------------------------------------
// Standard units

namespace {

using attention::Masking;
using attention::Site;
using attention::Variant;

Tensor rand_t(Rng& rng, Shape shape, bool rg = true) {
  return Tensor::uniform(std::move(shape), -1.0, 1.0, rng, rg);
}

// Values bounded away from zero so relu's kink never meets the difference step.
Tensor rand_away_from_zero(Rng& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.values()) {
    const double mag = 0.2 + 0.8 * rng.next_double();
    v = (rng.next_u64() & 1) ? mag : -mag;
  }
  return t;
}

// loss = sum(out .* w): turns any op output into a scalar with dense
// sensitivity to every element.
Tensor pin(Tape& t, const Tensor& out, const Tensor& w) { return t.sum(t.mul(out, w)); }

GradCheckUnit op_unit(const std::string& name, std::function<double()> run) {
  return {name, "ops", 1e-6, std::move(run)};
}

GradCheckUnit attn_unit(const std::string& name, std::function<double()> run) {
  return {name, "attention", 1e-6, std::move(run)};
}

std::vector<GradCheckUnit> op_units() {
  std::vector<GradCheckUnit> units;

  units.push_back(op_unit("matmul", [] {
    Rng rng(101);
    Tensor a = rand_t(rng, {3, 4}), b = rand_t(rng, {4, 2}), w = rand_t(rng, {3, 2}, false);
    return grad_check([&](Tape& t) { return pin(t, t.matmul(a, b), w); }, {a, b});
  }));
  units.push_back(op_unit("transpose", [] {
    Rng rng(102);
    Tensor a = rand_t(rng, {3, 4}), w = rand_t(rng, {4, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.transpose(a), w); }, {a});
  }));
  units.push_back(op_unit("softmax_rows", [] {
    Rng rng(103);
    Tensor a = rand_t(rng, {2, 5}), w = rand_t(rng, {2, 5}, false);
    return grad_check([&](Tape& t) { return pin(t, t.softmax_rows(a), w); }, {a});
  }));
  units.push_back(op_unit("add", [] {
    Rng rng(104);
    Tensor a = rand_t(rng, {2, 3}), b = rand_t(rng, {2, 3}), w = rand_t(rng, {2, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.add(a, b), w); }, {a, b});
  }));
  units.push_back(op_unit("add_row_broadcast", [] {
    Rng rng(105);
    Tensor a = rand_t(rng, {3, 4}), b = rand_t(rng, {1, 4}), w = rand_t(rng, {3, 4}, false);
    return grad_check([&](Tape& t) { return pin(t, t.add(a, b), w); }, {a, b});
  }));
  units.push_back(op_unit("mul", [] {
    Rng rng(106);
    Tensor a = rand_t(rng, {2, 3}), b = rand_t(rng, {2, 3}), w = rand_t(rng, {2, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.mul(a, b), w); }, {a, b});
  }));
  units.push_back(op_unit("mul_row_broadcast", [] {
    Rng rng(107);
    Tensor a = rand_t(rng, {3, 4}), b = rand_t(rng, {1, 4}), w = rand_t(rng, {3, 4}, false);
    return grad_check([&](Tape& t) { return pin(t, t.mul(a, b), w); }, {a, b});
  }));
  units.push_back(op_unit("mul_scalar_broadcast", [] {
    Rng rng(108);
    Tensor a = rand_t(rng, {2, 3}), b = rand_t(rng, {1}), w = rand_t(rng, {2, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.mul(a, b), w); }, {a, b});
  }));
  units.push_back(op_unit("scale", [] {
    Rng rng(109);
    Tensor a = rand_t(rng, {2, 4}), w = rand_t(rng, {2, 4}, false);
    return grad_check([&](Tape& t) { return pin(t, t.scale(a, -1.7), w); }, {a});
  }));
  units.push_back(op_unit("relu", [] {
    Rng rng(110);
    Tensor a = rand_away_from_zero(rng, {3, 4}), w = rand_t(rng, {3, 4}, false);
    return grad_check([&](Tape& t) { return pin(t, t.relu(a), w); }, {a});
  }));
  units.push_back(op_unit("layer_norm", [] {
    Rng rng(111);
    Tensor a = rand_t(rng, {3, 4}), g = rand_t(rng, {4}), b = rand_t(rng, {4});
    Tensor w = rand_t(rng, {3, 4}, false);
    return grad_check([&](Tape& t) { return pin(t, t.layer_norm(a, g, b), w); }, {a, g, b});
  }));
  units.push_back(op_unit("embedding_lookup", [] {
    Rng rng(112);
    Tensor table = rand_t(rng, {5, 3});
    const std::vector<int> ids{0, 2, 2, 4, 1};
    Tensor w = rand_t(rng, {5, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.embedding_lookup(table, ids), w); },
                      {table});
  }));
  units.push_back(op_unit("cross_entropy", [] {
    Rng rng(113);
    Tensor logits = rand_t(rng, {4, 5});
    const std::vector<int> targets{1, -1, 0, 3};
    return grad_check([&](Tape& t) { return t.cross_entropy(logits, targets, -1); }, {logits});
  }));
  units.push_back(op_unit("concat_rows", [] {
    Rng rng(114);
    Tensor a = rand_t(rng, {2, 3}), b = rand_t(rng, {1, 3}), w = rand_t(rng, {3, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.concat_rows({a, b}), w); }, {a, b});
  }));
  units.push_back(op_unit("slice_rows", [] {
    Rng rng(115);
    Tensor a = rand_t(rng, {4, 3}), w = rand_t(rng, {2, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.slice_rows(a, 1, 2), w); }, {a});
  }));
  units.push_back(op_unit("concat_cols", [] {
    Rng rng(116);
    Tensor a = rand_t(rng, {3, 2}), b = rand_t(rng, {3, 1}), w = rand_t(rng, {3, 3}, false);
    return grad_check([&](Tape& t) { return pin(t, t.concat_cols({a, b}), w); }, {a, b});
  }));
  units.push_back(op_unit("slice_cols", [] {
    Rng rng(117);
    Tensor a = rand_t(rng, {3, 4}), w = rand_t(rng, {3, 2}, false);
    return grad_check([&](Tape& t) { return pin(t, t.slice_cols(a, 1, 2), w); }, {a});
  }));
  units.push_back(op_unit("prefix_sum_rows", [] {
    Rng rng(118);
    Tensor a = rand_t(rng, {2, 6}), w = rand_t(rng, {2, 6}, false);
    return grad_check([&](Tape& t) { return pin(t, t.prefix_sum_rows(a), w); }, {a});
  }));
  units.push_back(op_unit("suffix_sum_rows", [] {
    Rng rng(119);
    Tensor a = rand_t(rng, {2, 6}), w = rand_t(rng, {2, 6}, false);
    return grad_check([&](Tape& t) { return pin(t, t.suffix_sum_rows(a), w); }, {a});
  }));
  units.push_back(op_unit("gather_cols", [] {
    Rng rng(120);
    Tensor a = rand_t(rng, {2, 5}), w = rand_t(rng, {2, 6}, false);
    const std::vector<int> idx{4, 0, 0, 2, 3, 4};
    return grad_check([&](Tape& t) { return pin(t, t.gather_cols(a, idx), w); }, {a});
  }));
  units.push_back(op_unit("add_where", [] {
    Rng rng(121);
    Tensor a = rand_t(rng, {2, 3}), w = rand_t(rng, {2, 3}, false);
    const std::vector<std::uint8_t> mask{1, 0, 1, 0, 0, 1};
    return grad_check([&](Tape& t) { return pin(t, t.add_where(a, mask, 0.75), w); }, {a});
  }));
  units.push_back(op_unit("dropout", [] {
    Rng rng(122);
    Tensor a = rand_t(rng, {3, 4}), w = rand_t(rng, {3, 4}, false);
    return grad_check(
        [&](Tape& t) {
          Rng mask_rng(99);  // same mask on every evaluation
          return pin(t, t.dropout(a, 0.4, mask_rng), w);
        },
        {a});
  }));
  units.push_back(op_unit("sum", [] {
    Rng rng(123);
    Tensor a = rand_t(rng, {2, 3});
    return grad_check([&](Tape& t) { return t.scale(t.sum(t.mul(a, a)), 0.5); }, {a});
  }));
  return units;
}

std::vector<GradCheckUnit> attention_units() {
  std::vector<GradCheckUnit> units;

  units.push_back(attn_unit("boundary_scores", [] {
    Rng rng(201);
    Tensor Q = rand_t(rng, {3, 4}), K = rand_t(rng, {5, 4});
    Tensor wlq = rand_t(rng, {4, 4}), wlk = rand_t(rng, {4, 4});
    Tensor wrq = rand_t(rng, {4, 4}), wrk = rand_t(rng, {4, 4});
    Tensor w = rand_t(rng, {3, 5}, false);
    return grad_check(
        [&](Tape& t) {
          auto bs = windowmask::boundary_scores(t, Q, K, wlq, wlk, wrq, wrk);
          return t.add(pin(t, bs.phi_left, w), pin(t, bs.phi_right, w));
        },
        {Q, K, wlq, wlk, wrq, wrk});
  }));
  units.push_back(attn_unit("soft_mask", [] {
    Rng rng(202);
    Tensor Q = rand_t(rng, {2, 4}), K = rand_t(rng, {6, 4});
    Tensor wlq = rand_t(rng, {4, 4}), wlk = rand_t(rng, {4, 4});
    Tensor wrq = rand_t(rng, {4, 4}), wrk = rand_t(rng, {4, 4});
    Tensor w = rand_t(rng, {2, 6}, false);
    return grad_check(
        [&](Tape& t) {
          auto bs = windowmask::boundary_scores(t, Q, K, wlq, wlk, wrq, wrk);
          return pin(t, windowmask::soft_mask(t, bs).values, w);
        },
        {Q, K, wlq, wlk, wrq, wrk});
  }));
  units.push_back(attn_unit("segment_soft_mask", [] {
    Rng rng(203);
    Tensor Q = rand_t(rng, {2, 4}), K = rand_t(rng, {5, 4});
    Tensor wlq = rand_t(rng, {4, 4}), wlk = rand_t(rng, {4, 4});
    Tensor wrq = rand_t(rng, {4, 4}), wrk = rand_t(rng, {4, 4});
    Tensor w = rand_t(rng, {2, 5}, false);
    return grad_check(
        [&](Tape& t) {
          auto bs = windowmask::boundary_scores(t, Q, K, wlq, wlk, wrq, wrk);
          return pin(t, windowmask::segment_soft_mask(t, bs, 2).values, w);
        },
        {Q, K, wlq, wlk, wrq, wrk});
  }));

  const auto param_list = [](const attention::AttentionParams& p, Variant v,
                             std::vector<Tensor> out) {
    for (auto& [name, t] : attention::named_params(p, v, "")) out.push_back(t);
    return out;
  };

  units.push_back(attn_unit("global_attention", [param_list] {
    Rng rng(204);
    auto p = attention::make_attention_params(4, 1, Variant::global, rng);
    Tensor Q = rand_t(rng, {3, 4}), K = rand_t(rng, {5, 4}), V = rand_t(rng, {5, 4});
    Tensor w = rand_t(rng, {3, 4}, false);
    return grad_check(
        [&](Tape& t) { return pin(t, attention::global_attention(t, Q, K, V, p, false), w); },
        param_list(p, Variant::global, {Q, K, V}));
  }));
  units.push_back(attn_unit("global_attention_causal", [param_list] {
    Rng rng(205);
    auto p = attention::make_attention_params(4, 1, Variant::global, rng);
    Tensor Q = rand_t(rng, {4, 4}), K = rand_t(rng, {4, 4}), V = rand_t(rng, {4, 4});
    Tensor w = rand_t(rng, {4, 4}, false);
    return grad_check(
        [&](Tape& t) { return pin(t, attention::global_attention(t, Q, K, V, p, true), w); },
        param_list(p, Variant::global, {Q, K, V}));
  }));
  units.push_back(attn_unit("multiplicative_window_attention", [param_list] {
    Rng rng(206);
    auto p = attention::make_attention_params(4, 1, Variant::multiplicative_window, rng);
    Tensor Q = rand_t(rng, {3, 4}), K = rand_t(rng, {5, 4}), V = rand_t(rng, {5, 4});
    Tensor w = rand_t(rng, {3, 4}, false);
    return grad_check(
        [&](Tape& t) {
          auto bs = windowmask::boundary_scores(t, Q, K, p.Wlq, p.Wlk, p.Wrq, p.Wrk);
          auto M = windowmask::soft_mask(t, bs);
          return pin(t, attention::multiplicative_window_attention(t, Q, K, V, p, M, false), w);
        },
        param_list(p, Variant::multiplicative_window, {Q, K, V}));
  }));
  units.push_back(attn_unit("additive_window_attention", [param_list] {
    Rng rng(207);
    auto p = attention::make_attention_params(4, 1, Variant::additive_window, rng);
    Tensor Q = rand_t(rng, {3, 4}), K = rand_t(rng, {5, 4}), V = rand_t(rng, {5, 4});
    Tensor w = rand_t(rng, {3, 4}, false);
    return grad_check(
        [&](Tape& t) {
          auto bs = windowmask::boundary_scores(t, Q, K, p.Wlq, p.Wlk, p.Wrq, p.Wrk);
          auto M = windowmask::soft_mask(t, bs);
          return pin(t, attention::additive_window_attention(t, Q, K, V, p, M, false), w);
        },
        param_list(p, Variant::additive_window, {Q, K, V}));
  }));
  units.push_back(attn_unit("multi_head_mw_causal", [] {
    Rng rng(208);
    auto p = attention::make_attention_params(8, 2, Variant::multiplicative_window, rng);
    Tensor Q = rand_t(rng, {4, 8}), K = Q, V = Q;
    Tensor w = rand_t(rng, {4, 8}, false);
    attention::SiteSpec spec{Site::decoder_self, Variant::multiplicative_window,
                             Masking::token, 1};
    std::vector<Tensor> params{Q};
    for (auto& [name, t] :
         attention::named_params(p, Variant::multiplicative_window, ""))
      params.push_back(t);
    return grad_check(
        [&](Tape& t) { return pin(t, attention::multi_head(t, Q, Q, Q, p, spec, true), w); },
        params);
  }));
  units.push_back(attn_unit("multi_head_aw_segment", [] {
    Rng rng(209);
    auto p = attention::make_attention_params(8, 2, Variant::additive_window, rng);
    Tensor Q = rand_t(rng, {3, 8}), K = rand_t(rng, {5, 8}), V = rand_t(rng, {5, 8});
    Tensor w = rand_t(rng, {3, 8}, false);
    attention::SiteSpec spec{Site::cross, Variant::additive_window, Masking::segment, 2};
    std::vector<Tensor> params{Q, K, V};
    for (auto& [name, t] : attention::named_params(p, Variant::additive_window, ""))
      params.push_back(t);
    return grad_check(
        [&](Tape& t) { return pin(t, attention::multi_head(t, Q, K, V, p, spec, false), w); },
        params);
  }));
  return units;
}

std::vector<GradCheckUnit> model_units() {
  std::vector<GradCheckUnit> units;

  units.push_back({"model_classifier_enc_aw", "model", 1e-5, [] {
    model::ModelConfig cfg;
    cfg.kind = "classifier";
    cfg.vocab_size = 8;
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.encoder_layers = 1;
    cfg.num_classes = 2;
    cfg.attention = "Enc(AW)";
    model::Model m = model::build(cfg, 11);
    const model::Packed src = model::pack({{3, 5, 2, 7, 1}});
    auto params = m.params();
    auto f = [&](Tape& t) {
      return t.cross_entropy(model::classifier_logits(t, m, src), {1}, -1);
    };
    return grad_check_coords(f, params, sample_coords(params, 0.3, 5), 1e-5);
  }});

  // Full tiny encoder-decoder with every windowed path active, sampled at 1%.
  units.push_back({"model_seq2seq_tiny_full", "model", 1e-5, [] {
    model::ModelConfig cfg;
    cfg.kind = "seq2seq";
    cfg.vocab_size = 12;
    cfg.d_model = 128;
    cfg.heads = 4;
    cfg.ffn_dim = 512;
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    cfg.attention = "Enc(AW)-Cr(AW,Seg)-Dec(MW)";
    model::Model m = model::build(cfg, 12);
    const model::Packed src = model::pack({{3, 7, 4, 9, 5, 6}});
    const model::Packed tgt_in = model::pack({{1, 3, 7, 4, 9, 5, 6}});
    const std::vector<int> targets{3, 7, 4, 9, 5, 6, 2};
    auto params = m.params();
    auto f = [&](Tape& t) {
      return t.cross_entropy(model::seq2seq_logits(t, m, src, tgt_in), targets, -1);
    };
    return grad_check_coords(f, params, sample_coords(params, 0.01, 6), 1e-5);
  }});
  return units;
}

GradCheckUnit negative_control_unit() {
  // Stands in for a broken backward rule: the analytic gradient of
  // sum(x .* x) / 2 is x; corrupt one entry and the comparison must blow up.
  return {"negative_control_sign_flip", "ops", 1e-6, [] {
    Rng rng(7);
    Tensor x = rand_t(rng, {3, 3});
    auto f = [&](Tape& t) { return t.scale(t.sum(t.mul(x, x)), 0.5); };
    {
      Tape tape;
      Tensor loss = f(tape);
      tape.backward(loss);
    }
    std::vector<double> analytic = x.grad();
    x.zero_grad();
    analytic[4] += 0.5;
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i)
      worst = std::max(worst, rel_err(analytic[i], numeric_partial(f, x, i, 1e-5)));
    return worst;
  }};
}

}  // namespace

std::vector<GradCheckUnit> standard_gradcheck_units(bool include_negative_control) {
  std::vector<GradCheckUnit> units = op_units();
  for (auto& u : attention_units()) units.push_back(std::move(u));
  for (auto& u : model_units()) units.push_back(std::move(u));
  if (include_negative_control) units.push_back(negative_control_unit());
  return units;
}

}  // namespace diffwin
