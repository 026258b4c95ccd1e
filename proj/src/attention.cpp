#include "diffwin/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "diffwin/kernels.hpp"

namespace diffwin::attention {

namespace {

constexpr double kMaskedScore = -1e9;

// Combined causal / key-padding byte mask for one (q_len x k_len) block;
// empty when nothing is masked.
std::vector<std::uint8_t> score_mask_bytes(int q_len, int k_len, bool causal, int valid_keys) {
  if (!causal && valid_keys >= k_len) return {};
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(q_len) * k_len, 0);
  for (int i = 0; i < q_len; ++i)
    for (int j = 0; j < k_len; ++j)
      if ((causal && j > i) || j >= valid_keys)
        bytes[static_cast<std::size_t>(i) * k_len + j] = 1;
  return bytes;
}

std::vector<int> identity_bounds(int n) {
  std::vector<int> idx(n);
  for (int j = 0; j < n; ++j) idx[j] = j;
  return idx;
}

void segment_bounds(int n, int b, std::vector<int>& start, std::vector<int>& end) {
  start.resize(n);
  end.resize(n);
  for (int j = 0; j < n; ++j) {
    const int seg = j / b;
    start[j] = seg * b;
    end[j] = std::min((seg + 1) * b, n) - 1;
  }
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::global: return "global";
    case Variant::multiplicative_window: return "multiplicative_window";
    case Variant::additive_window: return "additive_window";
  }
  return "?";
}

void validate_site_spec(const SiteSpec& spec) {
  if (spec.site == Site::decoder_self && spec.variant != Variant::global &&
      spec.masking == Masking::segment)
    throw std::invalid_argument(
        "site spec: segment masking is not allowed on decoder self-attention "
        "(segments are unfinished during autoregressive generation)");
  if (spec.masking == Masking::segment && spec.segment_size < 1)
    throw std::invalid_argument("site spec: segment size must be >= 1");
}

AttentionParams make_attention_params(int d, int heads, Variant variant, Rng& rng) {
  if (heads < 1 || d % heads != 0)
    throw std::invalid_argument("attention params: head count must divide d");
  const double r = 1.0 / std::sqrt(static_cast<double>(d));
  auto mat = [&] { return Tensor::uniform({d, d}, -r, r, rng, true); };

  AttentionParams p;
  p.heads = heads;
  if (variant == Variant::additive_window) {
    p.Wq_glb = mat();
    p.Wk_glb = mat();
    p.Wq_loc = mat();
    p.Wk_loc = mat();
  } else {
    p.Wq = mat();
    p.Wk = mat();
  }
  p.Wv = mat();
  p.Wo = mat();
  if (variant != Variant::global) {
    p.Wlq = mat();
    p.Wlk = mat();
    p.Wrq = mat();
    p.Wrk = mat();
  }
  return p;
}

std::vector<std::pair<std::string, Tensor>> named_params(const AttentionParams& p,
                                                         Variant variant,
                                                         const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> out;
  auto put = [&](const char* name, const Tensor& t) { out.emplace_back(prefix + name, t); };
  if (variant == Variant::additive_window) {
    put("Wq_glb", p.Wq_glb);
    put("Wk_glb", p.Wk_glb);
    put("Wq_loc", p.Wq_loc);
    put("Wk_loc", p.Wk_loc);
  } else {
    put("Wq", p.Wq);
    put("Wk", p.Wk);
  }
  put("Wv", p.Wv);
  put("Wo", p.Wo);
  if (variant != Variant::global) {
    put("Wlq", p.Wlq);
    put("Wlk", p.Wlk);
    put("Wrq", p.Wrq);
    put("Wrk", p.Wrk);
  }
  return out;
}

namespace {

// Weights applied to the values for one (block, head): runs the variant's
// score path and, for windowed variants, the per-head mask construction.
Tensor head_weights(Tape& tape, const SiteSpec& spec, bool causal,
                    const Tensor& q, const Tensor& k,            // score projections
                    const Tensor& qg, const Tensor& kg, const Tensor& ql, const Tensor& kl,
                    const Tensor& lq, const Tensor& lk, const Tensor& rq, const Tensor& rk,
                    int valid_keys, HeadTrace* trace) {
  const int m = spec.variant == Variant::additive_window ? qg.shape()[0] : q.shape()[0];
  const int n = spec.variant == Variant::additive_window ? kg.shape()[0] : k.shape()[0];
  const int width = spec.variant == Variant::additive_window ? qg.shape()[1] : q.shape()[1];
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(width));
  if (causal && m != n)
    throw std::invalid_argument("attention: causal masking needs m == n");

  const std::vector<std::uint8_t> bytes = score_mask_bytes(m, n, causal, valid_keys);
  const std::vector<std::uint8_t>* mask_bytes = bytes.empty() ? nullptr : &bytes;

  Tensor window;
  if (spec.variant != Variant::global) {
    const bool causal_boundaries = spec.site == Site::decoder_self && causal;
    const std::vector<std::uint8_t> bbytes =
        score_mask_bytes(m, n, causal_boundaries, valid_keys);
    const std::vector<std::uint8_t>* bmask = bbytes.empty() ? nullptr : &bbytes;
    Tensor phi_l =
        tape.softmax_scaled_masked(tape.matmul_nt(lq, lk), inv_sqrt, bmask, kMaskedScore);
    Tensor phi_r =
        tape.softmax_scaled_masked(tape.matmul_nt(rq, rk), inv_sqrt, bmask, kMaskedScore);
    if (spec.masking == Masking::segment) {
      std::vector<int> start, end;
      segment_bounds(n, std::min(spec.segment_size, n), start, end);
      window = tape.window_mask_rows(phi_l, phi_r, start, end);
    } else {
      const std::vector<int> idx = identity_bounds(n);
      window = tape.window_mask_rows(phi_l, phi_r, idx, idx);
    }
  }

  Tensor weights, soft_global;
  if (spec.variant == Variant::global) {
    weights = tape.softmax_scaled_masked(tape.matmul_nt(q, k), inv_sqrt, mask_bytes,
                                         kMaskedScore);
    soft_global = weights;
  } else if (spec.variant == Variant::multiplicative_window) {
    soft_global = tape.softmax_scaled_masked(tape.matmul_nt(q, k), inv_sqrt, mask_bytes,
                                             kMaskedScore);
    weights = tape.mul(soft_global, window);
  } else {
    Tensor s_glb = tape.matmul_nt(qg, kg);
    Tensor s_loc = tape.mul(tape.matmul_nt(ql, kl), window);
    weights =
        tape.softmax_scaled_masked(tape.add(s_glb, s_loc), inv_sqrt, mask_bytes, kMaskedScore);
    if (trace) {
      soft_global = Tensor::zeros(s_glb.shape());
      std::vector<double> scaled(s_glb.size());
      for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = s_glb.data()[i] * inv_sqrt;
      kernels::softmax_rows(m, n, scaled.data(), soft_global.data());
    }
  }

  if (trace) {
    trace->m = m;
    trace->n = n;
    trace->softmax_scores = soft_global.values();
    trace->final_weights = weights.values();
    if (window.defined()) trace->mask = window.values();
  }
  return weights;
}

}  // namespace

Tensor multi_head_blocks(Tape& tape, const Tensor& q_rows, const BlockLayout& qb,
                         const Tensor& k_rows, const Tensor& v_rows, const BlockLayout& kb,
                         const AttentionParams& p, const SiteSpec& spec, bool causal,
                         std::vector<HeadTrace>* trace) {
  validate_site_spec(spec);
  const int d = p.Wv.shape()[0];
  if (d % p.heads != 0) throw std::invalid_argument("multi_head: head count must divide d");
  const int hd = d / p.heads;
  const bool windowed = spec.variant != Variant::global;
  const bool additive = spec.variant == Variant::additive_window;

  // One packed projection per weight matrix, then column slices per head.
  Tensor Vp = tape.matmul(v_rows, p.Wv);
  Tensor Qp, Kp, Qg, Kg, Ql, Kl, QL, KL, QR, KR;
  if (additive) {
    Qg = tape.matmul(q_rows, p.Wq_glb);
    Kg = tape.matmul(k_rows, p.Wk_glb);
    Ql = tape.matmul(q_rows, p.Wq_loc);
    Kl = tape.matmul(k_rows, p.Wk_loc);
  } else {
    Qp = tape.matmul(q_rows, p.Wq);
    Kp = tape.matmul(k_rows, p.Wk);
  }
  if (windowed) {
    QL = tape.matmul(q_rows, p.Wlq);
    KL = tape.matmul(k_rows, p.Wlk);
    QR = tape.matmul(q_rows, p.Wrq);
    KR = tape.matmul(k_rows, p.Wrk);
  }

  if (trace) trace->assign(p.heads, HeadTrace{});

  struct HeadSlices {
    Tensor v, q, k, qg, kg, ql, kl, lq, lk, rq, rk;
  };
  std::vector<HeadSlices> heads(p.heads);
  for (int h = 0; h < p.heads; ++h) {
    const int c0 = h * hd;
    auto& s = heads[h];
    s.v = tape.slice_cols(Vp, c0, hd);
    if (additive) {
      s.qg = tape.slice_cols(Qg, c0, hd);
      s.kg = tape.slice_cols(Kg, c0, hd);
      s.ql = tape.slice_cols(Ql, c0, hd);
      s.kl = tape.slice_cols(Kl, c0, hd);
    } else {
      s.q = tape.slice_cols(Qp, c0, hd);
      s.k = tape.slice_cols(Kp, c0, hd);
    }
    if (windowed) {
      s.lq = tape.slice_cols(QL, c0, hd);
      s.lk = tape.slice_cols(KL, c0, hd);
      s.rq = tape.slice_cols(QR, c0, hd);
      s.rk = tape.slice_cols(KR, c0, hd);
    }
  }

  auto block_rows = [&](const Tensor& t, const BlockLayout& layout, int s) {
    if (!t.defined() || layout.count == 1) return t;
    return tape.slice_rows(t, s * layout.stride, layout.stride);
  };

  std::vector<Tensor> block_outs;
  block_outs.reserve(qb.count);
  for (int s = 0; s < qb.count; ++s) {
    std::vector<Tensor> head_outs;
    head_outs.reserve(p.heads);
    for (int h = 0; h < p.heads; ++h) {
      const auto& hs = heads[h];
      HeadTrace* ht = trace && s == 0 ? &(*trace)[h] : nullptr;
      Tensor weights = head_weights(
          tape, spec, causal, block_rows(hs.q, qb, s), block_rows(hs.k, kb, s),
          block_rows(hs.qg, qb, s), block_rows(hs.kg, kb, s), block_rows(hs.ql, qb, s),
          block_rows(hs.kl, kb, s), block_rows(hs.lq, qb, s), block_rows(hs.lk, kb, s),
          block_rows(hs.rq, qb, s), block_rows(hs.rk, kb, s), kb.lengths[s], ht);
      head_outs.push_back(tape.matmul(weights, block_rows(hs.v, kb, s)));
    }
    block_outs.push_back(head_outs.size() == 1 ? head_outs[0] : tape.concat_cols(head_outs));
  }
  Tensor packed = block_outs.size() == 1 ? block_outs[0] : tape.concat_rows(block_outs);
  return tape.matmul(packed, p.Wo);
}

namespace {

BlockLayout single_layout(int rows, int valid) { return {1, rows, {valid}}; }

int valid_from_bytes(int n, const std::vector<std::uint8_t>* key_invalid) {
  if (!key_invalid) return n;
  int valid = n;
  for (int j = 0; j < n; ++j) {
    if ((*key_invalid)[j]) {
      valid = j;
      for (int t = j; t < n; ++t)
        if (!(*key_invalid)[t])
          throw std::invalid_argument("multi_head: key padding must be a suffix");
      break;
    }
  }
  return valid;
}

}  // namespace

Tensor multi_head(Tape& tape, const Tensor& Q, const Tensor& K, const Tensor& V,
                  const AttentionParams& p, const SiteSpec& spec, bool causal,
                  const std::vector<std::uint8_t>* key_invalid,
                  std::vector<HeadTrace>* trace) {
  const int n = K.shape()[0];
  return multi_head_blocks(tape, Q, single_layout(Q.shape()[0], Q.shape()[0]), K, V,
                           single_layout(n, valid_from_bytes(n, key_invalid)), p, spec,
                           causal, trace);
}

// ---------------------------------------------------------------------------
// Single-head spec operations

namespace {

Tensor single_head_weights(Tape& tape, const Tensor& q, const Tensor& k, bool causal) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  const int m = q.shape()[0], n = k.shape()[0];
  if (causal && m != n)
    throw std::invalid_argument("attention: causal masking needs m == n");
  const std::vector<std::uint8_t> bytes = score_mask_bytes(m, n, causal, n);
  return tape.softmax_scaled_masked(tape.matmul_nt(q, k), inv_sqrt,
                                    bytes.empty() ? nullptr : &bytes, kMaskedScore);
}

}  // namespace

Tensor global_attention(Tape& tape, const Tensor& Q, const Tensor& K, const Tensor& V,
                        const AttentionParams& p, bool causal) {
  Tensor weights =
      single_head_weights(tape, tape.matmul(Q, p.Wq), tape.matmul(K, p.Wk), causal);
  return tape.matmul(weights, tape.matmul(V, p.Wv));
}

Tensor multiplicative_window_attention(Tape& tape, const Tensor& Q, const Tensor& K,
                                       const Tensor& V, const AttentionParams& p,
                                       const windowmask::MaskMatrix& M, bool causal) {
  Tensor weights =
      single_head_weights(tape, tape.matmul(Q, p.Wq), tape.matmul(K, p.Wk), causal);
  return tape.matmul(tape.mul(weights, M.values), tape.matmul(V, p.Wv));
}

Tensor additive_window_attention(Tape& tape, const Tensor& Q, const Tensor& K,
                                 const Tensor& V, const AttentionParams& p,
                                 const windowmask::MaskMatrix& M, bool causal) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.Wq_glb.shape()[1]));
  Tensor s_glb = tape.matmul_nt(tape.matmul(Q, p.Wq_glb), tape.matmul(K, p.Wk_glb));
  Tensor s_loc =
      tape.mul(tape.matmul_nt(tape.matmul(Q, p.Wq_loc), tape.matmul(K, p.Wk_loc)), M.values);
  const int m = s_glb.shape()[0], n = s_glb.shape()[1];
  if (causal && m != n)
    throw std::invalid_argument("attention: causal masking needs m == n");
  const std::vector<std::uint8_t> bytes = score_mask_bytes(m, n, causal, n);
  Tensor weights = tape.softmax_scaled_masked(tape.add(s_glb, s_loc), inv_sqrt,
                                              bytes.empty() ? nullptr : &bytes, kMaskedScore);
  return tape.matmul(weights, tape.matmul(V, p.Wv));
}

}  // namespace diffwin::attention
