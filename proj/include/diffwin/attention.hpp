#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diffwin/tensor.hpp"
#include "diffwin/windowmask.hpp"

// Attention variants: global scaled dot-product, multiplicative window
// (post-softmax mask), and additive window (masked local scores added to
// global scores before the softmax).

namespace diffwin::attention {

enum class Variant { global, multiplicative_window, additive_window };
enum class Masking { token, segment };
enum class Site { encoder_self, decoder_self, cross };

std::string variant_name(Variant v);

struct SiteSpec {
  Site site = Site::encoder_self;
  Variant variant = Variant::global;
  Masking masking = Masking::token;
  int segment_size = 5;  // meaningful iff masking == segment
};

// Throws if the combination is invalid (segment masking on decoder
// self-attention would point into unfinished segments).
void validate_site_spec(const SiteSpec& spec);

struct AttentionParams {
  int heads = 1;
  Tensor Wq, Wk;                        // global and multiplicative variants
  Tensor Wv, Wo;                        // Wo used by multi_head only
  Tensor Wlq, Wlk, Wrq, Wrk;            // boundary pointers (windowed variants)
  Tensor Wq_glb, Wk_glb, Wq_loc, Wk_loc;  // additive variant
};

// Fresh parameters for one attention site, uniform init in +-1/sqrt(d).
AttentionParams make_attention_params(int d, int heads, Variant variant, Rng& rng);

// Ordered (name, tensor) pairs of the parameters a variant actually owns.
std::vector<std::pair<std::string, Tensor>> named_params(const AttentionParams& p,
                                                         Variant variant,
                                                         const std::string& prefix);

// --- single-head operations (projection width = full matrix width) ---------

// S((Q Wq)(K Wk)^T / sqrt(d)) (V Wv); causal adds -1e9 above the diagonal
// before the softmax.
Tensor global_attention(Tape& tape, const Tensor& Q, const Tensor& K, const Tensor& V,
                        const AttentionParams& p, bool causal);

// (S(score) .* M)(V Wv): the mask multiplies post-softmax weights, which are
// deliberately not renormalized.
Tensor multiplicative_window_attention(Tape& tape, const Tensor& Q, const Tensor& K,
                                       const Tensor& V, const AttentionParams& p,
                                       const windowmask::MaskMatrix& M, bool causal);

// S(((Q Wq_glb)(K Wk_glb)^T + (Q Wq_loc)(K Wk_loc)^T .* M) / sqrt(d)) (V Wv)
Tensor additive_window_attention(Tape& tape, const Tensor& Q, const Tensor& K,
                                 const Tensor& V, const AttentionParams& p,
                                 const windowmask::MaskMatrix& M, bool causal);

// --- multi-head -------------------------------------------------------------

// Per-head view of what the attention did, for the visualization dumps:
// softmax_scores is the global/pre-mask softmax, mask the per-head window,
// final_weights the weights actually applied to the values.
struct HeadTrace {
  int m = 0, n = 0;
  std::vector<double> softmax_scores;
  std::vector<double> mask;           // empty for global sites
  std::vector<double> final_weights;
};

// A batch of equally padded sequences laid out as consecutive row blocks:
// sequence s occupies rows [s*stride, (s+1)*stride) of which the first
// lengths[s] are real; the rest is suffix padding.
struct BlockLayout {
  int count = 1;
  int stride = 0;
  std::vector<int> lengths;
};

// Packed multi-head attention over row blocks. All linear projections run
// once on the packed rows; scores, masks and softmaxes run per (block, head).
// k_rows and v_rows may alias. Padded key positions are excluded per block;
// windowed variants derive per-head boundary scores and masks from their
// column slice of the boundary projections. Head outputs are concatenated
// and passed through Wo. trace, when given, captures the first block.
Tensor multi_head_blocks(Tape& tape, const Tensor& q_rows, const BlockLayout& qb,
                         const Tensor& k_rows, const Tensor& v_rows, const BlockLayout& kb,
                         const AttentionParams& p, const SiteSpec& spec, bool causal,
                         std::vector<HeadTrace>* trace = nullptr);

// Single-sequence convenience over multi_head_blocks. key_invalid marks
// padded key positions (must be a suffix when given).
Tensor multi_head(Tape& tape, const Tensor& Q, const Tensor& K, const Tensor& V,
                  const AttentionParams& p, const SiteSpec& spec, bool causal,
                  const std::vector<std::uint8_t>* key_invalid = nullptr,
                  std::vector<HeadTrace>* trace = nullptr);

}  // namespace diffwin::attention
