#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diffwin/attention.hpp"
#include "diffwin/tensor.hpp"

// Tiny Transformer assembly: encoder classifiers, decoder-only language
// models, and encoder-decoder sequence transducers, with the attention
// variant per site controlled by a compact policy string such as
// "Enc(AW)-Cr(AW,Seg)-Dec(MW)".

namespace diffwin::model {

using attention::Masking;
using attention::Site;
using attention::Variant;

struct AttentionPolicy {
  Variant variant = Variant::global;
  Masking masking = Masking::token;
};

struct SitePolicies {
  AttentionPolicy encoder_self, decoder_self, cross;
};

// Grammar: "global", or '-'-joined components Enc(V[,Seg]) | Dec(V) |
// Cr(V[,Seg]) with V in {MW, AW}. Throws std::invalid_argument on anything
// else (including Dec(...,Seg)).
SitePolicies parse_attention_policy(const std::string& s);

struct ModelConfig {
  std::string kind = "seq2seq";  // "classifier" | "lm" | "seq2seq"
  int vocab_size = 0;
  int d_model = 128;
  int heads = 4;
  int ffn_dim = 512;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int num_classes = 2;   // classifier only
  double dropout = 0.0;
  int max_positions = 512;
  int segment_size = 5;
  int windowed_layers = 3;  // windowed variants apply to the first k layers
  std::string attention = "global";

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct FeedForward {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayer {
  attention::AttentionParams self_attn;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  FeedForward ffn;
};

struct DecoderLayer {
  attention::AttentionParams self_attn;
  attention::AttentionParams cross_attn;  // seq2seq only
  Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  FeedForward ffn;
};

struct Model {
  ModelConfig config;
  SitePolicies policies;
  Tensor embedding;       // vocab x d, shared between source and target
  Tensor positional;      // max_positions x d, sinusoidal, not trained
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  Tensor enc_ln_g, enc_ln_b, dec_ln_g, dec_ln_b;
  Tensor out_proj, out_bias;  // d x vocab (lm/seq2seq) or d x classes

  // Resolves the variant for one (site, 0-based layer) pair; layers at or
  // beyond windowed_layers fall back to global.
  attention::SiteSpec spec_for(Site site, int layer) const;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
  std::size_t parameter_count() const;
};

// Deterministic build; identical (config, seed) gives identical bytes.
Model build(const ModelConfig& config, std::uint64_t seed);

// Padded batch of id sequences, row-major batch x len.
struct Packed {
  int batch = 0;
  int len = 0;
  std::vector<int> ids;      // batch * len, padded with pad_id
  std::vector<int> lengths;  // true lengths
  int pad_id = 0;
};

Packed pack(const std::vector<std::vector<int>>& seqs, int pad_id = 0);

// Request for one attention visualization capture during a forward pass.
struct TraceRequest {
  Site site = Site::encoder_self;
  int layer = 0;
  std::vector<attention::HeadTrace> heads;  // filled by the forward pass
  bool filled = false;
};

// Batched forward passes. Outputs are (batch*len) x width rows; padded query
// rows carry unspecified values and must be excluded by the caller.
Tensor encoder_stack(Tape& tape, const Model& m, const Packed& src, bool train, Rng* rng,
                     TraceRequest* trace = nullptr);
Tensor decoder_stack(Tape& tape, const Model& m, const Packed& tgt, const Tensor& enc_out,
                     const Packed* src, bool train, Rng* rng, TraceRequest* trace = nullptr);

Tensor classifier_logits(Tape& tape, const Model& m, const Packed& src, bool train = false,
                         Rng* rng = nullptr, TraceRequest* trace = nullptr);  // batch x classes
Tensor lm_logits(Tape& tape, const Model& m, const Packed& tokens, bool train = false,
                 Rng* rng = nullptr, TraceRequest* trace = nullptr);  // (batch*len) x vocab
Tensor seq2seq_logits(Tape& tape, const Model& m, const Packed& src, const Packed& tgt_in,
                      bool train = false, Rng* rng = nullptr,
                      TraceRequest* trace = nullptr);  // (batch*len_tgt) x vocab

// Single-sequence conveniences (no-grad).
std::vector<double> forward_classify(const Model& m, const std::vector<int>& ids);
// Next-token logits per position; requires at least 2 tokens.
Tensor forward_lm(const Model& m, const std::vector<int>& ids);
Tensor forward_seq2seq(const Model& m, const std::vector<int>& src,
                       const std::vector<int>& tgt_in);

// Greedy decoding; recomputes decoder-side masks over the grown prefix each
// step. Returns emitted tokens without bos, stopping at eos or max_len.
std::vector<int> greedy_decode(const Model& m, const std::vector<int>& src, int max_len,
                               int bos_id = 1, int eos_id = 2);

}  // namespace diffwin::model
