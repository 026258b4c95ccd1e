#include "diffwin/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace diffwin::model {

namespace {

using nlohmann::json;

AttentionPolicy parse_component_args(const std::string& inside, const std::string& comp,
                                     bool segment_allowed) {
  AttentionPolicy pol;
  std::vector<std::string> args;
  std::size_t start = 0;
  while (start <= inside.size()) {
    const std::size_t comma = inside.find(',', start);
    args.push_back(inside.substr(start, comma == std::string::npos ? comma : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (args.empty() || args.size() > 2)
    throw std::invalid_argument("attention policy: bad argument list in " + comp);
  if (args[0] == "MW")
    pol.variant = Variant::multiplicative_window;
  else if (args[0] == "AW")
    pol.variant = Variant::additive_window;
  else
    throw std::invalid_argument("attention policy: unknown variant '" + args[0] + "' in " +
                                comp + " (expected MW or AW)");
  if (args.size() == 2) {
    if (args[1] != "Seg")
      throw std::invalid_argument("attention policy: unknown option '" + args[1] + "' in " +
                                  comp);
    if (!segment_allowed)
      throw std::invalid_argument(
          "attention policy: segment masking is not allowed on decoder self-attention");
    pol.masking = Masking::segment;
  }
  return pol;
}

}  // namespace

SitePolicies parse_attention_policy(const std::string& s) {
  SitePolicies out;
  if (s == "global" || s.empty()) return out;

  bool have_enc = false, have_dec = false, have_cross = false;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t dash = s.find('-', pos);
    if (dash == std::string::npos) dash = s.size();
    const std::string comp = s.substr(pos, dash - pos);
    pos = dash + 1;

    const std::size_t open = comp.find('(');
    if (open == std::string::npos || comp.back() != ')')
      throw std::invalid_argument("attention policy: malformed component '" + comp +
                                  "' (expected Name(...))");
    const std::string name = comp.substr(0, open);
    const std::string inside = comp.substr(open + 1, comp.size() - open - 2);

    if (name == "Enc") {
      if (have_enc) throw std::invalid_argument("attention policy: duplicate Enc component");
      out.encoder_self = parse_component_args(inside, comp, true);
      have_enc = true;
    } else if (name == "Dec") {
      if (have_dec) throw std::invalid_argument("attention policy: duplicate Dec component");
      out.decoder_self = parse_component_args(inside, comp, false);
      have_dec = true;
    } else if (name == "Cr") {
      if (have_cross) throw std::invalid_argument("attention policy: duplicate Cr component");
      out.cross = parse_component_args(inside, comp, true);
      have_cross = true;
    } else {
      throw std::invalid_argument("attention policy: unknown component '" + name +
                                  "' (expected Enc, Dec or Cr, or the string 'global')");
    }
  }
  return out;
}

std::string ModelConfig::to_json() const {
  json j;
  j["kind"] = kind;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["heads"] = heads;
  j["ffn_dim"] = ffn_dim;
  j["encoder_layers"] = encoder_layers;
  j["decoder_layers"] = decoder_layers;
  j["num_classes"] = num_classes;
  j["dropout"] = dropout;
  j["max_positions"] = max_positions;
  j["segment_size"] = segment_size;
  j["windowed_layers"] = windowed_layers;
  j["attention"] = attention;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.kind = j.at("kind").get<std::string>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.max_positions = j.at("max_positions").get<int>();
  c.segment_size = j.at("segment_size").get<int>();
  c.windowed_layers = j.at("windowed_layers").get<int>();
  c.attention = j.at("attention").get<std::string>();
  return c;
}

attention::SiteSpec Model::spec_for(Site site, int layer) const {
  const AttentionPolicy* pol = nullptr;
  switch (site) {
    case Site::encoder_self: pol = &policies.encoder_self; break;
    case Site::decoder_self: pol = &policies.decoder_self; break;
    case Site::cross: pol = &policies.cross; break;
  }
  attention::SiteSpec spec;
  spec.site = site;
  spec.segment_size = config.segment_size;
  if (layer < config.windowed_layers) {
    spec.variant = pol->variant;
    spec.masking = pol->masking;
  }
  return spec;
}

namespace {

Tensor sinusoidal_positions(int max_positions, int d) {
  Tensor pe = Tensor::zeros({max_positions, d});
  for (int pos = 0; pos < max_positions; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
      pe.data()[static_cast<std::size_t>(pos) * d + i] = std::sin(angle);
      if (i + 1 < d) pe.data()[static_cast<std::size_t>(pos) * d + i + 1] = std::cos(angle);
    }
  }
  return pe;
}

Tensor init_matrix(int rows, int cols, Rng& rng) {
  const double r = 1.0 / std::sqrt(static_cast<double>(rows));  // fan-in
  return Tensor::uniform({rows, cols}, -r, r, rng, true);
}

FeedForward make_ffn(int d, int ffn_dim, Rng& rng) {
  FeedForward f;
  f.w1 = init_matrix(d, ffn_dim, rng);
  f.b1 = Tensor::zeros({ffn_dim}, true);
  f.w2 = init_matrix(ffn_dim, d, rng);
  f.b2 = Tensor::zeros({d}, true);
  return f;
}

void make_norm(Tensor& g, Tensor& b, int d) {
  g = Tensor::constant({d}, 1.0, true);
  b = Tensor::zeros({d}, true);
}

}  // namespace

Model build(const ModelConfig& config, std::uint64_t seed) {
  if (config.vocab_size < 1) throw std::invalid_argument("build: vocab_size must be positive");
  if (config.d_model % config.heads != 0)
    throw std::invalid_argument("build: heads must divide d_model");
  if (config.kind != "classifier" && config.kind != "lm" && config.kind != "seq2seq")
    throw std::invalid_argument("build: unknown model kind '" + config.kind + "'");

  Model m;
  m.config = config;
  m.policies = parse_attention_policy(config.attention);

  // Every (site, layer) combination must be constructible.
  const bool has_enc = config.kind != "lm";
  const bool has_dec = config.kind != "classifier";
  const bool has_cross = config.kind == "seq2seq";
  if (has_enc)
    for (int l = 0; l < config.encoder_layers; ++l)
      attention::validate_site_spec(m.spec_for(Site::encoder_self, l));
  if (has_dec)
    for (int l = 0; l < config.decoder_layers; ++l)
      attention::validate_site_spec(m.spec_for(Site::decoder_self, l));
  if (has_cross)
    for (int l = 0; l < config.decoder_layers; ++l)
      attention::validate_site_spec(m.spec_for(Site::cross, l));

  Rng rng(mix_key(seed, 0x6d6f64656cULL));
  const int d = config.d_model;

  m.embedding = init_matrix(config.vocab_size, d, rng);
  m.positional = sinusoidal_positions(config.max_positions, d);

  if (has_enc) {
    for (int l = 0; l < config.encoder_layers; ++l) {
      EncoderLayer layer;
      layer.self_attn = attention::make_attention_params(
          d, config.heads, m.spec_for(Site::encoder_self, l).variant, rng);
      make_norm(layer.ln1_g, layer.ln1_b, d);
      make_norm(layer.ln2_g, layer.ln2_b, d);
      layer.ffn = make_ffn(d, config.ffn_dim, rng);
      m.encoder.push_back(std::move(layer));
    }
    make_norm(m.enc_ln_g, m.enc_ln_b, d);
  }
  if (has_dec) {
    for (int l = 0; l < config.decoder_layers; ++l) {
      DecoderLayer layer;
      layer.self_attn = attention::make_attention_params(
          d, config.heads, m.spec_for(Site::decoder_self, l).variant, rng);
      if (has_cross)
        layer.cross_attn = attention::make_attention_params(
            d, config.heads, m.spec_for(Site::cross, l).variant, rng);
      make_norm(layer.ln1_g, layer.ln1_b, d);
      make_norm(layer.ln2_g, layer.ln2_b, d);
      make_norm(layer.ln3_g, layer.ln3_b, d);
      layer.ffn = make_ffn(d, config.ffn_dim, rng);
      m.decoder.push_back(std::move(layer));
    }
    make_norm(m.dec_ln_g, m.dec_ln_b, d);
  }

  // Zero-initialized output head: predictions start exactly uniform.
  const int out_width = config.kind == "classifier" ? config.num_classes : config.vocab_size;
  m.out_proj = Tensor::zeros({d, out_width}, true);
  m.out_bias = Tensor::zeros({out_width}, true);
  return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding);

  auto put_norm = [&](const std::string& name, const Tensor& g, const Tensor& b) {
    out.emplace_back(name + ".g", g);
    out.emplace_back(name + ".b", b);
  };
  auto put_ffn = [&](const std::string& prefix, const FeedForward& f) {
    out.emplace_back(prefix + ".w1", f.w1);
    out.emplace_back(prefix + ".b1", f.b1);
    out.emplace_back(prefix + ".w2", f.w2);
    out.emplace_back(prefix + ".b2", f.b2);
  };

  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string base = "enc." + std::to_string(l) + ".";
    const auto& layer = encoder[l];
    auto attn = attention::named_params(
        layer.self_attn, spec_for(Site::encoder_self, static_cast<int>(l)).variant,
        base + "self.");
    out.insert(out.end(), attn.begin(), attn.end());
    put_norm(base + "ln1", layer.ln1_g, layer.ln1_b);
    put_norm(base + "ln2", layer.ln2_g, layer.ln2_b);
    put_ffn(base + "ffn", layer.ffn);
  }
  if (!encoder.empty()) put_norm("enc.final", enc_ln_g, enc_ln_b);

  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string base = "dec." + std::to_string(l) + ".";
    const auto& layer = decoder[l];
    auto self = attention::named_params(
        layer.self_attn, spec_for(Site::decoder_self, static_cast<int>(l)).variant,
        base + "self.");
    out.insert(out.end(), self.begin(), self.end());
    if (layer.cross_attn.Wv.defined()) {
      auto cross = attention::named_params(
          layer.cross_attn, spec_for(Site::cross, static_cast<int>(l)).variant,
          base + "cross.");
      out.insert(out.end(), cross.begin(), cross.end());
    }
    put_norm(base + "ln1", layer.ln1_g, layer.ln1_b);
    put_norm(base + "ln2", layer.ln2_g, layer.ln2_b);
    put_norm(base + "ln3", layer.ln3_g, layer.ln3_b);
    put_ffn(base + "ffn", layer.ffn);
  }
  if (!decoder.empty()) put_norm("dec.final", dec_ln_g, dec_ln_b);

  out.emplace_back("out_proj", out_proj);
  out.emplace_back("out_bias", out_bias);
  return out;
}

std::vector<Tensor> Model::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_params()) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------
// Forward passes

Packed pack(const std::vector<std::vector<int>>& seqs, int pad_id) {
  if (seqs.empty()) throw std::invalid_argument("pack: empty batch");
  Packed p;
  p.batch = static_cast<int>(seqs.size());
  p.pad_id = pad_id;
  for (const auto& s : seqs) {
    if (s.empty()) throw std::invalid_argument("pack: empty sequence");
    p.len = std::max(p.len, static_cast<int>(s.size()));
  }
  p.ids.assign(static_cast<std::size_t>(p.batch) * p.len, pad_id);
  for (int s = 0; s < p.batch; ++s) {
    p.lengths.push_back(static_cast<int>(seqs[s].size()));
    std::copy(seqs[s].begin(), seqs[s].end(), p.ids.begin() + static_cast<std::size_t>(s) * p.len);
  }
  return p;
}

namespace {

Tensor embed(Tape& tape, const Model& m, const Packed& p, bool train, Rng* rng) {
  if (p.len > m.config.max_positions)
    throw std::invalid_argument("forward: sequence longer than max_positions");
  Tensor x = tape.embedding_lookup(m.embedding, p.ids);
  x = tape.scale(x, std::sqrt(static_cast<double>(m.config.d_model)));
  std::vector<int> pos_ids(p.ids.size());
  for (int s = 0; s < p.batch; ++s)
    for (int t = 0; t < p.len; ++t) pos_ids[static_cast<std::size_t>(s) * p.len + t] = t;
  x = tape.add(x, tape.embedding_lookup(m.positional, pos_ids));
  if (train && m.config.dropout > 0.0) x = tape.dropout(x, m.config.dropout, *rng);
  return x;
}

Tensor maybe_dropout(Tape& tape, const Tensor& x, const Model& m, bool train, Rng* rng) {
  if (train && m.config.dropout > 0.0) return tape.dropout(x, m.config.dropout, *rng);
  return x;
}

Tensor ffn_block(Tape& tape, const FeedForward& f, const Tensor& x) {
  Tensor h = tape.relu(tape.add(tape.matmul(x, f.w1), f.b1));
  return tape.add(tape.matmul(h, f.w2), f.b2);
}

attention::BlockLayout layout_of(const Packed& p) { return {p.batch, p.len, p.lengths}; }

// One attention sub-layer over the packed batch; keys/values come from
// kv_rows (cross-attention) or from the query rows themselves.
Tensor packed_attention(Tape& tape, const Tensor& q_rows, const Packed& q_pack,
                        const Tensor* kv_rows, const Packed* kv_pack,
                        const attention::AttentionParams& params,
                        const attention::SiteSpec& spec, bool causal,
                        std::vector<attention::HeadTrace>* trace) {
  const Tensor& kv = kv_rows ? *kv_rows : q_rows;
  const attention::BlockLayout kb = kv_pack ? layout_of(*kv_pack) : layout_of(q_pack);
  return attention::multi_head_blocks(tape, q_rows, layout_of(q_pack), kv, kv, kb, params,
                                      spec, causal, trace);
}

}  // namespace

Tensor encoder_stack(Tape& tape, const Model& m, const Packed& src, bool train, Rng* rng,
                     TraceRequest* trace) {
  Tensor x = embed(tape, m, src, train, rng);
  for (int l = 0; l < static_cast<int>(m.encoder.size()); ++l) {
    const auto& layer = m.encoder[l];
    const auto spec = m.spec_for(Site::encoder_self, l);
    std::vector<attention::HeadTrace>* t =
        trace && trace->site == Site::encoder_self && trace->layer == l ? &trace->heads
                                                                        : nullptr;
    Tensor xn = tape.layer_norm(x, layer.ln1_g, layer.ln1_b);
    Tensor a = packed_attention(tape, xn, src, nullptr, nullptr, layer.self_attn, spec,
                                false, t);
    if (t) trace->filled = true;
    x = tape.add(x, maybe_dropout(tape, a, m, train, rng));
    Tensor f = ffn_block(tape, layer.ffn, tape.layer_norm(x, layer.ln2_g, layer.ln2_b));
    x = tape.add(x, maybe_dropout(tape, f, m, train, rng));
  }
  return tape.layer_norm(x, m.enc_ln_g, m.enc_ln_b);
}

Tensor decoder_stack(Tape& tape, const Model& m, const Packed& tgt, const Tensor& enc_out,
                     const Packed* src, bool train, Rng* rng, TraceRequest* trace) {
  Tensor x = embed(tape, m, tgt, train, rng);
  for (int l = 0; l < static_cast<int>(m.decoder.size()); ++l) {
    const auto& layer = m.decoder[l];
    const auto self_spec = m.spec_for(Site::decoder_self, l);
    std::vector<attention::HeadTrace>* ts =
        trace && trace->site == Site::decoder_self && trace->layer == l ? &trace->heads
                                                                        : nullptr;
    Tensor xn = tape.layer_norm(x, layer.ln1_g, layer.ln1_b);
    Tensor a = packed_attention(tape, xn, tgt, nullptr, nullptr, layer.self_attn, self_spec,
                                true, ts);
    if (ts) trace->filled = true;
    x = tape.add(x, maybe_dropout(tape, a, m, train, rng));

    if (enc_out.defined()) {
      const auto cross_spec = m.spec_for(Site::cross, l);
      std::vector<attention::HeadTrace>* tc =
          trace && trace->site == Site::cross && trace->layer == l ? &trace->heads : nullptr;
      Tensor cn = tape.layer_norm(x, layer.ln2_g, layer.ln2_b);
      Tensor c = packed_attention(tape, cn, tgt, &enc_out, src, layer.cross_attn, cross_spec,
                                  false, tc);
      if (tc) trace->filled = true;
      x = tape.add(x, maybe_dropout(tape, c, m, train, rng));
    }

    Tensor f = ffn_block(tape, layer.ffn, tape.layer_norm(x, layer.ln3_g, layer.ln3_b));
    x = tape.add(x, maybe_dropout(tape, f, m, train, rng));
  }
  return tape.layer_norm(x, m.dec_ln_g, m.dec_ln_b);
}

Tensor classifier_logits(Tape& tape, const Model& m, const Packed& src, bool train, Rng* rng,
                         TraceRequest* trace) {
  Tensor enc = encoder_stack(tape, m, src, train, rng, trace);
  // Mean over the real (non-pad) positions of each sequence.
  Tensor pool = Tensor::zeros({src.batch, src.batch * src.len});
  for (int s = 0; s < src.batch; ++s)
    for (int t = 0; t < src.lengths[s]; ++t)
      pool.data()[static_cast<std::size_t>(s) * (src.batch * src.len) + s * src.len + t] =
          1.0 / src.lengths[s];
  Tensor pooled = tape.matmul(pool, enc);
  return tape.add(tape.matmul(pooled, m.out_proj), m.out_bias);
}

Tensor lm_logits(Tape& tape, const Model& m, const Packed& tokens, bool train, Rng* rng,
                 TraceRequest* trace) {
  Tensor dec = decoder_stack(tape, m, tokens, Tensor(), nullptr, train, rng, trace);
  return tape.add(tape.matmul(dec, m.out_proj), m.out_bias);
}

Tensor seq2seq_logits(Tape& tape, const Model& m, const Packed& src, const Packed& tgt_in,
                      bool train, Rng* rng, TraceRequest* trace) {
  Tensor enc = encoder_stack(tape, m, src, train, rng, trace);
  Tensor dec = decoder_stack(tape, m, tgt_in, enc, &src, train, rng, trace);
  return tape.add(tape.matmul(dec, m.out_proj), m.out_bias);
}

std::vector<double> forward_classify(const Model& m, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("forward_classify: empty input");
  Tape tape(true);
  Tensor logits = classifier_logits(tape, m, pack({ids}));
  return logits.values();
}

Tensor forward_lm(const Model& m, const std::vector<int>& ids) {
  if (ids.size() < 2) throw std::invalid_argument("forward_lm: need at least 2 tokens");
  Tape tape(true);
  return lm_logits(tape, m, pack({ids}));
}

Tensor forward_seq2seq(const Model& m, const std::vector<int>& src,
                       const std::vector<int>& tgt_in) {
  Tape tape(true);
  return seq2seq_logits(tape, m, pack({src}), pack({tgt_in}));
}

std::vector<int> greedy_decode(const Model& m, const std::vector<int>& src, int max_len,
                               int bos_id, int eos_id) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  Tape enc_tape(true);
  const Packed src_pack = pack({src});
  Tensor enc = encoder_stack(enc_tape, m, src_pack, false, nullptr);

  std::vector<int> prefix{bos_id};
  std::vector<int> out;
  for (int step = 0; step < max_len; ++step) {
    Tape tape(true);
    Tensor dec = decoder_stack(tape, m, pack({prefix}), enc, &src_pack, false, nullptr);
    Tensor logits = tape.add(tape.matmul(dec, m.out_proj), m.out_bias);
    const int vocab = logits.cols();
    const double* row = logits.data() + static_cast<std::size_t>(prefix.size() - 1) * vocab;
    int best = 0;
    for (int v = 1; v < vocab; ++v)
      if (row[v] > row[best]) best = v;
    if (best == eos_id) break;
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

}  // namespace diffwin::model
