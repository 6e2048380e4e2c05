#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "nsr/codec.hpp"
#include "nsr/config.hpp"
#include "nsr/nn.hpp"
#include "nsr/ops.hpp"
#include "nsr/optim.hpp"
#include "nsr/rng.hpp"
#include "nsr/schedule.hpp"

// Next-scale autoregressive transformer. The sequence is [SOS, block_1 ..
// block_K]; block k holds the accumulated reconstruction of scales < k
// resized to grid k, and its positions predict the scale-k index map.
// Each block: self-attention (block-causal, two-axis rotary) -> feed-forward
// -> gated cross-attention over tokens of the degraded continuous latent.

namespace nsr {

struct TransformerConfig {
  int depth = 6, dim = 256, heads = 8, vocab = 512, ffn_mult = 4;
  int cond_dim = 16, class_count = 1;
  float rope_base = 100.f;
  ScaleSchedule sched;

  static TransformerConfig from(const RunConfig& cfg) {
    TransformerConfig tc;
    tc.depth = cfg.var_depth;
    tc.dim = cfg.var_dim;
    tc.heads = cfg.var_heads;
    tc.vocab = cfg.codebook_size;
    tc.ffn_mult = cfg.ffn_mult;
    tc.cond_dim = cfg.latent_dim;
    tc.class_count = cfg.class_count;
    tc.rope_base = cfg.rope_base;
    tc.sched = ScaleSchedule::parse(cfg.schedule);
    return tc;
  }

  void validate() const {
    if (dim % heads != 0) throw ConfigError("transformer: dim not divisible by heads");
    if ((dim / heads) % 4 != 0)
      throw ConfigError("transformer: head width must divide by 4 for two-axis rotary pairs");
  }

  int head_dim() const { return dim / heads; }
  int seq_len() const { return 1 + sched.tokens(); }
};

struct Sampling {
  int topk = 1;  // 1 = greedy
  float temperature = 1.f;
};

// sequence geometry: block id per position, block start offsets
inline std::vector<int> block_ids(const ScaleSchedule& s) {
  std::vector<int> ids = {0};
  for (int k = 0; k < s.K(); ++k) {
    auto [h, w] = s.grids[(size_t)k];
    for (int i = 0; i < h * w; ++i) ids.push_back(k + 1);
  }
  return ids;
}

// position p attends to SOS and every position in blocks <= its own
inline std::shared_ptr<std::vector<uint8_t>> block_causal_mask(const ScaleSchedule& s) {
  auto ids = block_ids(s);
  const int S = (int)ids.size();
  auto m = std::make_shared<std::vector<uint8_t>>((size_t)S * S, 0);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j)
      if (ids[(size_t)j] <= ids[(size_t)i]) (*m)[(size_t)i * S + j] = 1;
  return m;
}

// scaled two-axis positions: SOS at the origin, block-k cell (r,c) mapped to
// the final grid as (r*H_K/H_k, c*W_K/W_k)
inline std::vector<std::pair<float, float>> sequence_positions(const ScaleSchedule& s) {
  std::vector<std::pair<float, float>> pos = {{0.f, 0.f}};
  const float H = (float)s.final_h(), W = (float)s.final_w();
  for (int k = 0; k < s.K(); ++k) {
    auto [h, w] = s.grids[(size_t)k];
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        pos.emplace_back((float)r * H / (float)h, (float)c * W / (float)w);
  }
  return pos;
}

struct RopeTables {
  std::shared_ptr<std::vector<float>> cos_t, sin_t;  // [S x head_dim]
};

// first half of each head rotates by the row angle, second half by the
// column angle; within a half, standard rotary frequencies
inline RopeTables make_rope_tables(const std::vector<std::pair<float, float>>& pos, int head_dim,
                                   float base) {
  const int S = (int)pos.size(), half = head_dim / 2, pairs = half / 2;
  RopeTables t;
  t.cos_t = std::make_shared<std::vector<float>>((size_t)S * head_dim);
  t.sin_t = std::make_shared<std::vector<float>>((size_t)S * head_dim);
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < pairs; ++j) {
      float freq = std::pow(base, -2.f * (float)j / (float)half);
      float ar = pos[(size_t)s].first * freq;
      float ac = pos[(size_t)s].second * freq;
      int d0 = 2 * j, d1 = half + 2 * j;
      (*t.cos_t)[(size_t)s * head_dim + d0] = std::cos(ar);
      (*t.cos_t)[(size_t)s * head_dim + d0 + 1] = std::cos(ar);
      (*t.sin_t)[(size_t)s * head_dim + d0] = std::sin(ar);
      (*t.sin_t)[(size_t)s * head_dim + d0 + 1] = std::sin(ar);
      (*t.cos_t)[(size_t)s * head_dim + d1] = std::cos(ac);
      (*t.cos_t)[(size_t)s * head_dim + d1 + 1] = std::cos(ac);
      (*t.sin_t)[(size_t)s * head_dim + d1] = std::sin(ac);
      (*t.sin_t)[(size_t)s * head_dim + d1 + 1] = std::sin(ac);
    }
  return t;
}

struct VarBlock {
  Norm ln1, ln2, ln3;
  Linear wqkv, wo, fc1, fc2;
  Linear ca_q, ca_k, ca_v, ca_o;
  Tensor gate;

  VarBlock() = default;
  VarBlock(ParamStore& ps, const std::string& p, int D, int ffn_mult, Rng& rng) {
    ln1 = Norm(ps, p + ".ln1", D);
    ln2 = Norm(ps, p + ".ln2", D);
    ln3 = Norm(ps, p + ".ln3", D);
    wqkv = Linear(ps, p + ".wqkv", D, 3 * D, rng);
    wo = Linear(ps, p + ".wo", D, D, rng);
    fc1 = Linear(ps, p + ".fc1", D, ffn_mult * D, rng);
    fc2 = Linear(ps, p + ".fc2", ffn_mult * D, D, rng);
    ca_q = Linear(ps, p + ".ca_q", D, D, rng);
    ca_k = Linear(ps, p + ".ca_k", D, D, rng);
    ca_v = Linear(ps, p + ".ca_v", D, D, rng);
    ca_o = Linear(ps, p + ".ca_o", D, D, rng);
    gate = ps.add(p + ".gate", Tensor::zeros({1}, true));
  }
};

struct ForwardOut {
  Tensor logits;  // [(1+L) x V]
  Tensor z;       // [(1+L) x D], final block output
};

struct InferOut {
  std::vector<IndexMap> maps;
  Tensor z;             // [(1+L) x D]
  Tensor block_logits;  // [L x V], rows aligned with positions 1..L
  int steps = 0;
};

class VarModel {
 public:
  TransformerConfig tc;
  ParamStore ps;
  Embed label_emb, lvl_emb;
  Linear ctx_proj, in_proj, cond_proj;
  std::vector<VarBlock> blocks;
  Norm ln_f;
  Linear head;

  std::shared_ptr<std::vector<uint8_t>> mask;
  RopeTables rope;
  std::vector<int> block_start;  // sequence offset of each scale block

  VarModel() = default;
  VarModel(const TransformerConfig& cfg, Rng& rng) : tc(cfg) {
    tc.validate();
    label_emb = Embed(ps, "label_emb", tc.class_count, tc.dim, rng);
    ctx_proj = Linear(ps, "ctx_proj", tc.cond_dim, tc.dim, rng, Init::Zero);
    in_proj = Linear(ps, "in_proj", tc.cond_dim, tc.dim, rng);
    lvl_emb = Embed(ps, "lvl_emb", tc.sched.K(), tc.dim, rng);
    cond_proj = Linear(ps, "cond_proj", tc.cond_dim, tc.dim, rng);
    for (int i = 0; i < tc.depth; ++i)
      blocks.emplace_back(ps, "blocks." + std::to_string(i), tc.dim, tc.ffn_mult, rng);
    ln_f = Norm(ps, "ln_f", tc.dim);
    head = Linear(ps, "head", tc.dim, tc.vocab, rng);

    mask = block_causal_mask(tc.sched);
    rope = make_rope_tables(sequence_positions(tc.sched), tc.head_dim(), tc.rope_base);
    int off = 1;
    for (int k = 0; k < tc.sched.K(); ++k) {
      block_start.push_back(off);
      auto [h, w] = tc.sched.grids[(size_t)k];
      off += h * w;
    }
  }

  // [C x h x w] -> tokens [h*w x C]
  static Tensor to_tokens(const Tensor& chw) {
    return transpose2d(reshape(chw, {chw.dim(0), chw.dim(1) * chw.dim(2)}));
  }

  Tensor cond_tokens(const Tensor& f_cont_deg) const { return cond_proj(to_tokens(f_cont_deg)); }

  Tensor sos_token(const Tensor& f_cont_deg) const {
    Tensor mean = reshape(spatial_mean(f_cont_deg), {1, tc.cond_dim});
    return add(label_emb({0}), ctx_proj(mean));
  }

  // block k input content in latent channels: zeros for k = 0, otherwise the
  // partial reconstruction of scales < k resized to grid k
  Tensor block_content(const Codec& codec, const std::vector<IndexMap>& maps, int k) const {
    auto [h, w] = tc.sched.grids[(size_t)k];
    if (k == 0) return Tensor::zeros({h * w, tc.cond_dim});
    Tensor part = codec.partial_reconstruct(maps, k);
    Tensor down = reshape(
        resize_bilinear(reshape(part, {1, tc.cond_dim, part.dim(1), part.dim(2)}), h, w),
        {tc.cond_dim, h, w});
    return to_tokens(down);
  }

  Tensor embed_block(const Tensor& content_tokens, int k) const {
    return add_rowvec(in_proj(content_tokens), reshape(lvl_emb({k}), {tc.dim}));
  }

  // full teacher-forced token sequence [(1+L) x D]
  Tensor build_teacher_input(const Codec& codec, const std::vector<IndexMap>& maps,
                             const Tensor& f_cont_deg) const {
    if ((int)maps.size() != tc.sched.K())
      throw ConfigError("teacher input: " + std::to_string(maps.size()) + " maps for a " +
                        std::to_string(tc.sched.K()) + "-scale schedule");
    std::vector<Tensor> rows = {sos_token(f_cont_deg)};
    for (int k = 0; k < tc.sched.K(); ++k)
      rows.push_back(embed_block(block_content(codec, maps, k), k));
    return concat_rows(rows);
  }

  // one transformer block over rows `x`; cond_d are projected conditioning
  // tokens; self-attention sees keys `k_all`/`v_all` (the query rows must be
  // the tail of the key rows)
  Tensor apply_block(int i, const Tensor& x, const Tensor& cond_d,
                     const std::shared_ptr<std::vector<uint8_t>>& attn_mask,
                     const std::shared_ptr<std::vector<float>>& cos_q,
                     const std::shared_ptr<std::vector<float>>& sin_q,
                     const std::shared_ptr<std::vector<float>>& cos_k,
                     const std::shared_ptr<std::vector<float>>& sin_k, const Tensor& k_prefix,
                     const Tensor& v_prefix, Tensor* k_out = nullptr, Tensor* v_out = nullptr) const {
    const VarBlock& b = blocks[(size_t)i];
    try {
      Tensor h = b.ln1(x);
      Tensor qkv = b.wqkv(h);
      Tensor q = slice_cols(qkv, 0, tc.dim);
      Tensor k = slice_cols(qkv, tc.dim, 2 * tc.dim);
      Tensor v = slice_cols(qkv, 2 * tc.dim, 3 * tc.dim);
      if (cos_k) k = rope_apply(k, cos_k, sin_k, tc.heads);
      Tensor k_all = k_prefix.defined() ? concat_rows({k_prefix, k}) : k;
      Tensor v_all = v_prefix.defined() ? concat_rows({v_prefix, v}) : v;
      if (k_out) *k_out = k_all;
      if (v_out) *v_out = v_all;
      AttnOpts sa;
      sa.heads = tc.heads;
      sa.mask = attn_mask;
      sa.rope_cos_q = cos_q;
      sa.rope_sin_q = sin_q;
      Tensor x1 = add(x, b.wo(attn_core(q, k_all, v_all, sa)));
      Tensor x2 = add(x1, b.fc2(gelu(b.fc1(b.ln2(x1)))));
      AttnOpts ca;
      ca.heads = tc.heads;
      Tensor cq = b.ca_q(b.ln3(x2));
      Tensor ca_out = b.ca_o(attn_core(cq, b.ca_k(cond_d), b.ca_v(cond_d), ca));
      return gated_add(x2, ca_out, b.gate);
    } catch (const NumericError& e) {
      throw NumericError("block " + std::to_string(i) + ": " + e.what());
    }
  }

  ForwardOut forward_train(const Tensor& embeddings, const Tensor& cond_d) const {
    const int S = tc.seq_len();
    if (embeddings.ndim() != 2 || embeddings.dim(0) != S || embeddings.dim(1) != tc.dim)
      throw ShapeError("forward: expected [" + std::to_string(S) + "x" + std::to_string(tc.dim) +
                       "] embeddings, got " + shape_str(embeddings.shape()));
    Tensor x = embeddings;
    for (int i = 0; i < tc.depth; ++i)
      x = apply_block(i, x, cond_d, mask, rope.cos_t, rope.sin_t, rope.cos_t, rope.sin_t,
                      Tensor(), Tensor());
    ForwardOut out;
    out.z = x;
    out.logits = head(ln_f(x));
    return out;
  }

  // slice [r0,r1) of the precomputed rope tables
  static std::shared_ptr<std::vector<float>> slice_table(const std::shared_ptr<std::vector<float>>& t,
                                                         int r0, int r1, int width) {
    return std::make_shared<std::vector<float>>(t->begin() + (size_t)r0 * width,
                                                t->begin() + (size_t)r1 * width);
  }

  // scale-by-scale generation with per-block KV caches; K autoregressive steps
  InferOut infer(const Codec& codec, const Tensor& f_cont_deg, const Sampling& smp, Rng& rng,
                 std::ostream* log = nullptr) const {
    NoGrad ng;
    const int dh = tc.head_dim(), K = tc.sched.K();
    InferOut out;
    Tensor cond_d = cond_tokens(f_cont_deg);
    std::vector<Tensor> ca_k(blocks.size()), ca_v(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
      ca_k[i] = blocks[i].ca_k(cond_d);
      ca_v[i] = blocks[i].ca_v(cond_d);
    }

    std::vector<Tensor> k_cache(blocks.size()), v_cache(blocks.size());
    std::vector<Tensor> z_rows, logit_rows;

    // prefill: the start token alone, so no later query row ever needs a mask
    // (every block token may attend the whole cached prefix plus its own block)
    int pos = 0;
    auto run_rows = [&](Tensor x, int rows) {
      auto cos_q = slice_table(rope.cos_t, pos, pos + rows, dh);
      auto sin_q = slice_table(rope.sin_t, pos, pos + rows, dh);
      for (size_t i = 0; i < blocks.size(); ++i) {
        Tensor k_all, v_all;
        x = apply_block((int)i, x, cond_d, nullptr, cos_q, sin_q, cos_q, sin_q, k_cache[i],
                        v_cache[i], &k_all, &v_all);
        k_cache[i] = k_all;
        v_cache[i] = v_all;
      }
      if (k_cache[0].dim(0) != pos + rows)
        throw UsageError("infer: cache drift at position " + std::to_string(pos));
      pos += rows;
      return x;
    };

    z_rows.push_back(run_rows(sos_token(f_cont_deg), 1));

    for (int k = 0; k < K; ++k) {
      auto [gh, gw] = tc.sched.grids[(size_t)k];
      Tensor x = run_rows(embed_block(block_content(codec, out.maps, k), k), gh * gw);
      Tensor block_logits = head(ln_f(x));
      IndexMap m;
      m.h = gh;
      m.w = gw;
      m.idx = sample_rows(block_logits, smp, rng);
      out.maps.push_back(std::move(m));
      z_rows.push_back(x);
      logit_rows.push_back(block_logits);
      ++out.steps;
      if (log)
        (*log) << "[ar] step " << (k + 1) << "/" << K << " grid " << gh << "x" << gw << "\n";
    }
    out.z = concat_rows(z_rows);
    out.block_logits = concat_rows(logit_rows);
    return out;
  }

  // full-recompute logits for fixed maps: the no-cache reference path
  ForwardOut forward_maps(const Codec& codec, const std::vector<IndexMap>& maps,
                          const Tensor& f_cont_deg) const {
    return forward_train(build_teacher_input(codec, maps, f_cont_deg), cond_tokens(f_cont_deg));
  }

  std::vector<int> sample_rows(const Tensor& logits, const Sampling& smp, Rng& rng) const {
    const int n = logits.dim(0), V = logits.dim(1);
    if (smp.topk < 1 || smp.topk > V)
      throw ConfigError("sampling: topk must be in [1," + std::to_string(V) + "]");
    std::vector<int> out((size_t)n);
    for (int i = 0; i < n; ++i) {
      const float* row = logits.data() + (size_t)i * V;
      if (smp.topk == 1) {
        int best = 0;
        for (int v = 1; v < V; ++v)
          if (row[v] > row[best]) best = v;
        out[(size_t)i] = best;
        continue;
      }
      std::vector<int> order((size_t)V);
      for (int v = 0; v < V; ++v) order[(size_t)v] = v;
      std::partial_sort(order.begin(), order.begin() + smp.topk, order.end(),
                        [&](int a, int b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
      std::vector<float> p((size_t)smp.topk);
      float mx = row[order[0]];
      float z = 0.f;
      for (int j = 0; j < smp.topk; ++j) {
        p[(size_t)j] = std::exp((row[order[(size_t)j]] - mx) / smp.temperature);
        z += p[(size_t)j];
      }
      float u = rng.uniform() * z, acc = 0.f;
      int pick = smp.topk - 1;
      for (int j = 0; j < smp.topk; ++j) {
        acc += p[(size_t)j];
        if (u < acc) {
          pick = j;
          break;
        }
      }
      out[(size_t)i] = order[(size_t)pick];
    }
    return out;
  }

  // flattened ground-truth targets for positions 1..L
  static std::vector<int> flatten_targets(const std::vector<IndexMap>& maps) {
    std::vector<int> t;
    for (const auto& m : maps) t.insert(t.end(), m.idx.begin(), m.idx.end());
    return t;
  }
};

// frozen-codec training example, fully precomputed
struct VarExample {
  std::vector<Tensor> content;  // per scale: [n_k x C]
  Tensor cond_raw;              // [HW x C] degraded latent tokens
  Tensor deg_latent;            // [C x h x w]
  std::vector<int> targets;
};

inline VarExample make_var_example(const Codec& codec, const VarModel& model, const Tensor& clean,
                                   const Tensor& deg) {
  NoGrad ng;
  VarExample ex;
  Tensor f_clean = codec.encode_continuous(clean);
  auto ms = codec.multiscale_encode(f_clean);
  ex.targets = VarModel::flatten_targets(ms.maps);
  ex.deg_latent = codec.encode_continuous(deg);
  ex.cond_raw = VarModel::to_tokens(ex.deg_latent);
  for (int k = 0; k < model.tc.sched.K(); ++k)
    ex.content.push_back(model.block_content(codec, ms.maps, k));
  return ex;
}

// teacher-forced cross-entropy over block positions for one example
inline Tensor var_example_loss(const VarModel& model, const VarExample& ex) {
  std::vector<Tensor> rows = {
      add(model.label_emb({0}),
          model.ctx_proj(reshape(spatial_mean(ex.deg_latent), {1, model.tc.cond_dim})))};
  for (int k = 0; k < model.tc.sched.K(); ++k)
    rows.push_back(model.embed_block(ex.content[(size_t)k], k));
  Tensor emb = concat_rows(rows);
  auto out = model.forward_train(emb, model.cond_proj(ex.cond_raw));
  Tensor block_logits = slice_rows(out.logits, 1, model.tc.seq_len());
  return cross_entropy(block_logits, ex.targets);
}

inline int64_t train_var(VarModel& model, const std::vector<VarExample>& examples,
                         const RunConfig& cfg, std::ostream* log) {
  if (examples.empty()) throw UsageError("train_var: empty dataset");
  Rng order_rng(derive_seed(cfg.seed, "var.order"));
  AdamW opt(model.ps, cfg.weight_decay);
  for (int step = 0; step < cfg.steps_var; ++step) {
    Tensor loss;
    for (int i = 0; i < cfg.batch_var; ++i) {
      const auto& ex = examples[(size_t)order_rng.uniform_int((int)examples.size())];
      Tensor l = var_example_loss(model, ex);
      loss = i == 0 ? l : add(loss, l);
    }
    loss = scale(loss, 1.f / (float)cfg.batch_var);
    opt.zero_grad();
    backward(loss);
    opt.step(cosine_lr(cfg.lr_var, step, cfg.steps_var, cfg.warmup_frac, cfg.lr_floor));
    if (log && (step % 50 == 0 || step + 1 == cfg.steps_var))
      (*log) << "step=" << step << " ce=" << loss.item() << "\n";
  }
  return cfg.steps_var;
}

}  // namespace nsr
