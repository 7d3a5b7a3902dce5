#include "nemelast/model.hpp"

#include <cmath>
#include <stdexcept>

#include "nemelast/rng.hpp"

namespace nemelast {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument("model: " + what); }

Tensor init_weight(int out_dim, int in_dim, Rng& rng) {
  return randn({out_dim, in_dim}, rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
}

// head h active iff its within-group index is below heads/group quota
bool head_active(const ModelConfig& cfg, int head, int active_heads) {
  const int per_group = active_heads / cfg.g;
  return head % cfg.heads_per_group() < per_group;
}

}  // namespace

char layer_kind_char(LayerKind k) {
  switch (k) {
    case LayerKind::MAMBA: return 'M';
    case LayerKind::ATTN: return 'A';
    case LayerKind::FFN: return 'F';
  }
  return '?';
}

LayerKind layer_kind_from_char(char c) {
  switch (c) {
    case 'M': return LayerKind::MAMBA;
    case 'A': return LayerKind::ATTN;
    case 'F': return LayerKind::FFN;
  }
  fail(std::string("unknown layer kind '") + c + "'");
}

void ModelConfig::validate() const {
  if (d_e < 1 || d_int < 1 || n_h < 1 || d_h < 1 || m_h < 1 || m_d < 1 || g < 1 ||
      d_s < 1 || n_layers < 1 || vocab < 2 || conv_kernel < 1)
    fail("all dims must be >= 1 and vocab >= 2");
  if (m_h % g != 0) fail("m_h=" + std::to_string(m_h) + " not divisible by g=" + std::to_string(g));
  if (static_cast<int>(pattern.size()) != n_layers)
    fail("pattern length " + std::to_string(pattern.size()) + " != n_layers " +
         std::to_string(n_layers));
  if (attn_scale <= 0.0) fail("attn_scale must be set (1/sqrt(d_h) of the parent)");
}

std::string ModelConfig::pattern_str() const {
  std::string s;
  for (LayerKind k : pattern) s += layer_kind_char(k);
  return s;
}

ModelConfig ModelConfig::desk_default() {
  ModelConfig c;
  c.pattern.clear();
  for (int i = 0; i < 2; ++i)
    for (char k : {'M', 'M', 'A', 'F'}) c.pattern.push_back(layer_kind_from_char(k));
  c.attn_scale = 1.0 / std::sqrt(static_cast<double>(c.d_h));
  c.validate();
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_e = 8;
  c.d_int = 12;
  c.n_h = 2;
  c.d_h = 4;
  c.m_h = 4;
  c.m_d = 4;
  c.g = 2;
  c.d_s = 4;
  c.n_layers = 4;
  c.vocab = 11;
  c.pattern = {LayerKind::MAMBA, LayerKind::ATTN, LayerKind::FFN, LayerKind::MAMBA};
  c.attn_scale = 1.0 / std::sqrt(static_cast<double>(c.d_h));
  c.validate();
  return c;
}

bool Selection::heterogeneous() const {
  return !per_layer_mamba_heads.empty() || !per_layer_mamba_ch.empty() ||
         !per_layer_attn_heads.empty() || !per_layer_ffn.empty();
}

Selection Selection::full(const ModelConfig& cfg) {
  Selection s;
  s.emb = cfg.d_e;
  s.mamba_heads = cfg.m_h;
  s.mamba_ch = cfg.m_d;
  s.attn_heads = cfg.n_h;
  s.attn_head_dim = cfg.d_h;
  s.ffn = cfg.d_int;
  s.depth = cfg.n_layers;
  s.active_layers.assign(static_cast<size_t>(cfg.n_layers), 1);
  return s;
}

void Selection::validate(const ModelConfig& cfg) const {
  auto in_range = [](const char* name, int v, int lo, int hi) {
    if (v < lo || v > hi)
      fail(std::string(name) + "=" + std::to_string(v) + " outside [" + std::to_string(lo) +
           "," + std::to_string(hi) + "]");
  };
  in_range("emb", emb, 1, cfg.d_e);
  in_range("mamba_heads", mamba_heads, cfg.g, cfg.m_h);
  if (mamba_heads % cfg.g != 0) fail("mamba_heads must be divisible by the group count");
  in_range("mamba_ch", mamba_ch, 1, cfg.m_d);
  in_range("attn_heads", attn_heads, 1, cfg.n_h);
  in_range("attn_head_dim", attn_head_dim, 1, cfg.d_h);
  in_range("ffn", ffn, 1, cfg.d_int);
  in_range("depth", depth, 0, cfg.n_layers);
  if (static_cast<int>(active_layers.size()) != cfg.n_layers)
    fail("active_layers length != n_layers");
  int act = 0;
  for (uint8_t a : active_layers) act += a;
  if (act != depth) fail("active_layers count != depth");
  auto per_layer_ok = [&](const std::vector<int>& v, const char* name, int hi) {
    if (v.empty()) return;
    if (static_cast<int>(v.size()) != cfg.n_layers)
      fail(std::string(name) + " per-layer length != n_layers");
    for (int x : v)
      if (x < 0 || x > hi) fail(std::string(name) + " per-layer value out of range");
  };
  per_layer_ok(per_layer_mamba_heads, "mamba_heads", cfg.m_h);
  per_layer_ok(per_layer_mamba_ch, "mamba_ch", cfg.m_d);
  per_layer_ok(per_layer_attn_heads, "attn_heads", cfg.n_h);
  per_layer_ok(per_layer_ffn, "ffn", cfg.d_int);
}

MaskSet MaskSet::all_ones(const ModelConfig& cfg) {
  return from_selection(cfg, Selection::full(cfg));
}

MaskSet MaskSet::from_selection(const ModelConfig& cfg, const Selection& sel) {
  cfg.validate();
  sel.validate(cfg);
  MaskSet m;
  m.discrete = true;
  m.emb = Tensor::zeros({cfg.d_e});
  for (int i = 0; i < sel.emb; ++i) m.emb.data()[static_cast<size_t>(i)] = 1.0;
  m.gamma = Tensor::zeros({cfg.n_layers});
  for (int j = 0; j < cfg.n_layers; ++j)
    m.gamma.data()[static_cast<size_t>(j)] = sel.active_layers[static_cast<size_t>(j)] ? 1.0 : 0.0;
  m.inner.resize(static_cast<size_t>(cfg.n_layers));
  m.mamba_head.resize(static_cast<size_t>(cfg.n_layers));
  for (int j = 0; j < cfg.n_layers; ++j) {
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::MAMBA: {
        const int heads = sel.per_layer_mamba_heads.empty()
                              ? sel.mamba_heads
                              : sel.per_layer_mamba_heads[static_cast<size_t>(j)];
        const int chans = sel.per_layer_mamba_ch.empty()
                              ? sel.mamba_ch
                              : sel.per_layer_mamba_ch[static_cast<size_t>(j)];
        if (heads % cfg.g != 0) fail("per-layer mamba heads not divisible by groups");
        Tensor hm = Tensor::zeros({cfg.m_h});
        for (int h = 0; h < cfg.m_h; ++h)
          hm.data()[static_cast<size_t>(h)] = head_active(cfg, h, heads) ? 1.0 : 0.0;
        Tensor im = Tensor::zeros({cfg.mamba_inner()});
        for (int h = 0; h < cfg.m_h; ++h)
          for (int c = 0; c < cfg.m_d; ++c)
            im.data()[static_cast<size_t>(h) * cfg.m_d + c] =
                (head_active(cfg, h, heads) && c < chans) ? 1.0 : 0.0;
        m.mamba_head[static_cast<size_t>(j)] = hm;
        m.inner[static_cast<size_t>(j)] = im;
        break;
      }
      case LayerKind::ATTN: {
        const int heads = sel.per_layer_attn_heads.empty()
                              ? sel.attn_heads
                              : sel.per_layer_attn_heads[static_cast<size_t>(j)];
        Tensor am = Tensor::zeros({cfg.attn_inner()});
        for (int h = 0; h < cfg.n_h; ++h)
          for (int c = 0; c < cfg.d_h; ++c)
            am.data()[static_cast<size_t>(h) * cfg.d_h + c] =
                (h < heads && c < sel.attn_head_dim) ? 1.0 : 0.0;
        m.inner[static_cast<size_t>(j)] = am;
        break;
      }
      case LayerKind::FFN: {
        const int neurons =
            sel.per_layer_ffn.empty() ? sel.ffn : sel.per_layer_ffn[static_cast<size_t>(j)];
        Tensor fm = Tensor::zeros({cfg.d_int});
        for (int i = 0; i < neurons; ++i) fm.data()[static_cast<size_t>(i)] = 1.0;
        m.inner[static_cast<size_t>(j)] = fm;
        break;
      }
    }
  }
  return m;
}

void MaskSet::validate(const ModelConfig& cfg) const {
  if (!emb.defined() || emb.size() != cfg.d_e)
    fail("emb mask length " + std::to_string(emb.defined() ? emb.size() : 0) + " != d_e " +
         std::to_string(cfg.d_e));
  if (!gamma.defined() || gamma.size() != cfg.n_layers)
    fail("gamma length != n_layers " + std::to_string(cfg.n_layers));
  if (static_cast<int>(inner.size()) != cfg.n_layers) fail("inner mask count != n_layers");
  for (int j = 0; j < cfg.n_layers; ++j) {
    const Tensor& t = inner[static_cast<size_t>(j)];
    int want = 0;
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::MAMBA: want = cfg.mamba_inner(); break;
      case LayerKind::ATTN: want = cfg.attn_inner(); break;
      case LayerKind::FFN: want = cfg.d_int; break;
    }
    if (!t.defined() || t.size() != want)
      fail("layer " + std::to_string(j) + " inner mask length " +
           std::to_string(t.defined() ? t.size() : 0) + " != " + std::to_string(want));
    if (cfg.pattern[static_cast<size_t>(j)] == LayerKind::MAMBA) {
      const Tensor& hm = mamba_head[static_cast<size_t>(j)];
      if (!hm.defined() || hm.size() != cfg.m_h)
        fail("layer " + std::to_string(j) + " head mask length != m_h");
    }
  }
}

void check_mask_structure(const ModelConfig& cfg, const MaskSet& masks) {
  masks.validate(cfg);
  auto binary = [](const Tensor& t) {
    for (double v : t.data())
      if (v != 0.0 && v != 1.0) fail("mask is not binary");
  };
  auto prefix = [](std::span<const double> v, const char* what) {
    bool seen_zero = false;
    for (double x : v) {
      if (x == 0.0) seen_zero = true;
      else if (seen_zero)
        fail(std::string(what) + " mask is not a prefix of ones");
    }
  };
  binary(masks.emb);
  prefix(masks.emb.data(), "embedding");
  binary(masks.gamma);
  for (int j = 0; j < cfg.n_layers; ++j) {
    const Tensor& t = masks.inner[static_cast<size_t>(j)];
    binary(t);
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::MAMBA: {
        const Tensor& hm = masks.mamba_head[static_cast<size_t>(j)];
        binary(hm);
        // group uniformity: identical on/off pattern across groups, prefix
        // within each group
        const int hpg = cfg.heads_per_group();
        for (int grp = 0; grp < cfg.g; ++grp)
          prefix(std::span<const double>(hm.data().data() + grp * hpg, static_cast<size_t>(hpg)),
                 "mamba head group");
        for (int h = 0; h < cfg.m_h; ++h)
          if (hm.data()[static_cast<size_t>(h)] !=
              hm.data()[static_cast<size_t>(h % hpg)])
            fail("mamba head pattern differs across groups");
        // channel pattern identical across active heads, prefix in channels
        std::vector<double> chan_ref;
        for (int h = 0; h < cfg.m_h; ++h) {
          std::span<const double> row(t.data().data() + static_cast<int64_t>(h) * cfg.m_d,
                                      static_cast<size_t>(cfg.m_d));
          if (hm.data()[static_cast<size_t>(h)] == 0.0) {
            for (double v : row)
              if (v != 0.0) fail("inactive mamba head has active channels");
            continue;
          }
          prefix(row, "mamba channel");
          if (chan_ref.empty())
            chan_ref.assign(row.begin(), row.end());
          else
            for (int c = 0; c < cfg.m_d; ++c)
              if (row[static_cast<size_t>(c)] != chan_ref[static_cast<size_t>(c)])
                fail("mamba channel pattern differs across active heads");
        }
        break;
      }
      case LayerKind::ATTN: {
        // head-blockwise: inactive heads all zero; active heads share a
        // prefix channel pattern
        std::vector<double> ref;
        for (int h = 0; h < cfg.n_h; ++h) {
          std::span<const double> row(t.data().data() + static_cast<int64_t>(h) * cfg.d_h,
                                      static_cast<size_t>(cfg.d_h));
          bool any = false;
          for (double v : row) any = any || v != 0.0;
          if (!any) continue;
          prefix(row, "attention head");
          if (ref.empty())
            ref.assign(row.begin(), row.end());
          else
            for (int c = 0; c < cfg.d_h; ++c)
              if (row[static_cast<size_t>(c)] != ref[static_cast<size_t>(c)])
                fail("attention head channel pattern differs across active heads");
        }
        break;
      }
      case LayerKind::FFN:
        prefix(t.data(), "ffn");
        break;
    }
  }
}

HybridModel HybridModel::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::fork(seed, 0x6d6f64);
  HybridModel m;
  m.config = cfg;
  m.embedding = randn({cfg.vocab, cfg.d_e}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_e)));
  m.final_ln_g = Tensor::full({cfg.d_e}, 1.0);
  m.final_ln_b = Tensor::zeros({cfg.d_e});
  m.lm_head = init_weight(cfg.vocab, cfg.d_e, rng);
  for (int j = 0; j < cfg.n_layers; ++j) {
    Layer layer;
    layer.kind = cfg.pattern[static_cast<size_t>(j)];
    switch (layer.kind) {
      case LayerKind::MAMBA: {
        MambaLayer& L = layer.mamba;
        L.ln_g = Tensor::full({cfg.d_e}, 1.0);
        L.ln_b = Tensor::zeros({cfg.d_e});
        L.w_z = init_weight(cfg.mamba_inner(), cfg.d_e, rng);
        L.w_x = init_weight(cfg.mamba_inner(), cfg.d_e, rng);
        L.w_b = init_weight(cfg.g * cfg.d_s, cfg.d_e, rng);
        L.w_c = init_weight(cfg.g * cfg.d_s, cfg.d_e, rng);
        L.w_dt = init_weight(cfg.m_h, cfg.d_e, rng);
        // decay rates log-spaced in [0.01, 1] so some heads hold state across
        // long spans and others act locally
        L.a_log = Tensor::zeros({cfg.m_h});
        for (int h = 0; h < cfg.m_h; ++h)
          L.a_log.data()[static_cast<size_t>(h)] =
              rng.uniform(std::log(0.01), std::log(1.0));
        L.d = rand_uniform({cfg.m_h}, rng, 0.5, 1.0);
        const double ck = 1.0 / std::sqrt(static_cast<double>(cfg.conv_kernel));
        L.conv_x = rand_uniform({cfg.mamba_inner(), cfg.conv_kernel}, rng, -ck, ck);
        L.conv_b = rand_uniform({cfg.g * cfg.d_s, cfg.conv_kernel}, rng, -ck, ck);
        L.conv_c = rand_uniform({cfg.g * cfg.d_s, cfg.conv_kernel}, rng, -ck, ck);
        L.rms_w = Tensor::full({cfg.mamba_inner()}, 1.0);
        L.w_o = init_weight(cfg.d_e, cfg.mamba_inner(), rng);
        break;
      }
      case LayerKind::ATTN: {
        AttnLayer& L = layer.attn;
        L.ln_g = Tensor::full({cfg.d_e}, 1.0);
        L.ln_b = Tensor::zeros({cfg.d_e});
        L.w_q = init_weight(cfg.attn_inner(), cfg.d_e, rng);
        L.w_k = init_weight(cfg.attn_inner(), cfg.d_e, rng);
        L.w_v = init_weight(cfg.attn_inner(), cfg.d_e, rng);
        L.w_o = init_weight(cfg.d_e, cfg.attn_inner(), rng);
        break;
      }
      case LayerKind::FFN: {
        FfnLayer& L = layer.ffn;
        L.ln_g = Tensor::full({cfg.d_e}, 1.0);
        L.ln_b = Tensor::zeros({cfg.d_e});
        L.w1 = init_weight(cfg.d_int, cfg.d_e, rng);
        L.w2 = init_weight(cfg.d_e, cfg.d_int, rng);
        break;
      }
    }
    m.layers.push_back(std::move(layer));
  }
  return m;
}

std::vector<std::pair<std::string, Tensor>> HybridModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding);
  for (size_t j = 0; j < layers.size(); ++j) {
    const std::string p = "layers." + std::to_string(j) + ".";
    const Layer& L = layers[j];
    switch (L.kind) {
      case LayerKind::MAMBA:
        out.emplace_back(p + "ln_g", L.mamba.ln_g);
        out.emplace_back(p + "ln_b", L.mamba.ln_b);
        out.emplace_back(p + "w_z", L.mamba.w_z);
        out.emplace_back(p + "w_x", L.mamba.w_x);
        out.emplace_back(p + "w_b", L.mamba.w_b);
        out.emplace_back(p + "w_c", L.mamba.w_c);
        out.emplace_back(p + "w_dt", L.mamba.w_dt);
        out.emplace_back(p + "a_log", L.mamba.a_log);
        out.emplace_back(p + "d", L.mamba.d);
        out.emplace_back(p + "conv_x", L.mamba.conv_x);
        out.emplace_back(p + "conv_b", L.mamba.conv_b);
        out.emplace_back(p + "conv_c", L.mamba.conv_c);
        out.emplace_back(p + "rms_w", L.mamba.rms_w);
        out.emplace_back(p + "w_o", L.mamba.w_o);
        break;
      case LayerKind::ATTN:
        out.emplace_back(p + "ln_g", L.attn.ln_g);
        out.emplace_back(p + "ln_b", L.attn.ln_b);
        out.emplace_back(p + "w_q", L.attn.w_q);
        out.emplace_back(p + "w_k", L.attn.w_k);
        out.emplace_back(p + "w_v", L.attn.w_v);
        out.emplace_back(p + "w_o", L.attn.w_o);
        break;
      case LayerKind::FFN:
        out.emplace_back(p + "ln_g", L.ffn.ln_g);
        out.emplace_back(p + "ln_b", L.ffn.ln_b);
        out.emplace_back(p + "w1", L.ffn.w1);
        out.emplace_back(p + "w2", L.ffn.w2);
        break;
    }
  }
  out.emplace_back("final_ln_g", final_ln_g);
  out.emplace_back("final_ln_b", final_ln_b);
  out.emplace_back("lm_head", lm_head);
  return out;
}

std::vector<Tensor> HybridModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

int64_t HybridModel::parameter_count() const {
  int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.size();
  return n;
}

void HybridModel::set_requires_grad(bool rg) {
  for (Tensor& t : parameters()) t.set_requires_grad(rg);
}

HybridModel HybridModel::clone() const {
  HybridModel copy = *this;
  auto deep = [](Tensor& t) {
    if (!t.defined()) return;
    Tensor c = Tensor::zeros(t.shape(), t.requires_grad());
    auto src = t.data();
    auto dst = c.data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = src[i];
    t = c;
  };
  deep(copy.embedding);
  deep(copy.final_ln_g);
  deep(copy.final_ln_b);
  deep(copy.lm_head);
  for (Layer& L : copy.layers) {
    for (Tensor* t : {&L.mamba.ln_g, &L.mamba.ln_b, &L.mamba.w_z, &L.mamba.w_x, &L.mamba.w_b,
                      &L.mamba.w_c, &L.mamba.w_dt, &L.mamba.a_log, &L.mamba.d, &L.mamba.conv_x,
                      &L.mamba.conv_b, &L.mamba.conv_c, &L.mamba.rms_w, &L.mamba.w_o,
                      &L.attn.ln_g, &L.attn.ln_b, &L.attn.w_q, &L.attn.w_k, &L.attn.w_v,
                      &L.attn.w_o, &L.ffn.ln_g, &L.ffn.ln_b, &L.ffn.w1, &L.ffn.w2})
      deep(*t);
  }
  return copy;
}

Tensor mamba_forward(const MambaLayer& layer, const ModelConfig& cfg, const Tensor& input,
                     const Tensor& emb_mask, const Tensor& inner_mask,
                     const Tensor& head_mask) {
  if (inner_mask.size() != cfg.mamba_inner())
    fail("mamba inner mask length " + std::to_string(inner_mask.size()) + " != " +
         std::to_string(cfg.mamba_inner()));
  if (head_mask.size() != cfg.m_h) fail("mamba head mask length != m_h");
  Tensor y_ln = layer_norm(input, layer.ln_g, layer.ln_b, emb_mask);
  Tensor z = mul_rowvec(linear(y_ln, layer.w_z), inner_mask);
  Tensor x = mul_rowvec(linear(y_ln, layer.w_x), inner_mask);
  Tensor b = linear(y_ln, layer.w_b);
  Tensor c = linear(y_ln, layer.w_c);
  Tensor dt = mul_rowvec(linear(y_ln, layer.w_dt), head_mask);
  Tensor xc = conv1d_causal(x, layer.conv_x);
  Tensor bc = conv1d_causal(b, layer.conv_b);
  Tensor cc = conv1d_causal(c, layer.conv_c);
  Tensor a = scale(exp_t(layer.a_log), -1.0);
  Tensor dt_act = softplus(dt);
  Tensor y_ssm =
      selective_scan(xc, bc, cc, a, layer.d, dt_act, cfg.m_h, cfg.m_d, cfg.g, cfg.d_s);
  Tensor gated = mul(y_ssm, silu(z));
  Tensor gn = rms_norm(gated, layer.rms_w, inner_mask);
  Tensor y_pre = linear(gn, layer.w_o);
  return mul_rowvec(y_pre, emb_mask);
}

Tensor attention_forward(const AttnLayer& layer, const ModelConfig& cfg, const Tensor& input,
                         const Tensor& emb_mask, const Tensor& head_mask_vec) {
  if (head_mask_vec.size() != cfg.attn_inner())
    fail("attention head mask length " + std::to_string(head_mask_vec.size()) + " != " +
         std::to_string(cfg.attn_inner()));
  Tensor y_ln = layer_norm(input, layer.ln_g, layer.ln_b, emb_mask);
  Tensor q = mul_rowvec(linear(y_ln, layer.w_q), head_mask_vec);
  Tensor k = mul_rowvec(linear(y_ln, layer.w_k), head_mask_vec);
  Tensor v = mul_rowvec(linear(y_ln, layer.w_v), head_mask_vec);
  Tensor s = attn_scores(q, k, cfg.n_h, cfg.attn_scale);
  Tensor p = softmax_lastdim(s);
  Tensor mix = attn_mix(p, v, cfg.n_h);
  Tensor y_pre = linear(mix, layer.w_o);
  return mul_rowvec(y_pre, emb_mask);
}

Tensor ffn_forward(const FfnLayer& layer, const ModelConfig& cfg, const Tensor& input,
                   const Tensor& emb_mask, const Tensor& neuron_mask) {
  if (neuron_mask.size() != cfg.d_int)
    fail("ffn mask length " + std::to_string(neuron_mask.size()) + " != d_int " +
         std::to_string(cfg.d_int));
  Tensor y_ln = layer_norm(input, layer.ln_g, layer.ln_b, emb_mask);
  Tensor h = mul_rowvec(linear(y_ln, layer.w1), neuron_mask);
  Tensor y_pre = linear(silu(h), layer.w2);
  return mul_rowvec(y_pre, emb_mask);
}

Tensor stack_forward(const HybridModel& model, const MaskSet& masks,
                     std::span<const int32_t> tokens, int batch, int len,
                     std::vector<Tensor>* trace) {
  const ModelConfig& cfg = model.config;
  masks.validate(cfg);
  Tensor y = mul_rowvec(embedding_lookup(model.embedding, tokens, batch, len), masks.emb);
  if (trace) trace->push_back(y);
  const bool gamma_live = masks.gamma.requires_grad();
  for (int j = 0; j < cfg.n_layers; ++j) {
    const double gv = masks.gamma.data()[static_cast<size_t>(j)];
    if (!gamma_live && gv == 0.0) {
      if (trace) trace->push_back(y);
      continue;
    }
    const Layer& L = model.layers[static_cast<size_t>(j)];
    Tensor out;
    switch (L.kind) {
      case LayerKind::MAMBA:
        out = mamba_forward(L.mamba, cfg, y, masks.emb, masks.inner[static_cast<size_t>(j)],
                            masks.mamba_head[static_cast<size_t>(j)]);
        break;
      case LayerKind::ATTN:
        out = attention_forward(L.attn, cfg, y, masks.emb, masks.inner[static_cast<size_t>(j)]);
        break;
      case LayerKind::FFN:
        out = ffn_forward(L.ffn, cfg, y, masks.emb, masks.inner[static_cast<size_t>(j)]);
        break;
    }
    if (gamma_live || gv != 1.0) out = mul_scalar(out, select_index(masks.gamma, j));
    y = add(y, out);
    if (trace) trace->push_back(y);
  }
  Tensor final = layer_norm(y, model.final_ln_g, model.final_ln_b, masks.emb);
  return linear(final, model.lm_head);
}

}  // namespace nemelast
