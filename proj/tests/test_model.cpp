#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "nemelast/model.hpp"
#include "nemelast/rng.hpp"

using namespace nemelast;

namespace {

// Naive unmasked references, independent of the tensor op implementations.

std::vector<double> ref_layer_norm_row(const std::vector<double>& x, std::span<const double> g,
                                       std::span<const double> b, double eps = 1e-5) {
  const size_t d = x.size();
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  std::vector<double> out(d);
  for (size_t i = 0; i < d; ++i)
    out[i] = g[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
  return out;
}

double ref_silu(double x) { return x / (1.0 + std::exp(-x)); }
double ref_softplus(double x) { return std::log1p(std::exp(x)); }

// full mamba layer on one sequence, no masks, plain loops
std::vector<std::vector<double>> ref_mamba(const MambaLayer& L, const ModelConfig& cfg,
                                           const std::vector<std::vector<double>>& seq) {
  const int len = static_cast<int>(seq.size());
  const int inner = cfg.mamba_inner(), gs = cfg.g * cfg.d_s;
  auto matvec = [](const Tensor& w, const std::vector<double>& v) {
    const int out_dim = w.dim(0), in_dim = w.dim(1);
    std::vector<double> out(static_cast<size_t>(out_dim), 0.0);
    for (int o = 0; o < out_dim; ++o)
      for (int i = 0; i < in_dim; ++i)
        out[static_cast<size_t>(o)] += w.data()[static_cast<size_t>(o) * in_dim + i] * v[static_cast<size_t>(i)];
    return out;
  };
  std::vector<std::vector<double>> z(static_cast<size_t>(len)), x(static_cast<size_t>(len)),
      B(static_cast<size_t>(len)), C(static_cast<size_t>(len)), dt(static_cast<size_t>(len));
  for (int t = 0; t < len; ++t) {
    auto ln = ref_layer_norm_row(seq[static_cast<size_t>(t)], L.ln_g.data(), L.ln_b.data());
    z[static_cast<size_t>(t)] = matvec(L.w_z, ln);
    x[static_cast<size_t>(t)] = matvec(L.w_x, ln);
    B[static_cast<size_t>(t)] = matvec(L.w_b, ln);
    C[static_cast<size_t>(t)] = matvec(L.w_c, ln);
    dt[static_cast<size_t>(t)] = matvec(L.w_dt, ln);
  }
  auto conv = [&](std::vector<std::vector<double>>& s, const Tensor& kern, int ch) {
    const int kw = kern.dim(1);
    std::vector<std::vector<double>> out(static_cast<size_t>(len),
                                         std::vector<double>(static_cast<size_t>(ch), 0.0));
    for (int t = 0; t < len; ++t)
      for (int c = 0; c < ch; ++c)
        for (int k = 0; k < kw; ++k) {
          const int src = t - (kw - 1) + k;
          if (src < 0) continue;
          out[static_cast<size_t>(t)][static_cast<size_t>(c)] +=
              kern.data()[static_cast<size_t>(c) * kw + k] * s[static_cast<size_t>(src)][static_cast<size_t>(c)];
        }
    s = out;
  };
  conv(x, L.conv_x, inner);
  conv(B, L.conv_b, gs);
  conv(C, L.conv_c, gs);
  // scan
  std::vector<std::vector<double>> y(static_cast<size_t>(len),
                                     std::vector<double>(static_cast<size_t>(inner), 0.0));
  const int hpg = cfg.heads_per_group();
  for (int h = 0; h < cfg.m_h; ++h) {
    const int grp = h / hpg;
    const double a = -std::exp(L.a_log.data()[static_cast<size_t>(h)]);
    const double dskip = L.d.data()[static_cast<size_t>(h)];
    std::vector<double> state(static_cast<size_t>(cfg.d_s) * cfg.m_d, 0.0);
    for (int t = 0; t < len; ++t) {
      const double dt_act = ref_softplus(dt[static_cast<size_t>(t)][static_cast<size_t>(h)]);
      const double alpha = std::exp(dt_act * a);
      for (int s = 0; s < cfg.d_s; ++s)
        for (int c = 0; c < cfg.m_d; ++c)
          state[static_cast<size_t>(s) * cfg.m_d + c] =
              alpha * state[static_cast<size_t>(s) * cfg.m_d + c] +
              dt_act * B[static_cast<size_t>(t)][static_cast<size_t>(grp) * cfg.d_s + s] *
                  x[static_cast<size_t>(t)][static_cast<size_t>(h) * cfg.m_d + c];
      for (int c = 0; c < cfg.m_d; ++c) {
        double acc = 0;
        for (int s = 0; s < cfg.d_s; ++s)
          acc += C[static_cast<size_t>(t)][static_cast<size_t>(grp) * cfg.d_s + s] *
                 state[static_cast<size_t>(s) * cfg.m_d + c];
        y[static_cast<size_t>(t)][static_cast<size_t>(h) * cfg.m_d + c] =
            acc + dskip * x[static_cast<size_t>(t)][static_cast<size_t>(h) * cfg.m_d + c];
      }
    }
  }
  // gated rms norm + output projection
  std::vector<std::vector<double>> out(static_cast<size_t>(len),
                                       std::vector<double>(static_cast<size_t>(cfg.d_e), 0.0));
  for (int t = 0; t < len; ++t) {
    std::vector<double> gated(static_cast<size_t>(inner));
    double ms = 0;
    for (int i = 0; i < inner; ++i) {
      gated[static_cast<size_t>(i)] = y[static_cast<size_t>(t)][static_cast<size_t>(i)] *
                                      ref_silu(z[static_cast<size_t>(t)][static_cast<size_t>(i)]);
      ms += gated[static_cast<size_t>(i)] * gated[static_cast<size_t>(i)];
    }
    ms /= inner;
    const double inv = 1.0 / std::sqrt(ms + 1e-5);
    for (int o = 0; o < cfg.d_e; ++o) {
      double acc = 0;
      for (int i = 0; i < inner; ++i)
        acc += L.w_o.data()[static_cast<size_t>(o) * inner + i] *
               L.rms_w.data()[static_cast<size_t>(i)] * gated[static_cast<size_t>(i)] * inv;
      out[static_cast<size_t>(t)][static_cast<size_t>(o)] = acc;
    }
  }
  return out;
}

// full causal attention layer on one sequence, no masks
std::vector<std::vector<double>> ref_attention(const AttnLayer& L, const ModelConfig& cfg,
                                               const std::vector<std::vector<double>>& seq) {
  const int len = static_cast<int>(seq.size());
  const int inner = cfg.attn_inner();
  auto matvec = [](const Tensor& w, const std::vector<double>& v) {
    const int out_dim = w.dim(0), in_dim = w.dim(1);
    std::vector<double> out(static_cast<size_t>(out_dim), 0.0);
    for (int o = 0; o < out_dim; ++o)
      for (int i = 0; i < in_dim; ++i)
        out[static_cast<size_t>(o)] += w.data()[static_cast<size_t>(o) * in_dim + i] * v[static_cast<size_t>(i)];
    return out;
  };
  std::vector<std::vector<double>> q(static_cast<size_t>(len)), k(static_cast<size_t>(len)),
      v(static_cast<size_t>(len));
  for (int t = 0; t < len; ++t) {
    auto ln = ref_layer_norm_row(seq[static_cast<size_t>(t)], L.ln_g.data(), L.ln_b.data());
    q[static_cast<size_t>(t)] = matvec(L.w_q, ln);
    k[static_cast<size_t>(t)] = matvec(L.w_k, ln);
    v[static_cast<size_t>(t)] = matvec(L.w_v, ln);
  }
  std::vector<std::vector<double>> mix(static_cast<size_t>(len),
                                       std::vector<double>(static_cast<size_t>(inner), 0.0));
  for (int h = 0; h < cfg.n_h; ++h) {
    for (int i = 0; i < len; ++i) {
      std::vector<double> sc(static_cast<size_t>(i) + 1);
      double mx = -1e300;
      for (int j = 0; j <= i; ++j) {
        double acc = 0;
        for (int c = 0; c < cfg.d_h; ++c)
          acc += q[static_cast<size_t>(i)][static_cast<size_t>(h) * cfg.d_h + c] *
                 k[static_cast<size_t>(j)][static_cast<size_t>(h) * cfg.d_h + c];
        sc[static_cast<size_t>(j)] = acc * cfg.attn_scale;
        mx = std::max(mx, sc[static_cast<size_t>(j)]);
      }
      double denom = 0;
      for (int j = 0; j <= i; ++j) denom += std::exp(sc[static_cast<size_t>(j)] - mx);
      for (int j = 0; j <= i; ++j) {
        const double p = std::exp(sc[static_cast<size_t>(j)] - mx) / denom;
        for (int c = 0; c < cfg.d_h; ++c)
          mix[static_cast<size_t>(i)][static_cast<size_t>(h) * cfg.d_h + c] +=
              p * v[static_cast<size_t>(j)][static_cast<size_t>(h) * cfg.d_h + c];
      }
    }
  }
  std::vector<std::vector<double>> out(static_cast<size_t>(len));
  for (int t = 0; t < len; ++t) out[static_cast<size_t>(t)] = matvec(L.w_o, mix[static_cast<size_t>(t)]);
  return out;
}

Tensor seq_tensor(const std::vector<std::vector<double>>& seq) {
  const int len = static_cast<int>(seq.size());
  const int d = static_cast<int>(seq[0].size());
  Tensor t = Tensor::zeros({1, len, d});
  for (int i = 0; i < len; ++i)
    for (int c = 0; c < d; ++c) t.data()[static_cast<size_t>(i) * d + c] = seq[static_cast<size_t>(i)][static_cast<size_t>(c)];
  return t;
}

std::vector<std::vector<double>> random_seq(int len, int d, Rng& rng) {
  std::vector<std::vector<double>> seq(static_cast<size_t>(len), std::vector<double>(static_cast<size_t>(d)));
  for (auto& row : seq)
    for (double& v : row) v = rng.normal();
  return seq;
}

double max_abs_diff(const Tensor& t, const std::vector<std::vector<double>>& ref) {
  double mx = 0;
  const int len = static_cast<int>(ref.size());
  const int d = static_cast<int>(ref[0].size());
  for (int i = 0; i < len; ++i)
    for (int c = 0; c < d; ++c)
      mx = std::max(mx, std::abs(t.data()[static_cast<size_t>(i) * d + c] -
                                 ref[static_cast<size_t>(i)][static_cast<size_t>(c)]));
  return mx;
}

}  // namespace

TEST_CASE("mamba_forward with identity masks equals the unmasked reference") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 3);
  Rng rng(17);
  auto seq = random_seq(7, cfg.d_e, rng);
  MaskSet ones = MaskSet::all_ones(cfg);
  Tensor out = mamba_forward(m.layers[0].mamba, cfg, seq_tensor(seq), ones.emb, ones.inner[0],
                             ones.mamba_head[0]);
  auto ref = ref_mamba(m.layers[0].mamba, cfg, seq);
  CHECK(max_abs_diff(out, ref) < 1e-10);
}

TEST_CASE("attention_forward with identity masks equals the unmasked reference") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 5);
  Rng rng(19);
  auto seq = random_seq(6, cfg.d_e, rng);
  MaskSet ones = MaskSet::all_ones(cfg);
  Tensor out = attention_forward(m.layers[1].attn, cfg, seq_tensor(seq), ones.emb, ones.inner[1]);
  auto ref = ref_attention(m.layers[1].attn, cfg, seq);
  CHECK(max_abs_diff(out, ref) < 1e-10);
}

TEST_CASE("masked-out mamba head ignores its projection rows") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 7);
  Rng rng(23);
  auto seq = random_seq(6, cfg.d_e, rng);
  Tensor input = seq_tensor(seq);

  Selection sel = Selection::full(cfg);
  sel.mamba_heads = 2;  // one head per group; head 1 of each group is off
  MaskSet masks = MaskSet::from_selection(cfg, sel);
  Tensor base = mamba_forward(m.layers[0].mamba, cfg, input, masks.emb, masks.inner[0],
                              masks.mamba_head[0]);

  // perturb the masked head's rows of w_x, w_z, w_dt
  const int victim = 1;  // within-group rank 1 -> masked when 1 head/group
  HybridModel m2 = m.clone();
  MambaLayer& L = m2.layers[0].mamba;
  for (int c = 0; c < cfg.m_d; ++c) {
    for (int e = 0; e < cfg.d_e; ++e) {
      L.w_x.data()[static_cast<size_t>(victim * cfg.m_d + c) * cfg.d_e + e] += rng.normal();
      L.w_z.data()[static_cast<size_t>(victim * cfg.m_d + c) * cfg.d_e + e] += rng.normal();
    }
  }
  for (int e = 0; e < cfg.d_e; ++e)
    L.w_dt.data()[static_cast<size_t>(victim) * cfg.d_e + e] += rng.normal();
  Tensor perturbed = mamba_forward(L, cfg, input, masks.emb, masks.inner[0], masks.mamba_head[0]);
  for (int64_t i = 0; i < base.size(); ++i)
    CHECK(base.data()[i] == perturbed.data()[i]);
}

TEST_CASE("single active attention head equals a one-head layer built from its weights") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 11);
  Rng rng(29);
  auto seq = random_seq(5, cfg.d_e, rng);
  Tensor input = seq_tensor(seq);

  Selection sel = Selection::full(cfg);
  sel.attn_heads = 1;
  MaskSet masks = MaskSet::from_selection(cfg, sel);
  Tensor masked =
      attention_forward(m.layers[1].attn, cfg, input, masks.emb, masks.inner[1]);

  // one-head config sharing the parent's softmax scale
  ModelConfig cfg1 = cfg;
  cfg1.n_h = 1;
  AttnLayer one;
  const AttnLayer& src = m.layers[1].attn;
  one.ln_g = src.ln_g;
  one.ln_b = src.ln_b;
  auto head_rows = [&](const Tensor& w) {
    Tensor out = Tensor::zeros({cfg.d_h, cfg.d_e});
    for (int r = 0; r < cfg.d_h; ++r)
      for (int c = 0; c < cfg.d_e; ++c)
        out.data()[static_cast<size_t>(r) * cfg.d_e + c] = w.data()[static_cast<size_t>(r) * cfg.d_e + c];
    return out;
  };
  one.w_q = head_rows(src.w_q);
  one.w_k = head_rows(src.w_k);
  one.w_v = head_rows(src.w_v);
  one.w_o = Tensor::zeros({cfg.d_e, cfg.d_h});
  for (int r = 0; r < cfg.d_e; ++r)
    for (int c = 0; c < cfg.d_h; ++c)
      one.w_o.data()[static_cast<size_t>(r) * cfg.d_h + c] =
          src.w_o.data()[static_cast<size_t>(r) * cfg.attn_inner() + c];
  MaskSet ones1 = MaskSet::all_ones(cfg1);
  Tensor direct = attention_forward(one, cfg1, input, ones1.emb, ones1.inner[1]);
  for (int64_t i = 0; i < masked.size(); ++i)
    CHECK(masked.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-10));
}

TEST_CASE("applying binary output masks twice changes nothing") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 13);
  Rng rng(31);
  Tensor input = seq_tensor(random_seq(5, cfg.d_e, rng));
  Selection sel = Selection::full(cfg);
  sel.attn_heads = 1;
  sel.emb = 5;
  MaskSet masks = MaskSet::from_selection(cfg, sel);
  Tensor out = attention_forward(m.layers[1].attn, cfg, input, masks.emb, masks.inner[1]);
  Tensor twice = mul_rowvec(mul_rowvec(out, masks.emb), masks.emb);
  for (int64_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == twice.data()[i]);
}

TEST_CASE("ffn mask keeping the first j neurons equals a truncated layer") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 17);
  Rng rng(37);
  Tensor input = seq_tensor(random_seq(5, cfg.d_e, rng));
  const int j = 7;
  Selection sel = Selection::full(cfg);
  sel.ffn = j;
  MaskSet masks = MaskSet::from_selection(cfg, sel);
  Tensor masked = ffn_forward(m.layers[2].ffn, cfg, input, masks.emb, masks.inner[2]);

  ModelConfig cfg_t = cfg;
  cfg_t.d_int = j;
  FfnLayer trunc;
  const FfnLayer& src = m.layers[2].ffn;
  trunc.ln_g = src.ln_g;
  trunc.ln_b = src.ln_b;
  trunc.w1 = Tensor::zeros({j, cfg.d_e});
  for (int r = 0; r < j; ++r)
    for (int c = 0; c < cfg.d_e; ++c)
      trunc.w1.data()[static_cast<size_t>(r) * cfg.d_e + c] = src.w1.data()[static_cast<size_t>(r) * cfg.d_e + c];
  trunc.w2 = Tensor::zeros({cfg.d_e, j});
  for (int r = 0; r < cfg.d_e; ++r)
    for (int c = 0; c < j; ++c)
      trunc.w2.data()[static_cast<size_t>(r) * j + c] = src.w2.data()[static_cast<size_t>(r) * cfg.d_int + c];
  MaskSet ones_t = MaskSet::all_ones(cfg_t);
  Tensor direct = ffn_forward(trunc, cfg_t, input, ones_t.emb, ones_t.inner[2]);
  for (int64_t i = 0; i < masked.size(); ++i)
    CHECK(masked.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-6));
}

TEST_CASE("zero-neuron ffn mask yields exactly zero output") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 19);
  Rng rng(41);
  Tensor input = seq_tensor(random_seq(4, cfg.d_e, rng));
  MaskSet masks = MaskSet::all_ones(cfg);
  Tensor zero_mask = Tensor::zeros({cfg.d_int});
  Tensor out = ffn_forward(m.layers[2].ffn, cfg, input, masks.emb, zero_mask);
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("stack with all layers gated off reduces to embedding, norm, head") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 23);
  Selection sel = Selection::full(cfg);
  sel.depth = 0;
  sel.active_layers.assign(static_cast<size_t>(cfg.n_layers), 0);
  MaskSet masks = MaskSet::from_selection(cfg, sel);
  std::vector<int32_t> toks = {1, 4, 2, 9, 0, 7};
  Tensor logits = stack_forward(m, masks, toks, 1, 6);

  Tensor emb = mul_rowvec(embedding_lookup(m.embedding, toks, 1, 6), masks.emb);
  Tensor fin = layer_norm(emb, m.final_ln_g, m.final_ln_b, masks.emb);
  Tensor direct = linear(fin, m.lm_head);
  for (int64_t i = 0; i < logits.size(); ++i) CHECK(logits.data()[i] == direct.data()[i]);
}

TEST_CASE("residual stream is exactly zero on inactive embedding channels") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 29);
  Selection sel = Selection::full(cfg);
  sel.emb = 5;
  sel.mamba_heads = 2;
  sel.mamba_ch = 2;
  sel.attn_heads = 1;
  sel.ffn = 6;
  MaskSet masks = MaskSet::from_selection(cfg, sel);
  std::vector<int32_t> toks = {3, 1, 8, 2, 10, 6, 0, 5};
  std::vector<Tensor> trace;
  stack_forward(m, masks, toks, 1, 8, &trace);
  REQUIRE(trace.size() == static_cast<size_t>(cfg.n_layers) + 1);
  for (const Tensor& h : trace) {
    for (int64_t i = 0; i < h.size(); ++i) {
      const int ch = static_cast<int>(i % cfg.d_e);
      if (ch >= sel.emb) CHECK(h.data()[i] == 0.0);
    }
  }
}

TEST_CASE("mask nesting: fewer counts produce elementwise-smaller masks") {
  ModelConfig cfg = ModelConfig::desk_default();
  Selection small;
  small.emb = 32;
  small.mamba_heads = 4;
  small.mamba_ch = 8;
  small.attn_heads = 2;
  small.attn_head_dim = cfg.d_h;
  small.ffn = 128;
  small.depth = 6;
  Selection big;
  big.emb = 48;
  big.mamba_heads = 6;
  big.mamba_ch = 12;
  big.attn_heads = 3;
  big.attn_head_dim = cfg.d_h;
  big.ffn = 192;
  big.depth = 7;
  // nested depth choice: top-L layers in the same ranking order
  auto act = [&](int L) {
    std::vector<uint8_t> a(static_cast<size_t>(cfg.n_layers), 0);
    for (int i = 0; i < L; ++i) a[static_cast<size_t>(i)] = 1;
    return a;
  };
  small.active_layers = act(small.depth);
  big.active_layers = act(big.depth);
  MaskSet ms = MaskSet::from_selection(cfg, small);
  MaskSet mb = MaskSet::from_selection(cfg, big);
  for (int64_t i = 0; i < ms.emb.size(); ++i) CHECK(ms.emb.data()[i] <= mb.emb.data()[i]);
  for (int64_t i = 0; i < ms.gamma.size(); ++i) CHECK(ms.gamma.data()[i] <= mb.gamma.data()[i]);
  for (int j = 0; j < cfg.n_layers; ++j) {
    for (int64_t i = 0; i < ms.inner[static_cast<size_t>(j)].size(); ++i)
      CHECK(ms.inner[static_cast<size_t>(j)].data()[i] <= mb.inner[static_cast<size_t>(j)].data()[i]);
  }
}

TEST_CASE("mask structure checks catch group violations") {
  ModelConfig cfg = ModelConfig::desk_default();
  Selection sel = Selection::full(cfg);
  sel.mamba_heads = 4;
  sel.mamba_ch = 8;
  MaskSet masks = MaskSet::from_selection(cfg, sel);
  CHECK_NOTHROW(check_mask_structure(cfg, masks));

  // unbalance the groups: activate an extra head in group 0 only
  MaskSet bad = masks;
  bad.mamba_head[0].data()[2] = 1.0;
  for (int c = 0; c < 8; ++c) bad.inner[0].data()[static_cast<size_t>(2 * cfg.m_d + c)] = 1.0;
  CHECK_THROWS_AS(check_mask_structure(cfg, bad), std::invalid_argument);
}

TEST_CASE("stack forward is deterministic and mask-shape errors are rejected") {
  ModelConfig cfg = ModelConfig::tiny();
  HybridModel m = HybridModel::init(cfg, 31);
  MaskSet masks = MaskSet::all_ones(cfg);
  std::vector<int32_t> toks = {1, 2, 3, 4};
  Tensor a = stack_forward(m, masks, toks, 1, 4);
  Tensor b = stack_forward(m, masks, toks, 1, 4);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);

  MaskSet wrong = masks;
  wrong.emb = Tensor::zeros({cfg.d_e + 1});
  CHECK_THROWS_AS(stack_forward(m, wrong, toks, 1, 4), std::invalid_argument);
}
