#include "nemelast/router.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nemelast {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument("router: " + what); }

constexpr double kLeakySlope = 0.01;

int argmax_row(std::span<const double> row) {
  int best = 0;
  for (size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[static_cast<size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// scalar [1] helpers for the expected-cost graph
Tensor sc(double v) { return Tensor::scalar(v); }

Tensor dot_counts(const Tensor& probs_row, const std::vector<double>& counts) {
  Tensor col = Tensor::zeros({static_cast<int>(counts.size()), 1});
  for (size_t i = 0; i < counts.size(); ++i) col.data()[i] = counts[i];
  return reshape(matmul(probs_row, col), {1});
}

Tensor probs_row(const Tensor& probs, int row) {
  if (probs.dim(0) == 1) return reshape(probs, {probs.dim(1)});
  return select_row(probs, row);
}

}  // namespace

AxisId axis_from_name(const std::string& name) {
  if (name == "emb") return AxisId::EMB;
  if (name == "mamba") return AxisId::MAMBA;
  if (name == "attn_head" || name == "attn") return AxisId::ATTN;
  if (name == "ffn") return AxisId::FFN;
  if (name == "depth") return AxisId::DEPTH;
  fail("unknown axis '" + name + "'");
}

const char* axis_name(AxisId axis) {
  switch (axis) {
    case AxisId::EMB: return "emb";
    case AxisId::MAMBA: return "mamba";
    case AxisId::ATTN: return "attn_head";
    case AxisId::FFN: return "ffn";
    case AxisId::DEPTH: return "depth";
  }
  return "?";
}

void AxisConfig::validate(const ModelConfig& cfg) const {
  auto check_sorted = [](const std::vector<int>& v, int mx, const char* what) {
    if (v.empty()) fail(std::string(what) + " set is empty");
    for (size_t i = 0; i < v.size(); ++i) {
      if (v[i] < 1 || v[i] > mx)
        fail(std::string(what) + " count " + std::to_string(v[i]) + " outside [1," +
             std::to_string(mx) + "]");
      if (i > 0 && v[i] <= v[i - 1]) fail(std::string(what) + " set is not ascending");
    }
  };
  check_sorted(emb_counts, cfg.d_e, "emb");
  check_sorted(attn_counts, cfg.n_h, "attn");
  check_sorted(ffn_counts, cfg.d_int, "ffn");
  if (mamba.empty()) fail("mamba set is empty");
  for (size_t i = 0; i < mamba.size(); ++i) {
    const MambaChoice& c = mamba[i];
    if (c.heads < 1 || c.heads > cfg.m_h || c.heads % cfg.g != 0)
      fail("mamba heads " + std::to_string(c.heads) + " invalid for g=" + std::to_string(cfg.g));
    if (c.channels < 1 || c.channels > cfg.m_d)
      fail("mamba channels " + std::to_string(c.channels) + " outside [1," +
           std::to_string(cfg.m_d) + "]");
    if (i > 0 && (c.heads <= mamba[i - 1].heads || c.channels < mamba[i - 1].channels))
      fail("mamba set is not ascending");
  }
}

int RouterBank::layer_count(AxisId axis) const {
  int n = 0;
  switch (axis) {
    case AxisId::MAMBA:
      for (LayerKind k : config.pattern) n += k == LayerKind::MAMBA;
      return n;
    case AxisId::ATTN:
      for (LayerKind k : config.pattern) n += k == LayerKind::ATTN;
      return n;
    case AxisId::FFN:
      for (LayerKind k : config.pattern) n += k == LayerKind::FFN;
      return n;
    case AxisId::DEPTH:
      return config.n_layers;
    case AxisId::EMB:
      return 1;
  }
  return 0;
}

RouterBank RouterBank::init(const ModelConfig& cfg, const AxisConfig& sets, int n_targets,
                            int d_router, uint64_t seed, AxisMode mamba_mode,
                            AxisMode attn_mode, AxisMode ffn_mode) {
  cfg.validate();
  sets.validate(cfg);
  if (n_targets < 1) fail("n_targets must be >= 1");
  if (d_router < 1) fail("d_router must be >= 1");
  RouterBank bank;
  bank.config = cfg;
  bank.sets = sets;
  bank.n_targets = n_targets;
  bank.d_router = d_router;

  auto setup = [&](AxisId axis, AxisMode mode, int option_count) {
    AxisRouter& r = bank.axes[static_cast<int>(axis)];
    r.mode = mode;
    r.n_out = mode == AxisMode::HETEROGENEOUS ? option_count * bank.layer_count(axis)
                                              : option_count;
    Rng rng = Rng::fork(seed, 0x72 + static_cast<uint64_t>(axis));
    r.w1 = randn({d_router, n_targets}, rng, 0.5);
    r.b1 = Tensor::zeros({d_router});
    // zero head keeps the initial decision uniform; gradients reach w1 once
    // w2 moves off zero
    r.w2 = Tensor::zeros({r.n_out, d_router});
    r.b2 = Tensor::zeros({r.n_out});
  };
  setup(AxisId::EMB, AxisMode::HOMOGENEOUS, static_cast<int>(sets.emb_counts.size()));
  setup(AxisId::MAMBA, mamba_mode, static_cast<int>(sets.mamba.size()));
  setup(AxisId::ATTN, attn_mode, static_cast<int>(sets.attn_counts.size()));
  setup(AxisId::FFN, ffn_mode, static_cast<int>(sets.ffn_counts.size()));
  setup(AxisId::DEPTH, AxisMode::HOMOGENEOUS, cfg.n_layers);
  return bank;
}

std::vector<std::pair<std::string, Tensor>> RouterBank::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (int a = 0; a < kNumAxes; ++a) {
    const std::string p = std::string("router.") + axis_name(static_cast<AxisId>(a)) + ".";
    out.emplace_back(p + "w1", axes[a].w1);
    out.emplace_back(p + "b1", axes[a].b1);
    out.emplace_back(p + "w2", axes[a].w2);
    out.emplace_back(p + "b2", axes[a].b2);
  }
  return out;
}

int64_t RouterBank::parameter_count() const {
  int64_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

void RouterBank::set_requires_grad(bool rg) {
  for (auto& [name, t] : named_parameters()) {
    Tensor h = t;
    h.set_requires_grad(rg);
  }
}

void BudgetSpec::validate() const {
  if (target_cost <= 0) fail("budget '" + label + "' target_cost must be positive");
}

Tensor router_forward(const RouterBank& bank, AxisId axis, int budget_id) {
  if (budget_id < 0 || budget_id >= bank.n_targets)
    fail("budget id " + std::to_string(budget_id) + " outside [0," +
         std::to_string(bank.n_targets) + ")");
  const AxisRouter& r = bank.axes[static_cast<int>(axis)];
  Tensor one_hot = Tensor::zeros({1, bank.n_targets});
  one_hot.data()[static_cast<size_t>(budget_id)] = 1.0;
  Tensor h = leaky_relu(add_bias(linear(one_hot, r.w1), r.b1), kLeakySlope);
  Tensor z = add_bias(linear(h, r.w2), r.b2);
  return reshape(scale(z, bank.logit_scale), {r.n_out});
}

Tensor gumbel_softmax(const Tensor& logits, double tau, Rng* rng, bool deterministic) {
  if (tau <= 0) fail("gumbel_softmax: tau must be positive");
  Tensor shifted = logits;
  if (!deterministic) {
    if (!rng) fail("gumbel_softmax: rng required when sampling");
    shifted = add(logits, gumbel_sample(logits.shape(), *rng));
  }
  return softmax_lastdim(scale(shifted, 1.0 / tau));
}

RouterProbs router_probs(const RouterBank& bank, int budget_id, double tau, Rng* rng,
                         bool deterministic) {
  RouterProbs out;
  for (int a = 0; a < kNumAxes; ++a) {
    const AxisRouter& r = bank.axes[a];
    Tensor z = router_forward(bank, static_cast<AxisId>(a), budget_id);
    int options = r.n_out;
    int rows = 1;
    if (r.mode == AxisMode::HETEROGENEOUS) {
      rows = bank.layer_count(static_cast<AxisId>(a));
      if (rows == 0 || r.n_out % rows != 0)
        fail(std::string("axis ") + axis_name(static_cast<AxisId>(a)) + " logits length " +
             std::to_string(r.n_out) + " does not split into " + std::to_string(rows) +
             " per-layer segments");
      options = r.n_out / rows;
    }
    Tensor z2 = reshape(z, {rows, options});
    out.logits[a] = z2;
    out.probs[a] = gumbel_softmax(z2, tau, rng, deterministic);
  }
  return out;
}

RouterProbs deterministic_probs(const RouterBank& bank, int budget_id) {
  RouterBank noise_free = bank;
  noise_free.logit_scale = 1.0;
  return router_probs(noise_free, budget_id, 1.0, nullptr, true);
}

Selection decode_selection(const RouterBank& bank, const ImportanceRanking& ranking,
                           const RouterProbs& probs) {
  const ModelConfig& cfg = bank.config;
  Selection sel;
  sel.attn_head_dim = cfg.d_h;

  auto row_argmax = [&](AxisId axis, int row) {
    const Tensor& p = probs.probs[static_cast<int>(axis)];
    const int cols = p.dim(1);
    const int r = p.dim(0) == 1 ? 0 : row;
    return argmax_row(std::span<const double>(p.data().data() + static_cast<int64_t>(r) * cols,
                                              static_cast<size_t>(cols)));
  };

  sel.emb = bank.sets.emb_counts[static_cast<size_t>(row_argmax(AxisId::EMB, 0))];
  const MambaChoice mc = bank.sets.mamba[static_cast<size_t>(row_argmax(AxisId::MAMBA, 0))];
  sel.mamba_heads = mc.heads;
  sel.mamba_ch = mc.channels;
  sel.attn_heads = bank.sets.attn_counts[static_cast<size_t>(row_argmax(AxisId::ATTN, 0))];
  sel.ffn = bank.sets.ffn_counts[static_cast<size_t>(row_argmax(AxisId::FFN, 0))];
  sel.depth = row_argmax(AxisId::DEPTH, 0) + 1;

  // heterogeneous axes: per-layer overrides, indexed by layer ordinal within
  // the kind
  auto fill_het = [&](AxisId axis, LayerKind kind, std::vector<int>& dst,
                      auto&& option_value) {
    if (bank.axes[static_cast<int>(axis)].mode != AxisMode::HETEROGENEOUS) return;
    dst.assign(static_cast<size_t>(cfg.n_layers), 0);
    int ordinal = 0;
    for (int j = 0; j < cfg.n_layers; ++j) {
      if (cfg.pattern[static_cast<size_t>(j)] != kind) continue;
      dst[static_cast<size_t>(j)] = option_value(row_argmax(axis, ordinal));
      ++ordinal;
    }
  };
  fill_het(AxisId::FFN, LayerKind::FFN, sel.per_layer_ffn,
           [&](int i) { return bank.sets.ffn_counts[static_cast<size_t>(i)]; });
  fill_het(AxisId::ATTN, LayerKind::ATTN, sel.per_layer_attn_heads,
           [&](int i) { return bank.sets.attn_counts[static_cast<size_t>(i)]; });
  if (bank.axes[static_cast<int>(AxisId::MAMBA)].mode == AxisMode::HETEROGENEOUS) {
    sel.per_layer_mamba_heads.assign(static_cast<size_t>(cfg.n_layers), 0);
    sel.per_layer_mamba_ch.assign(static_cast<size_t>(cfg.n_layers), 0);
    int ordinal = 0;
    for (int j = 0; j < cfg.n_layers; ++j) {
      if (cfg.pattern[static_cast<size_t>(j)] != LayerKind::MAMBA) continue;
      const MambaChoice c = bank.sets.mamba[static_cast<size_t>(row_argmax(AxisId::MAMBA, ordinal))];
      sel.per_layer_mamba_heads[static_cast<size_t>(j)] = c.heads;
      sel.per_layer_mamba_ch[static_cast<size_t>(j)] = c.channels;
      ++ordinal;
    }
  }

  sel.active_layers.assign(static_cast<size_t>(cfg.n_layers), 0);
  for (int r = 0; r < sel.depth; ++r)
    sel.active_layers[static_cast<size_t>(ranking.sigma_depth[static_cast<size_t>(r)])] = 1;
  sel.validate(cfg);
  return sel;
}

std::vector<Selection> decode_nested(const RouterBank& bank, const ImportanceRanking& ranking,
                                     const std::vector<BudgetSpec>& budgets) {
  std::vector<int> order(budgets.size());
  for (size_t i = 0; i < budgets.size(); ++i) order[i] = static_cast<int>(i);
  // largest target first; ties fall back to the higher budget id
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const BudgetSpec& ba = budgets[static_cast<size_t>(a)];
    const BudgetSpec& bb = budgets[static_cast<size_t>(b)];
    if (ba.target_cost != bb.target_cost) return ba.target_cost > bb.target_cost;
    return ba.id > bb.id;
  });
  std::vector<Selection> out(budgets.size());
  const Selection* prev = nullptr;
  for (int idx : order) {
    Selection sel = decode_selection(
        bank, ranking, deterministic_probs(bank, budgets[static_cast<size_t>(idx)].id));
    if (prev) {
      sel.emb = std::min(sel.emb, prev->emb);
      sel.mamba_heads = std::min(sel.mamba_heads, prev->mamba_heads);
      sel.mamba_ch = std::min(sel.mamba_ch, prev->mamba_ch);
      sel.attn_heads = std::min(sel.attn_heads, prev->attn_heads);
      sel.ffn = std::min(sel.ffn, prev->ffn);
      sel.depth = std::min(sel.depth, prev->depth);
      sel.active_layers.assign(static_cast<size_t>(bank.config.n_layers), 0);
      for (int r = 0; r < sel.depth; ++r)
        sel.active_layers[static_cast<size_t>(ranking.sigma_depth[static_cast<size_t>(r)])] = 1;
    }
    out[static_cast<size_t>(idx)] = sel;
    prev = &out[static_cast<size_t>(idx)];
  }
  return out;
}

namespace {

// candidate discrete masks per option, one row per option
Tensor emb_mask_matrix(const ModelConfig& cfg, const AxisConfig& sets,
                       const ImportanceRanking& rk) {
  const int n = static_cast<int>(sets.emb_counts.size());
  Tensor m = Tensor::zeros({n, cfg.d_e});
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < sets.emb_counts[static_cast<size_t>(i)]; ++r)
      m.data()[static_cast<size_t>(i) * cfg.d_e + rk.sigma_emb[static_cast<size_t>(r)]] = 1.0;
  return m;
}

Tensor ffn_mask_matrix(const ModelConfig& cfg, const AxisConfig& sets,
                       const ImportanceRanking& rk, int layer) {
  const int n = static_cast<int>(sets.ffn_counts.size());
  Tensor m = Tensor::zeros({n, cfg.d_int});
  const auto& sig = rk.sigma_ffn[static_cast<size_t>(layer)];
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < sets.ffn_counts[static_cast<size_t>(i)]; ++r)
      m.data()[static_cast<size_t>(i) * cfg.d_int + sig[static_cast<size_t>(r)]] = 1.0;
  return m;
}

Tensor attn_mask_matrix(const ModelConfig& cfg, const AxisConfig& sets,
                        const ImportanceRanking& rk, int layer) {
  const int n = static_cast<int>(sets.attn_counts.size());
  Tensor m = Tensor::zeros({n, cfg.attn_inner()});
  const auto& sig = rk.sigma_attn[static_cast<size_t>(layer)];
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < sets.attn_counts[static_cast<size_t>(i)]; ++r) {
      const int head = sig[static_cast<size_t>(r)];
      for (int c = 0; c < cfg.d_h; ++c)
        m.data()[static_cast<size_t>(i) * cfg.attn_inner() + head * cfg.d_h + c] = 1.0;
    }
  return m;
}

void mamba_mask_matrices(const ModelConfig& cfg, const AxisConfig& sets,
                         const ImportanceRanking& rk, int layer, Tensor* inner_m,
                         Tensor* head_m) {
  const int n = static_cast<int>(sets.mamba.size());
  *inner_m = Tensor::zeros({n, cfg.mamba_inner()});
  *head_m = Tensor::zeros({n, cfg.m_h});
  const auto& sig_h = rk.sigma_mamba_head[static_cast<size_t>(layer)];
  const auto& sig_c = rk.sigma_mamba_ch[static_cast<size_t>(layer)];
  const int hpg = cfg.heads_per_group();
  for (int i = 0; i < n; ++i) {
    const MambaChoice& ch = sets.mamba[static_cast<size_t>(i)];
    const int per_group = ch.heads / cfg.g;
    std::vector<bool> head_on(static_cast<size_t>(cfg.m_h), false);
    for (int grp = 0; grp < cfg.g; ++grp)
      for (int r = 0; r < per_group; ++r)
        head_on[static_cast<size_t>(sig_h[static_cast<size_t>(grp * hpg + r)])] = true;
    std::vector<bool> chan_on(static_cast<size_t>(cfg.m_d), false);
    for (int r = 0; r < ch.channels; ++r) chan_on[static_cast<size_t>(sig_c[static_cast<size_t>(r)])] = true;
    for (int h = 0; h < cfg.m_h; ++h) {
      head_m->data()[static_cast<size_t>(i) * cfg.m_h + h] = head_on[static_cast<size_t>(h)] ? 1.0 : 0.0;
      for (int c = 0; c < cfg.m_d; ++c)
        inner_m->data()[static_cast<size_t>(i) * cfg.mamba_inner() + h * cfg.m_d + c] =
            (head_on[static_cast<size_t>(h)] && chan_on[static_cast<size_t>(c)]) ? 1.0 : 0.0;
    }
  }
}

Tensor depth_mask_matrix(const ModelConfig& cfg, const ImportanceRanking& rk) {
  Tensor m = Tensor::zeros({cfg.n_layers, cfg.n_layers});
  for (int li = 0; li < cfg.n_layers; ++li)  // option index li -> depth li+1
    for (int r = 0; r <= li; ++r)
      m.data()[static_cast<size_t>(li) * cfg.n_layers +
               rk.sigma_depth[static_cast<size_t>(r)]] = 1.0;
  return m;
}

// one axis row -> training or inference mask vector
Tensor integrate_mask(const Tensor& probs_2d, const Tensor& logits_2d, int row,
                      const Tensor& mask_matrix, Integration integration, bool inference) {
  const int r = probs_2d.dim(0) == 1 ? 0 : row;
  const int dim = mask_matrix.dim(1);
  if (inference) {
    std::span<const double> prow(probs_2d.data().data() + static_cast<int64_t>(r) * probs_2d.dim(1),
                                 static_cast<size_t>(probs_2d.dim(1)));
    const int sel = argmax_row(prow);
    Tensor m = Tensor::zeros({dim});
    for (int c = 0; c < dim; ++c)
      m.data()[static_cast<size_t>(c)] = mask_matrix.data()[static_cast<size_t>(sel) * dim + c];
    return m;
  }
  if (integration == Integration::MODE2)
    return reshape(matmul(reshape(probs_row(probs_2d, r), {1, probs_2d.dim(1)}), mask_matrix),
                   {dim});
  // mode 1: discrete argmax mask scaled by its logit
  std::span<const double> prow(probs_2d.data().data() + static_cast<int64_t>(r) * probs_2d.dim(1),
                               static_cast<size_t>(probs_2d.dim(1)));
  const int sel = argmax_row(prow);
  Tensor m = Tensor::zeros({dim});
  for (int c = 0; c < dim; ++c)
    m.data()[static_cast<size_t>(c)] = mask_matrix.data()[static_cast<size_t>(sel) * dim + c];
  Tensor z_sel = select_index(logits_2d, r * probs_2d.dim(1) + sel);
  return mul_scalar(m, z_sel);
}

}  // namespace

MaskSet generate_masks(const RouterBank& bank, const ImportanceRanking& ranking,
                       const RouterProbs& probs, Integration integration, bool inference) {
  const ModelConfig& cfg = bank.config;
  ranking.validate(cfg);
  MaskSet out;
  out.discrete = inference;

  Tensor emb_m = emb_mask_matrix(cfg, bank.sets, ranking);
  out.emb = integrate_mask(probs.probs[0], probs.logits[0], 0, emb_m, integration, inference);

  Tensor depth_m = depth_mask_matrix(cfg, ranking);
  out.gamma =
      integrate_mask(probs.probs[4], probs.logits[4], 0, depth_m, integration, inference);

  out.inner.resize(static_cast<size_t>(cfg.n_layers));
  out.mamba_head.resize(static_cast<size_t>(cfg.n_layers));
  int ord_m = 0, ord_a = 0, ord_f = 0;
  for (int j = 0; j < cfg.n_layers; ++j) {
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::MAMBA: {
        Tensor inner_m, head_m;
        mamba_mask_matrices(cfg, bank.sets, ranking, j, &inner_m, &head_m);
        out.inner[static_cast<size_t>(j)] = integrate_mask(
            probs.probs[1], probs.logits[1], ord_m, inner_m, integration, inference);
        out.mamba_head[static_cast<size_t>(j)] = integrate_mask(
            probs.probs[1], probs.logits[1], ord_m, head_m, integration, inference);
        ++ord_m;
        break;
      }
      case LayerKind::ATTN: {
        Tensor am = attn_mask_matrix(cfg, bank.sets, ranking, j);
        out.inner[static_cast<size_t>(j)] = integrate_mask(
            probs.probs[2], probs.logits[2], ord_a, am, integration, inference);
        ++ord_a;
        break;
      }
      case LayerKind::FFN: {
        Tensor fm = ffn_mask_matrix(cfg, bank.sets, ranking, j);
        out.inner[static_cast<size_t>(j)] = integrate_mask(
            probs.probs[3], probs.logits[3], ord_f, fm, integration, inference);
        ++ord_f;
        break;
      }
    }
  }
  out.validate(cfg);
  return out;
}

int64_t cost_param_count(const ModelConfig& cfg, const Selection& sel) {
  cfg.validate();
  sel.validate(cfg);
  const int64_t e = sel.emb;
  const int64_t gs = static_cast<int64_t>(cfg.g) * cfg.d_s;
  const int64_t kw = cfg.conv_kernel;
  int64_t total = static_cast<int64_t>(cfg.vocab) * e * 2  // embedding + LM head
                  + 2 * e;                                 // final norm
  for (int j = 0; j < cfg.n_layers; ++j) {
    if (!sel.active_layers[static_cast<size_t>(j)]) continue;
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::MAMBA: {
        const int64_t heads = sel.per_layer_mamba_heads.empty()
                                  ? sel.mamba_heads
                                  : sel.per_layer_mamba_heads[static_cast<size_t>(j)];
        const int64_t chans = sel.per_layer_mamba_ch.empty()
                                  ? sel.mamba_ch
                                  : sel.per_layer_mamba_ch[static_cast<size_t>(j)];
        const int64_t inner = heads * chans;
        total += 2 * inner * e;   // w_z, w_x
        total += 2 * gs * e;      // w_b, w_c
        total += heads * e;       // w_dt
        total += 2 * heads;       // a_log, d
        total += inner * kw;      // conv_x
        total += 2 * gs * kw;     // conv_b, conv_c
        total += inner;           // rms_w
        total += e * inner;       // w_o
        total += 2 * e;           // ln
        break;
      }
      case LayerKind::ATTN: {
        const int64_t heads = sel.per_layer_attn_heads.empty()
                                  ? sel.attn_heads
                                  : sel.per_layer_attn_heads[static_cast<size_t>(j)];
        const int64_t inner = heads * sel.attn_head_dim;
        total += 4 * inner * e + 2 * e;
        break;
      }
      case LayerKind::FFN: {
        const int64_t f = sel.per_layer_ffn.empty()
                              ? sel.ffn
                              : sel.per_layer_ffn[static_cast<size_t>(j)];
        total += 2 * f * e + 2 * e;
        break;
      }
    }
  }
  return total;
}

double achieved_cost(const CostModel& costs, const Selection& sel) {
  const double params = static_cast<double>(cost_param_count(costs.config, sel));
  return costs.metric == CostMetric::PARAM_COUNT ? params : params * costs.dtype_bytes;
}

Tensor expected_cost(const RouterBank& bank, const ImportanceRanking& ranking,
                     const RouterProbs& probs, const CostModel& costs) {
  const ModelConfig& cfg = bank.config;
  const int64_t gs = static_cast<int64_t>(cfg.g) * cfg.d_s;
  const int64_t kw = cfg.conv_kernel;

  std::vector<double> emb_counts(bank.sets.emb_counts.begin(), bank.sets.emb_counts.end());
  Tensor e_de = dot_counts(reshape(probs_row(probs.probs[0], 0), {1, static_cast<int>(emb_counts.size())}),
                           emb_counts);

  std::vector<double> inner_counts, head_counts;
  for (const MambaChoice& c : bank.sets.mamba) {
    inner_counts.push_back(static_cast<double>(c.heads) * c.channels);
    head_counts.push_back(static_cast<double>(c.heads));
  }
  std::vector<double> attn_counts, ffn_counts;
  for (int a : bank.sets.attn_counts) attn_counts.push_back(static_cast<double>(a) * cfg.d_h);
  for (int f : bank.sets.ffn_counts) ffn_counts.push_back(static_cast<double>(f));

  // P(layer j active) = sum_L pi_L * [rank(j) < L]
  Tensor depth_m = depth_mask_matrix(cfg, ranking);
  Tensor p_active = reshape(
      matmul(reshape(probs_row(probs.probs[4], 0), {1, cfg.n_layers}), depth_m), {cfg.n_layers});

  // embedding + LM head + final norm
  Tensor total = add(scale(e_de, 2.0 * cfg.vocab), scale(e_de, 2.0));

  int ord_m = 0, ord_a = 0, ord_f = 0;
  for (int j = 0; j < cfg.n_layers; ++j) {
    Tensor layer_cost;
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::MAMBA: {
        const int row = bank.axes[1].mode == AxisMode::HETEROGENEOUS ? ord_m : 0;
        Tensor pr = reshape(probs_row(probs.probs[1], row), {1, static_cast<int>(inner_counts.size())});
        Tensor e_inner = dot_counts(pr, inner_counts);
        Tensor e_heads = dot_counts(pr, head_counts);
        layer_cost = scale(mul(e_inner, e_de), 2.0);                     // w_z, w_x
        layer_cost = add(layer_cost, scale(e_de, 2.0 * gs));             // w_b, w_c
        layer_cost = add(layer_cost, mul(e_heads, e_de));                // w_dt
        layer_cost = add(layer_cost, scale(e_heads, 2.0));               // a_log, d
        layer_cost = add(layer_cost, scale(e_inner, static_cast<double>(kw)));  // conv_x
        layer_cost = add(layer_cost, sc(2.0 * gs * kw));                 // conv_b, conv_c
        layer_cost = add(layer_cost, e_inner);                           // rms_w
        layer_cost = add(layer_cost, mul(e_de, e_inner));                // w_o
        layer_cost = add(layer_cost, scale(e_de, 2.0));                  // ln
        ++ord_m;
        break;
      }
      case LayerKind::ATTN: {
        const int row = bank.axes[2].mode == AxisMode::HETEROGENEOUS ? ord_a : 0;
        Tensor pr = reshape(probs_row(probs.probs[2], row), {1, static_cast<int>(attn_counts.size())});
        Tensor e_attn = dot_counts(pr, attn_counts);
        layer_cost = add(scale(mul(e_attn, e_de), 4.0), scale(e_de, 2.0));
        ++ord_a;
        break;
      }
      case LayerKind::FFN: {
        const int row = bank.axes[3].mode == AxisMode::HETEROGENEOUS ? ord_f : 0;
        Tensor pr = reshape(probs_row(probs.probs[3], row), {1, static_cast<int>(ffn_counts.size())});
        Tensor e_ffn = dot_counts(pr, ffn_counts);
        layer_cost = add(scale(mul(e_ffn, e_de), 2.0), scale(e_de, 2.0));
        ++ord_f;
        break;
      }
    }
    total = add(total, mul(select_index(p_active, j), layer_cost));
  }
  if (costs.metric == CostMetric::MEMORY_BYTES) total = scale(total, costs.dtype_bytes);
  return total;
}

Tensor router_loss(const RouterBank& bank, const ImportanceRanking& ranking,
                   const RouterProbs& probs, const Selection& sel, const BudgetSpec& budget,
                   const CostModel& costs, Integration integration) {
  budget.validate();
  const double target = budget.target_cost;
  Tensor e_cost = expected_cost(bank, ranking, probs, costs);
  if (integration == Integration::MODE2)
    return scale(absval(add_const(e_cost, -target)), 1.0 / target);
  // mode 1: value from the discrete selection, gradient through the
  // expected cost (straight-through)
  Tensor st = add(sc(achieved_cost(costs, sel)), sub(e_cost, detach(e_cost)));
  return scale(absval(add_const(st, -target)), 1.0 / target);
}

std::pair<double, double> anneal(const AnnealSchedule& sched, int step) {
  if (step < 0) fail("anneal: step must be nonnegative");
  const double t = sched.horizon <= 0
                       ? 1.0
                       : std::min(1.0, static_cast<double>(step) / sched.horizon);
  return {sched.tau_start + (sched.tau_end - sched.tau_start) * t,
          sched.scale_start + (sched.scale_end - sched.scale_start) * t};
}

}  // namespace nemelast
