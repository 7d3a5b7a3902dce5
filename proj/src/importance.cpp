#include "nemelast/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nemelast {

namespace {

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("importance: " + what);
}

bool is_permutation_of(const std::vector<int>& v, int n) {
  if (static_cast<int>(v.size()) != n) return false;
  std::vector<bool> seen(static_cast<size_t>(n), false);
  for (int x : v) {
    if (x < 0 || x >= n || seen[static_cast<size_t>(x)]) return false;
    seen[static_cast<size_t>(x)] = true;
  }
  return true;
}

void check_finite_nonneg(const std::vector<double>& s, const char* what) {
  for (double v : s)
    if (!(v >= 0.0) || !std::isfinite(v)) fail(std::string(what) + " score not finite/nonnegative");
}

// permute vector entries: out[i] = in[perm[i]]
template <typename T>
std::vector<T> permuted(const std::vector<T>& in, const std::vector<int>& perm) {
  std::vector<T> out(in.size());
  for (size_t i = 0; i < perm.size(); ++i) out[i] = in[static_cast<size_t>(perm[i])];
  return out;
}

}  // namespace

void ImportanceRanking::validate(const ModelConfig& cfg) const {
  if (!is_permutation_of(sigma_emb, cfg.d_e)) fail("sigma_emb is not a permutation");
  if (!is_permutation_of(sigma_depth, cfg.n_layers)) fail("sigma_depth is not a permutation");
  check_finite_nonneg(score_emb, "embedding");
  const int hpg = cfg.heads_per_group();
  for (int j = 0; j < cfg.n_layers; ++j) {
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::FFN:
        if (!is_permutation_of(sigma_ffn[static_cast<size_t>(j)], cfg.d_int))
          fail("sigma_ffn layer " + std::to_string(j));
        check_finite_nonneg(score_ffn[static_cast<size_t>(j)], "ffn");
        break;
      case LayerKind::MAMBA: {
        if (!is_permutation_of(sigma_mamba_ch[static_cast<size_t>(j)], cfg.m_d))
          fail("sigma_mamba_ch layer " + std::to_string(j));
        const auto& sh = sigma_mamba_head[static_cast<size_t>(j)];
        if (!is_permutation_of(sh, cfg.m_h)) fail("sigma_mamba_head layer " + std::to_string(j));
        for (int grp = 0; grp < cfg.g; ++grp)
          for (int r = 0; r < hpg; ++r) {
            const int h = sh[static_cast<size_t>(grp * hpg + r)];
            if (h / hpg != grp) fail("head ranking crosses group boundary");
          }
        check_finite_nonneg(score_mamba_ch[static_cast<size_t>(j)], "mamba channel");
        check_finite_nonneg(score_mamba_head[static_cast<size_t>(j)], "mamba head");
        break;
      }
      case LayerKind::ATTN:
        if (!is_permutation_of(sigma_attn[static_cast<size_t>(j)], cfg.n_h))
          fail("sigma_attn layer " + std::to_string(j));
        check_finite_nonneg(score_attn[static_cast<size_t>(j)], "attention");
        break;
    }
  }
}

ImportanceRanking ImportanceRanking::identity(const ModelConfig& cfg) {
  ImportanceRanking r;
  r.sigma_emb.resize(static_cast<size_t>(cfg.d_e));
  std::iota(r.sigma_emb.begin(), r.sigma_emb.end(), 0);
  r.score_emb.assign(static_cast<size_t>(cfg.d_e), 0.0);
  r.sigma_depth.resize(static_cast<size_t>(cfg.n_layers));
  std::iota(r.sigma_depth.begin(), r.sigma_depth.end(), 0);
  r.score_depth.assign(static_cast<size_t>(cfg.n_layers), 0.0);
  r.sigma_ffn.resize(static_cast<size_t>(cfg.n_layers));
  r.sigma_mamba_ch.resize(static_cast<size_t>(cfg.n_layers));
  r.sigma_mamba_head.resize(static_cast<size_t>(cfg.n_layers));
  r.sigma_attn.resize(static_cast<size_t>(cfg.n_layers));
  r.score_ffn.resize(static_cast<size_t>(cfg.n_layers));
  r.score_mamba_ch.resize(static_cast<size_t>(cfg.n_layers));
  r.score_mamba_head.resize(static_cast<size_t>(cfg.n_layers));
  r.score_attn.resize(static_cast<size_t>(cfg.n_layers));
  for (int j = 0; j < cfg.n_layers; ++j) {
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::FFN: {
        auto& v = r.sigma_ffn[static_cast<size_t>(j)];
        v.resize(static_cast<size_t>(cfg.d_int));
        std::iota(v.begin(), v.end(), 0);
        r.score_ffn[static_cast<size_t>(j)].assign(static_cast<size_t>(cfg.d_int), 0.0);
        break;
      }
      case LayerKind::MAMBA: {
        auto& ch = r.sigma_mamba_ch[static_cast<size_t>(j)];
        ch.resize(static_cast<size_t>(cfg.m_d));
        std::iota(ch.begin(), ch.end(), 0);
        auto& hd = r.sigma_mamba_head[static_cast<size_t>(j)];
        hd.resize(static_cast<size_t>(cfg.m_h));
        std::iota(hd.begin(), hd.end(), 0);
        r.score_mamba_ch[static_cast<size_t>(j)].assign(static_cast<size_t>(cfg.m_d), 0.0);
        r.score_mamba_head[static_cast<size_t>(j)].assign(static_cast<size_t>(cfg.m_h), 0.0);
        break;
      }
      case LayerKind::ATTN: {
        auto& v = r.sigma_attn[static_cast<size_t>(j)];
        v.resize(static_cast<size_t>(cfg.n_h));
        std::iota(v.begin(), v.end(), 0);
        r.score_attn[static_cast<size_t>(j)].assign(static_cast<size_t>(cfg.n_h), 0.0);
        break;
      }
    }
  }
  return r;
}

ImportanceRanking ImportanceRanking::after_resort(const ModelConfig& cfg,
                                                  const ImportanceRanking& calib) {
  ImportanceRanking r = identity(cfg);
  r.sigma_depth = calib.sigma_depth;
  r.score_depth = calib.score_depth;
  return r;
}

AxisScores collect_activation_scores(const HybridModel& model,
                                     const std::vector<Batch>& batches) {
  if (batches.empty()) fail("calibration set is empty");
  const ModelConfig& cfg = model.config;
  AxisScores out;
  out.n_batches = static_cast<int>(batches.size());
  out.emb.assign(batches.size(), std::vector<double>(static_cast<size_t>(cfg.d_e), 0.0));
  out.ffn.assign(static_cast<size_t>(cfg.n_layers), {});
  out.mamba_sum.assign(static_cast<size_t>(cfg.n_layers), {});
  out.attn.assign(static_cast<size_t>(cfg.n_layers), {});
  for (int j = 0; j < cfg.n_layers; ++j) {
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::FFN:
        out.ffn[static_cast<size_t>(j)].assign(batches.size(),
                                               std::vector<double>(static_cast<size_t>(cfg.d_int), 0.0));
        break;
      case LayerKind::MAMBA:
        out.mamba_sum[static_cast<size_t>(j)].assign(
            batches.size(), std::vector<double>(static_cast<size_t>(cfg.mamba_inner()), 0.0));
        break;
      case LayerKind::ATTN:
        out.attn[static_cast<size_t>(j)].assign(batches.size(),
                                                std::vector<double>(static_cast<size_t>(cfg.n_h), 0.0));
        break;
    }
  }

  MaskSet ones = MaskSet::all_ones(cfg);
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch& batch = batches[bi];
    std::vector<Tensor> trace;
    stack_forward(model, ones, batch.tokens, batch.batch, batch.len, &trace);
    const int64_t positions = static_cast<int64_t>(batch.batch) * batch.len;
    for (int j = 0; j < cfg.n_layers; ++j) {
      const Layer& L = model.layers[static_cast<size_t>(j)];
      const Tensor& y = trace[static_cast<size_t>(j)];
      Tensor ln;
      switch (L.kind) {
        case LayerKind::MAMBA: ln = layer_norm(y, L.mamba.ln_g, L.mamba.ln_b); break;
        case LayerKind::ATTN: ln = layer_norm(y, L.attn.ln_g, L.attn.ln_b); break;
        case LayerKind::FFN: ln = layer_norm(y, L.ffn.ln_g, L.ffn.ln_b); break;
      }
      auto& emb_acc = out.emb[bi];
      const auto lv = ln.data();
      for (int64_t p = 0; p < positions; ++p)
        for (int c = 0; c < cfg.d_e; ++c)
          emb_acc[static_cast<size_t>(c)] += std::abs(lv[p * cfg.d_e + c]);
      switch (L.kind) {
        case LayerKind::FFN: {
          Tensor h = linear(ln, L.ffn.w1);
          auto& acc = out.ffn[static_cast<size_t>(j)][bi];
          const auto hv = h.data();
          for (int64_t p = 0; p < positions; ++p)
            for (int c = 0; c < cfg.d_int; ++c)
              acc[static_cast<size_t>(c)] += std::abs(hv[p * cfg.d_int + c]);
          break;
        }
        case LayerKind::MAMBA: {
          Tensor s = linear(ln, L.mamba.w_x);
          auto& acc = out.mamba_sum[static_cast<size_t>(j)][bi];
          const auto sv = s.data();
          const int inner = cfg.mamba_inner();
          for (int64_t p = 0; p < positions; ++p)
            for (int c = 0; c < inner; ++c) acc[static_cast<size_t>(c)] += sv[p * inner + c];
          break;
        }
        case LayerKind::ATTN: {
          Tensor q = linear(ln, L.attn.w_q);
          auto& acc = out.attn[static_cast<size_t>(j)][bi];
          const auto qv = q.data();
          const int inner = cfg.attn_inner();
          for (int64_t p = 0; p < positions; ++p)
            for (int h = 0; h < cfg.n_h; ++h) {
              double sq = 0.0;
              for (int c = 0; c < cfg.d_h; ++c) {
                const double v = qv[p * inner + h * cfg.d_h + c];
                sq += v * v;
              }
              acc[static_cast<size_t>(h)] += std::sqrt(sq);
            }
          break;
        }
      }
    }
  }
  return out;
}

std::vector<double> finalize_scores(const std::vector<std::vector<double>>& partials) {
  if (partials.empty()) fail("calibration set is empty");
  const size_t n = partials[0].size();
  std::vector<double> out(n, 0.0);
  std::vector<double> col(partials.size());
  for (size_t c = 0; c < n; ++c) {
    for (size_t b = 0; b < partials.size(); ++b) col[b] = partials[b][c];
    std::sort(col.begin(), col.end());
    double acc = 0.0;
    for (double v : col) acc += v;
    out[c] = acc;
  }
  return out;
}

std::vector<double> score_embedding(const AxisScores& scores) {
  if (scores.n_batches == 0) fail("calibration set is empty");
  return finalize_scores(scores.emb);
}

std::vector<std::vector<double>> score_ffn(const AxisScores& scores, const ModelConfig& cfg) {
  if (scores.n_batches == 0) fail("calibration set is empty");
  std::vector<std::vector<double>> out(static_cast<size_t>(cfg.n_layers));
  for (int j = 0; j < cfg.n_layers; ++j)
    if (cfg.pattern[static_cast<size_t>(j)] == LayerKind::FFN)
      out[static_cast<size_t>(j)] = finalize_scores(scores.ffn[static_cast<size_t>(j)]);
  return out;
}

std::vector<std::vector<double>> score_attention(const AxisScores& scores,
                                                 const ModelConfig& cfg) {
  if (scores.n_batches == 0) fail("calibration set is empty");
  std::vector<std::vector<double>> out(static_cast<size_t>(cfg.n_layers));
  for (int j = 0; j < cfg.n_layers; ++j)
    if (cfg.pattern[static_cast<size_t>(j)] == LayerKind::ATTN)
      out[static_cast<size_t>(j)] = finalize_scores(scores.attn[static_cast<size_t>(j)]);
  return out;
}

std::vector<int> rank_descending(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  return idx;
}

MambaScores score_mamba(const AxisScores& scores, int layer, const ModelConfig& cfg,
                        int keep_channels) {
  if (scores.n_batches == 0) fail("calibration set is empty");
  if (keep_channels < 1 || keep_channels > cfg.m_d)
    fail("keep_channels " + std::to_string(keep_channels) + " outside [1, m_d=" +
         std::to_string(cfg.m_d) + "]");
  if (cfg.pattern[static_cast<size_t>(layer)] != LayerKind::MAMBA)
    fail("layer " + std::to_string(layer) + " is not a mamba layer");
  const std::vector<double> summed = finalize_scores(scores.mamba_sum[static_cast<size_t>(layer)]);
  MambaScores out;
  out.channel.assign(static_cast<size_t>(cfg.m_d), 0.0);
  for (int d = 0; d < cfg.m_d; ++d) {
    double sq = 0.0;
    for (int h = 0; h < cfg.m_h; ++h) {
      const double v = summed[static_cast<size_t>(h) * cfg.m_d + d];
      sq += v * v;
    }
    out.channel[static_cast<size_t>(d)] = std::sqrt(sq);
  }
  out.channel_ranking = rank_descending(out.channel);
  out.head.assign(static_cast<size_t>(cfg.m_h), 0.0);
  for (int h = 0; h < cfg.m_h; ++h) {
    double sq = 0.0;
    for (int r = 0; r < keep_channels; ++r) {
      const int d = out.channel_ranking[static_cast<size_t>(r)];
      const double v = summed[static_cast<size_t>(h) * cfg.m_d + d];
      sq += v * v;
    }
    out.head[static_cast<size_t>(h)] = std::sqrt(sq);
  }
  // heads are ranked independently within each group
  const int hpg = cfg.heads_per_group();
  out.head_ranking.resize(static_cast<size_t>(cfg.m_h));
  for (int grp = 0; grp < cfg.g; ++grp) {
    std::vector<double> grp_scores(static_cast<size_t>(hpg));
    for (int r = 0; r < hpg; ++r) grp_scores[static_cast<size_t>(r)] = out.head[static_cast<size_t>(grp * hpg + r)];
    std::vector<int> order = rank_descending(grp_scores);
    for (int r = 0; r < hpg; ++r)
      out.head_ranking[static_cast<size_t>(grp * hpg + r)] = grp * hpg + order[static_cast<size_t>(r)];
  }
  return out;
}

namespace {

double nmse_between(const Tensor& full, const Tensor& ablated) {
  double num = 0.0, den = 0.0;
  const auto fv = full.data();
  const auto av = ablated.data();
  for (size_t i = 0; i < fv.size(); ++i) {
    const double d = fv[i] - av[i];
    num += d * d;
    den += fv[i] * fv[i];
  }
  return num / den;
}

Tensor forward_with_gamma(const HybridModel& model, const Batch& batch,
                          const std::vector<uint8_t>& active) {
  MaskSet masks = MaskSet::all_ones(model.config);
  for (int j = 0; j < model.config.n_layers; ++j)
    masks.gamma.data()[static_cast<size_t>(j)] = active[static_cast<size_t>(j)] ? 1.0 : 0.0;
  return stack_forward(model, masks, batch.tokens, batch.batch, batch.len);
}

}  // namespace

DepthResult rank_depth(const HybridModel& model, const Batch& calib, DepthMode mode) {
  if (calib.tokens.empty()) fail("calibration batch is empty");
  const int n = model.config.n_layers;
  if (n < 2) fail("depth ranking needs at least two layers");
  std::vector<uint8_t> all_on(static_cast<size_t>(n), 1);
  Tensor full = forward_with_gamma(model, calib, all_on);

  DepthResult out;
  out.scores.assign(static_cast<size_t>(n), 0.0);
  for (int j = 0; j < n; ++j) {
    std::vector<uint8_t> act = all_on;
    act[static_cast<size_t>(j)] = 0;
    out.scores[static_cast<size_t>(j)] = nmse_between(full, forward_with_gamma(model, calib, act));
  }

  if (mode == DepthMode::SINGLE_PASS) {
    // removal order: ascending NMSE, lower index first among ties
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return out.scores[static_cast<size_t>(a)] < out.scores[static_cast<size_t>(b)];
    });
    out.removal_order = idx;
    out.sigma_depth.assign(idx.rbegin(), idx.rend());
    return out;
  }

  // iterative: greedily remove the layer whose ablation (on top of the
  // already-removed set) stays closest to the full model
  std::vector<uint8_t> act = all_on;
  out.removal_order.clear();
  for (int step = 0; step < n; ++step) {
    int best = -1;
    double best_nmse = 0.0;
    for (int j = 0; j < n; ++j) {
      if (!act[static_cast<size_t>(j)]) continue;
      act[static_cast<size_t>(j)] = 0;
      const double v = nmse_between(full, forward_with_gamma(model, calib, act));
      act[static_cast<size_t>(j)] = 1;
      if (best < 0 || v < best_nmse) {
        best = j;
        best_nmse = v;
      }
    }
    act[static_cast<size_t>(best)] = 0;
    out.removal_order.push_back(best);
  }
  out.sigma_depth.assign(out.removal_order.rbegin(), out.removal_order.rend());
  return out;
}

ImportanceRanking compute_rankings(const HybridModel& model, const std::vector<Batch>& batches,
                                   int keep_channels, DepthMode depth_mode) {
  const ModelConfig& cfg = model.config;
  AxisScores raw = collect_activation_scores(model, batches);
  ImportanceRanking r = ImportanceRanking::identity(cfg);
  r.score_emb = score_embedding(raw);
  r.sigma_emb = rank_descending(r.score_emb);
  r.score_ffn = score_ffn(raw, cfg);
  r.score_attn = score_attention(raw, cfg);
  for (int j = 0; j < cfg.n_layers; ++j) {
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::FFN:
        r.sigma_ffn[static_cast<size_t>(j)] = rank_descending(r.score_ffn[static_cast<size_t>(j)]);
        break;
      case LayerKind::ATTN:
        r.sigma_attn[static_cast<size_t>(j)] = rank_descending(r.score_attn[static_cast<size_t>(j)]);
        break;
      case LayerKind::MAMBA: {
        MambaScores ms = score_mamba(raw, j, cfg, keep_channels);
        r.score_mamba_ch[static_cast<size_t>(j)] = ms.channel;
        r.score_mamba_head[static_cast<size_t>(j)] = ms.head;
        r.sigma_mamba_ch[static_cast<size_t>(j)] = ms.channel_ranking;
        r.sigma_mamba_head[static_cast<size_t>(j)] = ms.head_ranking;
        break;
      }
    }
  }
  DepthResult depth = rank_depth(model, batches[0], depth_mode);
  r.sigma_depth = depth.sigma_depth;
  r.score_depth = depth.scores;
  r.validate(cfg);
  return r;
}

namespace {

// new row r <- old row perm[r]
void permute_rows(Tensor& t, const std::vector<int>& perm) {
  const int rows = t.dim(0);
  const int cols = static_cast<int>(t.size() / rows);
  std::vector<double> copy(t.data().begin(), t.data().end());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      t.data()[static_cast<size_t>(r) * cols + c] =
          copy[static_cast<size_t>(perm[static_cast<size_t>(r)]) * cols + c];
}

void permute_cols(Tensor& t, const std::vector<int>& perm) {
  const int cols = t.dim(t.rank() - 1);
  const int rows = static_cast<int>(t.size() / cols);
  std::vector<double> copy(t.data().begin(), t.data().end());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      t.data()[static_cast<size_t>(r) * cols + c] =
          copy[static_cast<size_t>(r) * cols + perm[static_cast<size_t>(c)]];
}

void permute_entries(Tensor& t, const std::vector<int>& perm) {
  std::vector<double> copy(t.data().begin(), t.data().end());
  for (size_t i = 0; i < perm.size(); ++i) t.data()[i] = copy[static_cast<size_t>(perm[i])];
}

// flat (head, channel) permutation for mamba inner axes
std::vector<int> inner_perm(const ModelConfig& cfg, const std::vector<int>& head_perm,
                            const std::vector<int>& ch_perm) {
  std::vector<int> p(static_cast<size_t>(cfg.mamba_inner()));
  for (int h = 0; h < cfg.m_h; ++h)
    for (int c = 0; c < cfg.m_d; ++c)
      p[static_cast<size_t>(h) * cfg.m_d + c] =
          head_perm[static_cast<size_t>(h)] * cfg.m_d + ch_perm[static_cast<size_t>(c)];
  return p;
}

std::vector<int> head_block_perm(int heads, int block, const std::vector<int>& head_perm) {
  std::vector<int> p(static_cast<size_t>(heads) * block);
  for (int h = 0; h < heads; ++h)
    for (int c = 0; c < block; ++c)
      p[static_cast<size_t>(h) * block + c] = head_perm[static_cast<size_t>(h)] * block + c;
  return p;
}

}  // namespace

void resort_model(HybridModel& model, const ImportanceRanking& ranking) {
  const ModelConfig& cfg = model.config;
  ranking.validate(cfg);
  const std::vector<int>& pe = ranking.sigma_emb;

  permute_cols(model.embedding, pe);
  permute_cols(model.lm_head, pe);
  permute_entries(model.final_ln_g, pe);
  permute_entries(model.final_ln_b, pe);

  for (int j = 0; j < cfg.n_layers; ++j) {
    Layer& L = model.layers[static_cast<size_t>(j)];
    switch (L.kind) {
      case LayerKind::MAMBA: {
        MambaLayer& M = L.mamba;
        permute_entries(M.ln_g, pe);
        permute_entries(M.ln_b, pe);
        permute_cols(M.w_z, pe);
        permute_cols(M.w_x, pe);
        permute_cols(M.w_b, pe);
        permute_cols(M.w_c, pe);
        permute_cols(M.w_dt, pe);
        permute_rows(M.w_o, pe);
        const auto& hp = ranking.sigma_mamba_head[static_cast<size_t>(j)];
        const auto& cp = ranking.sigma_mamba_ch[static_cast<size_t>(j)];
        const std::vector<int> ip = inner_perm(cfg, hp, cp);
        permute_rows(M.w_z, ip);
        permute_rows(M.w_x, ip);
        permute_rows(M.conv_x, ip);
        permute_entries(M.rms_w, ip);
        permute_cols(M.w_o, ip);
        permute_rows(M.w_dt, hp);
        permute_entries(M.a_log, hp);
        permute_entries(M.d, hp);
        break;
      }
      case LayerKind::ATTN: {
        AttnLayer& A = L.attn;
        permute_entries(A.ln_g, pe);
        permute_entries(A.ln_b, pe);
        permute_cols(A.w_q, pe);
        permute_cols(A.w_k, pe);
        permute_cols(A.w_v, pe);
        permute_rows(A.w_o, pe);
        const std::vector<int> bp =
            head_block_perm(cfg.n_h, cfg.d_h, ranking.sigma_attn[static_cast<size_t>(j)]);
        permute_rows(A.w_q, bp);
        permute_rows(A.w_k, bp);
        permute_rows(A.w_v, bp);
        permute_cols(A.w_o, bp);
        break;
      }
      case LayerKind::FFN: {
        FfnLayer& F = L.ffn;
        permute_entries(F.ln_g, pe);
        permute_entries(F.ln_b, pe);
        permute_cols(F.w1, pe);
        permute_rows(F.w2, pe);
        const auto& fp = ranking.sigma_ffn[static_cast<size_t>(j)];
        permute_rows(F.w1, fp);
        permute_cols(F.w2, fp);
        break;
      }
    }
  }
}

}  // namespace nemelast
