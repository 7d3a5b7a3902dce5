#pragma once

#include <vector>

#include "nemelast/corpus.hpp"
#include "nemelast/model.hpp"

namespace nemelast {

// Per-axis rank orders: sigma[r] is the component with importance rank r
// (rank 0 = most important). Mamba head ranks are blocked per group: entries
// [g*hpg, (g+1)*hpg) rank heads inside group g only.
struct ImportanceRanking {
  std::vector<int> sigma_emb;
  std::vector<std::vector<int>> sigma_ffn;         // indexed by layer, FFN layers only
  std::vector<std::vector<int>> sigma_mamba_ch;    // indexed by layer, MAMBA only
  std::vector<std::vector<int>> sigma_mamba_head;  // indexed by layer, MAMBA only
  std::vector<std::vector<int>> sigma_attn;        // indexed by layer, ATTN only
  std::vector<int> sigma_depth;                    // layer ids, most important first

  std::vector<double> score_emb;
  std::vector<std::vector<double>> score_ffn;
  std::vector<std::vector<double>> score_mamba_ch;
  std::vector<std::vector<double>> score_mamba_head;
  std::vector<std::vector<double>> score_attn;
  std::vector<double> score_depth;  // per layer id

  void validate(const ModelConfig& cfg) const;
  static ImportanceRanking identity(const ModelConfig& cfg);
  // width axes become identity after physical re-sorting; the depth ranking
  // survives since layers stay in place
  static ImportanceRanking after_resort(const ModelConfig& cfg, const ImportanceRanking& calib);
};

// Raw activation aggregates from forward-only calibration passes. Per-batch
// partial sums are kept so finalization can be made independent of batch
// order.
struct AxisScores {
  int n_batches = 0;
  // [batch][entry] partial sums
  std::vector<std::vector<double>> emb;
  std::vector<std::vector<std::vector<double>>> ffn;        // [layer][batch][neuron]
  std::vector<std::vector<std::vector<double>>> mamba_sum;  // [layer][batch][inner], signed
  std::vector<std::vector<std::vector<double>>> attn;       // [layer][batch][head]
};

AxisScores collect_activation_scores(const HybridModel& model,
                                     const std::vector<Batch>& batches);

// Order-independent reduction of per-batch partials (sorted before summing).
std::vector<double> finalize_scores(const std::vector<std::vector<double>>& partials);

std::vector<double> score_embedding(const AxisScores& scores);
std::vector<std::vector<double>> score_ffn(const AxisScores& scores, const ModelConfig& cfg);
std::vector<std::vector<double>> score_attention(const AxisScores& scores, const ModelConfig& cfg);

struct MambaScores {
  std::vector<double> channel;    // s_d, length m_d
  std::vector<double> head;       // f_h over top channels, length m_h
  std::vector<int> channel_ranking;
  std::vector<int> head_ranking;  // group-blocked
};
MambaScores score_mamba(const AxisScores& scores, int layer, const ModelConfig& cfg,
                        int keep_channels);

// stable argsort by descending score; equal scores keep lower index first
std::vector<int> rank_descending(const std::vector<double>& scores);

enum class DepthMode { SINGLE_PASS, ITERATIVE };

struct DepthResult {
  std::vector<int> sigma_depth;     // most important first
  std::vector<int> removal_order;   // least important first
  std::vector<double> scores;       // per layer id: single-ablation NMSE
};

// Normalized MSE between full-model logits and logits with layers ablated.
DepthResult rank_depth(const HybridModel& model, const Batch& calib, DepthMode mode);

ImportanceRanking compute_rankings(const HybridModel& model, const std::vector<Batch>& batches,
                                   int keep_channels, DepthMode depth_mode);

// Physically permutes parameters so every width ranking becomes index order;
// masks are then plain prefixes and slicing is a contiguous copy. The model
// function is unchanged.
void resort_model(HybridModel& model, const ImportanceRanking& ranking);

}  // namespace nemelast
