#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nemelast/tensor.hpp"

namespace nemelast {

enum class LayerKind { MAMBA, ATTN, FFN };

char layer_kind_char(LayerKind k);
LayerKind layer_kind_from_char(char c);

// Static maximum architecture. Every sub-network is a prefix slice of a
// model built from this config (after calibration re-sorting).
struct ModelConfig {
  int d_e = 64;     // embedding channels
  int d_int = 256;  // FFN intermediate
  int n_h = 4;      // attention heads
  int d_h = 16;     // attention head dim
  int m_h = 8;      // mamba heads
  int m_d = 16;     // mamba head channels
  int g = 2;        // mamba groups; heads of a group are contiguous
  int d_s = 16;     // SSM state dim
  int n_layers = 8;
  std::vector<LayerKind> pattern;  // length n_layers
  int vocab = 256;
  int conv_kernel = 4;
  // 1/sqrt(d_h) of the model this config was derived from; kept explicit so
  // sliced models score attention identically to the parent.
  double attn_scale = 0.0;

  int mamba_inner() const { return m_h * m_d; }
  int attn_inner() const { return n_h * d_h; }
  int heads_per_group() const { return m_h / g; }

  void validate() const;
  std::string pattern_str() const;

  // d_e=64, d_int=256, n_h=4, d_h=16, m_h=8, m_d=16, g=2, d_s=16, N=8,
  // pattern (M,M,A,F)x2, vocab 256
  static ModelConfig desk_default();
  // small config for finite-difference sweeps over every parameter
  static ModelConfig tiny();
};

// Discrete retained-count choice on every elastic axis. Homogeneous counts
// apply to all layers of a kind; per_layer_* vectors (indexed by layer, only
// entries of the matching kind meaningful) override them when nonempty.
struct Selection {
  int emb = 0;
  int mamba_heads = 0;  // total across groups, divisible by g
  int mamba_ch = 0;
  int attn_heads = 0;
  int attn_head_dim = 0;
  int ffn = 0;
  int depth = 0;
  std::vector<uint8_t> active_layers;  // length n_layers, from the depth ranking
  std::vector<int> per_layer_mamba_heads;
  std::vector<int> per_layer_mamba_ch;
  std::vector<int> per_layer_attn_heads;
  std::vector<int> per_layer_ffn;

  bool heterogeneous() const;
  static Selection full(const ModelConfig& cfg);
  void validate(const ModelConfig& cfg) const;
};

// Concrete masks for one sub-network. Binary for inference / slicing;
// real-valued during training (logit-scaled in mode 1, probability-combined
// in mode 2).
struct MaskSet {
  Tensor emb;                      // [d_e]
  std::vector<Tensor> inner;       // per layer: [m_h*m_d] | [n_h*d_h] | [d_int]
  std::vector<Tensor> mamba_head;  // per layer, MAMBA only: [m_h]
  Tensor gamma;                    // [n_layers]
  bool discrete = true;

  static MaskSet all_ones(const ModelConfig& cfg);
  // prefix masks in storage order (identity ranking)
  static MaskSet from_selection(const ModelConfig& cfg, const Selection& sel);
  void validate(const ModelConfig& cfg) const;
};

// Structural checks on a discrete mask set: group uniformity of mamba masks,
// head-blockwise attention masks, prefix form everywhere. Throws on
// violation.
void check_mask_structure(const ModelConfig& cfg, const MaskSet& masks);

struct MambaLayer {
  Tensor ln_g, ln_b;
  Tensor w_z, w_x, w_b, w_c, w_dt;
  Tensor a_log;  // per head; decay coefficient is -exp(a_log), always negative
  Tensor d;      // per head skip scale
  Tensor conv_x, conv_b, conv_c;
  Tensor rms_w;
  Tensor w_o;
};

struct AttnLayer {
  Tensor ln_g, ln_b;
  Tensor w_q, w_k, w_v, w_o;
};

struct FfnLayer {
  Tensor ln_g, ln_b;
  Tensor w1, w2;
};

struct Layer {
  LayerKind kind;
  MambaLayer mamba;
  AttnLayer attn;
  FfnLayer ffn;
};

struct HybridModel {
  ModelConfig config;
  Tensor embedding;  // [vocab, d_e]
  std::vector<Layer> layers;
  Tensor final_ln_g, final_ln_b;
  Tensor lm_head;  // [vocab, d_e]

  static HybridModel init(const ModelConfig& cfg, uint64_t seed);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;
  void set_requires_grad(bool rg);
  HybridModel clone() const;
};

// Masked layer forwards. Input/output [batch, len, d_e]; mask tensors are
// taken from the MaskSet entries for this layer.
Tensor mamba_forward(const MambaLayer& layer, const ModelConfig& cfg, const Tensor& input,
                     const Tensor& emb_mask, const Tensor& inner_mask,
                     const Tensor& head_mask);
Tensor attention_forward(const AttnLayer& layer, const ModelConfig& cfg, const Tensor& input,
                         const Tensor& emb_mask, const Tensor& head_mask_vec);
Tensor ffn_forward(const FfnLayer& layer, const ModelConfig& cfg, const Tensor& input,
                   const Tensor& emb_mask, const Tensor& neuron_mask);

/// Full stack: masked embedding, gated residual layers, final norm, LM head.
// When trace is non-null, the residual stream after the embedding and after
// every layer is appended to it.
Tensor stack_forward(const HybridModel& model, const MaskSet& masks,
                     std::span<const int32_t> tokens, int batch, int len,
                     std::vector<Tensor>* trace = nullptr);

}  // namespace nemelast
