#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nemelast {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Total bytes handed out for tensor value buffers since process start.
// Used by tests that bound the allocation footprint of an operation.
uint64_t tensor_alloc_bytes();

struct TensorData {
  Shape shape;
  std::vector<double> v;
  std::vector<double> g;  // allocated lazily during backward
  bool requires_grad = false;
};

// Shared handle to a dense row-major double tensor. Values are written at
// construction / initialization time; ops never mutate their inputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double value, bool requires_grad = false);
  static Tensor of(Shape s, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(d_->v.size()); }

  std::span<double> data() { return d_->v; }
  std::span<const double> data() const { return d_->v; }
  double item() const;

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return d_ && !d_->g.empty(); }
  std::span<const double> grad() const { return d_->g; }
  // Zero-initialized on first use. Tensor is a shared handle, so gradient
  // accumulation through a const handle is allowed.
  std::vector<double>& grad_buf() const;
  void zero_grad() const { d_->g.assign(d_->g.size(), 0.0); }

  TensorData* impl() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. Ops append a node when recording is active and any
// input requires grad; backward() replays nodes once, in reverse order,
// accumulating into leaf gradients additively.
class Graph {
 public:
  void record(const char* op, std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  size_t node_count() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  static Graph* active();

 private:
  struct NodeRec {
    const char* op;
    std::function<void()> backward_fn;
  };
  std::vector<NodeRec> nodes_;
  friend class Recording;
};

// RAII scope that makes a graph the active recording target.
class Recording {
 public:
  explicit Recording(Graph& g);
  ~Recording();
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Graph* prev_;
};

// ---- primitives -----------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * w[out, in]^T -> [..., out]; leading dims flattened
Tensor linear(const Tensor& x, const Tensor& w);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// b broadcast over the last dim
Tensor add_bias(const Tensor& x, const Tensor& b);
// v broadcast over the last dim
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
// s is a one-element tensor; gradient flows to both x and s
Tensor mul_scalar(const Tensor& x, const Tensor& s);

Tensor reshape(const Tensor& x, Shape s);
Tensor select_row(const Tensor& x, int row);    // [r,c] -> [c]
Tensor select_index(const Tensor& x, int idx);  // flat element -> [1]
Tensor detach(const Tensor& x);
// Copies x with non-finite entries replaced by 0; gradient passes only
// through finite entries. Lets reductions ignore structural -inf values.
Tensor zero_nonfinite(const Tensor& x);
Tensor sum(const Tensor& x);  // -> [1]
Tensor absval(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope);
Tensor softplus(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x);

// Layer norm over the last dim. When mask is defined, mean/variance are
// taken over mask-weighted entries only and the output is multiplied by the
// mask; the mask itself is treated as a constant.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  const Tensor& mask = Tensor(), double eps = 1e-5);
// RMS norm over the last dim with the same masking convention.
Tensor rms_norm(const Tensor& x, const Tensor& weight,
                const Tensor& mask = Tensor(), double eps = 1e-5);

// Depthwise causal conv, x[b,l,c], kernel[c,k]; left zero padding
Tensor conv1d_causal(const Tensor& x, const Tensor& kernel);

// Per-head linear state-space recurrence:
//   h_t = exp(dt_t * a_h) * h_{t-1} + dt_t * (B_t outer x_t)
//   y_t = C_t . h_t + d_h * x_t
// x[b,l,heads*head_ch], b_in/c_in[b,l,groups*state_dim], a/d[heads],
// dt[b,l,heads]; heads of a group share B and C.
Tensor selective_scan(const Tensor& x, const Tensor& b_in, const Tensor& c_in,
                      const Tensor& a, const Tensor& d, const Tensor& dt,
                      int heads, int head_ch, int groups, int state_dim);

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> tokens,
                        int batch, int len);

// q,k[b,l,heads*dh] -> scores[b,heads,l,l]; entries above the diagonal are
// -inf so softmax_lastdim yields causal attention probabilities.
Tensor attn_scores(const Tensor& q, const Tensor& k, int heads, double scl);
// probs[b,heads,l,l] x v[b,l,heads*dh] -> [b,l,heads*dh]
Tensor attn_mix(const Tensor& probs, const Tensor& v, int heads);

// Mean negative log-likelihood over positions whose target != ignore_index.
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     int32_t ignore_index = -1);
// Forward KL(p_teacher || p_student) at the given temperature, averaged over
// positions; differentiable in both logit tensors.
Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits,
                     double temperature);

// ---- generic dispatch ------------------------------------------------------

struct PrimAux {
  double slope = 0.01;        // leaky_relu
  double scl = 1.0;           // attn_scores
  double temperature = 1.0;   // kl_divergence
  double eps = 1e-5;          // norms
  int heads = 1;
  int head_ch = 1;
  int groups = 1;
  int state_dim = 1;
};

// Applies a named primitive to the given inputs. Unknown op ->
// invalid_argument naming the op.
Tensor primitive_forward(const std::string& op_id, std::span<const Tensor> inputs,
                         const PrimAux& aux = {});

}  // namespace nemelast
