#include "nemelast/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace nemelast {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

std::atomic<uint64_t> g_alloc_bytes{0};

thread_local Graph* g_active_graph = nullptr;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size())
    fail(op, "rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  for (size_t i = 0; i < sa.size(); ++i) {
    if (sa[i] != sb[i])
      fail(op, "dim " + std::to_string(i) + " mismatch: " + std::to_string(sa[i]) +
                   " vs " + std::to_string(sb[i]));
  }
}

int last_dim(const Tensor& t) { return t.shape().back(); }

// rows = product of leading dims, cols = last dim
std::pair<int64_t, int64_t> as_2d(const Tensor& t) {
  int64_t cols = last_dim(t);
  return {t.size() / cols, cols};
}

bool want_grad(std::initializer_list<const Tensor*> ins) {
  if (!Graph::active()) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void record(const char* op, Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Graph::active()->record(op, std::move(fn));
}

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double softplus_stable(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

uint64_t tensor_alloc_bytes() { return g_alloc_bytes.load(); }

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  for (size_t i = 0; i < s.size(); ++i)
    if (s[i] <= 0)
      fail("tensor", "extent " + std::to_string(i) + " is " + std::to_string(s[i]));
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(s);
  t.d_->v.assign(static_cast<size_t>(shape_numel(t.d_->shape)), 0.0);
  t.d_->requires_grad = requires_grad;
  g_alloc_bytes.fetch_add(t.d_->v.size() * sizeof(double));
  return t;
}

Tensor Tensor::full(Shape s, double value, bool requires_grad) {
  Tensor t = zeros(std::move(s), requires_grad);
  for (double& x : t.d_->v) x = value;
  return t;
}

Tensor Tensor::of(Shape s, std::vector<double> values, bool requires_grad) {
  if (shape_numel(s) != static_cast<int64_t>(values.size()))
    fail("tensor", "value count " + std::to_string(values.size()) +
                       " does not fill " + shape_str(s));
  Tensor t = zeros(std::move(s), requires_grad);
  t.d_->v = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return of({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) fail("item", "tensor has " + std::to_string(size()) + " elements");
  return d_->v[0];
}

std::vector<double>& Tensor::grad_buf() const {
  if (d_->g.empty()) d_->g.assign(d_->v.size(), 0.0);
  return d_->g;
}

Graph* Graph::active() { return g_active_graph; }

void Graph::record(const char* op, std::function<void()> backward_fn) {
  nodes_.push_back({op, std::move(backward_fn)});
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    fail("backward", "loss must be a scalar tensor");
  if (!loss.requires_grad())
    fail("backward", "loss does not require grad (nothing recorded)");
  loss.impl()->g.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
}

Recording::Recording(Graph& g) {
  prev_ = g_active_graph;
  g_active_graph = &g;
}

Recording::~Recording() { g_active_graph = prev_; }

// ---- primitives -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) fail("matmul", "expects rank-2 operands");
  if (a.dim(1) != b.dim(0))
    fail("matmul", "inner dim mismatch: lhs dim 1 = " + std::to_string(a.dim(1)) +
                       ", rhs dim 0 = " + std::to_string(b.dim(0)));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  MapMat(out.data().data(), m, n).noalias() =
      MapConst(a.data().data(), m, k) * MapConst(b.data().data(), k, n);
  if (want_grad({&a, &b})) {
    record("matmul", out, [a, b, out, m, k, n] {
      if (!out.has_grad()) return;
      MapConst dy(out.grad().data(), m, n);
      if (a.requires_grad())
        MapMat(a.grad_buf().data(), m, k).noalias() +=
            dy * MapConst(b.data().data(), k, n).transpose();
      if (b.requires_grad())
        MapMat(b.grad_buf().data(), k, n).noalias() +=
            MapConst(a.data().data(), m, k).transpose() * dy;
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2) fail("linear", "weight must be rank-2 [out,in]");
  if (last_dim(x) != w.dim(1))
    fail("linear", "input last dim " + std::to_string(last_dim(x)) +
                       " != weight in dim " + std::to_string(w.dim(1)));
  auto [rows, in] = as_2d(x);
  const int out_dim = w.dim(0);
  Shape os = x.shape();
  os.back() = out_dim;
  Tensor out = Tensor::zeros(os);
  MapMat(out.data().data(), rows, out_dim).noalias() =
      MapConst(x.data().data(), rows, in) *
      MapConst(w.data().data(), out_dim, in).transpose();
  if (want_grad({&x, &w})) {
    record("linear", out, [x, w, out, rows = rows, in = in, out_dim] {
      if (!out.has_grad()) return;
      MapConst dy(out.grad().data(), rows, out_dim);
      if (x.requires_grad())
        MapMat(x.grad_buf().data(), rows, in).noalias() +=
            dy * MapConst(w.data().data(), out_dim, in);
      if (w.requires_grad())
        MapMat(w.grad_buf().data(), out_dim, in).noalias() +=
            dy.transpose() * MapConst(x.data().data(), rows, in);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (want_grad({&a, &b})) {
    record("add", out, [a, b, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      if (a.requires_grad()) {
        auto& ag = a.grad_buf();
        for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
      }
      if (b.requires_grad()) {
        auto& bg = b.grad_buf();
        for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (want_grad({&a, &b})) {
    record("sub", out, [a, b, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      if (a.requires_grad()) {
        auto& ag = a.grad_buf();
        for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
      }
      if (b.requires_grad()) {
        auto& bg = b.grad_buf();
        for (size_t i = 0; i < og.size(); ++i) bg[i] -= og[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (want_grad({&a, &b})) {
    record("mul", out, [a, b, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      if (a.requires_grad()) {
        auto& ag = a.grad_buf();
        const auto bv2 = b.data();
        for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto& bg = b.grad_buf();
        const auto av2 = a.data();
        for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i] * av2[i];
      }
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || b.dim(0) != last_dim(x))
    fail("add_bias", "bias shape " + shape_str(b.shape()) + " vs last dim " +
                         std::to_string(last_dim(x)));
  auto [rows, cols] = as_2d(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data(), bv = b.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[r * cols + c] + bv[c];
  if (want_grad({&x, &b})) {
    record("add_bias", out, [x, b, out, rows = rows, cols = cols] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      if (x.requires_grad()) {
        auto& xg = x.grad_buf();
        for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
      }
      if (b.requires_grad()) {
        auto& bg = b.grad_buf();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) bg[c] += og[r * cols + c];
      }
    });
  }
  return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  if (v.size() != last_dim(x))
    fail("mul_rowvec", "vector length " + std::to_string(v.size()) +
                           " vs last dim " + std::to_string(last_dim(x)));
  auto [rows, cols] = as_2d(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data(), vv = v.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[r * cols + c] * vv[c];
  if (want_grad({&x, &v})) {
    record("mul_rowvec", out, [x, v, out, rows = rows, cols = cols] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      if (x.requires_grad()) {
        auto& xg = x.grad_buf();
        const auto vv2 = v.data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) xg[r * cols + c] += og[r * cols + c] * vv2[c];
      }
      if (v.requires_grad()) {
        auto& vg = v.grad_buf();
        const auto xv2 = x.data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) vg[c] += og[r * cols + c] * xv2[r * cols + c];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  if (want_grad({&x})) {
    record("scale", out, [x, out, c] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * c;
    });
  }
  return out;
}

Tensor add_const(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
  if (want_grad({&x})) {
    record("add_const", out, [x, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) fail("mul_scalar", "scale tensor must have one element");
  const double sv = s.data()[0];
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * sv;
  if (want_grad({&x, &s})) {
    record("mul_scalar", out, [x, s, out, sv] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      if (x.requires_grad()) {
        auto& xg = x.grad_buf();
        for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * sv;
      }
      if (s.requires_grad()) {
        const auto xv2 = x.data();
        double acc = 0.0;
        for (size_t i = 0; i < og.size(); ++i) acc += og[i] * xv2[i];
        s.grad_buf()[0] += acc;
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.size())
    fail("reshape", shape_str(x.shape()) + " -> " + shape_str(s));
  Tensor out = Tensor::zeros(std::move(s));
  auto ov = out.data();
  const auto xv = x.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i];
  if (want_grad({&x})) {
    record("reshape", out, [x, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
    });
  }
  return out;
}

Tensor select_row(const Tensor& x, int row) {
  if (x.rank() != 2) fail("select_row", "expects rank-2 tensor");
  if (row < 0 || row >= x.dim(0))
    fail("select_row", "row " + std::to_string(row) + " out of " + std::to_string(x.dim(0)));
  const int cols = x.dim(1);
  Tensor out = Tensor::zeros({cols});
  const auto xv = x.data();
  auto ov = out.data();
  for (int c = 0; c < cols; ++c) ov[c] = xv[static_cast<size_t>(row) * cols + c];
  if (want_grad({&x})) {
    record("select_row", out, [x, out, row, cols] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      for (int c = 0; c < cols; ++c) xg[static_cast<size_t>(row) * cols + c] += og[c];
    });
  }
  return out;
}

Tensor select_index(const Tensor& x, int idx) {
  if (idx < 0 || idx >= x.size())
    fail("select_index", "index " + std::to_string(idx) + " out of " + std::to_string(x.size()));
  Tensor out = Tensor::scalar(x.data()[static_cast<size_t>(idx)]);
  if (want_grad({&x})) {
    record("select_index", out, [x, out, idx] {
      if (!out.has_grad()) return;
      x.grad_buf()[static_cast<size_t>(idx)] += out.grad()[0];
    });
  }
  return out;
}

Tensor detach(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto ov = out.data();
  const auto xv = x.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i];
  return out;
}

Tensor zero_nonfinite(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::isfinite(xv[i]) ? xv[i] : 0.0;
  if (want_grad({&x})) {
    record("zero_nonfinite", out, [x, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      const auto xv2 = x.data();
      for (size_t i = 0; i < og.size(); ++i)
        if (std::isfinite(xv2[i])) xg[i] += og[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (want_grad({&x})) {
    record("sum", out, [x, out] {
      if (!out.has_grad()) return;
      const double d = out.grad()[0];
      auto& xg = x.grad_buf();
      for (size_t i = 0; i < xg.size(); ++i) xg[i] += d;
    });
  }
  return out;
}

Tensor absval(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::abs(xv[i]);
  if (want_grad({&x})) {
    record("absval", out, [x, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      const auto xv2 = x.data();
      for (size_t i = 0; i < og.size(); ++i)
        xg[i] += og[i] * (xv2[i] > 0 ? 1.0 : (xv2[i] < 0 ? -1.0 : 0.0));
    });
  }
  return out;
}

Tensor exp_t(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(xv[i]);
  if (want_grad({&x})) {
    record("exp", out, [x, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      const auto ov2 = out.data();
      for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * ov2[i];
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * sigmoid(xv[i]);
  if (want_grad({&x})) {
    record("silu", out, [x, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      const auto xv2 = x.data();
      for (size_t i = 0; i < og.size(); ++i) {
        const double s = sigmoid(xv2[i]);
        xg[i] += og[i] * s * (1.0 + xv2[i] * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor leaky_relu(const Tensor& x, double negative_slope) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = xv[i] >= 0 ? xv[i] : negative_slope * xv[i];
  if (want_grad({&x})) {
    record("leaky_relu", out, [x, out, negative_slope] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      const auto xv2 = x.data();
      for (size_t i = 0; i < og.size(); ++i)
        xg[i] += og[i] * (xv2[i] >= 0 ? 1.0 : negative_slope);
    });
  }
  return out;
}

Tensor softplus(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = softplus_stable(xv[i]);
  if (want_grad({&x})) {
    record("softplus", out, [x, out] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      const auto xv2 = x.data();
      for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * sigmoid(xv2[i]);
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  auto [rows, cols] = as_2d(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double* orow = ov.data() + r * cols;
    double mx = kNegInf;
    for (int64_t c = 0; c < cols; ++c) mx = std::max(mx, xr[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      orow[c] = std::exp(xr[c] - mx);
      denom += orow[c];
    }
    for (int64_t c = 0; c < cols; ++c) orow[c] /= denom;
  }
  if (want_grad({&x})) {
    record("softmax", out, [x, out, rows = rows, cols = cols] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& xg = x.grad_buf();
      const auto ov2 = out.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* p = ov2.data() + r * cols;
        const double* dy = og.data() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += p[c] * dy[c];
        double* dx = xg.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) dx[c] += p[c] * (dy[c] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  const Tensor& mask, double eps) {
  const int d = last_dim(x);
  if (gamma.size() != d || beta.size() != d)
    fail("layer_norm", "affine length vs feature dim " + std::to_string(d));
  if (mask.defined() && mask.size() != d)
    fail("layer_norm", "mask length " + std::to_string(mask.size()) + " vs dim " +
                           std::to_string(d));
  auto [rows, cols] = as_2d(x);
  const double* mv = mask.defined() ? mask.data().data() : nullptr;
  double n_act = 0.0;
  if (mv) {
    for (int c = 0; c < d; ++c) n_act += mv[c];
    if (n_act <= 0.0) fail("layer_norm", "mask selects no channels");
  } else {
    n_act = static_cast<double>(d);
  }

  Tensor out = Tensor::zeros(x.shape());
  Tensor xhat = Tensor::zeros(x.shape());  // saved for backward
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto ov = out.data();
  auto hv = xhat.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += (mv ? mv[c] : 1.0) * xr[c];
    mean /= n_act;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      const double dv = xr[c] - mean;
      var += (mv ? mv[c] : 1.0) * dv * dv;
    }
    var /= n_act;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = inv;
    double* hr = hv.data() + r * cols;
    double* orow = ov.data() + r * cols;
    for (int c = 0; c < d; ++c) {
      hr[c] = (xr[c] - mean) * inv;
      const double y = gv[c] * hr[c] + bv[c];
      orow[c] = mv ? mv[c] * y : y;
    }
  }
  if (want_grad({&x, &gamma, &beta})) {
    record("layer_norm", out,
           [x, gamma, beta, mask, out, xhat, inv_std = std::move(inv_std), rows = rows,
            cols = cols, n_act] {
             if (!out.has_grad()) return;
             auto og = out.grad();
             const auto hv2 = xhat.data();
             const auto gv2 = gamma.data();
             const double* mv2 = mask.defined() ? mask.data().data() : nullptr;
             for (int64_t r = 0; r < rows; ++r) {
               const double* dy = og.data() + r * cols;
               const double* hr = hv2.data() + r * cols;
               const double inv = inv_std[static_cast<size_t>(r)];
               if (gamma.requires_grad()) {
                 auto& gg = gamma.grad_buf();
                 for (int64_t c = 0; c < cols; ++c)
                   gg[c] += dy[c] * (mv2 ? mv2[c] : 1.0) * hr[c];
               }
               if (beta.requires_grad()) {
                 auto& bg = beta.grad_buf();
                 for (int64_t c = 0; c < cols; ++c) bg[c] += dy[c] * (mv2 ? mv2[c] : 1.0);
               }
               if (x.requires_grad()) {
                 auto& xg = x.grad_buf();
                 double sum_g = 0.0, sum_gh = 0.0;
                 std::vector<double> ghat(static_cast<size_t>(cols));
                 for (int64_t c = 0; c < cols; ++c) {
                   ghat[static_cast<size_t>(c)] = dy[c] * (mv2 ? mv2[c] : 1.0) * gv2[c];
                   sum_g += ghat[static_cast<size_t>(c)];
                   sum_gh += ghat[static_cast<size_t>(c)] * hr[c];
                 }
                 double* dx = xg.data() + r * cols;
                 for (int64_t c = 0; c < cols; ++c) {
                   const double m = mv2 ? mv2[c] : 1.0;
                   dx[c] += inv * (ghat[static_cast<size_t>(c)] -
                                   (m / n_act) * (sum_g + hr[c] * sum_gh));
                 }
               }
             }
           });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, const Tensor& mask, double eps) {
  const int d = last_dim(x);
  if (weight.size() != d) fail("rms_norm", "weight length vs feature dim");
  if (mask.defined() && mask.size() != d) fail("rms_norm", "mask length vs feature dim");
  auto [rows, cols] = as_2d(x);
  const double* mv = mask.defined() ? mask.data().data() : nullptr;
  double n_act = 0.0;
  if (mv) {
    for (int c = 0; c < d; ++c) n_act += mv[c];
    if (n_act <= 0.0) fail("rms_norm", "mask selects no channels");
  } else {
    n_act = static_cast<double>(d);
  }
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_rms(static_cast<size_t>(rows));
  const auto xv = x.data();
  const auto wv = weight.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double ms = 0.0;
    for (int c = 0; c < d; ++c) ms += (mv ? mv[c] : 1.0) * xr[c] * xr[c];
    ms /= n_act;
    const double inv = 1.0 / std::sqrt(ms + eps);
    inv_rms[static_cast<size_t>(r)] = inv;
    double* orow = ov.data() + r * cols;
    for (int c = 0; c < d; ++c)
      orow[c] = (mv ? mv[c] : 1.0) * wv[c] * xr[c] * inv;
  }
  if (want_grad({&x, &weight})) {
    record("rms_norm", out,
           [x, weight, mask, out, inv_rms = std::move(inv_rms), rows = rows, cols = cols,
            n_act] {
             if (!out.has_grad()) return;
             auto og = out.grad();
             const auto xv2 = x.data();
             const auto wv2 = weight.data();
             const double* mv2 = mask.defined() ? mask.data().data() : nullptr;
             for (int64_t r = 0; r < rows; ++r) {
               const double* dy = og.data() + r * cols;
               const double* xr = xv2.data() + r * cols;
               const double inv = inv_rms[static_cast<size_t>(r)];
               if (weight.requires_grad()) {
                 auto& wg = weight.grad_buf();
                 for (int64_t c = 0; c < cols; ++c)
                   wg[c] += dy[c] * (mv2 ? mv2[c] : 1.0) * xr[c] * inv;
               }
               if (x.requires_grad()) {
                 auto& xg = x.grad_buf();
                 double dot = 0.0;
                 for (int64_t c = 0; c < cols; ++c)
                   dot += dy[c] * (mv2 ? mv2[c] : 1.0) * wv2[c] * xr[c];
                 double* dx = xg.data() + r * cols;
                 for (int64_t c = 0; c < cols; ++c) {
                   const double m = mv2 ? mv2[c] : 1.0;
                   dx[c] += dy[c] * m * wv2[c] * inv -
                            xr[c] * m * inv * inv * inv * dot / n_act;
                 }
               }
             }
           });
  }
  return out;
}

Tensor conv1d_causal(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3) fail("conv1d_causal", "input must be [batch,len,channels]");
  if (kernel.rank() != 2 || kernel.dim(0) != x.dim(2))
    fail("conv1d_causal", "kernel channel dim " + std::to_string(kernel.dim(0)) +
                              " vs input channels " + std::to_string(x.dim(2)));
  const int bsz = x.dim(0), len = x.dim(1), ch = x.dim(2), kw = kernel.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.data();
  const auto kv = kernel.data();
  auto ov = out.data();
  for (int b = 0; b < bsz; ++b) {
    for (int t = 0; t < len; ++t) {
      double* orow = ov.data() + (static_cast<int64_t>(b) * len + t) * ch;
      for (int k = 0; k < kw; ++k) {
        const int src = t - (kw - 1) + k;
        if (src < 0) continue;
        const double* xr = xv.data() + (static_cast<int64_t>(b) * len + src) * ch;
        for (int c = 0; c < ch; ++c) orow[c] += kv[static_cast<size_t>(c) * kw + k] * xr[c];
      }
    }
  }
  if (want_grad({&x, &kernel})) {
    record("conv1d_causal", out, [x, kernel, out, bsz, len, ch, kw] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      const auto xv2 = x.data();
      const auto kv2 = kernel.data();
      for (int b = 0; b < bsz; ++b) {
        for (int t = 0; t < len; ++t) {
          const double* dy = og.data() + (static_cast<int64_t>(b) * len + t) * ch;
          for (int k = 0; k < kw; ++k) {
            const int src = t - (kw - 1) + k;
            if (src < 0) continue;
            if (x.requires_grad()) {
              auto& xg = x.grad_buf();
              double* dx = xg.data() + (static_cast<int64_t>(b) * len + src) * ch;
              for (int c = 0; c < ch; ++c) dx[c] += kv2[static_cast<size_t>(c) * kw + k] * dy[c];
            }
            if (kernel.requires_grad()) {
              auto& kg = kernel.grad_buf();
              const double* xr = xv2.data() + (static_cast<int64_t>(b) * len + src) * ch;
              for (int c = 0; c < ch; ++c) kg[static_cast<size_t>(c) * kw + k] += dy[c] * xr[c];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor selective_scan(const Tensor& x, const Tensor& b_in, const Tensor& c_in,
                      const Tensor& a, const Tensor& d, const Tensor& dt,
                      int heads, int head_ch, int groups, int state_dim) {
  if (x.rank() != 3 || x.dim(2) != heads * head_ch)
    fail("selective_scan", "x last dim " + std::to_string(x.rank() == 3 ? x.dim(2) : -1) +
                               " != heads*head_ch " + std::to_string(heads * head_ch));
  if (b_in.shape() != Shape{x.dim(0), x.dim(1), groups * state_dim})
    fail("selective_scan", "B shape " + shape_str(b_in.shape()));
  if (c_in.shape() != b_in.shape()) fail("selective_scan", "C shape " + shape_str(c_in.shape()));
  if (a.size() != heads || d.size() != heads)
    fail("selective_scan", "A/D length vs heads " + std::to_string(heads));
  if (dt.shape() != Shape{x.dim(0), x.dim(1), heads})
    fail("selective_scan", "dt shape " + shape_str(dt.shape()));
  if (heads % groups != 0) fail("selective_scan", "heads not divisible by groups");

  const int bsz = x.dim(0), len = x.dim(1);
  const int hc = head_ch, sd = state_dim;
  const int heads_per_group = heads / groups;
  Tensor out = Tensor::zeros(x.shape());
  // full state trajectory, saved for backward: [b, l, heads, sd, hc]
  const int64_t st_head = static_cast<int64_t>(sd) * hc;
  const int64_t st_tok = static_cast<int64_t>(heads) * st_head;
  std::vector<double> states(static_cast<size_t>(bsz) * len * st_tok, 0.0);

  const auto xv = x.data();
  const auto bv = b_in.data();
  const auto cv = c_in.data();
  const auto av = a.data();
  const auto dv = d.data();
  const auto dtv = dt.data();
  auto ov = out.data();

  for (int b = 0; b < bsz; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int g = h / heads_per_group;
      const double ah = av[h];
      const double dh = dv[h];
      for (int t = 0; t < len; ++t) {
        const int64_t tok = static_cast<int64_t>(b) * len + t;
        const double dtv_t = dtv[tok * heads + h];
        const double alpha = std::exp(dtv_t * ah);
        const double* bt = bv.data() + tok * (groups * sd) + static_cast<int64_t>(g) * sd;
        const double* ct = cv.data() + tok * (groups * sd) + static_cast<int64_t>(g) * sd;
        const double* xt = xv.data() + tok * (heads * hc) + static_cast<int64_t>(h) * hc;
        double* st = states.data() + tok * st_tok + static_cast<int64_t>(h) * st_head;
        const double* prev =
            t == 0 ? nullptr : states.data() + (tok - 1) * st_tok + static_cast<int64_t>(h) * st_head;
        for (int s = 0; s < sd; ++s) {
          const double bs = dtv_t * bt[s];
          double* strow = st + static_cast<int64_t>(s) * hc;
          const double* prow = prev ? prev + static_cast<int64_t>(s) * hc : nullptr;
          for (int c = 0; c < hc; ++c)
            strow[c] = (prow ? alpha * prow[c] : 0.0) + bs * xt[c];
        }
        double* yt = ov.data() + tok * (heads * hc) + static_cast<int64_t>(h) * hc;
        for (int c = 0; c < hc; ++c) {
          double acc = 0.0;
          for (int s = 0; s < sd; ++s) acc += ct[s] * st[static_cast<int64_t>(s) * hc + c];
          yt[c] = acc + dh * xt[c];
        }
      }
    }
  }

  if (want_grad({&x, &b_in, &c_in, &a, &d, &dt})) {
    record("selective_scan", out,
           [x, b_in, c_in, a, d, dt, out, states = std::move(states), bsz, len, heads, hc,
            groups, sd, heads_per_group, st_head, st_tok] {
             if (!out.has_grad()) return;
             auto og = out.grad();
             const auto xv2 = x.data();
             const auto bv2 = b_in.data();
             const auto cv2 = c_in.data();
             const auto av2 = a.data();
             const auto dv2 = d.data();
             const auto dtv2 = dt.data();
             double* xg = x.requires_grad() ? x.grad_buf().data() : nullptr;
             double* bg = b_in.requires_grad() ? b_in.grad_buf().data() : nullptr;
             double* cg = c_in.requires_grad() ? c_in.grad_buf().data() : nullptr;
             double* ag = a.requires_grad() ? a.grad_buf().data() : nullptr;
             double* dg = d.requires_grad() ? d.grad_buf().data() : nullptr;
             double* dtg = dt.requires_grad() ? dt.grad_buf().data() : nullptr;
             std::vector<double> dstate(static_cast<size_t>(st_head));
             for (int b = 0; b < bsz; ++b) {
               for (int h = 0; h < heads; ++h) {
                 const int g = h / heads_per_group;
                 const double ah = av2[h];
                 const double dh = dv2[h];
                 std::fill(dstate.begin(), dstate.end(), 0.0);
                 for (int t = len - 1; t >= 0; --t) {
                   const int64_t tok = static_cast<int64_t>(b) * len + t;
                   const double dtv_t = dtv2[tok * heads + h];
                   const double alpha = std::exp(dtv_t * ah);
                   const double* bt =
                       bv2.data() + tok * (groups * sd) + static_cast<int64_t>(g) * sd;
                   const double* ct =
                       cv2.data() + tok * (groups * sd) + static_cast<int64_t>(g) * sd;
                   const double* xt =
                       xv2.data() + tok * (heads * hc) + static_cast<int64_t>(h) * hc;
                   const double* st =
                       states.data() + tok * st_tok + static_cast<int64_t>(h) * st_head;
                   const double* prev = t == 0 ? nullptr
                                               : states.data() + (tok - 1) * st_tok +
                                                     static_cast<int64_t>(h) * st_head;
                   const double* dy = og.data() + tok * (heads * hc) + static_cast<int64_t>(h) * hc;
                   // y_t = C_t . state_t + d_h * x_t
                   if (cg) {
                     double* dct = cg + tok * (groups * sd) + static_cast<int64_t>(g) * sd;
                     for (int s = 0; s < sd; ++s) {
                       double acc = 0.0;
                       const double* strow = st + static_cast<int64_t>(s) * hc;
                       for (int c = 0; c < hc; ++c) acc += dy[c] * strow[c];
                       dct[s] += acc;
                     }
                   }
                   if (dg) {
                     double acc = 0.0;
                     for (int c = 0; c < hc; ++c) acc += dy[c] * xt[c];
                     dg[h] += acc;
                   }
                   if (xg) {
                     double* dxt = xg + tok * (heads * hc) + static_cast<int64_t>(h) * hc;
                     for (int c = 0; c < hc; ++c) dxt[c] += dh * dy[c];
                   }
                   for (int s = 0; s < sd; ++s) {
                     double* drow = dstate.data() + static_cast<int64_t>(s) * hc;
                     const double cs = ct[s];
                     for (int c = 0; c < hc; ++c) drow[c] += cs * dy[c];
                   }
                   // state_t = alpha * state_{t-1} + dt_t * (B_t outer x_t)
                   double dalpha = 0.0;
                   if (prev) {
                     for (int64_t i = 0; i < st_head; ++i) dalpha += dstate[static_cast<size_t>(i)] * prev[i];
                   }
                   double ddt = dalpha * ah * alpha;
                   for (int s = 0; s < sd; ++s) {
                     const double* drow = dstate.data() + static_cast<int64_t>(s) * hc;
                     double accx = 0.0;
                     for (int c = 0; c < hc; ++c) accx += drow[c] * xt[c];
                     ddt += accx * bt[s];
                     if (bg) bg[tok * (groups * sd) + static_cast<int64_t>(g) * sd + s] += dtv_t * accx;
                   }
                   if (xg) {
                     double* dxt = xg + tok * (heads * hc) + static_cast<int64_t>(h) * hc;
                     for (int c = 0; c < hc; ++c) {
                       double acc = 0.0;
                       for (int s = 0; s < sd; ++s)
                         acc += dstate[static_cast<size_t>(s) * hc + c] * bt[s];
                       dxt[c] += dtv_t * acc;
                     }
                   }
                   if (ag) ag[h] += dalpha * dtv_t * alpha;
                   if (dtg) dtg[tok * heads + h] += ddt;
                   // carry to t-1
                   for (int64_t i = 0; i < st_head; ++i) dstate[static_cast<size_t>(i)] *= alpha;
                 }
               }
             }
           });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> tokens, int batch,
                        int len) {
  if (table.rank() != 2) fail("embedding_lookup", "table must be rank-2 [vocab,dim]");
  if (static_cast<int64_t>(tokens.size()) != static_cast<int64_t>(batch) * len)
    fail("embedding_lookup", "token count vs batch*len");
  const int vocab = table.dim(0), dim = table.dim(1);
  for (size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || tokens[i] >= vocab)
      fail("embedding_lookup", "token " + std::to_string(tokens[i]) + " at position " +
                                   std::to_string(i) + " outside vocab " +
                                   std::to_string(vocab));
  Tensor out = Tensor::zeros({batch, len, dim});
  const auto tv = table.data();
  auto ov = out.data();
  for (size_t i = 0; i < tokens.size(); ++i) {
    const double* src = tv.data() + static_cast<int64_t>(tokens[i]) * dim;
    double* dst = ov.data() + static_cast<int64_t>(i) * dim;
    for (int c = 0; c < dim; ++c) dst[c] = src[c];
  }
  if (want_grad({&table})) {
    std::vector<int32_t> toks(tokens.begin(), tokens.end());
    record("embedding_lookup", out, [table, out, toks = std::move(toks), dim] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      auto& tg = table.grad_buf();
      for (size_t i = 0; i < toks.size(); ++i) {
        const double* dy = og.data() + static_cast<int64_t>(i) * dim;
        double* dst = tg.data() + static_cast<int64_t>(toks[i]) * dim;
        for (int c = 0; c < dim; ++c) dst[c] += dy[c];
      }
    });
  }
  return out;
}

Tensor attn_scores(const Tensor& q, const Tensor& k, int heads, double scl) {
  if (q.rank() != 3) fail("attn_scores", "q must be [batch,len,heads*dh]");
  check_same_shape("attn_scores", q, k);
  if (q.dim(2) % heads != 0) fail("attn_scores", "inner dim not divisible by heads");
  const int bsz = q.dim(0), len = q.dim(1), dh = q.dim(2) / heads;
  Tensor out = Tensor::zeros({bsz, heads, len, len});
  const auto qv = q.data();
  const auto kv = k.data();
  auto ov = out.data();
  const int inner = heads * dh;
  for (int b = 0; b < bsz; ++b) {
    for (int h = 0; h < heads; ++h) {
      double* sbase = ov.data() + ((static_cast<int64_t>(b) * heads + h) * len) * len;
      for (int i = 0; i < len; ++i) {
        const double* qi =
            qv.data() + (static_cast<int64_t>(b) * len + i) * inner + static_cast<int64_t>(h) * dh;
        double* srow = sbase + static_cast<int64_t>(i) * len;
        for (int j = 0; j <= i; ++j) {
          const double* kj = kv.data() + (static_cast<int64_t>(b) * len + j) * inner +
                             static_cast<int64_t>(h) * dh;
          double acc = 0.0;
          for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          srow[j] = acc * scl;
        }
        for (int j = i + 1; j < len; ++j) srow[j] = kNegInf;
      }
    }
  }
  if (want_grad({&q, &k})) {
    record("attn_scores", out, [q, k, out, bsz, heads, len, dh, scl, inner] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      const auto qv2 = q.data();
      const auto kv2 = k.data();
      double* qg = q.requires_grad() ? q.grad_buf().data() : nullptr;
      double* kg = k.requires_grad() ? k.grad_buf().data() : nullptr;
      for (int b = 0; b < bsz; ++b) {
        for (int h = 0; h < heads; ++h) {
          const double* dbase = og.data() + ((static_cast<int64_t>(b) * heads + h) * len) * len;
          for (int i = 0; i < len; ++i) {
            const double* drow = dbase + static_cast<int64_t>(i) * len;
            const double* qi = qv2.data() + (static_cast<int64_t>(b) * len + i) * inner +
                               static_cast<int64_t>(h) * dh;
            double* dqi = qg ? qg + (static_cast<int64_t>(b) * len + i) * inner +
                                   static_cast<int64_t>(h) * dh
                             : nullptr;
            for (int j = 0; j <= i; ++j) {
              const double ds = drow[j] * scl;
              if (ds == 0.0) continue;
              const double* kj = kv2.data() + (static_cast<int64_t>(b) * len + j) * inner +
                                 static_cast<int64_t>(h) * dh;
              if (dqi)
                for (int c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
              if (kg) {
                double* dkj = kg + (static_cast<int64_t>(b) * len + j) * inner +
                              static_cast<int64_t>(h) * dh;
                for (int c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor attn_mix(const Tensor& probs, const Tensor& v, int heads) {
  if (probs.rank() != 4) fail("attn_mix", "probs must be [batch,heads,len,len]");
  if (v.rank() != 3) fail("attn_mix", "v must be [batch,len,heads*dh]");
  const int bsz = probs.dim(0), len = probs.dim(2);
  if (probs.dim(1) != heads || v.dim(2) % heads != 0 || v.dim(0) != bsz || v.dim(1) != len)
    fail("attn_mix", "probs " + shape_str(probs.shape()) + " vs v " + shape_str(v.shape()));
  const int dh = v.dim(2) / heads;
  const int inner = heads * dh;
  Tensor out = Tensor::zeros(v.shape());
  const auto pv = probs.data();
  const auto vv = v.data();
  auto ov = out.data();
  for (int b = 0; b < bsz; ++b) {
    for (int h = 0; h < heads; ++h) {
      const double* pbase = pv.data() + ((static_cast<int64_t>(b) * heads + h) * len) * len;
      for (int i = 0; i < len; ++i) {
        const double* prow = pbase + static_cast<int64_t>(i) * len;
        double* yo = ov.data() + (static_cast<int64_t>(b) * len + i) * inner +
                     static_cast<int64_t>(h) * dh;
        for (int j = 0; j <= i; ++j) {
          const double p = prow[j];
          if (p == 0.0) continue;
          const double* vj = vv.data() + (static_cast<int64_t>(b) * len + j) * inner +
                             static_cast<int64_t>(h) * dh;
          for (int c = 0; c < dh; ++c) yo[c] += p * vj[c];
        }
      }
    }
  }
  if (want_grad({&probs, &v})) {
    record("attn_mix", out, [probs, v, out, bsz, heads, len, dh, inner] {
      if (!out.has_grad()) return;
      auto og = out.grad();
      const auto pv2 = probs.data();
      const auto vv2 = v.data();
      double* pg = probs.requires_grad() ? probs.grad_buf().data() : nullptr;
      double* vg = v.requires_grad() ? v.grad_buf().data() : nullptr;
      for (int b = 0; b < bsz; ++b) {
        for (int h = 0; h < heads; ++h) {
          const int64_t pbase = ((static_cast<int64_t>(b) * heads + h) * len) * len;
          for (int i = 0; i < len; ++i) {
            const double* dy = og.data() + (static_cast<int64_t>(b) * len + i) * inner +
                               static_cast<int64_t>(h) * dh;
            for (int j = 0; j <= i; ++j) {
              const double* vj = vv2.data() + (static_cast<int64_t>(b) * len + j) * inner +
                                 static_cast<int64_t>(h) * dh;
              if (pg) {
                double acc = 0.0;
                for (int c = 0; c < dh; ++c) acc += dy[c] * vj[c];
                pg[pbase + static_cast<int64_t>(i) * len + j] += acc;
              }
              if (vg) {
                const double p = pv2[pbase + static_cast<int64_t>(i) * len + j];
                if (p == 0.0) continue;
                double* dvj = vg + (static_cast<int64_t>(b) * len + j) * inner +
                              static_cast<int64_t>(h) * dh;
                for (int c = 0; c < dh; ++c) dvj[c] += p * dy[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     int32_t ignore_index) {
  auto [rows, vocab] = as_2d(logits);
  if (static_cast<int64_t>(targets.size()) != rows)
    fail("cross_entropy", "target count " + std::to_string(targets.size()) +
                              " vs positions " + std::to_string(rows));
  int64_t count = 0;
  for (int32_t t : targets)
    if (t != ignore_index) ++count;
  if (count == 0) fail("cross_entropy", "all positions ignored");
  const auto lv = logits.data();
  double loss = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const int32_t tgt = targets[static_cast<size_t>(r)];
    if (tgt == ignore_index) continue;
    if (tgt < 0 || tgt >= vocab) fail("cross_entropy", "target outside vocab");
    const double* row = lv.data() + r * vocab;
    double mx = row[0];
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < vocab; ++c) denom += std::exp(row[c] - mx);
    loss += mx + std::log(denom) - row[tgt];
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(count));
  if (want_grad({&logits})) {
    std::vector<int32_t> tg(targets.begin(), targets.end());
    record("cross_entropy", out,
           [logits, out, tg = std::move(tg), rows = rows, vocab = vocab, count, ignore_index] {
             if (!out.has_grad()) return;
             const double d = out.grad()[0] / static_cast<double>(count);
             const auto lv2 = logits.data();
             auto& lg = logits.grad_buf();
             for (int64_t r = 0; r < rows; ++r) {
               const int32_t tgt = tg[static_cast<size_t>(r)];
               if (tgt == ignore_index) continue;
               const double* row = lv2.data() + r * vocab;
               double mx = row[0];
               for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
               double denom = 0.0;
               for (int64_t c = 0; c < vocab; ++c) denom += std::exp(row[c] - mx);
               double* dst = lg.data() + r * vocab;
               for (int64_t c = 0; c < vocab; ++c) {
                 const double p = std::exp(row[c] - mx) / denom;
                 dst[c] += d * (p - (c == tgt ? 1.0 : 0.0));
               }
             }
           });
  }
  return out;
}

Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits,
                     double temperature) {
  check_same_shape("kl_divergence", teacher_logits, student_logits);
  if (temperature <= 0) fail("kl_divergence", "temperature must be positive");
  auto [rows, vocab] = as_2d(teacher_logits);
  const auto tv = teacher_logits.data();
  const auto sv = student_logits.data();

  auto log_probs = [&](const double* row, std::vector<double>& out_lp) {
    double mx = row[0] / temperature;
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c] / temperature);
    double denom = 0.0;
    for (int64_t c = 0; c < vocab; ++c) denom += std::exp(row[c] / temperature - mx);
    const double lse = mx + std::log(denom);
    for (int64_t c = 0; c < vocab; ++c) out_lp[static_cast<size_t>(c)] = row[c] / temperature - lse;
  };

  double loss = 0.0;
  std::vector<double> lpt(static_cast<size_t>(vocab)), lps(static_cast<size_t>(vocab));
  for (int64_t r = 0; r < rows; ++r) {
    log_probs(tv.data() + r * vocab, lpt);
    log_probs(sv.data() + r * vocab, lps);
    for (int64_t c = 0; c < vocab; ++c) {
      const double pt = std::exp(lpt[static_cast<size_t>(c)]);
      loss += pt * (lpt[static_cast<size_t>(c)] - lps[static_cast<size_t>(c)]);
    }
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(rows));
  if (want_grad({&teacher_logits, &student_logits})) {
    record("kl_divergence", out,
           [teacher_logits, student_logits, out, rows = rows, vocab = vocab, temperature] {
             if (!out.has_grad()) return;
             const double d = out.grad()[0] / static_cast<double>(rows);
             const auto tv2 = teacher_logits.data();
             const auto sv2 = student_logits.data();
             std::vector<double> lpt(static_cast<size_t>(vocab)), lps(static_cast<size_t>(vocab));
             auto log_probs2 = [&](const double* row, std::vector<double>& out_lp) {
               double mx = row[0] / temperature;
               for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c] / temperature);
               double denom = 0.0;
               for (int64_t c = 0; c < vocab; ++c) denom += std::exp(row[c] / temperature - mx);
               const double lse = mx + std::log(denom);
               for (int64_t c = 0; c < vocab; ++c)
                 out_lp[static_cast<size_t>(c)] = row[c] / temperature - lse;
             };
             for (int64_t r = 0; r < rows; ++r) {
               log_probs2(tv2.data() + r * vocab, lpt);
               log_probs2(sv2.data() + r * vocab, lps);
               double kl_pos = 0.0;
               for (int64_t c = 0; c < vocab; ++c)
                 kl_pos += std::exp(lpt[static_cast<size_t>(c)]) *
                           (lpt[static_cast<size_t>(c)] - lps[static_cast<size_t>(c)]);
               if (student_logits.requires_grad()) {
                 auto& sg = student_logits.grad_buf();
                 double* dst = sg.data() + r * vocab;
                 for (int64_t c = 0; c < vocab; ++c) {
                   const double pt = std::exp(lpt[static_cast<size_t>(c)]);
                   const double ps = std::exp(lps[static_cast<size_t>(c)]);
                   dst[c] += d * (ps - pt) / temperature;
                 }
               }
               if (teacher_logits.requires_grad()) {
                 auto& tg = teacher_logits.grad_buf();
                 double* dst = tg.data() + r * vocab;
                 for (int64_t c = 0; c < vocab; ++c) {
                   const double pt = std::exp(lpt[static_cast<size_t>(c)]);
                   const double diff = lpt[static_cast<size_t>(c)] - lps[static_cast<size_t>(c)];
                   dst[c] += d * pt * (diff - kl_pos) / temperature;
                 }
               }
             }
           });
  }
  return out;
}

Tensor primitive_forward(const std::string& op_id, std::span<const Tensor> inputs,
                         const PrimAux& aux) {
  auto need = [&](size_t n) {
    if (inputs.size() != n)
      fail("primitive_forward",
           op_id + " expects " + std::to_string(n) + " inputs, got " +
               std::to_string(inputs.size()));
  };
  if (op_id == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
  if (op_id == "linear") { need(2); return linear(inputs[0], inputs[1]); }
  if (op_id == "add") { need(2); return add(inputs[0], inputs[1]); }
  if (op_id == "sub") { need(2); return sub(inputs[0], inputs[1]); }
  if (op_id == "mul") { need(2); return mul(inputs[0], inputs[1]); }
  if (op_id == "add_bias") { need(2); return add_bias(inputs[0], inputs[1]); }
  if (op_id == "mul_rowvec") { need(2); return mul_rowvec(inputs[0], inputs[1]); }
  if (op_id == "mul_scalar") { need(2); return mul_scalar(inputs[0], inputs[1]); }
  if (op_id == "sum") { need(1); return sum(inputs[0]); }
  if (op_id == "absval") { need(1); return absval(inputs[0]); }
  if (op_id == "exp") { need(1); return exp_t(inputs[0]); }
  if (op_id == "silu") { need(1); return silu(inputs[0]); }
  if (op_id == "leaky_relu") { need(1); return leaky_relu(inputs[0], aux.slope); }
  if (op_id == "softplus") { need(1); return softplus(inputs[0]); }
  if (op_id == "softmax") { need(1); return softmax_lastdim(inputs[0]); }
  if (op_id == "layer_norm") {
    if (inputs.size() == 3) return layer_norm(inputs[0], inputs[1], inputs[2], Tensor(), aux.eps);
    need(4);
    return layer_norm(inputs[0], inputs[1], inputs[2], inputs[3], aux.eps);
  }
  if (op_id == "rms_norm") {
    if (inputs.size() == 2) return rms_norm(inputs[0], inputs[1], Tensor(), aux.eps);
    need(3);
    return rms_norm(inputs[0], inputs[1], inputs[2], aux.eps);
  }
  if (op_id == "conv1d_causal") { need(2); return conv1d_causal(inputs[0], inputs[1]); }
  if (op_id == "selective_scan") {
    need(6);
    return selective_scan(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5],
                          aux.heads, aux.head_ch, aux.groups, aux.state_dim);
  }
  if (op_id == "attn_scores") { need(2); return attn_scores(inputs[0], inputs[1], aux.heads, aux.scl); }
  if (op_id == "attn_mix") { need(2); return attn_mix(inputs[0], inputs[1], aux.heads); }
  if (op_id == "kl_divergence") {
    need(2);
    return kl_divergence(inputs[0], inputs[1], aux.temperature);
  }
  fail("primitive_forward", "unknown op '" + op_id + "'");
}

}  // namespace nemelast
