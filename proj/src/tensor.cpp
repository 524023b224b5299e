#include "cracknet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace cracknet {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void accumulate_grad(TensorImpl& t, const double* g, int64_t n) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  double* dst = t.grad.data();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw UsageError("tensor has no gradient populated");
  return impl_->grad;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() requires a scalar tensor, shape is " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  const Shape& s = impl_->shape;
  if (index.size() != s.size()) throw DimensionError("at(): index rank mismatch");
  int64_t off = 0;
  size_t d = 0;
  for (int64_t i : index) {
    if (i < 0 || i >= s[d]) throw DimensionError("at(): index out of range");
    off = off * s[d] + i;
    ++d;
  }
  return impl_->data[off];
}

Tensor Tensor::detach() const {
  return Tensor(impl_->shape, impl_->data, false);
}

Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (double& v : d) v = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

// ---- Tape -------------------------------------------------------------------

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(TensorImplPtr out, std::function<void()> step) {
  entries_.push_back({std::move(out), std::move(step)});
}

void Tape::clear() { entries_.clear(); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, shape is " + shape_str(loss.shape()));
  }
  const double one = 1.0;
  accumulate_grad(*loss.impl(), &one, 1);
  // Execution order is a topological order, so the reverse visits each node
  // after all its consumers. Entries whose output never received a gradient
  // are off the path to the loss and are skipped.
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->out->grad.empty()) it->step();
  }
  clear();
}

namespace {

bool want_grad(const Tensor& a) {
  return Tape::active().enabled() && a.requires_grad();
}
bool want_grad(const Tensor& a, const Tensor& b) {
  return Tape::active().enabled() && (a.requires_grad() || b.requires_grad());
}

Tensor make_result(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

// ---- broadcasting -----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `in` laid over `out`, with stride 0 on stretched axes.
std::vector<int64_t> strides_over(const Shape& in, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t acc = 1;
  for (int64_t i = static_cast<int64_t>(in.size()) - 1; i >= 0; --i) {
    size_t oi = out.size() - in.size() + static_cast<size_t>(i);
    strides[oi] = (in[static_cast<size_t>(i)] == 1) ? 0 : acc;
    acc *= in[static_cast<size_t>(i)];
  }
  return strides;
}

// Odometer walk over `out_shape`, calling f(out_flat, off_a, off_b).
template <class F>
void for_each_broadcast(const Shape& out_shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
  const int64_t n = shape_numel(out_shape);
  const int64_t rank = static_cast<int64_t>(out_shape.size());
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t offa = 0, offb = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, offa, offb);
    for (int64_t d = rank - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      offa += sa[static_cast<size_t>(d)];
      offb += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      offa -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      offb -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
    }
  }
}

// Shared implementation for broadcasting binary ops. Forward applies fwd
// elementwise; backward accumulates da = dfa(a,b)*g and db = dfb(a,b)*g into
// the (possibly broadcast) inputs, which sums over stretched axes for free.
template <class Fwd, class Dfa, class Dfb>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Dfa dfa, Dfb dfb) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = strides_over(a.shape(), out_shape);
  const auto sb = strides_over(b.shape(), out_shape);
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  const double* pa = a.data().data();
  const double* pb = b.data().data();

  if (a.shape() == b.shape()) {
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
      out[static_cast<size_t>(i)] = fwd(pa[oa], pb[ob]);
    });
  }

  bool rg = want_grad(a, b);
  Tensor res = make_result(out_shape, std::move(out), rg);
  if (rg) {
    auto ai = a.impl(), bi = b.impl(), oi = res.impl();
    Shape os = out_shape;
    Tape::active().record(oi, [ai, bi, oi, os, sa, sb, dfa, dfb]() {
      const double* g = oi->grad.data();
      const double* pa = ai->data.data();
      const double* pb = bi->data.data();
      const bool ga = ai->requires_grad;
      const bool gb = bi->requires_grad;
      if (ga && ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      if (gb && bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
      double* da = ai->grad.data();
      double* db = bi->grad.data();
      for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
        const double gi = g[i];
        if (ga) da[oa] += dfa(pa[oa], pb[ob]) * gi;
        if (gb) db[ob] += dfb(pa[oa], pb[ob]) * gi;
      });
    });
  }
  return res;
}

// Unary op with pointwise derivative computed from (input, output).
template <class Fwd, class Dfx>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfx dfx) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(pa[i]);

  bool rg = want_grad(a);
  Tensor res = make_result(a.shape(), std::move(out), rg);
  if (rg) {
    auto ai = a.impl(), oi = res.impl();
    Tape::active().record(oi, [ai, oi, n, dfx]() {
      const double* g = oi->grad.data();
      const double* x = ai->data.data();
      const double* y = oi->data.data();
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
      double* da = ai->grad.data();
      for (int64_t i = 0; i < n; ++i) da[i] += dfx(x[i], y[i]) * g[i];
    });
  }
  return res;
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        // Evaluate on the non-growing branch to avoid exp overflow.
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- matmul -----------------------------------------------------------------

namespace {

// C[M,N] (+)= A[M,K] * B[K,N]; i-k-j order so the inner loop is contiguous.
void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
             double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, sizeof(double) * static_cast<size_t>(M * N));
  for (int64_t i = 0; i < M; ++i) {
    const double* a_row = A + i * K;
    double* c_row = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const double aik = a_row[k];
      const double* b_row = B + k * N;
      for (int64_t j = 0; j < N; ++j) c_row[j] += aik * b_row[j];
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T; row-dot-row.
void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
             double* C, bool accumulate) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a_row = A + i * K;
    double* c_row = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const double* b_row = B + j * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a_row[k] * b_row[k];
      c_row[j] = accumulate ? c_row[j] + acc : acc;
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]; k outer keeps both reads contiguous.
void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
             double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, sizeof(double) * static_cast<size_t>(M * N));
  for (int64_t k = 0; k < K; ++k) {
    const double* a_row = A + k * M;
    const double* b_row = B + k * N;
    for (int64_t i = 0; i < M; ++i) {
      const double aki = a_row[i];
      double* c_row = C + i * N;
      for (int64_t j = 0; j < N; ++j) c_row[j] += aki * b_row[j];
    }
  }
}

}  // namespace

namespace detail {
void gemm(GemmKind kind, int64_t M, int64_t N, int64_t K, const double* A,
          const double* B, double* C, bool accumulate) {
  switch (kind) {
    case GemmKind::nn: gemm_nn(M, N, K, A, B, C, accumulate); break;
    case GemmKind::nt: gemm_nt(M, N, K, A, B, C, accumulate); break;
    case GemmKind::tn: gemm_tn(M, N, K, A, B, C, accumulate); break;
  }
}
}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if ((as.size() != 2 && as.size() != 3) || (bs.size() != 2 && bs.size() != 3)) {
    throw DimensionError("matmul expects rank-2 or rank-3 tensors, got " +
                         shape_str(as) + " and " + shape_str(bs));
  }
  const int64_t M = as[as.size() - 2], Ka = as[as.size() - 1];
  const int64_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
  if (Ka != Kb) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(as) +
                         " vs " + shape_str(bs));
  }
  const bool a_batched = as.size() == 3;
  const bool b_batched = bs.size() == 3;
  int64_t batch = 1;
  if (a_batched && b_batched) {
    if (as[0] != bs[0]) {
      throw DimensionError("matmul batch dimensions disagree: " + shape_str(as) +
                           " vs " + shape_str(bs));
    }
    batch = as[0];
  } else if (a_batched || b_batched) {
    batch = a_batched ? as[0] : bs[0];
  }
  const int64_t K = Ka;

  Shape out_shape = (a_batched || b_batched) ? Shape{batch, M, N} : Shape{M, N};
  std::vector<double> out(static_cast<size_t>(batch * M * N));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    const double* A = pa + (a_batched ? bi * M * K : 0);
    const double* B = pb + (b_batched ? bi * K * N : 0);
    gemm_nn(M, N, K, A, B, out.data() + bi * M * N, false);
  }

  bool rg = want_grad(a, b);
  Tensor res = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto ai = a.impl(), bi_ = b.impl(), oi = res.impl();
    Tape::active().record(oi, [ai, bi_, oi, M, N, K, batch, a_batched, b_batched]() {
      const double* g = oi->grad.data();
      const double* pa = ai->data.data();
      const double* pb = bi_->data.data();
      if (ai->requires_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
        for (int64_t bb = 0; bb < batch; ++bb) {
          const double* G = g + bb * M * N;
          const double* B = pb + (b_batched ? bb * K * N : 0);
          double* dA = ai->grad.data() + (a_batched ? bb * M * K : 0);
          gemm_nt(M, K, N, G, B, dA, true);  // dA += G * B^T
        }
      }
      if (bi_->requires_grad) {
        if (bi_->grad.empty()) bi_->grad.assign(bi_->data.size(), 0.0);
        for (int64_t bb = 0; bb < batch; ++bb) {
          const double* G = g + bb * M * N;
          const double* A = pa + (a_batched ? bb * M * K : 0);
          double* dB = bi_->grad.data() + (b_batched ? bb * K * N : 0);
          gemm_tn(K, N, M, A, G, dB, true);  // dB += A^T * G
        }
      }
    });
  }
  return res;
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, int64_t axis) {
  const Shape& s = x.shape();
  const int64_t rank = static_cast<int64_t>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax axis out of range");
  int64_t outer = 1, inner = 1;
  const int64_t L = s[static_cast<size_t>(axis)];
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < rank; ++i) inner *= s[static_cast<size_t>(i)];

  std::vector<double> out(x.data().size());
  const double* px = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * L * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t l = 0; l < L; ++l) {
        const double v = px[base + l * inner];
        if (!std::isfinite(v)) throw NumericError("softmax input is not finite");
        mx = std::max(mx, v);
      }
      double denom = 0.0;
      for (int64_t l = 0; l < L; ++l) {
        const double e = std::exp(px[base + l * inner] - mx);
        out[static_cast<size_t>(base + l * inner)] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (int64_t l = 0; l < L; ++l) out[static_cast<size_t>(base + l * inner)] *= inv;
    }
  }

  bool rg = want_grad(x);
  Tensor res = make_result(s, std::move(out), rg);
  if (rg) {
    auto xi = x.impl(), oi = res.impl();
    Tape::active().record(oi, [xi, oi, outer, inner, L]() {
      const double* g = oi->grad.data();
      const double* y = oi->data.data();
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
      double* dx = xi->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * L * inner + in;
          double dot = 0.0;
          for (int64_t l = 0; l < L; ++l) {
            const int64_t k = base + l * inner;
            dot += g[k] * y[k];
          }
          for (int64_t l = 0; l < L; ++l) {
            const int64_t k = base + l * inner;
            dx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return res;
}

// ---- shape ops ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape) + " changes element count");
  }
  bool rg = want_grad(x);
  Tensor res = make_result(std::move(new_shape), x.data(), rg);
  if (rg) {
    auto xi = x.impl(), oi = res.impl();
    Tape::active().record(oi, [xi, oi]() {
      accumulate_grad(*xi, oi->grad.data(), static_cast<int64_t>(oi->grad.size()));
    });
  }
  return res;
}

namespace {

std::vector<double> permute_raw(const double* src, const Shape& in_shape,
                                const std::vector<int64_t>& perm, Shape& out_shape) {
  const int64_t rank = static_cast<int64_t>(in_shape.size());
  out_shape.resize(static_cast<size_t>(rank));
  std::vector<int64_t> in_strides(static_cast<size_t>(rank), 1);
  for (int64_t i = rank - 2; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * in_shape[static_cast<size_t>(i + 1)];
  }
  std::vector<int64_t> src_strides(static_cast<size_t>(rank));
  for (int64_t i = 0; i < rank; ++i) {
    out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    src_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  const int64_t n = shape_numel(out_shape);
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t off = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = src[off];
    for (int64_t d = rank - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      off += src_strides[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      off -= src_strides[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
    }
  }
  return out;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int64_t>& perm) {
  const int64_t rank = x.dim();
  if (static_cast<int64_t>(perm.size()) != rank) {
    throw DimensionError("permute needs one index per axis");
  }
  std::vector<bool> seen(static_cast<size_t>(rank), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<size_t>(p)]) {
      throw DimensionError("permute indices must be a permutation of axes");
    }
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape;
  std::vector<double> out = permute_raw(x.data().data(), x.shape(), perm, out_shape);

  bool rg = want_grad(x);
  Tensor res = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
    auto xi = x.impl(), oi = res.impl();
    Tape::active().record(oi, [xi, oi, inv]() {
      Shape back_shape;
      std::vector<double> gx = permute_raw(oi->grad.data(), oi->shape, inv, back_shape);
      accumulate_grad(*xi, gx.data(), static_cast<int64_t>(gx.size()));
    });
  }
  return res;
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw UsageError("concat of zero tensors");
  const Shape& ref = xs[0].shape();
  const int64_t rank = static_cast<int64_t>(ref.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("concat axis out of range");
  int64_t axis_total = 0;
  for (const Tensor& t : xs) {
    if (t.dim() != rank) throw DimensionError("concat inputs must share rank");
    for (int64_t d = 0; d < rank; ++d) {
      if (d != axis && t.shape()[static_cast<size_t>(d)] != ref[static_cast<size_t>(d)]) {
        throw DimensionError("concat inputs differ on non-concat axis " + std::to_string(d));
      }
    }
    axis_total += t.shape()[static_cast<size_t>(axis)];
  }
  Shape out_shape = ref;
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= ref[static_cast<size_t>(d)];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= ref[static_cast<size_t>(d)];

  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t offset_rows = 0;
  for (const Tensor& t : xs) {
    const int64_t rows = t.shape()[static_cast<size_t>(axis)];
    const double* src = t.data().data();
    for (int64_t o = 0; o < outer; ++o) {
      double* dst = out.data() + (o * axis_total + offset_rows) * inner;
      std::memcpy(dst, src + o * rows * inner, sizeof(double) * static_cast<size_t>(rows * inner));
    }
    offset_rows += rows;
  }

  bool rg = false;
  for (const Tensor& t : xs) rg = rg || want_grad(t);
  Tensor res = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    std::vector<TensorImplPtr> impls;
    std::vector<int64_t> rows_per;
    for (const Tensor& t : xs) {
      impls.push_back(t.impl());
      rows_per.push_back(t.shape()[static_cast<size_t>(axis)]);
    }
    auto oi = res.impl();
    Tape::active().record(oi, [impls, rows_per, oi, outer, inner, axis_total]() {
      const double* g = oi->grad.data();
      int64_t offset_rows = 0;
      for (size_t k = 0; k < impls.size(); ++k) {
        auto& xi = *impls[k];
        const int64_t rows = rows_per[k];
        if (xi.requires_grad) {
          if (xi.grad.empty()) xi.grad.assign(xi.data.size(), 0.0);
          for (int64_t o = 0; o < outer; ++o) {
            const double* gs = g + (o * axis_total + offset_rows) * inner;
            double* dst = xi.grad.data() + o * rows * inner;
            for (int64_t i = 0; i < rows * inner; ++i) dst[i] += gs[i];
          }
        }
        offset_rows += rows;
      }
    });
  }
  return res;
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
  const Shape& s = x.shape();
  const int64_t rank = static_cast<int64_t>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("slice axis out of range");
  const int64_t dim = s[static_cast<size_t>(axis)];
  if (start < 0 || len <= 0 || start + len > dim) {
    throw DimensionError("slice range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds axis size " +
                         std::to_string(dim));
  }
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= s[static_cast<size_t>(d)];

  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = len;
  std::vector<double> out(static_cast<size_t>(outer * len * inner));
  const double* src = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * len * inner, src + (o * dim + start) * inner,
                sizeof(double) * static_cast<size_t>(len * inner));
  }

  bool rg = want_grad(x);
  Tensor res = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto xi = x.impl(), oi = res.impl();
    Tape::active().record(oi, [xi, oi, outer, inner, dim, start, len]() {
      const double* g = oi->grad.data();
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
      double* dx = xi->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        const double* gs = g + o * len * inner;
        double* dst = dx + (o * dim + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += gs[i];
      }
    });
  }
  return res;
}

// ---- reductions ---------------------------------------------------------------

Tensor reduce_sum(const Tensor& x, std::vector<int64_t> axes, bool keepdims) {
  const Shape& s = x.shape();
  const int64_t rank = static_cast<int64_t>(s.size());
  std::vector<bool> reduced(static_cast<size_t>(rank), false);
  for (int64_t& a : axes) {
    if (a < 0) a += rank;
    if (a < 0 || a >= rank) throw DimensionError("reduce axis out of range");
    reduced[static_cast<size_t>(a)] = true;
  }
  Shape keep_shape = s;
  for (int64_t d = 0; d < rank; ++d) {
    if (reduced[static_cast<size_t>(d)]) keep_shape[static_cast<size_t>(d)] = 1;
  }
  Shape out_shape;
  for (int64_t d = 0; d < rank; ++d) {
    if (!reduced[static_cast<size_t>(d)]) out_shape.push_back(s[static_cast<size_t>(d)]);
    else if (keepdims) out_shape.push_back(1);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Walk the input; the keepdims-shaped output is addressed with stride 0 on
  // reduced axes so sums land in the right cell.
  const auto so = strides_over(keep_shape, s);
  const auto sx = strides_over(s, s);
  std::vector<double> out(static_cast<size_t>(shape_numel(keep_shape)), 0.0);
  const double* px = x.data().data();
  for_each_broadcast(s, so, sx, [&](int64_t, int64_t oo, int64_t ox) {
    out[static_cast<size_t>(oo)] += px[ox];
  });

  bool rg = want_grad(x);
  Tensor res = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto xi = x.impl(), oi = res.impl();
    Shape in_shape = s;
    Tape::active().record(oi, [xi, oi, in_shape, so, sx]() {
      const double* g = oi->grad.data();
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
      double* dx = xi->grad.data();
      for_each_broadcast(in_shape, so, sx, [&](int64_t, int64_t oo, int64_t ox) {
        dx[ox] += g[oo];
      });
    });
  }
  return res;
}

Tensor reduce_mean(const Tensor& x, std::vector<int64_t> axes, bool keepdims) {
  const Shape& s = x.shape();
  const int64_t rank = static_cast<int64_t>(s.size());
  int64_t count = 1;
  for (int64_t a : axes) {
    int64_t aa = a < 0 ? a + rank : a;
    if (aa < 0 || aa >= rank) throw DimensionError("reduce axis out of range");
    count *= s[static_cast<size_t>(aa)];
  }
  return mul(reduce_sum(x, std::move(axes), keepdims), 1.0 / static_cast<double>(count));
}

Tensor sum(const Tensor& x) {
  std::vector<int64_t> axes(static_cast<size_t>(x.dim()));
  std::iota(axes.begin(), axes.end(), 0);
  return reduce_sum(x, std::move(axes), false);
}

Tensor mean(const Tensor& x) {
  return mul(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- finite differences ---------------------------------------------------------

double finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, double h) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape::active().clear();
  Tensor y = f(inputs);
  if (y.numel() != 1) throw UsageError("finite_diff_check requires a scalar-valued function");
  backward(y);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) {
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.data().size(), 0.0));
  }

  double worst = 0.0;
  {
    NoGradGuard ng;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
      Tensor& t = inputs[ti];
      std::vector<double>& d = t.mutable_data();
      for (size_t c = 0; c < d.size(); ++c) {
        const double orig = d[c];
        d[c] = orig + h;
        const double fp = f(inputs).item();
        d[c] = orig - h;
        const double fm = f(inputs).item();
        d[c] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic[ti][c];
        const double err = std::abs(an - fd) / std::max(1.0, std::abs(an));
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h) {
  return finite_diff_check(
      [&f](const std::vector<Tensor>& xs) { return f(xs[0]); }, {x}, h);
}

}  // namespace cracknet
