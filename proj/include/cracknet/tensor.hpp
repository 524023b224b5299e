#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cracknet/common.hpp"

namespace cracknet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Shared storage behind a Tensor handle. Data is 64-bit float, row-major.
// grad stays empty until backward touches it.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
};

using TensorImplPtr = std::shared_ptr<TensorImpl>;

// Allocates grad as zeros on first use, then adds.
void accumulate_grad(TensorImpl& t, const double* g, int64_t n);

// Value handle with aliasing copy semantics: copies share storage, like the
// underlying impl. All math goes through the free functions below, which
// record backward closures on the active tape when gradients are needed.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
  explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad() { impl_->grad.clear(); }

  double item() const;
  double at(std::initializer_list<int64_t> index) const;

  // Deep copy with gradients dropped; not recorded on the tape.
  Tensor detach() const;

  const TensorImplPtr& impl() const { return impl_; }

 private:
  TensorImplPtr impl_;
};

// Random leaves; never recorded. std distributions are avoided for
// reproducibility (see Rng).
Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
             bool requires_grad = false);
Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                    bool requires_grad = false);

// Define-by-run tape: ordered record of executed primitives. Reverse replay
// propagates gradients; each entry runs at most once, then the tape is
// consumed. One tape per thread; drive it from a single thread.
class Tape {
 public:
  static Tape& active();

  bool enabled() const { return enabled_; }
  void set_enabled(bool v) { enabled_ = v; }

  void record(TensorImplPtr out, std::function<void()> step);
  size_t size() const { return entries_.size(); }
  void clear();

  void backward(const Tensor& loss);

 private:
  struct Entry {
    TensorImplPtr out;
    std::function<void()> step;
  };
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

struct NoGradGuard {
  NoGradGuard() : prev_(Tape::active().enabled()) {
    Tape::active().set_enabled(false);
  }
  ~NoGradGuard() { Tape::active().set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline void backward(const Tensor& loss) { Tape::active().backward(loss); }

// ---- elementwise -----------------------------------------------------------
// Binary ops broadcast with trailing-axis alignment; size-1 axes stretch.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);      // subgradient 0 at 0
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);  // pass-through gradient inside [lo, hi]

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add(neg(a), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul(a, 1.0 / s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- linear algebra --------------------------------------------------------

// Rank-2 [M,K]x[K,N], rank-3 batched [B,M,K]x[B,K,N], or mixed rank-2/rank-3
// with the rank-2 side broadcast over the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-subtracted softmax along `axis`; rows sum to 1.
Tensor softmax(const Tensor& x, int64_t axis);

// ---- shape ops -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int64_t>& perm);
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len);

// ---- reductions ------------------------------------------------------------

Tensor reduce_sum(const Tensor& x, std::vector<int64_t> axes, bool keepdims);
Tensor reduce_mean(const Tensor& x, std::vector<int64_t> axes, bool keepdims);
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

namespace detail {
// Row-major double gemm used by matmul and the convolution kernels.
// nn: C[M,N] (+)= A[M,K]*B[K,N];  nt: ... A[M,K]*B[N,K]^T;  tn: A[K,M]^T*B[K,N].
enum class GemmKind { nn, nt, tn };
void gemm(GemmKind kind, int64_t M, int64_t N, int64_t K, const double* A,
          const double* B, double* C, bool accumulate);
}  // namespace detail

// ---- verification ----------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued deterministic function of the given inputs.
double finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, double h = 1e-5);

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h = 1e-5);

}  // namespace cracknet
