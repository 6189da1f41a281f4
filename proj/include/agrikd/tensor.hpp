#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "agrikd/common.hpp"

namespace agrikd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

/// One node of the reverse-mode differentiation graph. Nodes link to their
/// input nodes, so the executed operations form a DAG in execution order;
/// `backward` walks it once in reverse topological order and accumulates
/// gradients into every node that requires them.
struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;  // flat, row-major; shared so reshape is zero-copy
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation; same length as data afterwards

    std::vector<std::shared_ptr<Node>> parents;
    // Receives this node's gradient and accumulates into the parents' grads.
    std::function<void(const std::vector<double>&)> backward_fn;

    std::size_t numel() const { return data->size(); }
    std::vector<double>& grad_buffer();  // allocates zeros on first use
};

bool grad_enabled();

}  // namespace detail

/// Suspends graph recording for the current thread (RAII). Forward passes run
/// inside a guard produce constant tensors, which is how teacher outputs are
/// detached and how finite-difference probes stay cheap.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

/// Dense 64-bit real tensor participating in a reverse-mode differentiation
/// graph. A Tensor is a cheap handle; `clone()` deep-copies the payload.
/// Invariants: product(shape) == data length, every dimension is positive,
/// and grad (when present) matches data in length.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor ones(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor rand_uniform(const Shape& shape, double lo, double hi, Rng& rng,
                               bool requires_grad = false);
    static Tensor rand_normal(const Shape& shape, double mean, double stddev, Rng& rng,
                              bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t ndim() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t dim(std::size_t axis) const;

    const std::vector<double>& data() const;
    std::vector<double>& mutable_data();  // in-place edits; valid between graph builds only
    double value() const;                 // single-element tensors
    double at(const std::vector<std::size_t>& index) const;

    bool requires_grad() const;
    const std::vector<double>& grad() const;  // ContractError when no gradient accumulated
    bool has_grad() const;
    void zero_grad();

    /// Same data buffer, no graph history, requires_grad=false.
    Tensor detach() const;
    /// Deep copy of data (graph history is not copied).
    Tensor clone() const;

    bool all_finite() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node);

  private:
    std::shared_ptr<detail::Node> node_;
};

/// Accumulates d(loss)/d(node) into every requires_grad node reachable from
/// `loss`. Gradients add up across calls; call zero_grad before the next
/// optimizer step (accumulate-and-explicit-zero policy).
void backward(const Tensor& loss);

// ---- elementwise (trailing-dim broadcasting, numpy rules) -------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, double s);
Tensor sub(double s, const Tensor& a);
Tensor mul(const Tensor& a, double s);
Tensor div(const Tensor& a, double s);
Tensor div(double s, const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return sub(s, a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, s); }
inline Tensor operator/(double s, const Tensor& a) { return div(s, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- structure --------------------------------------------------------------
Tensor reshape(const Tensor& a, const Shape& shape);  // zero-copy metadata change
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
/// out[i] = a[index_map[i]]; backward scatter-adds. The index permutations of
/// patchify and of the quadrant grouping are built on this.
Tensor gather(const Tensor& a, const Shape& out_shape,
              std::shared_ptr<const std::vector<std::size_t>> index_map);

// ---- reductions ---------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor max_axis(const Tensor& a, std::size_t axis, bool keepdim = false);

// ---- linear algebra -----------------------------------------------------------
/// [m×k]@[k×n], [B×m×k]@[B×k×n], or [B×m×k]@[k×n].
/// Backward: dA = G·Bᵀ, dB = Aᵀ·G (summed over the batch for a shared B).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Row softmax over the last axis, stabilized by max subtraction. Rows sum to 1.
Tensor softmax_rows(const Tensor& a);
/// log(softmax_rows(a)) in the numerically stable form x − max − log(Σ exp).
Tensor log_softmax_rows(const Tensor& a);

/// x: [B×Cin×H×W], w: [Cout×Cin/groups×kh×kw], optional bias [Cout].
/// groups must divide both Cin and Cout (groups == Cin gives a depthwise conv).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad, std::size_t groups = 1);

// ---- text dump (test-oracle interchange format) -------------------------------
// `shape: d1 d2 ...` line followed by whitespace-separated row-major values.
std::string dump_tensor(const Tensor& t);
void dump_tensor(std::ostream& os, const Tensor& t);
Tensor parse_tensor(std::istream& is);
Tensor parse_tensor(const std::string& text);

}  // namespace agrikd
