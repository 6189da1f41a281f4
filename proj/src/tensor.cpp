#include "agrikd/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace agrikd {

namespace {

using Vec = std::vector<double>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

// Strides of `in` laid over `out` (trailing alignment); broadcast dims get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const auto in_strides = row_major_strides(in);
    std::vector<std::size_t> strides(out.size(), 0);
    const std::size_t offset = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        strides[offset + i] = (in[i] == 1 && out[offset + i] != 1) ? 0 : in_strides[i];
    }
    return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " are not broadcastable");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Flat index of every out element into a tensor of shape `in` broadcast over `out`.
std::vector<std::size_t> build_index_map(const Shape& in, const Shape& out) {
    const auto strides = broadcast_strides(in, out);
    const std::size_t n = shape_numel(out);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> counter(out.size(), 0);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        map[i] = idx;
        for (std::size_t d = out.size(); d-- > 0;) {
            ++counter[d];
            idx += strides[d];
            if (counter[d] < out[d]) break;
            counter[d] = 0;
            idx -= strides[d] * out[d];
        }
    }
    return map;
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, Vec values, bool requires_grad) {
    if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " expects " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::make_shared<Vec>(std::move(values));
    node->requires_grad = requires_grad;
    return node;
}

// Result node of an operation. Outside a recording context (or when no input
// requires grad) the node is a plain constant with no history.
std::shared_ptr<detail::Node> make_result(
    Shape shape, Vec values, std::vector<std::shared_ptr<detail::Node>> parents,
    std::function<void(const std::vector<double>&)> backward_fn) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::make_shared<Vec>(std::move(values));
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            if (p && p->requires_grad) needs = true;
        }
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return node;
}

// Same-buffer result (reshape): shares the data vector instead of copying.
std::shared_ptr<detail::Node> make_view(
    Shape shape, std::shared_ptr<Vec> data, std::vector<std::shared_ptr<detail::Node>> parents,
    std::function<void(const std::vector<double>&)> backward_fn) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            if (p && p->requires_grad) needs = true;
        }
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return node;
}

void accumulate(detail::Node& node, const Vec& delta) {
    auto& g = node.grad_buffer();
    Eigen::Map<Eigen::ArrayXd>(g.data(), static_cast<Eigen::Index>(g.size())) +=
        Eigen::Map<const Eigen::ArrayXd>(delta.data(), static_cast<Eigen::Index>(delta.size()));
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(data->size(), 0.0);
    return grad;
}

bool grad_enabled() { return g_grad_enabled; }

}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return wrap(make_leaf(shape, Vec(shape_numel(shape), 0.0), requires_grad));
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) {
    return wrap(make_leaf(shape, Vec(shape_numel(shape), 1.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return wrap(make_leaf(shape, Vec(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values, bool requires_grad) {
    return wrap(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return wrap(make_leaf({1}, Vec{value}, requires_grad));
}

Tensor Tensor::rand_uniform(const Shape& shape, double lo, double hi, Rng& rng,
                            bool requires_grad) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Vec values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return wrap(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::rand_normal(const Shape& shape, double mean, double stddev, Rng& rng,
                           bool requires_grad) {
    std::normal_distribution<double> dist(mean, stddev);
    Vec values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return wrap(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

const std::vector<double>& Tensor::data() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_->data;
}

std::vector<double>& Tensor::mutable_data() {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_->data;
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value() requires a single-element tensor, got " + shape_str(shape()));
    return (*node_->data)[0];
}

double Tensor::at(const std::vector<std::size_t>& index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
    std::size_t flat = 0;
    const auto strides = row_major_strides(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (index[i] >= s[i]) throw DimensionError("index out of bounds for " + shape_str(s));
        flat += index[i] * strides[i];
    }
    return (*node_->data)[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no accumulated gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    if (!node_) throw ContractError("use of undefined tensor");
    auto node = std::make_shared<detail::Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    return wrap(std::move(node));
}

Tensor Tensor::clone() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return from_data(node_->shape, *node_->data, node_->requires_grad);
}

bool Tensor::all_finite() const {
    for (double v : data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// ---- backward -----------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss does not depend on any requires_grad tensor");
    }
    // Post-order DFS gives a topological order of the recorded graph.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent && parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(node->grad);
        }
    }
}

// ---- elementwise machinery ------------------------------------------------------

namespace {

// dfa/dfb produce the local partial at one element given both input values.
template <class Fwd, class DfA, class DfB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DfA dfa, DfB dfb) {
    auto an = a.node();
    auto bn = b.node();
    if (!an || !bn) throw ContractError(std::string(name) + ": undefined tensor");
    const Shape& sa = an->shape;
    const Shape& sb = bn->shape;
    const Vec& va = *an->data;
    const Vec& vb = *bn->data;

    if (sa == sb) {
        const std::size_t n = va.size();
        Vec out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(va[i], vb[i]);
        return Tensor::wrap(make_result(
            sa, std::move(out), {an, bn}, [an, bn, dfa, dfb](const Vec& g) {
                const Vec& x = *an->data;
                const Vec& y = *bn->data;
                if (an->requires_grad) {
                    auto& ga = an->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfa(x[i], y[i]);
                }
                if (bn->requires_grad) {
                    auto& gb = bn->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * dfb(x[i], y[i]);
                }
            }));
    }

    const Shape out_shape = broadcast_shape(sa, sb, name);
    const std::size_t n = shape_numel(out_shape);
    auto ia = std::make_shared<std::vector<std::size_t>>(build_index_map(sa, out_shape));
    auto ib = std::make_shared<std::vector<std::size_t>>(build_index_map(sb, out_shape));
    Vec out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(va[(*ia)[i]], vb[(*ib)[i]]);
    return Tensor::wrap(make_result(
        out_shape, std::move(out), {an, bn}, [an, bn, ia, ib, dfa, dfb](const Vec& g) {
            const Vec& x = *an->data;
            const Vec& y = *bn->data;
            if (an->requires_grad) {
                auto& ga = an->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[(*ia)[i]] += g[i] * dfa(x[(*ia)[i]], y[(*ib)[i]]);
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i)
                    gb[(*ib)[i]] += g[i] * dfb(x[(*ia)[i]], y[(*ib)[i]]);
            }
        }));
}

// dfdx receives (input value, output value).
template <class Fwd, class Df>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Df dfdx) {
    auto an = a.node();
    if (!an) throw ContractError(std::string(name) + ": undefined tensor");
    const Vec& va = *an->data;
    Vec out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i]);
    auto on = make_result(an->shape, std::move(out), {an}, nullptr);
    if (on->requires_grad) {
        auto out_ptr = on->data;
        on->backward_fn = [an, out_ptr, dfdx](const Vec& g) {
            if (!an->requires_grad) return;
            const Vec& x = *an->data;
            const Vec& y = *out_ptr;
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
        };
    }
    return Tensor::wrap(on);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "div", [](double x, double y) { return x / y; },
                     [](double, double y) { return 1.0 / y; },
                     [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
    return unary_op(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add(const Tensor& a, double s) {
    return unary_op(a, "add_scalar", [s](double x) { return x + s; },
                    [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, double s) { return add(a, -s); }

Tensor sub(double s, const Tensor& a) {
    return unary_op(a, "rsub_scalar", [s](double x) { return s - x; },
                    [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, double s) {
    return unary_op(a, "mul_scalar", [s](double x) { return x * s; },
                    [s](double, double) { return s; });
}

Tensor div(const Tensor& a, double s) { return mul(a, 1.0 / s); }

Tensor div(double s, const Tensor& a) {
    return unary_op(a, "rdiv_scalar", [s](double x) { return s / x; },
                    [s](double x, double) { return -s / (x * x); });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, "exp", [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(a, "log", [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor pow(const Tensor& a, double e) {
    return unary_op(a, "pow", [e](double x) { return std::pow(x, e); },
                    [e](double x, double) { return e * std::pow(x, e - 1.0); });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(a, "sqrt", [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---- structure -------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
    auto an = a.node();
    if (!an) throw ContractError("reshape: undefined tensor");
    if (shape.empty()) throw DimensionError("reshape: rank must be >= 1");
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("reshape: dimensions must be positive");
    }
    if (shape_numel(shape) != an->data->size()) {
        throw DimensionError("reshape: cannot view " + shape_str(an->shape) + " as " + shape_str(shape));
    }
    return Tensor::wrap(make_view(shape, an->data, {an}, [an](const Vec& g) {
        if (an->requires_grad) accumulate(*an, g);
    }));
}

Tensor gather(const Tensor& a, const Shape& out_shape,
              std::shared_ptr<const std::vector<std::size_t>> index_map) {
    auto an = a.node();
    if (!an) throw ContractError("gather: undefined tensor");
    if (index_map->size() != shape_numel(out_shape)) {
        throw DimensionError("gather: index map size does not match output shape " + shape_str(out_shape));
    }
    const Vec& va = *an->data;
    Vec out(index_map->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[(*index_map)[i]];
    return Tensor::wrap(make_result(out_shape, std::move(out), {an}, [an, index_map](const Vec& g) {
        if (!an->requires_grad) return;
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[(*index_map)[i]] += g[i];
    }));
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const Shape& s = a.shape();
    if (axes.size() != s.size()) throw DimensionError("permute: axes rank mismatch for " + shape_str(s));
    std::vector<bool> seen(s.size(), false);
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] >= s.size() || seen[axes[i]]) throw DimensionError("permute: invalid axes");
        seen[axes[i]] = true;
        out_shape[i] = s[axes[i]];
    }
    const auto in_strides = row_major_strides(s);
    std::vector<std::size_t> strides(s.size());
    for (std::size_t i = 0; i < axes.size(); ++i) strides[i] = in_strides[axes[i]];
    auto map = std::make_shared<std::vector<std::size_t>>(shape_numel(out_shape));
    std::vector<std::size_t> counter(out_shape.size(), 0);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < map->size(); ++i) {
        (*map)[i] = idx;
        for (std::size_t d = out_shape.size(); d-- > 0;) {
            ++counter[d];
            idx += strides[d];
            if (counter[d] < out_shape[d]) break;
            counter[d] = 0;
            idx -= strides[d] * out_shape[d];
        }
    }
    return gather(a, out_shape, map);
}

Tensor transpose(const Tensor& a) {
    const std::size_t nd = a.ndim();
    if (nd < 2) throw DimensionError("transpose requires rank >= 2, got " + shape_str(a.shape()));
    std::vector<std::size_t> axes(nd);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[nd - 1], axes[nd - 2]);
    return permute(a, axes);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw DimensionError("slice: axis out of range for " + shape_str(s));
    if (len == 0 || start + len > s[axis]) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of bounds for " + shape_str(s));
    }
    Shape out_shape = s;
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    auto map = std::make_shared<std::vector<std::size_t>>(shape_numel(out_shape));
    std::size_t k = 0;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
            const std::size_t base = (o * s[axis] + start + j) * inner;
            for (std::size_t i = 0; i < inner; ++i) (*map)[k++] = base + i;
        }
    }
    return gather(a, out_shape, map);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no tensors given");
    const Shape& s0 = parts.front().shape();
    if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != s0[i]) {
                throw DimensionError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) +
                                     " disagree off the concat axis");
            }
        }
        total_axis += s[axis];
    }
    out_shape[axis] = total_axis;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    Vec out(shape_numel(out_shape));
    std::vector<std::shared_ptr<detail::Node>> parent_nodes;
    parent_nodes.reserve(parts.size());
    std::vector<std::size_t> axis_sizes;
    for (const auto& p : parts) {
        parent_nodes.push_back(p.node());
        axis_sizes.push_back(p.shape()[axis]);
    }
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t axis_offset = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            const Vec& src = *parent_nodes[pi]->data;
            const std::size_t rows = axis_sizes[pi];
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * rows * inner), rows * inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total_axis + axis_offset) * inner));
            axis_offset += rows;
        }
    }
    return Tensor::wrap(make_result(
        out_shape, std::move(out), parent_nodes,
        [parent_nodes, axis_sizes, outer, inner, total_axis](const Vec& g) {
            for (std::size_t pi = 0; pi < parent_nodes.size(); ++pi) {
                auto& p = parent_nodes[pi];
                if (!p->requires_grad) continue;
                auto& gp = p->grad_buffer();
                std::size_t axis_offset = 0;
                for (std::size_t q = 0; q < pi; ++q) axis_offset += axis_sizes[q];
                const std::size_t rows = axis_sizes[pi];
                for (std::size_t o = 0; o < outer; ++o) {
                    const std::size_t src = (o * total_axis + axis_offset) * inner;
                    const std::size_t dst = o * rows * inner;
                    for (std::size_t i = 0; i < rows * inner; ++i) gp[dst + i] += g[src + i];
                }
            }
        }));
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    auto an = a.node();
    if (!an) throw ContractError("broadcast_to: undefined tensor");
    const Shape check = broadcast_shape(an->shape, shape, "broadcast_to");
    if (check != shape) {
        throw DimensionError("broadcast_to: cannot expand " + shape_str(an->shape) + " to " + shape_str(shape));
    }
    auto map = std::make_shared<std::vector<std::size_t>>(build_index_map(an->shape, shape));
    return gather(a, shape, map);
}

// ---- reductions ---------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    auto an = a.node();
    if (!an) throw ContractError("sum: undefined tensor");
    const Vec& va = *an->data;
    double total = 0.0;
    for (double v : va) total += v;
    return Tensor::wrap(make_result({1}, Vec{total}, {an}, [an](const Vec& g) {
        if (!an->requires_grad) return;
        auto& ga = an->grad_buffer();
        for (auto& v : ga) v += g[0];
    }));
}

Tensor mean(const Tensor& a) { return div(sum(a), static_cast<double>(a.numel())); }

namespace {

void axis_extents(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                  std::size_t& inner, const char* op) {
    if (axis >= s.size()) throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(s));
    outer = 1;
    inner = 1;
    len = s[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
    Shape out = s;
    if (keepdim) {
        out[axis] = 1;
    } else if (s.size() == 1) {
        out = {1};
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    return out;
}

}  // namespace

Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim) {
    auto an = a.node();
    if (!an) throw ContractError("sum_axis: undefined tensor");
    std::size_t outer, len, inner;
    axis_extents(an->shape, axis, outer, len, inner, "sum_axis");
    Vec out(outer * inner, 0.0);
    const Vec& va = *an->data;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
            const std::size_t base = (o * len + j) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += va[base + i];
        }
    }
    return Tensor::wrap(make_result(
        reduced_shape(an->shape, axis, keepdim), std::move(out), {an},
        [an, outer, len, inner](const Vec& g) {
            if (!an->requires_grad) return;
            auto& ga = an->grad_buffer();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t base = (o * len + j) * inner;
                    for (std::size_t i = 0; i < inner; ++i) ga[base + i] += g[o * inner + i];
                }
            }
        }));
}

Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim) {
    return div(sum_axis(a, axis, keepdim), static_cast<double>(a.dim(axis)));
}

Tensor max_axis(const Tensor& a, std::size_t axis, bool keepdim) {
    auto an = a.node();
    if (!an) throw ContractError("max_axis: undefined tensor");
    std::size_t outer, len, inner;
    axis_extents(an->shape, axis, outer, len, inner, "max_axis");
    Vec out(outer * inner, -std::numeric_limits<double>::infinity());
    auto argmax = std::make_shared<std::vector<std::size_t>>(outer * inner, 0);
    const Vec& va = *an->data;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
            const std::size_t base = (o * len + j) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                if (va[base + i] > out[o * inner + i]) {
                    out[o * inner + i] = va[base + i];
                    (*argmax)[o * inner + i] = base + i;
                }
            }
        }
    }
    return Tensor::wrap(make_result(reduced_shape(an->shape, axis, keepdim), std::move(out), {an},
                                    [an, argmax](const Vec& g) {
                                        if (!an->requires_grad) return;
                                        auto& ga = an->grad_buffer();
                                        for (std::size_t i = 0; i < g.size(); ++i)
                                            ga[(*argmax)[i]] += g[i];
                                    }));
}

// ---- matmul ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    auto an = a.node();
    auto bn = b.node();
    if (!an || !bn) throw ContractError("matmul: undefined tensor");
    const Shape& sa = an->shape;
    const Shape& sb = bn->shape;
    const bool a3 = sa.size() == 3;
    const bool b3 = sb.size() == 3;
    if ((sa.size() != 2 && !a3) || (sb.size() != 2 && !b3) || (!a3 && b3)) {
        throw DimensionError("matmul: unsupported ranks for " + shape_str(sa) + " @ " + shape_str(sb));
    }
    const std::size_t batch = a3 ? sa[0] : 1;
    const std::size_t m = a3 ? sa[1] : sa[0];
    const std::size_t k = a3 ? sa[2] : sa[1];
    const std::size_t kb = b3 ? sb[1] : sb[0];
    const std::size_t n = b3 ? sb[2] : sb[1];
    if (k != kb || (b3 && sb[0] != batch)) {
        throw DimensionError("matmul: inner dimensions of " + shape_str(sa) + " and " + shape_str(sb) + " disagree");
    }
    Shape out_shape = a3 ? Shape{batch, m, n} : Shape{m, n};
    Vec out(batch * m * n);
    {
        const double* pa = an->data->data();
        const double* pb = bn->data->data();
        for (std::size_t t = 0; t < batch; ++t) {
            ConstMatMap A(pa + t * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
            ConstMatMap B(pb + (b3 ? t * k * n : 0), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
            MatMap C(out.data() + t * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
            C.noalias() = A * B;
        }
    }
    return Tensor::wrap(make_result(
        out_shape, std::move(out), {an, bn}, [an, bn, batch, m, k, n, b3](const Vec& g) {
            const double* pa = an->data->data();
            const double* pb = bn->data->data();
            for (std::size_t t = 0; t < batch; ++t) {
                ConstMatMap A(pa + t * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
                ConstMatMap B(pb + (b3 ? t * k * n : 0), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
                ConstMatMap G(g.data() + t * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
                if (an->requires_grad) {
                    MatMap GA(an->grad_buffer().data() + t * m * k, static_cast<Eigen::Index>(m),
                              static_cast<Eigen::Index>(k));
                    GA.noalias() += G * B.transpose();
                }
                if (bn->requires_grad) {
                    MatMap GB(bn->grad_buffer().data() + (b3 ? t * k * n : 0),
                              static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
                    GB.noalias() += A.transpose() * G;
                }
            }
        }));
}

// ---- softmax --------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
    auto an = a.node();
    if (!an) throw ContractError("softmax_rows: undefined tensor");
    const Shape& s = an->shape;
    const std::size_t cols = s.back();
    const std::size_t rows = shape_numel(s) / cols;
    const Vec& va = *an->data;
    Vec out(va.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = va.data() + r * cols;
        double* y = out.data() + r * cols;
        double mx = x[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            total += y[c];
        }
        for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
    }
    auto on = make_result(s, std::move(out), {an}, nullptr);
    if (on->requires_grad) {
        auto out_ptr = on->data;
        on->backward_fn = [an, out_ptr, rows, cols](const Vec& g) {
            if (!an->requires_grad) return;
            auto& ga = an->grad_buffer();
            const Vec& y = *out_ptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
                for (std::size_t c = 0; c < cols; ++c)
                    ga[base + c] += y[base + c] * (g[base + c] - dot);
            }
        };
    }
    return Tensor::wrap(on);
}

Tensor log_softmax_rows(const Tensor& a) {
    auto an = a.node();
    if (!an) throw ContractError("log_softmax_rows: undefined tensor");
    const Shape& s = an->shape;
    const std::size_t cols = s.back();
    const std::size_t rows = shape_numel(s) / cols;
    const Vec& va = *an->data;
    Vec out(va.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = va.data() + r * cols;
        double* y = out.data() + r * cols;
        double mx = x[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[c] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
    }
    auto on = make_result(s, std::move(out), {an}, nullptr);
    if (on->requires_grad) {
        auto out_ptr = on->data;
        on->backward_fn = [an, out_ptr, rows, cols](const Vec& g) {
            if (!an->requires_grad) return;
            auto& ga = an->grad_buffer();
            const Vec& y = *out_ptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * cols;
                double gsum = 0.0;
                for (std::size_t c = 0; c < cols; ++c) gsum += g[base + c];
                for (std::size_t c = 0; c < cols; ++c)
                    ga[base + c] += g[base + c] - std::exp(y[base + c]) * gsum;
            }
        };
    }
    return Tensor::wrap(on);
}

// ---- conv2d ---------------------------------------------------------------------------

namespace {

// Patch-to-column map for one group-channel block: entry is the flat offset inside a
// [Cg×H×W] block, or npos for zero padding.
constexpr std::size_t kPad = std::numeric_limits<std::size_t>::max();

std::vector<std::size_t> build_col_map(std::size_t cg, std::size_t h, std::size_t w,
                                       std::size_t kh, std::size_t kw, std::size_t stride,
                                       std::size_t pad, std::size_t hout, std::size_t wout) {
    std::vector<std::size_t> map(cg * kh * kw * hout * wout);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < cg; ++c) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
                for (std::size_t oy = 0; oy < hout; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < wout; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 ||
                            ix >= static_cast<std::ptrdiff_t>(w)) {
                            map[idx++] = kPad;
                        } else {
                            map[idx++] = (c * h + static_cast<std::size_t>(iy)) * w +
                                         static_cast<std::size_t>(ix);
                        }
                    }
                }
            }
        }
    }
    return map;
}

void fill_cols(const double* block, const std::vector<std::size_t>& map, double* cols) {
    for (std::size_t i = 0; i < map.size(); ++i) {
        cols[i] = map[i] == kPad ? 0.0 : block[map[i]];
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad, std::size_t groups) {
    auto xn = x.node();
    auto wn = w.node();
    if (!xn || !wn) throw ContractError("conv2d: undefined tensor");
    const Shape& sx = xn->shape;
    const Shape& sw = wn->shape;
    if (sx.size() != 4 || sw.size() != 4) {
        throw DimensionError("conv2d expects x [BxCxHxW] and w [OxIxKhxKw], got " + shape_str(sx) +
                             " and " + shape_str(sw));
    }
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    const std::size_t B = sx[0], cin = sx[1], h = sx[2], wdt = sx[3];
    const std::size_t cout = sw[0], cig = sw[1], kh = sw[2], kw = sw[3];
    if (groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups) {
        throw DimensionError("conv2d: group structure invalid for x " + shape_str(sx) + ", w " +
                             shape_str(sw) + ", groups " + std::to_string(groups));
    }
    if (h + 2 * pad < kh || wdt + 2 * pad < kw) {
        throw DimensionError("conv2d: kernel " + shape_str(sw) + " larger than padded input " + shape_str(sx));
    }
    const std::size_t hout = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wout = (wdt + 2 * pad - kw) / stride + 1;
    const std::size_t cog = cout / groups;
    const std::size_t ckk = cig * kh * kw;
    const std::size_t hw = hout * wout;

    auto bn = bias.defined() ? bias.node() : nullptr;
    if (bn && (bn->shape.size() != 1 || bn->shape[0] != cout)) {
        throw DimensionError("conv2d: bias shape " + shape_str(bn->shape) + " must be [" +
                             std::to_string(cout) + "]");
    }

    auto col_map = std::make_shared<std::vector<std::size_t>>(
        build_col_map(cig, h, wdt, kh, kw, stride, pad, hout, wout));

    Vec out(B * cout * hw, 0.0);
    Vec cols(ckk * hw);
    const double* px = xn->data->data();
    const double* pw = wn->data->data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t g = 0; g < groups; ++g) {
            fill_cols(px + (b * cin + g * cig) * h * wdt, *col_map, cols.data());
            ConstMatMap W(pw + g * cog * ckk, static_cast<Eigen::Index>(cog), static_cast<Eigen::Index>(ckk));
            ConstMatMap C(cols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(hw));
            MatMap Y(out.data() + (b * cout + g * cog) * hw, static_cast<Eigen::Index>(cog),
                     static_cast<Eigen::Index>(hw));
            Y.noalias() = W * C;
        }
    }
    if (bn) {
        const Vec& bv = *bn->data;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t c = 0; c < cout; ++c) {
                double* row = out.data() + (b * cout + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) row[i] += bv[c];
            }
        }
    }

    std::vector<std::shared_ptr<detail::Node>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return Tensor::wrap(make_result(
        {B, cout, hout, wout}, std::move(out), parents,
        [xn, wn, bn, col_map, B, cin, cout, h, wdt, cig, cog, ckk, hw, groups](const Vec& g) {
            const double* px = xn->data->data();
            const double* pw = wn->data->data();
            Vec cols(ckk * hw);
            Vec gcols(ckk * hw);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t grp = 0; grp < groups; ++grp) {
                    ConstMatMap G(g.data() + (b * cout + grp * cog) * hw,
                                  static_cast<Eigen::Index>(cog), static_cast<Eigen::Index>(hw));
                    if (wn->requires_grad) {
                        fill_cols(px + (b * cin + grp * cig) * h * wdt, *col_map, cols.data());
                        ConstMatMap C(cols.data(), static_cast<Eigen::Index>(ckk),
                                      static_cast<Eigen::Index>(hw));
                        MatMap GW(wn->grad_buffer().data() + grp * cog * ckk,
                                  static_cast<Eigen::Index>(cog), static_cast<Eigen::Index>(ckk));
                        GW.noalias() += G * C.transpose();
                    }
                    if (xn->requires_grad) {
                        ConstMatMap W(pw + grp * cog * ckk, static_cast<Eigen::Index>(cog),
                                      static_cast<Eigen::Index>(ckk));
                        MatMap GC(gcols.data(), static_cast<Eigen::Index>(ckk),
                                  static_cast<Eigen::Index>(hw));
                        GC.noalias() = W.transpose() * G;
                        double* gx = xn->grad_buffer().data() + (b * cin + grp * cig) * h * wdt;
                        for (std::size_t i = 0; i < col_map->size(); ++i) {
                            if ((*col_map)[i] != kPad) gx[(*col_map)[i]] += gcols[i];
                        }
                    }
                }
                if (bn && bn->requires_grad) {
                    auto& gb = bn->grad_buffer();
                    for (std::size_t c = 0; c < cout; ++c) {
                        const double* row = g.data() + (b * cout + c) * hw;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < hw; ++i) acc += row[i];
                        gb[c] += acc;
                    }
                }
            }
        }));
}

// ---- text dump --------------------------------------------------------------------------

void dump_tensor(std::ostream& os, const Tensor& t) {
    os << "shape:";
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << '\n';
    const auto& v = t.data();
    os.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) {
        os << v[i] << (i + 1 == v.size() ? '\n' : ' ');
    }
}

std::string dump_tensor(const Tensor& t) {
    std::ostringstream os;
    dump_tensor(os, t);
    return os.str();
}

Tensor parse_tensor(std::istream& is) {
    std::string tag;
    is >> tag;
    if (tag != "shape:") throw DataError("tensor dump must start with 'shape:', got '" + tag + "'");
    std::string line;
    std::getline(is, line);
    std::istringstream dims(line);
    Shape shape;
    std::size_t d;
    while (dims >> d) shape.push_back(d);
    if (shape.empty()) throw DataError("tensor dump has no dimensions");
    Vec values(shape_numel(shape));
    for (auto& v : values) {
        if (!(is >> v)) throw DataError("tensor dump truncated: expected " + std::to_string(values.size()) + " values");
    }
    return Tensor::from_data(shape, std::move(values));
}

Tensor parse_tensor(const std::string& text) {
    std::istringstream is(text);
    return parse_tensor(is);
}

}  // namespace agrikd
