#include "uforge/numgrad.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_set>

namespace uforge::numgrad {

namespace {

thread_local bool t_grad_enabled = true;

size_t shape_product(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("tensor: negative dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + ": non-finite output");
        }
    }
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

}  // namespace

bool grad_mode_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

// ---------------------------------------------------------------------------
// TensorNode & Tensor
// ---------------------------------------------------------------------------

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;
    bool is_leaf = false;
    bool backward_ran = false;
    const char* op_name = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;
};

Tensor Tensor::constant(std::vector<int> shape, std::vector<double> values) {
    if (shape_product(shape) != values.size())
        throw DimensionError("tensor: shape/value size mismatch");
    check_finite("constant", values);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(std::vector<int> shape) {
    size_t count = shape_product(shape);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(count, 0.0);
    return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    if (!std::isfinite(value)) throw NumericError("full: non-finite output");
    size_t count = shape_product(shape);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(count, value);
    return Tensor(std::move(n));
}

Tensor Tensor::leaf(std::vector<int> shape, std::vector<double> values) {
    if (shape_product(shape) != values.size())
        throw DimensionError("tensor: shape/value size mismatch");
    check_finite("leaf", values);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = true;
    n->is_leaf = true;
    n->grad.assign(n->value.size(), 0.0);
    return Tensor(std::move(n));
}

const std::vector<int>& Tensor::shape() const { return node_->shape; }
size_t Tensor::size() const { return node_->value.size(); }

int Tensor::rows() const {
    return node_->shape.size() >= 2 ? node_->shape[0] : 1;
}

int Tensor::cols() const {
    return node_->shape.empty() ? 1 : node_->shape.back();
}

const std::vector<double>& Tensor::values() const { return node_->value; }

std::vector<double>& Tensor::values_mut() {
    if (node_->requires_grad && !node_->is_leaf)
        throw AutogradError("values_mut: cannot mutate an interior graph node");
    return node_->value;
}

const std::vector<double>& Tensor::grad() const {
    if (!node_->requires_grad)
        throw AutogradError("grad: tensor is not tracked");
    return node_->grad;
}

void Tensor::zero_grad() const {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

double Tensor::scalar() const {
    if (size() != 1) throw DimensionError("scalar: tensor has size != 1");
    return node_->value[0];
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw AutogradError("backward: loss must be a scalar tensor");
    TensorNode* root = loss.node();
    if (!root->requires_grad)
        throw AutogradError("backward: loss is not connected to tracked parameters");
    if (root->backward_ran)
        throw AutogradError("backward: graph already consumed (double backward without reset)");

    // Post-order DFS over the tracked subgraph, then walk in reverse.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) n->backprop(*n);
    }
    root->backward_ran = true;
}

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace {

Tensor make_op(const char* name, std::vector<int> shape, std::vector<double> value,
               std::vector<std::shared_ptr<TensorNode>> parents,
               std::function<void(TensorNode&)> backprop) {
    check_finite(name, value);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op_name = name;
    if (t_grad_enabled) {
        bool any = false;
        for (auto& p : parents) any = any || p->requires_grad;
        if (any) {
            n->requires_grad = true;
            n->grad.assign(n->value.size(), 0.0);
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    return Tensor(std::move(n));
}

void require_2d(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                             shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// C += A(m,k) * B(k,n); row bands go wide when the product is big enough.
void mm_accum(const double* A, const double* B, double* C, int m, int k, int n) {
    auto band = [&](int i0, int i1) {
        for (int i = i0; i < i1; ++i) {
            const double* arow = A + static_cast<size_t>(i) * k;
            double* crow = C + static_cast<size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
                double a = arow[kk];
                const double* brow = B + static_cast<size_t>(kk) * n;
                for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        }
    };
    double flops = 2.0 * m * k * n;
    int workers = worker_count();
    if (flops >= 1.5e6 && m >= 2 * workers && workers > 1) {
        int tasks = std::min(workers, m / 16 + 1);
        parallel_tasks(tasks, [&](int t) {
            band(static_cast<int>(static_cast<int64_t>(m) * t / tasks),
                 static_cast<int>(static_cast<int64_t>(m) * (t + 1) / tasks));
        });
    } else {
        band(0, m);
    }
}

// dA(m,k) += dC(m,n) * B(k,n)^T
void mm_grad_a(const double* dC, const double* B, double* dA, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* dcrow = dC + static_cast<size_t>(i) * n;
        double* darow = dA + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double* brow = B + static_cast<size_t>(kk) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[kk] += acc;
        }
    }
}

// dB(k,n) += A(m,k)^T * dC(m,n)
void mm_grad_b(const double* A, const double* dC, double* dB, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = A + static_cast<size_t>(i) * k;
        const double* dcrow = dC + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            double a = arow[kk];
            if (a == 0.0) continue;
            double* dbrow = dB + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += a * dcrow[j];
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    int m = a.shape()[0], k = a.shape()[1];
    int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    mm_accum(a.values().data(), b.values().data(), out.data(), m, k, n);
    return make_op("matmul", {m, n}, std::move(out), {a.handle(), b.handle()},
                   [m, k, n](TensorNode& node) {
                       auto& pa = *node.parents[0];
                       auto& pb = *node.parents[1];
                       if (pa.requires_grad)
                           mm_grad_a(node.grad.data(), pb.value.data(), pa.grad.data(), m, k, n);
                       if (pb.requires_grad)
                           mm_grad_b(pa.value.data(), node.grad.data(), pb.grad.data(), m, k, n);
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op("add", a.shape(), std::move(out), {a.handle(), b.handle()},
                   [](TensorNode& node) {
                       for (auto& p : node.parents) {
                           if (!p->requires_grad) continue;
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               p->grad[i] += node.grad[i];
                       }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op("sub", a.shape(), std::move(out), {a.handle(), b.handle()},
                   [](TensorNode& node) {
                       auto& pa = *node.parents[0];
                       auto& pb = *node.parents[1];
                       if (pa.requires_grad)
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               pa.grad[i] += node.grad[i];
                       if (pb.requires_grad)
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               pb.grad[i] -= node.grad[i];
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op("mul", a.shape(), std::move(out), {a.handle(), b.handle()},
                   [](TensorNode& node) {
                       auto& pa = *node.parents[0];
                       auto& pb = *node.parents[1];
                       if (pa.requires_grad)
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               pa.grad[i] += node.grad[i] * pb.value[i];
                       if (pb.requires_grad)
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               pb.grad[i] += node.grad[i] * pa.value[i];
                   });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
    require_2d(a, "add_row");
    int m = a.shape()[0], n = a.shape()[1];
    if (static_cast<int>(row.size()) != n)
        throw DimensionError("add_row: row length " + std::to_string(row.size()) +
                             " != column count " + std::to_string(n));
    std::vector<double> out(a.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(i) * n + j] =
                a.values()[static_cast<size_t>(i) * n + j] + row.values()[j];
    return make_op("add_row", a.shape(), std::move(out), {a.handle(), row.handle()},
                   [m, n](TensorNode& node) {
                       auto& pa = *node.parents[0];
                       auto& pr = *node.parents[1];
                       if (pa.requires_grad)
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               pa.grad[i] += node.grad[i];
                       if (pr.requires_grad)
                           for (int i = 0; i < m; ++i)
                               for (int j = 0; j < n; ++j)
                                   pr.grad[j] += node.grad[static_cast<size_t>(i) * n + j];
                   });
}

Tensor scale(const Tensor& a, double s) {
    if (!std::isfinite(s)) throw NumericError("scale: non-finite scalar");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
    return make_op("scale", a.shape(), std::move(out), {a.handle()},
                   [s](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (p.requires_grad)
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               p.grad[i] += node.grad[i] * s;
                   });
}

Tensor add_scalar(const Tensor& a, double s) {
    if (!std::isfinite(s)) throw NumericError("add_scalar: non-finite scalar");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + s;
    return make_op("add_scalar", a.shape(), std::move(out), {a.handle()},
                   [](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (p.requires_grad)
                           for (size_t i = 0; i < node.grad.size(); ++i)
                               p.grad[i] += node.grad[i];
                   });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    int m = parts[0].rows();
    int total = 0;
    std::vector<int> widths;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.shape()[0] != m)
            throw DimensionError("concat_cols: inputs differ in row count");
        widths.push_back(p.shape()[1]);
        total += p.shape()[1];
    }
    std::vector<double> out(static_cast<size_t>(m) * total);
    int col0 = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        int w = widths[pi];
        const auto& v = parts[pi].values();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>(i) * total + col0 + j] =
                    v[static_cast<size_t>(i) * w + j];
        col0 += w;
    }
    std::vector<std::shared_ptr<TensorNode>> parents;
    for (const auto& p : parts) parents.push_back(p.handle());
    return make_op("concat_cols", {m, total}, std::move(out), std::move(parents),
                   [m, total, widths](TensorNode& node) {
                       int c0 = 0;
                       for (size_t pi = 0; pi < node.parents.size(); ++pi) {
                           int w = widths[pi];
                           auto& p = *node.parents[pi];
                           if (p.requires_grad) {
                               for (int i = 0; i < m; ++i)
                                   for (int j = 0; j < w; ++j)
                                       p.grad[static_cast<size_t>(i) * w + j] +=
                                           node.grad[static_cast<size_t>(i) * total + c0 + j];
                           }
                           c0 += w;
                       }
                   });
}

Activation activation_from_string(const std::string& name) {
    if (name == "identity") return Activation::identity;
    if (name == "tanh") return Activation::tanh_fn;
    if (name == "silu") return Activation::silu;
    if (name == "leaky-relu") return Activation::leaky_relu;
    throw ConfigError("unknown activation: " + name);
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::tanh_fn: return "tanh";
        case Activation::silu: return "silu";
        case Activation::leaky_relu: return "leaky-relu";
    }
    return "?";
}

namespace {
constexpr double kLeakySlope = 0.2;

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Tensor activate(const Tensor& a, Activation act) {
    if (act == Activation::identity) return a;
    std::vector<double> out(a.size());
    const auto& in = a.values();
    switch (act) {
        case Activation::tanh_fn:
            for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in[i]);
            break;
        case Activation::silu:
            for (size_t i = 0; i < out.size(); ++i) out[i] = in[i] * sigmoid_scalar(in[i]);
            break;
        case Activation::leaky_relu:
            for (size_t i = 0; i < out.size(); ++i)
                out[i] = in[i] >= 0.0 ? in[i] : kLeakySlope * in[i];
            break;
        default: break;
    }
    return make_op("activate", a.shape(), std::move(out), {a.handle()},
                   [act](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       switch (act) {
                           case Activation::tanh_fn:
                               for (size_t i = 0; i < node.grad.size(); ++i) {
                                   double y = node.value[i];
                                   p.grad[i] += node.grad[i] * (1.0 - y * y);
                               }
                               break;
                           case Activation::silu:
                               for (size_t i = 0; i < node.grad.size(); ++i) {
                                   double x = p.value[i];
                                   double s = sigmoid_scalar(x);
                                   p.grad[i] += node.grad[i] * (s + x * s * (1.0 - s));
                               }
                               break;
                           case Activation::leaky_relu:
                               for (size_t i = 0; i < node.grad.size(); ++i)
                                   p.grad[i] += node.grad[i] *
                                                (p.value[i] >= 0.0 ? 1.0 : kLeakySlope);
                               break;
                           default: break;
                       }
                   });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(a.values()[i]);
    return make_op("sigmoid", a.shape(), std::move(out), {a.handle()},
                   [](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       for (size_t i = 0; i < node.grad.size(); ++i) {
                           double y = node.value[i];
                           p.grad[i] += node.grad[i] * y * (1.0 - y);
                       }
                   });
}

Tensor log_elem(const Tensor& a) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
    return make_op("log", a.shape(), std::move(out), {a.handle()},
                   [](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       for (size_t i = 0; i < node.grad.size(); ++i)
                           p.grad[i] += node.grad[i] / p.value[i];
                   });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo < hi)) throw DimensionError("clamp: lo must be < hi");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = std::min(std::max(a.values()[i], lo), hi);
    return make_op("clamp", a.shape(), std::move(out), {a.handle()},
                   [lo, hi](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       for (size_t i = 0; i < node.grad.size(); ++i) {
                           double x = p.value[i];
                           if (x > lo && x < hi) p.grad[i] += node.grad[i];
                       }
                   });
}

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    return make_op("sum_all", {1}, {acc}, {a.handle()},
                   [](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       double g = node.grad[0];
                       for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
                   });
}

Tensor mean_all(const Tensor& a) {
    if (a.size() == 0) throw DimensionError("mean_all: empty tensor");
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    double inv = 1.0 / static_cast<double>(a.size());
    return make_op("mean_all", {1}, {acc * inv}, {a.handle()},
                   [inv](TensorNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       double g = node.grad[0] * inv;
                       for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
                   });
}

// ---------------------------------------------------------------------------
// ParamSet / FlatGrad
// ---------------------------------------------------------------------------

double FlatGrad::dot(const FlatGrad& other) const {
    if (layout_hash != other.layout_hash)
        throw LayoutError("flat_grad: layout hash mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < values.size(); ++i) acc += values[i] * other.values[i];
    return acc;
}

double FlatGrad::norm() const { return std::sqrt(dot(*this)); }

Tensor ParamSet::add(const std::string& name, std::vector<int> shape,
                     std::vector<double> values) {
    if (has(name)) throw LayoutError("param_set: duplicate parameter name " + name);
    Tensor t = Tensor::leaf(shape, std::move(values));
    size_t count = t.size();
    layout_.push_back({name, std::move(shape), total_, count});
    total_ += count;
    entries_.emplace_back(name, t);
    layout_hash_valid_ = false;
    return entries_.back().second;
}

Tensor& ParamSet::at(const std::string& name) {
    for (auto& [n, t] : entries_)
        if (n == name) return t;
    throw LayoutError("param_set: no parameter named " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
    for (auto& [n, t] : entries_)
        if (n == name) return t;
    throw LayoutError("param_set: no parameter named " + name);
}

bool ParamSet::has(const std::string& name) const {
    for (auto& [n, t] : entries_)
        if (n == name) return true;
    return false;
}

uint64_t ParamSet::layout_hash() const {
    if (!layout_hash_valid_) {
        Fnv1a h;
        for (const auto& e : layout_) {
            h.add_string(e.name);
            h.add_u64(e.shape.size());
            for (int d : e.shape) h.add_u64(static_cast<uint64_t>(d));
        }
        h.add_u64(total_);
        layout_hash_ = h.digest();
        layout_hash_valid_ = true;
    }
    return layout_hash_;
}

std::vector<double> ParamSet::flat_values() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const auto& [n, t] : entries_)
        out.insert(out.end(), t.values().begin(), t.values().end());
    return out;
}

void ParamSet::set_flat_values(const std::vector<double>& flat) {
    if (flat.size() != total_)
        throw LayoutError("param_set: flat value length mismatch");
    size_t off = 0;
    for (auto& [n, t] : entries_) {
        auto& v = t.values_mut();
        std::copy(flat.begin() + off, flat.begin() + off + v.size(), v.begin());
        off += v.size();
    }
}

void ParamSet::add_to_values(const std::vector<double>& delta) {
    if (delta.size() != total_)
        throw LayoutError("param_set: flat delta length mismatch");
    size_t off = 0;
    for (auto& [n, t] : entries_) {
        auto& v = t.values_mut();
        for (size_t i = 0; i < v.size(); ++i) v[i] += delta[off + i];
        off += v.size();
    }
}

void ParamSet::zero_grads() const {
    for (const auto& [n, t] : entries_) t.zero_grad();
}

uint64_t ParamSet::values_hash() const {
    Fnv1a h;
    h.add_u64(layout_hash());
    for (const auto& [n, t] : entries_) h.add_doubles(t.values());
    return h.digest();
}

ParamSet ParamSet::clone() const {
    ParamSet out;
    for (size_t i = 0; i < entries_.size(); ++i) {
        out.add(layout_[i].name, layout_[i].shape, entries_[i].second.values());
    }
    return out;
}

FlatGrad flatten_grads(const ParamSet& params) {
    FlatGrad g;
    g.layout_hash = params.layout_hash();
    g.values.reserve(params.total_size());
    for (const auto& [n, t] : params.entries())
        g.values.insert(g.values.end(), t.grad().begin(), t.grad().end());
    return g;
}

void unflatten_apply(ParamSet& params, const FlatGrad& g) {
    if (g.layout_hash != params.layout_hash())
        throw LayoutError("unflatten_apply: layout hash mismatch");
    if (g.values.size() != params.total_size())
        throw LayoutError("unflatten_apply: gradient length mismatch");
    size_t off = 0;
    for (auto& [n, t] : params.entries()) {
        size_t count = t.size();
        std::copy(g.values.begin() + off, g.values.begin() + off + count,
                  t.node()->grad.begin());
        off += count;
    }
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

void init_mlp_params(ParamSet& params, const MlpArch& arch, Rng& rng) {
    if (arch.widths.size() < 2)
        throw ConfigError("mlp: arch needs at least input and output widths");
    for (int l = 0; l < arch.layer_count(); ++l) {
        int fan_in = arch.widths[l];
        int fan_out = arch.widths[l + 1];
        double s = std::sqrt(6.0 / (fan_in + fan_out));
        std::vector<double> w(static_cast<size_t>(fan_in) * fan_out);
        for (auto& x : w) x = rng.uniform(-s, s);
        params.add("w" + std::to_string(l), {fan_in, fan_out}, std::move(w));
        params.add("b" + std::to_string(l), {fan_out},
                   std::vector<double>(fan_out, 0.0));
    }
}

Tensor forward_mlp(const ParamSet& params, const Tensor& input, const MlpArch& arch) {
    require_2d(input, "forward_mlp");
    if (input.shape()[1] != arch.input_dim())
        throw DimensionError("forward_mlp: input width " + std::to_string(input.shape()[1]) +
                             " != arch input " + std::to_string(arch.input_dim()));
    for (int l = 0; l < arch.layer_count(); ++l) {
        const auto& w = params.at("w" + std::to_string(l));
        if (w.shape() != std::vector<int>{arch.widths[l], arch.widths[l + 1]})
            throw LayoutError("forward_mlp: parameter w" + std::to_string(l) +
                              " does not match arch");
    }
    Tensor h = input;
    for (int l = 0; l < arch.layer_count(); ++l) {
        try {
            h = add_row(matmul(h, params.at("w" + std::to_string(l))),
                        params.at("b" + std::to_string(l)));
            if (l + 1 < arch.layer_count()) h = activate(h, arch.act);
        } catch (const NumericError& e) {
            throw NumericError("forward_mlp layer " + std::to_string(l) + ": " + e.what());
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(const ParamSet& params, AdamConfig cfg)
    : cfg_(cfg),
      layout_hash_(params.layout_hash()),
      m_(params.total_size(), 0.0),
      v_(params.total_size(), 0.0) {}

void AdamOptimizer::step(ParamSet& params, const FlatGrad& g) {
    if (g.layout_hash != layout_hash_ || params.layout_hash() != layout_hash_)
        throw LayoutError("adam_step: gradient/parameter layout mismatch");
    if (g.values.size() != m_.size())
        throw LayoutError("adam_step: gradient length mismatch");
    for (double x : g.values)
        if (!std::isfinite(x))
            throw NumericError("adam_step: non-finite gradient rejected");

    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    std::vector<double> delta(m_.size());
    for (size_t i = 0; i < m_.size(); ++i) {
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g.values[i];
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.values[i] * g.values[i];
        double mhat = m_[i] / bc1;
        double vhat = v_[i] / bc2;
        delta[i] = -cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    params.add_to_values(delta);
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'U', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_double(std::string& buf, double d) {
    put_u64(buf, std::bit_cast<uint64_t>(d));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put_u32(buf, kVersion);
    put_u32(buf, 0);
    put_u64(buf, params.count());
    for (const auto& e : params.layout()) {
        put_u64(buf, e.name.size());
        buf.append(e.name);
        put_u64(buf, e.shape.size());
        for (int d : e.shape) put_u64(buf, static_cast<uint64_t>(d));
        put_u64(buf, e.offset);
    }
    put_u64(buf, params.total_size());
    std::string payload;
    payload.reserve(params.total_size() * 8);
    for (const auto& [n, t] : params.entries())
        for (double v : t.values()) put_double(payload, v);
    Fnv1a h;
    h.add_bytes(payload.data(), payload.size());
    buf += payload;
    put_u64(buf, h.digest());

    // temp + rename so an interrupted write never leaves a corrupt file
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("checkpoint: cannot open " + tmp + " for writing");
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw IoError("checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

ParamSet load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{buf};
    if (r.str(8) != std::string(kMagic, sizeof(kMagic)))
        throw IoError("checkpoint: bad magic in " + path);
    if (r.u32() != kVersion) throw IoError("checkpoint: unsupported version in " + path);
    r.u32();  // reserved
    uint64_t count = r.u64();
    struct Entry {
        std::string name;
        std::vector<int> shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    for (uint64_t i = 0; i < count; ++i) {
        Entry e;
        uint64_t name_len = r.u64();
        e.name = r.str(name_len);
        uint64_t ndim = r.u64();
        for (uint64_t d = 0; d < ndim; ++d)
            e.shape.push_back(static_cast<int>(r.u64()));
        e.offset = r.u64();
        entries.push_back(std::move(e));
    }
    uint64_t total = r.u64();
    std::vector<double> payload(total);
    size_t payload_pos = r.pos;
    for (uint64_t i = 0; i < total; ++i) payload[i] = r.f64();
    uint64_t stored_hash = r.u64();
    Fnv1a h;
    h.add_bytes(buf.data() + payload_pos, total * 8);
    if (h.digest() != stored_hash)
        throw IoError("checkpoint: payload hash mismatch in " + path);

    ParamSet out;
    uint64_t running = 0;
    for (auto& e : entries) {
        if (e.offset != running)
            throw LayoutError("checkpoint: non-contiguous layout in " + path);
        size_t n = shape_product(e.shape);
        std::vector<double> vals(payload.begin() + running, payload.begin() + running + n);
        out.add(e.name, e.shape, std::move(vals));
        running += n;
    }
    if (running != total)
        throw LayoutError("checkpoint: layout/payload size mismatch in " + path);
    return out;
}

}  // namespace uforge::numgrad
