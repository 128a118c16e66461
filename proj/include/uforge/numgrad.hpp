#pragma once

// Minimal dense-tensor reverse-mode autodiff: float64 tensors, define-by-run
// graphs rebuilt per forward pass, MLP layers and a bias-corrected Adam.
// Small by intent; everything downstream trains on this substrate.

#include <memory>
#include <string>
#include <vector>

#include "uforge/common.hpp"

namespace uforge::numgrad {

// ---------------------------------------------------------------------------
// Grad mode. Ops record the backward graph only while enabled (default on).
// ---------------------------------------------------------------------------

bool grad_mode_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// ---------------------------------------------------------------------------
// Tensor: a shared handle to a graph node. Row-major float64 storage.
// Leaves (parameters) carry a persistent grad buffer; interior nodes get one
// only while a graph is being recorded.
// ---------------------------------------------------------------------------

struct TensorNode;

class Tensor {
  public:
    Tensor() = default;

    static Tensor constant(std::vector<int> shape, std::vector<double> values);
    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    // A tracked leaf: participates in autodiff, grad buffer zero-initialized.
    static Tensor leaf(std::vector<int> shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const;
    size_t size() const;
    int rows() const;  // shape[0] (1 for rank-0/rank-1)
    int cols() const;  // last dimension

    const std::vector<double>& values() const;
    std::vector<double>& values_mut();  // leaves only; invalidates nothing
    const std::vector<double>& grad() const;
    void zero_grad() const;  // mutates the shared node, not the handle
    bool requires_grad() const;
    double scalar() const;  // value of a size-1 tensor

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> handle() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  private:
    std::shared_ptr<TensorNode> node_;
};

// Runs reverse-mode accumulation from a scalar loss. Each recorded graph may
// be walked once; a second call on the same loss raises AutogradError.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Ops. Every op validates shapes and rejects non-finite outputs with a
// NumericError naming the op.
// ---------------------------------------------------------------------------

enum class Activation { identity, tanh_fn, silu, leaky_relu };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast row over a's rows
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor activate(const Tensor& a, Activation act);
Tensor sigmoid(const Tensor& a);
Tensor log_elem(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---------------------------------------------------------------------------
// ParamSet: named leaf tensors in fixed declaration order with a contiguous
// flat layout. FlatGrad is the whole-gradient vector bound to that layout.
// ---------------------------------------------------------------------------

struct FlatGrad {
    std::vector<double> values;
    uint64_t layout_hash = 0;

    double dot(const FlatGrad& other) const;
    double norm() const;
};

class ParamSet {
  public:
    ParamSet() = default;
    // Copying would alias the underlying buffers; clone() is the deep copy.
    ParamSet(const ParamSet&) = delete;
    ParamSet& operator=(const ParamSet&) = delete;
    ParamSet(ParamSet&&) = default;
    ParamSet& operator=(ParamSet&&) = default;

    struct LayoutEntry {
        std::string name;
        std::vector<int> shape;
        size_t offset;
        size_t count;
    };

    Tensor add(const std::string& name, std::vector<int> shape,
               std::vector<double> values);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const;

    size_t count() const { return entries_.size(); }
    size_t total_size() const { return total_; }
    const std::vector<LayoutEntry>& layout() const { return layout_; }
    uint64_t layout_hash() const;

    std::vector<double> flat_values() const;
    void set_flat_values(const std::vector<double>& flat);
    void add_to_values(const std::vector<double>& delta);
    void zero_grads() const;
    uint64_t values_hash() const;

    ParamSet clone() const;  // deep copy; fresh leaves, zero grads

    // Iteration in declaration order.
    const std::vector<std::pair<std::string, Tensor>>& entries() const {
        return entries_;
    }

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::vector<LayoutEntry> layout_;
    size_t total_ = 0;
    mutable uint64_t layout_hash_ = 0;
    mutable bool layout_hash_valid_ = false;
};

FlatGrad flatten_grads(const ParamSet& params);
// Writes a flat gradient back into the per-parameter grad buffers.
void unflatten_apply(ParamSet& params, const FlatGrad& g);

// ---------------------------------------------------------------------------
// MLP: widths = [in, hidden..., out]; activation between layers, linear last.
// Parameters are named w0,b0,w1,b1,... in declaration order.
// ---------------------------------------------------------------------------

struct MlpArch {
    std::vector<int> widths;
    Activation act = Activation::tanh_fn;

    int input_dim() const { return widths.front(); }
    int output_dim() const { return widths.back(); }
    int layer_count() const { return static_cast<int>(widths.size()) - 1; }
};

// Xavier-uniform init, deterministic for a given rng state.
void init_mlp_params(ParamSet& params, const MlpArch& arch, Rng& rng);
Tensor forward_mlp(const ParamSet& params, const Tensor& input, const MlpArch& arch);

// ---------------------------------------------------------------------------
// Adam with bias correction. State is bound to a ParamSet layout; a step with
// a non-finite gradient is rejected before any state mutation.
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamOptimizer {
  public:
    AdamOptimizer(const ParamSet& params, AdamConfig cfg);

    void step(ParamSet& params, const FlatGrad& g);

    long step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }
    const std::vector<double>& first_moment() const { return m_; }
    const std::vector<double>& second_moment() const { return v_; }

  private:
    AdamConfig cfg_;
    uint64_t layout_hash_;
    std::vector<double> m_;
    std::vector<double> v_;
    long step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint container: versioned header, layout table, little-endian float64
// payload, FNV-1a integrity hash. Byte layout documented in the README;
// round-trips are bit-exact.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const ParamSet& params);
ParamSet load_checkpoint(const std::string& path);

}  // namespace uforge::numgrad
