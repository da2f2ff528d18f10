#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "semsim/errors.hpp"
#include "semsim/rng.hpp"

namespace semsim {

using Scalar = double;
using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;
using Array = ArrayX<Scalar>;

template <typename T>
using RowMatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrix = RowMatrixX<Scalar>;

using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    Array value;
    Array grad;  // empty means "zero"
    bool requires_grad = false;
    bool is_leaf = true;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
};

void accumulate(Node& node, const Array& g);

}  // namespace detail

/// Dense row-major n-d array participating in reverse-mode differentiation.
///
/// A Tensor is a shared handle; copies alias the same storage. Operations
/// record their adjoint only when gradient recording is enabled and at
/// least one input requires a gradient.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, Array values, bool requires_grad = false);

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor ones(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, Scalar v, bool requires_grad = false);
    static Tensor scalar(Scalar v, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::initializer_list<Scalar> values,
                       bool requires_grad = false);
    static Tensor randn(const Shape& shape, Rng& rng, Scalar stddev = 1.0,
                        bool requires_grad = false);
    static Tensor uniform(const Shape& shape, Rng& rng, Scalar lo, Scalar hi,
                          bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    Index dim(Index axis) const;
    Index rank() const { return static_cast<Index>(node_->shape.size()); }
    Index size() const { return node_->value.size(); }

    const Array& values() const { return node_->value; }
    /// Mutable storage. Only meaningful on leaves (parameters, inputs).
    Array& mutable_values() { return node_->value; }
    Scalar item() const;
    Scalar operator[](Index flat) const { return node_->value[flat]; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool is_leaf() const { return node_->is_leaf; }
    bool has_grad() const { return node_->grad.size() != 0; }
    /// Gradient, or zeros of the value's size when none was accumulated.
    Array grad() const;
    void zero_grad() { node_->grad.resize(0); }

    /// New leaf holding a copy of the values; cuts the recorded history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    const char* op_name() const { return node_->op; }
    std::uint64_t sequence() const { return node_->seq; }

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables recording of adjoints for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// One executed operation, as seen by the adjoint replay.
struct RecordEntry {
    std::uint64_t seq;
    std::string op;
};
using ComputationRecord = std::vector<RecordEntry>;

/// Operations reachable from `loss` in the order backward() replays them
/// (reverse execution order, each exactly once).
ComputationRecord replay_order(const Tensor& loss);

/// Accumulates d(loss)/d(t) into every reachable tensor that requires a
/// gradient. Leaf gradients accumulate across calls; intermediate ones are
/// recomputed. Throws ContractError when `loss` is not a scalar.
void backward(const Tensor& loss);

/// Builds a result tensor and, when recording applies, wires its adjoint.
/// `fn` receives the output node and must accumulate into the parents.
Tensor make_result(Shape shape, Array value, std::vector<Tensor> inputs, const char* op,
                   std::function<void(detail::Node&)> fn);

// ---- serialization (SST1) ----

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

using TensorMap = std::map<std::string, Tensor>;

/// Writes `<path>` (concatenated SST1 records in name order) and
/// `<path>.manifest` (one "name d0xd1x..." line per tensor).
void save_checkpoint(const std::string& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::string& path);

}  // namespace semsim
