#include "semsim/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace semsim {

namespace {

#if defined(__GLIBC__)
// Graph buffers of a few MB are freed and reallocated every step; keeping
// them on the heap avoids a page fault per touched page.
const bool g_heap_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
#endif

std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_grad_enabled = true;

std::uint64_t next_seq() { return g_sequence.fetch_add(1, std::memory_order_relaxed); }

std::shared_ptr<detail::Node> new_leaf(Shape shape, Array values, bool requires_grad) {
    if (numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + to_string(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->seq = next_seq();
    return node;
}

}  // namespace

Index numel(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + to_string(shape));
        n *= d;
    }
    return n;
}

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void detail::accumulate(Node& node, const Array& g) {
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
        node.grad = g;
    } else {
        node.grad += g;
    }
}

Tensor::Tensor() : node_(new_leaf({1}, Array::Zero(1), false)) {}

Tensor::Tensor(Shape shape, Array values, bool requires_grad)
    : node_(new_leaf(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(shape, Array::Zero(numel(shape)), requires_grad);
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) {
    return Tensor(shape, Array::Ones(numel(shape)), requires_grad);
}

Tensor Tensor::full(const Shape& shape, Scalar v, bool requires_grad) {
    return Tensor(shape, Array::Constant(numel(shape), v), requires_grad);
}

Tensor Tensor::scalar(Scalar v, bool requires_grad) {
    return Tensor({1}, Array::Constant(1, v), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::initializer_list<Scalar> values, bool requires_grad) {
    Array a(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), a.begin());
    return Tensor(shape, std::move(a), requires_grad);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, Scalar stddev, bool requires_grad) {
    Array a(numel(shape));
    for (Index i = 0; i < a.size(); ++i) a[i] = stddev * rng.normal();
    return Tensor(shape, std::move(a), requires_grad);
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, Scalar lo, Scalar hi, bool requires_grad) {
    Array a(numel(shape));
    for (Index i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return Tensor(shape, std::move(a), requires_grad);
}

Index Tensor::dim(Index axis) const {
    const Index r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             to_string(shape()));
    }
    return node_->shape[static_cast<std::size_t>(axis)];
}

Scalar Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

Array Tensor::grad() const {
    if (node_->grad.size() == 0) return Array::Zero(node_->value.size());
    return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Tensor make_result(Shape shape, Array value, std::vector<Tensor> inputs, const char* op,
                   std::function<void(detail::Node&)> fn) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->seq = next_seq();
    node->op = op;
    node->is_leaf = false;
    if (t_grad_enabled) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (const auto& in : inputs) node->parents.push_back(in.node());
            node->backward = std::move(fn);
        }
    }
    return Tensor(std::move(node));
}

namespace {

std::vector<detail::Node*> reachable(const Tensor& loss) {
    std::vector<detail::Node*> out;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{loss.node().get()};
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) continue;
        out.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    // Sequence numbers are assigned at creation, so descending order is a
    // reverse topological order.
    std::sort(out.begin(), out.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
    return out;
}

}  // namespace

ComputationRecord replay_order(const Tensor& loss) {
    ComputationRecord rec;
    for (detail::Node* n : reachable(loss)) {
        if (n->backward) rec.push_back({n->seq, n->op});
    }
    return rec;
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    auto order = reachable(loss);
    for (detail::Node* n : order) {
        if (!n->is_leaf) n->grad.resize(0);
    }
    detail::accumulate(*loss.node(), Array::Ones(1));
    for (detail::Node* n : order) {
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
}

// ---- serialization ----

namespace {

constexpr char kMagic[4] = {'S', 'S', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    const auto at = static_cast<long long>(in.tellg());
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated SST1 header", at);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.size(); ++i) put_f64(out, t.values()[i]);
}

Tensor read_tensor(std::istream& in) {
    const auto start = static_cast<long long>(in.tellg());
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError("truncated SST1 magic", start);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad SST1 magic", start);
    const std::uint32_t rank = get_u32(in);
    if (rank == 0 || rank > 16) throw FormatError("bad SST1 rank", start + 4);
    Shape shape(rank);
    for (auto& d : shape) {
        d = get_u32(in);
        if (d == 0) throw FormatError("zero SST1 dimension", static_cast<long long>(in.tellg()) - 4);
    }
    Array values(numel(shape));
    for (Index i = 0; i < values.size(); ++i) {
        unsigned char b[8];
        const auto at = static_cast<long long>(in.tellg());
        if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated SST1 payload", at);
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
        double v;
        std::memcpy(&v, &bits, 8);
        values[i] = v;
    }
    return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_tensor(in);
}

void save_checkpoint(const std::string& path, const TensorMap& tensors) {
    std::ofstream out(path, std::ios::binary);
    std::ofstream manifest(path + ".manifest");
    if (!out || !manifest) throw IoError("cannot write checkpoint " + path);
    for (const auto& [name, t] : tensors) {
        write_tensor(out, t);
        manifest << name << ' ';
        for (std::size_t i = 0; i < t.shape().size(); ++i) {
            if (i) manifest << 'x';
            manifest << t.shape()[i];
        }
        manifest << '\n';
    }
}

TensorMap load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ifstream manifest(path + ".manifest");
    if (!in || !manifest) throw IoError("missing checkpoint " + path);
    TensorMap out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, dims;
        ls >> name >> dims;
        Tensor t = read_tensor(in);
        if (to_string(t.shape()) != "[" + dims + "]") {
            throw FormatError("checkpoint entry " + name + " has shape " + to_string(t.shape()) +
                                  ", manifest says " + dims,
                              static_cast<long long>(in.tellg()));
        }
        out.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace semsim
