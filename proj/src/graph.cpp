#include "sag/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sag {

namespace {

const char* op_name(Op op) {
    switch (op) {
        case Op::kInput: return "input";
        case Op::kConst: return "const";
        case Op::kParam: return "param";
        case Op::kFrozen: return "frozen";
        case Op::kAdd: return "add";
        case Op::kMul: return "mul";
        case Op::kMatmul: return "matmul";
        case Op::kTranspose: return "transpose";
        case Op::kLayerNorm: return "layer_norm";
        case Op::kSoftmax: return "softmax";
        case Op::kGelu: return "gelu";
        case Op::kConcatCols: return "concat_cols";
        case Op::kSliceCols: return "slice_cols";
        case Op::kSliceRows: return "slice_rows";
        case Op::kGatherRows: return "gather_rows";
        case Op::kGatherRowsDyn: return "gather_rows_dyn";
        case Op::kRepeatRows: return "repeat_rows";
        case Op::kSinusoid: return "sinusoid";
        case Op::kAbs: return "abs";
        case Op::kSqrt: return "sqrt";
        case Op::kMeanAll: return "mean_all";
        case Op::kSumAll: return "sum_all";
        case Op::kSteGate: return "ste_gate";
        case Op::kSoftGate: return "soft_gate";
    }
    return "?";
}

[[noreturn]] void shape_error(int id, Op op, const std::string& detail) {
    throw std::invalid_argument("node " + std::to_string(id) + " (" + op_name(op) + "): " + detail);
}

int rows_of(const std::vector<int>& s) { return s.size() == 1 ? 1 : s[0]; }
int cols_of(const std::vector<int>& s) { return s.empty() ? 1 : s.back(); }

constexpr double kGeluScale = 0.7978845608028653559;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

int Graph::push(GraphNode n) {
    int id = static_cast<int>(nodes_.size());
    n.value.assign(static_cast<size_t>(shape_size(n.shape)), 0.0);
    for (int in : n.in) {
        if (in < 0 || in >= id)
            throw std::invalid_argument("node " + std::to_string(id) + ": bad input id " +
                                        std::to_string(in));
        if (nodes_[in].needs_grad) n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    forward_done_ = false;
    return id;
}

int Graph::input(const std::string& name, std::vector<int> shape, bool differentiable) {
    if (inputs_.count(name)) throw std::invalid_argument("duplicate input '" + name + "'");
    GraphNode n;
    n.op = Op::kInput;
    n.shape = std::move(shape);
    n.name = name;
    n.needs_grad = differentiable;
    int id = push(std::move(n));
    inputs_[name] = id;
    if (differentiable) leaf_ids_.push_back(id);
    return id;
}

int Graph::constant(Tensor t) {
    GraphNode n;
    n.op = Op::kConst;
    n.shape = t.shape;
    int id = push(std::move(n));
    nodes_[id].value = t.data;
    return id;
}

int Graph::constant_scalar(double v) { return constant(Tensor::scalar(v)); }

int Graph::param(const std::string& name, Tensor& storage) {
    GraphNode n;
    n.op = Op::kParam;
    n.shape = storage.shape;
    n.name = name;
    n.bound = &storage;
    n.needs_grad = true;
    int id = push(std::move(n));
    leaf_ids_.push_back(id);
    return id;
}

int Graph::frozen(const std::string& name, const Tensor& storage) {
    GraphNode n;
    n.op = Op::kFrozen;
    n.shape = storage.shape;
    n.name = name;
    n.frozen = &storage;
    return push(std::move(n));
}

int Graph::add(int a, int b) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    bool a_scalar = shape_size(sa) == 1, b_scalar = shape_size(sb) == 1;
    if (!(sa == sb || a_scalar || b_scalar))
        shape_error(static_cast<int>(nodes_.size()), Op::kAdd,
                    "shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    GraphNode n;
    n.op = Op::kAdd;
    n.shape = a_scalar ? sb : sa;
    n.in = {a, b};
    return push(std::move(n));
}

int Graph::sub(int a, int b) { return add(a, scale(b, -1.0)); }

int Graph::mul(int a, int b) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    bool a_scalar = shape_size(sa) == 1, b_scalar = shape_size(sb) == 1;
    if (!(sa == sb || a_scalar || b_scalar))
        shape_error(static_cast<int>(nodes_.size()), Op::kMul,
                    "shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    GraphNode n;
    n.op = Op::kMul;
    n.shape = a_scalar ? sb : sa;
    n.in = {a, b};
    return push(std::move(n));
}

int Graph::scale(int a, double s) { return mul(a, constant_scalar(s)); }

int Graph::matmul(int a, int b) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        shape_error(static_cast<int>(nodes_.size()), Op::kMatmul,
                    "incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    GraphNode n;
    n.op = Op::kMatmul;
    n.shape = {sa[0], sb[1]};
    n.in = {a, b};
    return push(std::move(n));
}

int Graph::transpose(int a) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2)
        shape_error(static_cast<int>(nodes_.size()), Op::kTranspose, "needs rank 2, got " + shape_str(s));
    GraphNode n;
    n.op = Op::kTranspose;
    n.shape = {s[1], s[0]};
    n.in = {a};
    return push(std::move(n));
}

int Graph::layer_norm(int x, int gamma, int beta, double eps) {
    const auto& sx = nodes_[x].shape;
    int c = cols_of(sx);
    if (static_cast<int>(shape_size(nodes_[gamma].shape)) != c ||
        static_cast<int>(shape_size(nodes_[beta].shape)) != c)
        shape_error(static_cast<int>(nodes_.size()), Op::kLayerNorm,
                    "affine params must have " + std::to_string(c) + " entries");
    GraphNode n;
    n.op = Op::kLayerNorm;
    n.shape = sx;
    n.in = {x, gamma, beta};
    n.eps = eps;
    return push(std::move(n));
}

int Graph::softmax(int a) {
    GraphNode n;
    n.op = Op::kSoftmax;
    n.shape = nodes_[a].shape;
    n.in = {a};
    return push(std::move(n));
}

int Graph::gelu(int a) {
    GraphNode n;
    n.op = Op::kGelu;
    n.shape = nodes_[a].shape;
    n.in = {a};
    return push(std::move(n));
}

int Graph::concat_cols(const std::vector<int>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: no inputs");
    int r = rows_of(nodes_[xs[0]].shape);
    int c = 0;
    for (int x : xs) {
        const auto& s = nodes_[x].shape;
        if (s.size() != 2 || s[0] != r)
            shape_error(static_cast<int>(nodes_.size()), Op::kConcatCols,
                        "row mismatch at input " + shape_str(s));
        c += s[1];
    }
    GraphNode n;
    n.op = Op::kConcatCols;
    n.shape = {r, c};
    n.in = xs;
    return push(std::move(n));
}

int Graph::slice_cols(int a, int start, int len) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2 || start < 0 || len <= 0 || start + len > s[1])
        shape_error(static_cast<int>(nodes_.size()), Op::kSliceCols,
                    "bad slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") of " + shape_str(s));
    GraphNode n;
    n.op = Op::kSliceCols;
    n.shape = {s[0], len};
    n.in = {a};
    n.a0 = start;
    n.a1 = len;
    return push(std::move(n));
}

int Graph::slice_rows(int a, int start, int len) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2 || start < 0 || len <= 0 || start + len > s[0])
        shape_error(static_cast<int>(nodes_.size()), Op::kSliceRows,
                    "bad slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") of " + shape_str(s));
    GraphNode n;
    n.op = Op::kSliceRows;
    n.shape = {len, s[1]};
    n.in = {a};
    n.a0 = start;
    n.a1 = len;
    return push(std::move(n));
}

int Graph::gather_rows(int a, std::vector<int> rows) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2) shape_error(static_cast<int>(nodes_.size()), Op::kGatherRows, "needs rank 2");
    for (int r : rows)
        if (r < 0 || r >= s[0])
            shape_error(static_cast<int>(nodes_.size()), Op::kGatherRows,
                        "row " + std::to_string(r) + " out of range for " + shape_str(s));
    GraphNode n;
    n.op = Op::kGatherRows;
    n.shape = {static_cast<int>(rows.size()), s[1]};
    n.in = {a};
    n.idx = std::move(rows);
    return push(std::move(n));
}

int Graph::gather_rows_dyn(int a, int index_node) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2)
        shape_error(static_cast<int>(nodes_.size()), Op::kGatherRowsDyn, "needs rank 2");
    int n_idx = static_cast<int>(shape_size(nodes_[index_node].shape));
    GraphNode n;
    n.op = Op::kGatherRowsDyn;
    n.shape = {n_idx, s[1]};
    n.in = {a, index_node};
    return push(std::move(n));
}

int Graph::repeat_rows(int a, int count) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2 || s[0] != 1)
        shape_error(static_cast<int>(nodes_.size()), Op::kRepeatRows,
                    "needs [1,c], got " + shape_str(s));
    GraphNode n;
    n.op = Op::kRepeatRows;
    n.shape = {count, s[1]};
    n.in = {a};
    n.a0 = count;
    return push(std::move(n));
}

int Graph::sinusoid(std::vector<int> indices, int dim) {
    if (dim <= 0 || dim % 2 != 0)
        throw std::invalid_argument("sinusoid: dim must be positive and even, got " +
                                    std::to_string(dim));
    GraphNode n;
    n.op = Op::kSinusoid;
    n.shape = {static_cast<int>(indices.size()), dim};
    n.idx = std::move(indices);
    n.a0 = dim;
    return push(std::move(n));
}

int Graph::abs(int a) {
    GraphNode n;
    n.op = Op::kAbs;
    n.shape = nodes_[a].shape;
    n.in = {a};
    return push(std::move(n));
}

int Graph::sqrt(int a) {
    GraphNode n;
    n.op = Op::kSqrt;
    n.shape = nodes_[a].shape;
    n.in = {a};
    return push(std::move(n));
}

int Graph::mean_all(int a) {
    GraphNode n;
    n.op = Op::kMeanAll;
    n.shape = {1};
    n.in = {a};
    return push(std::move(n));
}

int Graph::sum_all(int a) {
    GraphNode n;
    n.op = Op::kSumAll;
    n.shape = {1};
    n.in = {a};
    return push(std::move(n));
}

static void check_gate_shape(const std::vector<int>& s, Op op, int id) {
    if (s.size() < 1 || s.back() != 2)
        shape_error(id, op, "last axis must have exactly 2 entries, got " + shape_str(s));
}

int Graph::ste_gate(int logits) {
    const auto& s = nodes_[logits].shape;
    check_gate_shape(s, Op::kSteGate, static_cast<int>(nodes_.size()));
    GraphNode n;
    n.op = Op::kSteGate;
    n.shape = {static_cast<int>(shape_size(s) / 2), 1};
    n.in = {logits};
    return push(std::move(n));
}

int Graph::soft_gate(int logits) {
    const auto& s = nodes_[logits].shape;
    check_gate_shape(s, Op::kSoftGate, static_cast<int>(nodes_.size()));
    GraphNode n;
    n.op = Op::kSoftGate;
    n.shape = {static_cast<int>(shape_size(s) / 2), 1};
    n.in = {logits};
    return push(std::move(n));
}

void Graph::mark_output(const std::string& name, int id) {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
        throw std::invalid_argument("mark_output: bad node id");
    outputs_[name] = id;
}

int Graph::output_id(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw std::invalid_argument("unknown output '" + name + "'");
    return it->second;
}

Tensor Graph::value_of(int id) const {
    Tensor t;
    t.shape = nodes_[id].shape;
    t.data = nodes_[id].value;
    return t;
}

Tensor Graph::value_of(const std::string& output) const { return value_of(output_id(output)); }

void Graph::eval_node(int i) {
    GraphNode& n = nodes_[i];
    auto val = [&](int id) -> const std::vector<double>& { return nodes_[id].value; };
    switch (n.op) {
        case Op::kInput:
        case Op::kConst:
            break;  // already bound
        case Op::kParam:
            n.value = n.bound->data;
            break;
        case Op::kFrozen:
            n.value = n.frozen->data;
            break;
        case Op::kAdd: {
            const auto& a = val(n.in[0]);
            const auto& b = val(n.in[1]);
            size_t sz = n.value.size();
            if (a.size() == b.size()) {
                for (size_t j = 0; j < sz; ++j) n.value[j] = a[j] + b[j];
            } else if (a.size() == 1) {
                for (size_t j = 0; j < sz; ++j) n.value[j] = a[0] + b[j];
            } else {
                for (size_t j = 0; j < sz; ++j) n.value[j] = a[j] + b[0];
            }
            break;
        }
        case Op::kMul: {
            const auto& a = val(n.in[0]);
            const auto& b = val(n.in[1]);
            size_t sz = n.value.size();
            if (a.size() == b.size()) {
                for (size_t j = 0; j < sz; ++j) n.value[j] = a[j] * b[j];
            } else if (a.size() == 1) {
                for (size_t j = 0; j < sz; ++j) n.value[j] = a[0] * b[j];
            } else {
                for (size_t j = 0; j < sz; ++j) n.value[j] = a[j] * b[0];
            }
            break;
        }
        case Op::kMatmul: {
            const auto& sa = nodes_[n.in[0]].shape;
            int m = sa[0], kk = sa[1], nn = n.shape[1];
            const double* A = val(n.in[0]).data();
            const double* B = val(n.in[1]).data();
            double* C = n.value.data();
            std::fill(n.value.begin(), n.value.end(), 0.0);
            for (int r = 0; r < m; ++r) {
                double* crow = C + static_cast<size_t>(r) * nn;
                for (int k = 0; k < kk; ++k) {
                    double a_rk = A[static_cast<size_t>(r) * kk + k];
                    const double* brow = B + static_cast<size_t>(k) * nn;
                    for (int c = 0; c < nn; ++c) crow[c] += a_rk * brow[c];
                }
            }
            break;
        }
        case Op::kTranspose: {
            const auto& s = nodes_[n.in[0]].shape;
            int r = s[0], c = s[1];
            const double* A = val(n.in[0]).data();
            for (int i0 = 0; i0 < r; ++i0)
                for (int j0 = 0; j0 < c; ++j0)
                    n.value[static_cast<size_t>(j0) * r + i0] = A[static_cast<size_t>(i0) * c + j0];
            break;
        }
        case Op::kLayerNorm: {
            int c = cols_of(n.shape);
            int r = static_cast<int>(n.value.size()) / c;
            const double* X = val(n.in[0]).data();
            const double* G = val(n.in[1]).data();
            const double* B = val(n.in[2]).data();
            for (int i0 = 0; i0 < r; ++i0) {
                const double* x = X + static_cast<size_t>(i0) * c;
                double* y = n.value.data() + static_cast<size_t>(i0) * c;
                double mu = 0.0;
                for (int j = 0; j < c; ++j) mu += x[j];
                mu /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) {
                    double d = x[j] - mu;
                    var += d * d;
                }
                var /= c;
                double rstd = 1.0 / std::sqrt(var + n.eps);
                for (int j = 0; j < c; ++j) y[j] = (x[j] - mu) * rstd * G[j] + B[j];
            }
            break;
        }
        case Op::kSoftmax: {
            int c = cols_of(n.shape);
            int r = static_cast<int>(n.value.size()) / c;
            const double* X = val(n.in[0]).data();
            for (int i0 = 0; i0 < r; ++i0) {
                const double* x = X + static_cast<size_t>(i0) * c;
                double* y = n.value.data() + static_cast<size_t>(i0) * c;
                double mx = x[0];
                for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
                double sum = 0.0;
                for (int j = 0; j < c; ++j) {
                    y[j] = std::exp(x[j] - mx);
                    sum += y[j];
                }
                double inv = 1.0 / sum;
                for (int j = 0; j < c; ++j) y[j] *= inv;
            }
            break;
        }
        case Op::kGelu: {
            const auto& x = val(n.in[0]);
            for (size_t j = 0; j < x.size(); ++j) {
                double v = x[j];
                double t = std::tanh(kGeluScale * (v + kGeluCubic * v * v * v));
                n.value[j] = 0.5 * v * (1.0 + t);
            }
            break;
        }
        case Op::kConcatCols: {
            int r = n.shape[0];
            int c = n.shape[1];
            int off = 0;
            for (int src : n.in) {
                int sc = nodes_[src].shape[1];
                const double* S = val(src).data();
                for (int i0 = 0; i0 < r; ++i0)
                    std::copy(S + static_cast<size_t>(i0) * sc, S + static_cast<size_t>(i0) * sc + sc,
                              n.value.data() + static_cast<size_t>(i0) * c + off);
                off += sc;
            }
            break;
        }
        case Op::kSliceCols: {
            int sc = nodes_[n.in[0]].shape[1];
            const double* S = val(n.in[0]).data();
            int r = n.shape[0], len = n.a1;
            for (int i0 = 0; i0 < r; ++i0)
                std::copy(S + static_cast<size_t>(i0) * sc + n.a0,
                          S + static_cast<size_t>(i0) * sc + n.a0 + len,
                          n.value.data() + static_cast<size_t>(i0) * len);
            break;
        }
        case Op::kSliceRows: {
            int c = n.shape[1];
            const double* S = val(n.in[0]).data();
            std::copy(S + static_cast<size_t>(n.a0) * c,
                      S + static_cast<size_t>(n.a0 + n.a1) * c, n.value.data());
            break;
        }
        case Op::kGatherRows: {
            int c = n.shape[1];
            const double* S = val(n.in[0]).data();
            for (size_t r = 0; r < n.idx.size(); ++r)
                std::copy(S + static_cast<size_t>(n.idx[r]) * c,
                          S + static_cast<size_t>(n.idx[r] + 1) * c, n.value.data() + r * c);
            break;
        }
        case Op::kGatherRowsDyn: {
            int c = n.shape[1];
            int src_rows = nodes_[n.in[0]].shape[0];
            const auto& iv = val(n.in[1]);
            n.dyn_idx.resize(iv.size());
            const double* S = val(n.in[0]).data();
            for (size_t r = 0; r < iv.size(); ++r) {
                int ri = static_cast<int>(std::llround(iv[r]));
                if (ri < 0 || ri >= src_rows)
                    throw std::invalid_argument("gather_rows_dyn: index " + std::to_string(ri) +
                                                " out of range [0," + std::to_string(src_rows) + ")");
                n.dyn_idx[r] = ri;
                std::copy(S + static_cast<size_t>(ri) * c, S + static_cast<size_t>(ri + 1) * c,
                          n.value.data() + r * c);
            }
            break;
        }
        case Op::kRepeatRows: {
            int c = n.shape[1];
            const double* S = val(n.in[0]).data();
            for (int r = 0; r < n.a0; ++r)
                std::copy(S, S + c, n.value.data() + static_cast<size_t>(r) * c);
            break;
        }
        case Op::kSinusoid: {
            int dim = n.a0;
            for (size_t r = 0; r < n.idx.size(); ++r) {
                double pos = static_cast<double>(n.idx[r]);
                double* row = n.value.data() + r * dim;
                for (int p = 0; p < dim / 2; ++p) {
                    double freq = std::pow(10000.0, -2.0 * p / dim);
                    row[2 * p] = std::sin(pos * freq);
                    row[2 * p + 1] = std::cos(pos * freq);
                }
            }
            break;
        }
        case Op::kAbs: {
            const auto& x = val(n.in[0]);
            for (size_t j = 0; j < x.size(); ++j) n.value[j] = std::fabs(x[j]);
            break;
        }
        case Op::kSqrt: {
            const auto& x = val(n.in[0]);
            for (size_t j = 0; j < x.size(); ++j) n.value[j] = std::sqrt(x[j]);
            break;
        }
        case Op::kMeanAll: {
            const auto& x = val(n.in[0]);
            double s = 0.0;
            for (double v : x) s += v;
            n.value[0] = s / static_cast<double>(x.size());
            break;
        }
        case Op::kSumAll: {
            const auto& x = val(n.in[0]);
            double s = 0.0;
            for (double v : x) s += v;
            n.value[0] = s;
            break;
        }
        case Op::kSteGate: {
            const auto& x = val(n.in[0]);
            size_t units = n.value.size();
            for (size_t u = 0; u < units; ++u)
                n.value[u] = x[2 * u + 1] > x[2 * u] ? 1.0 : 0.0;  // tie resolves to keep
            break;
        }
        case Op::kSoftGate: {
            const auto& x = val(n.in[0]);
            size_t units = n.value.size();
            for (size_t u = 0; u < units; ++u) {
                double l0 = x[2 * u], l1 = x[2 * u + 1];
                double m = std::max(l0, l1);
                double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
                n.value[u] = e1 / (e0 + e1);
            }
            break;
        }
    }
}

std::map<std::string, Tensor> Graph::forward(const std::map<std::string, Tensor>& inputs) {
    for (auto& [name, id] : inputs_) {
        auto it = inputs.find(name);
        if (it == inputs.end()) throw std::invalid_argument("unbound input '" + name + "'");
        GraphNode& n = nodes_[id];
        if (it->second.shape != n.shape)
            throw std::invalid_argument("input '" + name + "': shape " + shape_str(it->second.shape) +
                                        " does not match declared " + shape_str(n.shape));
        n.value = it->second.data;
    }
    for (size_t i = 0; i < nodes_.size(); ++i) eval_node(static_cast<int>(i));
    forward_done_ = true;
    std::map<std::string, Tensor> out;
    for (auto& [name, id] : outputs_) out[name] = value_of(id);
    return out;
}

void Graph::backprop_node(int i) {
    GraphNode& n = nodes_[i];
    if (!n.needs_grad) return;
    auto gref = [&](int id) -> std::vector<double>& { return nodes_[id].grad; };
    auto needs = [&](int id) { return nodes_[id].needs_grad; };
    auto val = [&](int id) -> const std::vector<double>& { return nodes_[id].value; };
    const std::vector<double>& g = n.grad;
    switch (n.op) {
        case Op::kInput:
        case Op::kConst:
        case Op::kParam:
        case Op::kFrozen:
        case Op::kSinusoid:
            break;
        case Op::kAdd: {
            for (int side = 0; side < 2; ++side) {
                int src = n.in[side];
                if (!needs(src)) continue;
                auto& d = gref(src);
                if (d.size() == g.size()) {
                    for (size_t j = 0; j < g.size(); ++j) d[j] += g[j];
                } else {  // scalar side
                    double s = 0.0;
                    for (double v : g) s += v;
                    d[0] += s;
                }
            }
            break;
        }
        case Op::kMul: {
            const auto& a = val(n.in[0]);
            const auto& b = val(n.in[1]);
            if (needs(n.in[0])) {
                auto& d = gref(n.in[0]);
                if (a.size() == g.size()) {
                    if (b.size() == 1)
                        for (size_t j = 0; j < g.size(); ++j) d[j] += g[j] * b[0];
                    else
                        for (size_t j = 0; j < g.size(); ++j) d[j] += g[j] * b[j];
                } else {  // a is scalar
                    double s = 0.0;
                    for (size_t j = 0; j < g.size(); ++j) s += g[j] * b[j];
                    d[0] += s;
                }
            }
            if (needs(n.in[1])) {
                auto& d = gref(n.in[1]);
                if (b.size() == g.size()) {
                    if (a.size() == 1)
                        for (size_t j = 0; j < g.size(); ++j) d[j] += g[j] * a[0];
                    else
                        for (size_t j = 0; j < g.size(); ++j) d[j] += g[j] * a[j];
                } else {
                    double s = 0.0;
                    for (size_t j = 0; j < g.size(); ++j) s += g[j] * a[j];
                    d[0] += s;
                }
            }
            break;
        }
        case Op::kMatmul: {
            const auto& sa = nodes_[n.in[0]].shape;
            int m = sa[0], kk = sa[1], nn = n.shape[1];
            const double* A = val(n.in[0]).data();
            const double* B = val(n.in[1]).data();
            const double* G = g.data();
            if (needs(n.in[0])) {
                double* dA = gref(n.in[0]).data();
                for (int r = 0; r < m; ++r) {
                    const double* grow = G + static_cast<size_t>(r) * nn;
                    for (int k = 0; k < kk; ++k) {
                        const double* brow = B + static_cast<size_t>(k) * nn;
                        double s = 0.0;
                        for (int c = 0; c < nn; ++c) s += grow[c] * brow[c];
                        dA[static_cast<size_t>(r) * kk + k] += s;
                    }
                }
            }
            if (needs(n.in[1])) {
                double* dB = gref(n.in[1]).data();
                for (int r = 0; r < m; ++r) {
                    const double* grow = G + static_cast<size_t>(r) * nn;
                    for (int k = 0; k < kk; ++k) {
                        double a_rk = A[static_cast<size_t>(r) * kk + k];
                        double* drow = dB + static_cast<size_t>(k) * nn;
                        for (int c = 0; c < nn; ++c) drow[c] += a_rk * grow[c];
                    }
                }
            }
            break;
        }
        case Op::kTranspose: {
            if (!needs(n.in[0])) break;
            int r = n.shape[0], c = n.shape[1];  // r x c is the transposed shape
            double* d = gref(n.in[0]).data();
            for (int i0 = 0; i0 < r; ++i0)
                for (int j0 = 0; j0 < c; ++j0)
                    d[static_cast<size_t>(j0) * r + i0] += g[static_cast<size_t>(i0) * c + j0];
            break;
        }
        case Op::kLayerNorm: {
            int c = cols_of(n.shape);
            int r = static_cast<int>(n.value.size()) / c;
            const double* X = val(n.in[0]).data();
            const double* Gm = val(n.in[1]).data();
            bool nx = needs(n.in[0]), ng = needs(n.in[1]), nb = needs(n.in[2]);
            std::vector<double> xhat(c);
            for (int i0 = 0; i0 < r; ++i0) {
                const double* x = X + static_cast<size_t>(i0) * c;
                const double* go = g.data() + static_cast<size_t>(i0) * c;
                double mu = 0.0;
                for (int j = 0; j < c; ++j) mu += x[j];
                mu /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) {
                    double d = x[j] - mu;
                    var += d * d;
                }
                var /= c;
                double rstd = 1.0 / std::sqrt(var + n.eps);
                for (int j = 0; j < c; ++j) xhat[j] = (x[j] - mu) * rstd;
                if (nb) {
                    double* db = gref(n.in[2]).data();
                    for (int j = 0; j < c; ++j) db[j] += go[j];
                }
                if (ng) {
                    double* dg = gref(n.in[1]).data();
                    for (int j = 0; j < c; ++j) dg[j] += go[j] * xhat[j];
                }
                if (nx) {
                    double* dx = gref(n.in[0]).data() + static_cast<size_t>(i0) * c;
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double dxh = go[j] * Gm[j];
                        m1 += dxh;
                        m2 += dxh * xhat[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    for (int j = 0; j < c; ++j) {
                        double dxh = go[j] * Gm[j];
                        dx[j] += (dxh - m1 - xhat[j] * m2) * rstd;
                    }
                }
            }
            break;
        }
        case Op::kSoftmax: {
            if (!needs(n.in[0])) break;
            int c = cols_of(n.shape);
            int r = static_cast<int>(n.value.size()) / c;
            double* d = gref(n.in[0]).data();
            for (int i0 = 0; i0 < r; ++i0) {
                const double* y = n.value.data() + static_cast<size_t>(i0) * c;
                const double* go = g.data() + static_cast<size_t>(i0) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += go[j] * y[j];
                double* dr = d + static_cast<size_t>(i0) * c;
                for (int j = 0; j < c; ++j) dr[j] += y[j] * (go[j] - dot);
            }
            break;
        }
        case Op::kGelu: {
            if (!needs(n.in[0])) break;
            const auto& x = val(n.in[0]);
            double* d = gref(n.in[0]).data();
            for (size_t j = 0; j < x.size(); ++j) {
                double v = x[j];
                double arg = kGeluScale * (v + kGeluCubic * v * v * v);
                double t = std::tanh(arg);
                double sech2 = 1.0 - t * t;
                double local = 0.5 * (1.0 + t) +
                               0.5 * v * sech2 * kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
                d[j] += local * g[j];
            }
            break;
        }
        case Op::kConcatCols: {
            int r = n.shape[0];
            int c = n.shape[1];
            int off = 0;
            for (int src : n.in) {
                int sc = nodes_[src].shape[1];
                if (needs(src)) {
                    double* d = gref(src).data();
                    for (int i0 = 0; i0 < r; ++i0)
                        for (int j0 = 0; j0 < sc; ++j0)
                            d[static_cast<size_t>(i0) * sc + j0] +=
                                g[static_cast<size_t>(i0) * c + off + j0];
                }
                off += sc;
            }
            break;
        }
        case Op::kSliceCols: {
            if (!needs(n.in[0])) break;
            int sc = nodes_[n.in[0]].shape[1];
            int r = n.shape[0], len = n.a1;
            double* d = gref(n.in[0]).data();
            for (int i0 = 0; i0 < r; ++i0)
                for (int j0 = 0; j0 < len; ++j0)
                    d[static_cast<size_t>(i0) * sc + n.a0 + j0] +=
                        g[static_cast<size_t>(i0) * len + j0];
            break;
        }
        case Op::kSliceRows: {
            if (!needs(n.in[0])) break;
            int c = n.shape[1];
            double* d = gref(n.in[0]).data() + static_cast<size_t>(n.a0) * c;
            for (size_t j = 0; j < g.size(); ++j) d[j] += g[j];
            break;
        }
        case Op::kGatherRows: {
            if (!needs(n.in[0])) break;
            int c = n.shape[1];
            double* d = gref(n.in[0]).data();
            for (size_t r = 0; r < n.idx.size(); ++r)
                for (int j = 0; j < c; ++j)
                    d[static_cast<size_t>(n.idx[r]) * c + j] += g[r * c + j];
            break;
        }
        case Op::kGatherRowsDyn: {
            if (!needs(n.in[0])) break;  // index input gets no gradient
            int c = n.shape[1];
            double* d = gref(n.in[0]).data();
            for (size_t r = 0; r < n.dyn_idx.size(); ++r)
                for (int j = 0; j < c; ++j)
                    d[static_cast<size_t>(n.dyn_idx[r]) * c + j] += g[r * c + j];
            break;
        }
        case Op::kRepeatRows: {
            if (!needs(n.in[0])) break;
            int c = n.shape[1];
            double* d = gref(n.in[0]).data();
            for (int r = 0; r < n.a0; ++r)
                for (int j = 0; j < c; ++j) d[j] += g[static_cast<size_t>(r) * c + j];
            break;
        }
        case Op::kAbs: {
            if (!needs(n.in[0])) break;
            const auto& x = val(n.in[0]);
            double* d = gref(n.in[0]).data();
            for (size_t j = 0; j < x.size(); ++j) {
                double s = x[j] > 0.0 ? 1.0 : (x[j] < 0.0 ? -1.0 : 0.0);
                d[j] += s * g[j];
            }
            break;
        }
        case Op::kSqrt: {
            if (!needs(n.in[0])) break;
            double* d = gref(n.in[0]).data();
            for (size_t j = 0; j < g.size(); ++j) {
                double y = n.value[j];
                if (y > 0.0) d[j] += 0.5 / y * g[j];
            }
            break;
        }
        case Op::kMeanAll: {
            if (!needs(n.in[0])) break;
            auto& d = gref(n.in[0]);
            double s = g[0] / static_cast<double>(d.size());
            for (auto& v : d) v += s;
            break;
        }
        case Op::kSumAll: {
            if (!needs(n.in[0])) break;
            auto& d = gref(n.in[0]);
            for (auto& v : d) v += g[0];
            break;
        }
        case Op::kSteGate:
        case Op::kSoftGate: {
            // both propagate the soft-probability jacobian: d p1 / d l1 = p1 p0
            if (!needs(n.in[0])) break;
            const auto& x = val(n.in[0]);
            double* d = gref(n.in[0]).data();
            size_t units = n.value.size();
            for (size_t u = 0; u < units; ++u) {
                double l0 = x[2 * u], l1 = x[2 * u + 1];
                double m = std::max(l0, l1);
                double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
                double p1 = e1 / (e0 + e1);
                double j = p1 * (1.0 - p1) * g[u];
                d[2 * u + 1] += j;
                d[2 * u] -= j;
            }
            break;
        }
    }
}

std::map<std::string, Tensor> Graph::backward(const std::string& output, const Tensor& seed) {
    if (!forward_done_)
        throw std::runtime_error("backward called before forward");
    int out_id = output_id(output);
    if (seed.shape != nodes_[out_id].shape)
        throw std::invalid_argument("backward seed shape " + shape_str(seed.shape) +
                                    " does not match output shape " +
                                    shape_str(nodes_[out_id].shape));
    for (auto& n : nodes_) {
        if (n.needs_grad)
            n.grad.assign(n.value.size(), 0.0);
    }
    if (!nodes_[out_id].needs_grad)
        throw std::runtime_error("output '" + output + "' does not depend on any differentiable leaf");
    nodes_[out_id].grad = seed.data;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) backprop_node(i);

    std::map<std::string, Tensor> grads;
    for (int id : leaf_ids_) {
        GraphNode& n = nodes_[id];
        Tensor t;
        t.shape = n.shape;
        t.data = n.grad;
        if (n.bound) {
            n.bound->ensure_grad();
            for (size_t j = 0; j < n.grad.size(); ++j) n.bound->grad[j] += n.grad[j];
        }
        grads[n.name] = std::move(t);
    }
    return grads;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_difference_gradient: step must be > 0");
    Tensor g(x.shape);
    Tensor probe = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + step;
        double up = f(probe);
        probe.data[i] = orig - step;
        double dn = f(probe);
        probe.data[i] = orig;
        g.data[i] = (up - dn) / (2.0 * step);
    }
    return g;
}

}  // namespace sag
