#pragma once

// Reverse-mode autodiff over dense f64 tensors. The op set is fixed: matmul,
// add, multiply, embedding lookup, softmax, layer-norm, GELU, GLU, dropout
// and cross-entropy. Graphs are built once, then forward() may be re-run with
// different input bindings (the gradient checker relies on this). Dropout
// masks are drawn from the tape seed keyed by node id, so every forward of
// the same tape sees the same mask.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "securegate/rng.hpp"
#include "securegate/tensor.hpp"

namespace securegate {

enum class Op {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kMul,
  kEmbed,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kGlu,
  kDropout,
  kCrossEntropy,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kMul: return "multiply";
    case Op::kEmbed: return "embedding";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kGelu: return "gelu";
    case Op::kGlu: return "glu";
    case Op::kDropout: return "dropout";
    case Op::kCrossEntropy: return "cross_entropy";
  }
  return "?";
}

using NodeId = int;

struct Node {
  Op op;
  NodeId a = -1, b = -1, c = -1;
  std::vector<std::size_t> shape;
  std::string name;  // inputs and constants only

  // op attributes
  bool transpose_a = false, transpose_b = false;
  bool causal = false;
  double scale = 1.0;    // softmax logit multiplier
  double p = 0.0;        // dropout probability
  double eps = 1e-5;     // layer-norm epsilon
  std::vector<int> ids;  // embedding token ids / cross-entropy targets
  bool trainable = false;

  // runtime state
  Tensor value;
  Tensor grad;
  Tensor saved;                  // xhat (layer-norm), mask (dropout), probs (ce)
  std::vector<double> saved_vec; // inv_std (layer-norm)
  bool reachable = false;        // contributes gradient to a trainable input
};

class Tape {
 public:
  explicit Tape(std::uint64_t seed = 0) : seed_(seed) {}

  NodeId input(const std::string& name, std::vector<std::size_t> shape,
               bool trainable = true) {
    if (name_to_node_.count(name))
      throw std::invalid_argument("tape: duplicate input name '" + name + "'");
    Node n;
    n.op = Op::kInput;
    n.shape = std::move(shape);
    n.name = name;
    n.trainable = trainable;
    name_to_node_[name] = static_cast<NodeId>(nodes_.size());
    return push(std::move(n));
  }

  NodeId constant(Tensor value, const std::string& name = "") {
    Node n;
    n.op = Op::kConstant;
    n.shape = value.shape;
    n.value = std::move(value);
    n.name = name;
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b, bool ta = false, bool tb = false) {
    const auto& sa = node(a).shape;
    const auto& sb = node(b).shape;
    if (sa.size() != 2 || sb.size() != 2)
      throw std::invalid_argument(err("matmul", a, b, "operands must be 2-D"));
    const std::size_t m = ta ? sa[1] : sa[0];
    const std::size_t k = ta ? sa[0] : sa[1];
    const std::size_t kb = tb ? sb[1] : sb[0];
    const std::size_t nn = tb ? sb[0] : sb[1];
    if (k != kb)
      throw std::invalid_argument(err("matmul", a, b, "inner dimensions disagree"));
    Node n;
    n.op = Op::kMatMul;
    n.a = a;
    n.b = b;
    n.transpose_a = ta;
    n.transpose_b = tb;
    n.shape = {m, nn};
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }

  NodeId embed(NodeId table, std::vector<int> ids) {
    const auto& st = node(table).shape;
    if (st.size() != 2)
      throw std::invalid_argument(err("embedding", table, -1, "table must be 2-D"));
    if (ids.empty())
      throw std::invalid_argument("embedding: empty id list");
    Node n;
    n.op = Op::kEmbed;
    n.a = table;
    n.ids = std::move(ids);
    n.shape = {n.ids.size(), st[1]};
    return push(std::move(n));
  }

  NodeId softmax(NodeId a, bool causal = false, double scale = 1.0) {
    const auto& s = node(a).shape;
    if (s.size() != 2)
      throw std::invalid_argument(err("softmax", a, -1, "input must be 2-D"));
    if (causal && s[0] != s[1])
      throw std::invalid_argument(err("softmax", a, -1, "causal mask needs square input"));
    Node n;
    n.op = Op::kSoftmax;
    n.a = a;
    n.causal = causal;
    n.scale = scale;
    n.shape = s;
    return push(std::move(n));
  }

  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
    const auto& sx = node(x).shape;
    if (sx.size() != 2)
      throw std::invalid_argument(err("layer_norm", x, gamma, "input must be 2-D"));
    if (Tensor::numel_of(node(gamma).shape) != sx[1] ||
        Tensor::numel_of(node(beta).shape) != sx[1])
      throw std::invalid_argument(err("layer_norm", x, gamma,
                                      "gamma/beta length must match columns"));
    Node n;
    n.op = Op::kLayerNorm;
    n.a = x;
    n.b = gamma;
    n.c = beta;
    n.eps = eps;
    n.shape = sx;
    return push(std::move(n));
  }

  NodeId gelu(NodeId a) { return unary(Op::kGelu, a, node(a).shape); }

  NodeId glu(NodeId a) {
    const auto& s = node(a).shape;
    if (s.size() != 2 || s[1] % 2 != 0)
      throw std::invalid_argument(err("glu", a, -1, "input must be 2-D with even columns"));
    return unary(Op::kGlu, a, {s[0], s[1] / 2});
  }

  NodeId dropout(NodeId a, double p) {
    if (p < 0.0 || p >= 1.0)
      throw std::invalid_argument("dropout: p must be in [0,1)");
    Node n;
    n.op = Op::kDropout;
    n.a = a;
    n.p = p;
    n.shape = node(a).shape;
    return push(std::move(n));
  }

  // Mean next-token NLL of logits [n, V] against integer targets; scalar out.
  NodeId cross_entropy(NodeId logits, std::vector<int> targets) {
    const auto& s = node(logits).shape;
    if (s.size() != 2)
      throw std::invalid_argument(err("cross_entropy", logits, -1, "logits must be 2-D"));
    if (targets.size() != s[0])
      throw std::invalid_argument(err("cross_entropy", logits, -1,
                                      "one target per logit row required"));
    for (int t : targets)
      if (t < 0 || static_cast<std::size_t>(t) >= s[1])
        throw std::invalid_argument("cross_entropy: target id out of range");
    Node n;
    n.op = Op::kCrossEntropy;
    n.a = logits;
    n.ids = std::move(targets);
    n.shape = {1};
    return push(std::move(n));
  }

  void mark_output(const std::string& name, NodeId id) {
    check(id);
    outputs_[name] = id;
  }

  // Binds inputs by name, evaluates every node in build order and returns the
  // marked outputs. May be called repeatedly with different bindings.
  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs) {
    for (const auto& [name, value] : inputs) {
      auto it = name_to_node_.find(name);
      if (it == name_to_node_.end())
        throw std::invalid_argument("forward: no input named '" + name + "'");
      Node& n = nodes_[it->second];
      if (value.shape != n.shape)
        throw std::invalid_argument("forward: input '" + name + "' expects shape " +
                                    Tensor(n.shape, std::vector<double>(
                                               Tensor::numel_of(n.shape), 0.0))
                                        .shape_str() +
                                    ", got " + value.shape_str());
      n.value = value;
    }
    for (auto& [name, id] : name_to_node_) {
      if (nodes_[id].value.numel() == 0)
        throw std::invalid_argument("forward: input '" + name + "' not bound");
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) compute(static_cast<NodeId>(i));
    forward_ran_ = true;
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
    return out;
  }

  // Gradients of a scalar loss node w.r.t. every trainable input, keyed by
  // input name.
  std::map<std::string, Tensor> backward(NodeId loss) {
    check(loss);
    if (!forward_ran_)
      throw std::logic_error("backward: forward has not run");
    if (Tensor::numel_of(nodes_[loss].shape) != 1)
      throw std::invalid_argument("backward: loss node must be scalar, got shape " +
                                  nodes_[loss].value.shape_str());
    mark_reachable();
    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[loss].grad = Tensor::full(nodes_[loss].shape, 1.0);
    for (NodeId i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.reachable || n.grad.numel() == 0) continue;
      propagate(i);
    }
    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : name_to_node_) {
      Node& n = nodes_[id];
      if (!n.trainable) continue;
      grads[name] = n.grad.numel() ? n.grad : Tensor::zeros(n.shape);
    }
    return grads;
  }

  const Tensor& value(NodeId id) const {
    check(id);
    return nodes_[id].value;
  }

  // Replays the graph in extended precision and returns one scalar node.
  // check_gradients() uses this for its central differences so the numeric
  // oracle is not limited by f64 rounding of the forward pass; dropout masks
  // recorded by forward() are reused unchanged.
  long double forward_scalar_extended(const std::map<std::string, Tensor>& inputs,
                                      NodeId out) {
    check(out);
    if (Tensor::numel_of(nodes_[out].shape) != 1)
      throw std::invalid_argument("forward_scalar_extended: node is not scalar");
    std::vector<std::vector<long double>> vals(nodes_.size());
    for (std::size_t id = 0; id <= static_cast<std::size_t>(out); ++id) {
      Node& n = nodes_[id];
      auto& v = vals[id];
      switch (n.op) {
        case Op::kInput: {
          auto it = inputs.find(n.name);
          if (it == inputs.end())
            throw std::invalid_argument("forward_scalar_extended: input '" + n.name +
                                        "' not bound");
          v.assign(it->second.data.begin(), it->second.data.end());
          break;
        }
        case Op::kConstant:
          v.assign(n.value.data.begin(), n.value.data.end());
          break;
        case Op::kMatMul: {
          const auto& sa = nodes_[n.a].shape;
          const std::size_t m = n.transpose_a ? sa[1] : sa[0];
          const std::size_t k = n.transpose_a ? sa[0] : sa[1];
          const std::size_t nn = n.shape[1];
          const auto& A = vals[n.a];
          const auto& B = vals[n.b];
          const std::size_t b_cols = nodes_[n.b].shape[1];
          v.assign(m * nn, 0.0L);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const long double av =
                  n.transpose_a ? A[p * m + i] : A[i * k + p];
              for (std::size_t j = 0; j < nn; ++j) {
                const long double bv =
                    n.transpose_b ? B[j * b_cols + p] : B[p * b_cols + j];
                v[i * nn + j] += av * bv;
              }
            }
          break;
        }
        case Op::kAdd: {
          v = vals[n.a];
          for (std::size_t i = 0; i < v.size(); ++i) v[i] += vals[n.b][i];
          break;
        }
        case Op::kMul: {
          v = vals[n.a];
          for (std::size_t i = 0; i < v.size(); ++i) v[i] *= vals[n.b][i];
          break;
        }
        case Op::kEmbed: {
          const std::size_t d = n.shape[1];
          v.resize(n.ids.size() * d);
          for (std::size_t i = 0; i < n.ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
              v[i * d + j] = vals[n.a][static_cast<std::size_t>(n.ids[i]) * d + j];
          break;
        }
        case Op::kSoftmax: {
          const std::size_t rows = n.shape[0], cols = n.shape[1];
          v.assign(rows * cols, 0.0L);
          for (std::size_t i = 0; i < rows; ++i) {
            const std::size_t lim = n.causal ? i + 1 : cols;
            long double mx = -1e400L;
            for (std::size_t j = 0; j < lim; ++j)
              mx = std::max(mx, vals[n.a][i * cols + j] * (long double)n.scale);
            long double sum = 0.0L;
            for (std::size_t j = 0; j < lim; ++j) {
              v[i * cols + j] =
                  std::exp((long double)(vals[n.a][i * cols + j] * (long double)n.scale - mx));
              sum += v[i * cols + j];
            }
            for (std::size_t j = 0; j < lim; ++j) v[i * cols + j] /= sum;
          }
          break;
        }
        case Op::kLayerNorm: {
          const std::size_t rows = n.shape[0], cols = n.shape[1];
          v.resize(rows * cols);
          for (std::size_t i = 0; i < rows; ++i) {
            long double mu = 0.0L;
            for (std::size_t j = 0; j < cols; ++j) mu += vals[n.a][i * cols + j];
            mu /= cols;
            long double var = 0.0L;
            for (std::size_t j = 0; j < cols; ++j) {
              const long double dd = vals[n.a][i * cols + j] - mu;
              var += dd * dd;
            }
            var /= cols;
            const long double inv = 1.0L / std::sqrt(var + (long double)n.eps);
            for (std::size_t j = 0; j < cols; ++j)
              v[i * cols + j] = vals[n.b][j] * (vals[n.a][i * cols + j] - mu) * inv +
                                vals[n.c][j];
          }
          break;
        }
        case Op::kGelu: {
          v = vals[n.a];
          for (auto& x : v)
            x = 0.5L * x * (1.0L + std::erf(x * 0.707106781186547524400844362104849L));
          break;
        }
        case Op::kGlu: {
          const std::size_t rows = n.shape[0], half = n.shape[1];
          v.resize(rows * half);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < half; ++j) {
              const long double a = vals[n.a][i * 2 * half + j];
              const long double b = vals[n.a][i * 2 * half + half + j];
              v[i * half + j] = a / (1.0L + std::exp(-b));
            }
          break;
        }
        case Op::kDropout: {
          if (n.saved.numel() == 0) {
            Rng rng(derive_seed(seed_, "dropout_mask", static_cast<std::uint64_t>(id)));
            n.saved = Tensor::zeros(n.shape);
            const double keep = 1.0 - n.p;
            for (double& m : n.saved.data)
              m = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
          }
          v = vals[n.a];
          for (std::size_t i = 0; i < v.size(); ++i) v[i] *= (long double)n.saved.data[i];
          break;
        }
        case Op::kCrossEntropy: {
          const auto& sa = nodes_[n.a].shape;
          const std::size_t rows = sa[0], cols = sa[1];
          long double loss = 0.0L;
          for (std::size_t i = 0; i < rows; ++i) {
            long double mx = vals[n.a][i * cols];
            for (std::size_t j = 1; j < cols; ++j)
              mx = std::max(mx, vals[n.a][i * cols + j]);
            long double lse = 0.0L;
            for (std::size_t j = 0; j < cols; ++j)
              lse += std::exp(vals[n.a][i * cols + j] - mx);
            loss += mx + std::log(lse) -
                    vals[n.a][i * cols + static_cast<std::size_t>(n.ids[i])];
          }
          v.assign(1, loss / rows);
          break;
        }
      }
    }
    return vals[static_cast<std::size_t>(out)][0];
  }

  std::uint64_t flops() const { return flops_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return nodes_.size(); }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, id] : name_to_node_)
      if (nodes_[id].trainable) out.push_back(name);
    return out;
  }

  const std::vector<std::size_t>& input_shape(const std::string& name) const {
    auto it = name_to_node_.find(name);
    if (it == name_to_node_.end())
      throw std::invalid_argument("tape: no input named '" + name + "'");
    return nodes_[it->second].shape;
  }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId unary(Op op, NodeId a, std::vector<std::size_t> shape) {
    check(a);
    Node n;
    n.op = op;
    n.a = a;
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    check(a);
    check(b);
    if (node(a).shape != node(b).shape)
      throw std::invalid_argument(err(op_name(op), a, b, "operand shapes differ"));
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.shape = node(a).shape;
    return push(std::move(n));
  }

  const Node& node(NodeId id) const {
    check(id);
    return nodes_[id];
  }

  void check(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::out_of_range("tape: bad node id " + std::to_string(id));
  }

  std::string err(const char* op, NodeId a, NodeId b, const char* what) const {
    std::string s = std::string(op) + ": " + what;
    if (a >= 0 && static_cast<std::size_t>(a) < nodes_.size())
      s += "; lhs " + Tensor::zeros(nodes_[a].shape).shape_str();
    if (b >= 0 && static_cast<std::size_t>(b) < nodes_.size())
      s += ", rhs " + Tensor::zeros(nodes_[b].shape).shape_str();
    return s;
  }

  void compute(NodeId id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kMatMul:
        matmul_into(n.value, nodes_[n.a].value, nodes_[n.b].value, n.transpose_a,
                    n.transpose_b, &flops_);
        break;
      case Op::kAdd: {
        n.value = nodes_[n.a].value;
        const auto& bv = nodes_[n.b].value;
        for (std::size_t i = 0; i < n.value.data.size(); ++i)
          n.value.data[i] += bv.data[i];
        break;
      }
      case Op::kMul: {
        n.value = nodes_[n.a].value;
        const auto& bv = nodes_[n.b].value;
        for (std::size_t i = 0; i < n.value.data.size(); ++i)
          n.value.data[i] *= bv.data[i];
        break;
      }
      case Op::kEmbed:
        n.value = embedding_gather(nodes_[n.a].value, n.ids);
        break;
      case Op::kSoftmax:
        n.value = nodes_[n.a].value;
        softmax_inplace(n.value, n.causal, n.scale);
        n.saved = n.value;  // probs
        break;
      case Op::kLayerNorm:
        n.value = layer_norm_forward(nodes_[n.a].value, nodes_[n.b].value,
                                     nodes_[n.c].value, n.eps, &n.saved,
                                     &n.saved_vec);
        break;
      case Op::kGelu:
        n.value = nodes_[n.a].value;
        gelu_inplace(n.value);
        break;
      case Op::kGlu:
        n.value = glu_forward(nodes_[n.a].value);
        break;
      case Op::kDropout: {
        // Mask keyed by (tape seed, node id): replays identically on every
        // forward of this tape.
        if (n.saved.numel() == 0) {
          Rng rng(derive_seed(seed_, "dropout_mask", static_cast<std::uint64_t>(id)));
          n.saved = Tensor::zeros(n.shape);
          const double keep = 1.0 - n.p;
          for (double& m : n.saved.data)
            m = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
        }
        n.value = nodes_[n.a].value;
        for (std::size_t i = 0; i < n.value.data.size(); ++i)
          n.value.data[i] *= n.saved.data[i];
        break;
      }
      case Op::kCrossEntropy: {
        const Tensor& logits = nodes_[n.a].value;
        const std::size_t rows = logits.rows(), cols = logits.cols();
        n.saved = logits;
        softmax_inplace(n.saved, false, 1.0);
        double loss = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double* row = logits.data.data() + i * cols;
          double mx = row[0];
          for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
          double lse = 0.0;
          for (std::size_t j = 0; j < cols; ++j) lse += std::exp(row[j] - mx);
          loss += mx + std::log(lse) - row[static_cast<std::size_t>(n.ids[i])];
        }
        n.value = Tensor::scalar(loss / static_cast<double>(rows));
        break;
      }
    }
  }

  void accumulate(NodeId id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.reachable) return;
    if (n.grad.numel() == 0) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }
  }

  void propagate(NodeId id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kMatMul: {
        const Tensor& av = nodes_[n.a].value;
        const Tensor& bv = nodes_[n.b].value;
        if (nodes_[n.a].reachable) {
          Tensor da;
          if (!n.transpose_a)
            matmul_into(da, g, bv, false, !n.transpose_b, &flops_);
          else
            matmul_into(da, bv, g, n.transpose_b, true, &flops_);
          accumulate(n.a, da);
        }
        if (nodes_[n.b].reachable) {
          Tensor db;
          if (!n.transpose_b)
            matmul_into(db, av, g, !n.transpose_a, false, &flops_);
          else
            matmul_into(db, g, av, true, n.transpose_a, &flops_);
          accumulate(n.b, db);
        }
        break;
      }
      case Op::kAdd:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::kMul: {
        if (nodes_[n.a].reachable) {
          Tensor da = g;
          for (std::size_t i = 0; i < da.data.size(); ++i)
            da.data[i] *= nodes_[n.b].value.data[i];
          accumulate(n.a, da);
        }
        if (nodes_[n.b].reachable) {
          Tensor db = g;
          for (std::size_t i = 0; i < db.data.size(); ++i)
            db.data[i] *= nodes_[n.a].value.data[i];
          accumulate(n.b, db);
        }
        break;
      }
      case Op::kEmbed: {
        if (!nodes_[n.a].reachable) break;
        Tensor dt = Tensor::zeros(nodes_[n.a].shape);
        const std::size_t d = dt.cols();
        for (std::size_t i = 0; i < n.ids.size(); ++i) {
          double* dst = dt.data.data() + static_cast<std::size_t>(n.ids[i]) * d;
          const double* src = g.data.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        accumulate(n.a, dt);
        break;
      }
      case Op::kSoftmax: {
        if (!nodes_[n.a].reachable) break;
        const Tensor& p = n.saved;
        Tensor dx = Tensor::zeros(n.shape);
        const std::size_t rows = p.rows(), cols = p.cols();
        for (std::size_t i = 0; i < rows; ++i) {
          const double* pr = p.data.data() + i * cols;
          const double* gr = g.data.data() + i * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += pr[j] * gr[j];
          double* dr = dx.data.data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j)
            dr[j] = pr[j] * (gr[j] - dot) * n.scale;
        }
        accumulate(n.a, dx);
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& xhat = n.saved;
        const std::vector<double>& inv_std = n.saved_vec;
        const Tensor& gamma = nodes_[n.b].value;
        const std::size_t rows = xhat.rows(), cols = xhat.cols();
        if (nodes_[n.b].reachable || nodes_[n.c].reachable) {
          Tensor dgamma = Tensor::zeros(nodes_[n.b].shape);
          Tensor dbeta = Tensor::zeros(nodes_[n.c].shape);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) {
              dgamma.data[j] += g.data[i * cols + j] * xhat.data[i * cols + j];
              dbeta.data[j] += g.data[i * cols + j];
            }
          accumulate(n.b, dgamma);
          accumulate(n.c, dbeta);
        }
        if (nodes_[n.a].reachable) {
          Tensor dx = Tensor::zeros(n.shape);
          for (std::size_t i = 0; i < rows; ++i) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
              const double dxh = g.data[i * cols + j] * gamma.data[j];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat.data[i * cols + j];
            }
            mean_dxhat /= static_cast<double>(cols);
            mean_dxhat_xhat /= static_cast<double>(cols);
            for (std::size_t j = 0; j < cols; ++j) {
              const double dxh = g.data[i * cols + j] * gamma.data[j];
              dx.data[i * cols + j] =
                  inv_std[i] *
                  (dxh - mean_dxhat - xhat.data[i * cols + j] * mean_dxhat_xhat);
            }
          }
          accumulate(n.a, dx);
        }
        break;
      }
      case Op::kGelu: {
        if (!nodes_[n.a].reachable) break;
        Tensor dx = g;
        const Tensor& x = nodes_[n.a].value;
        for (std::size_t i = 0; i < dx.data.size(); ++i)
          dx.data[i] *= gelu_grad_scalar(x.data[i]);
        accumulate(n.a, dx);
        break;
      }
      case Op::kGlu: {
        if (!nodes_[n.a].reachable) break;
        const Tensor& x = nodes_[n.a].value;
        const std::size_t rows = x.rows(), half = x.cols() / 2;
        Tensor dx = Tensor::zeros(x.shape);
        for (std::size_t i = 0; i < rows; ++i) {
          const double* xr = x.data.data() + i * x.cols();
          const double* gr = g.data.data() + i * half;
          double* dr = dx.data.data() + i * x.cols();
          for (std::size_t j = 0; j < half; ++j) {
            const double s = sigmoid_scalar(xr[half + j]);
            dr[j] = gr[j] * s;
            dr[half + j] = gr[j] * xr[j] * s * (1.0 - s);
          }
        }
        accumulate(n.a, dx);
        break;
      }
      case Op::kDropout: {
        if (!nodes_[n.a].reachable) break;
        Tensor dx = g;
        for (std::size_t i = 0; i < dx.data.size(); ++i)
          dx.data[i] *= n.saved.data[i];
        accumulate(n.a, dx);
        break;
      }
      case Op::kCrossEntropy: {
        if (!nodes_[n.a].reachable) break;
        const Tensor& p = n.saved;
        const std::size_t rows = p.rows(), cols = p.cols();
        Tensor dl = p;
        const double gscale = g.data[0] / static_cast<double>(rows);
        for (std::size_t i = 0; i < rows; ++i)
          dl.data[i * cols + static_cast<std::size_t>(n.ids[i])] -= 1.0;
        for (double& v : dl.data) v *= gscale;
        accumulate(n.a, dl);
        break;
      }
    }
  }

  void mark_reachable() {
    for (auto& n : nodes_) n.reachable = n.op == Op::kInput && n.trainable;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      auto in = [&](NodeId id) { return id >= 0 && nodes_[id].reachable; };
      if (n.op != Op::kInput && n.op != Op::kConstant)
        n.reachable = in(n.a) || in(n.b) || in(n.c);
    }
  }

  std::uint64_t seed_ = 0;
  std::uint64_t flops_ = 0;
  bool forward_ran_ = false;
  std::vector<Node> nodes_;
  std::map<std::string, NodeId> name_to_node_;
  std::map<std::string, NodeId> outputs_;
};

// Central-difference check of backward() against the tape's forward function
// for every element of every trainable input. The differences are evaluated
// through the extended-precision replay so the oracle resolves gradients down
// to ~1e-9 instead of saturating at the f64 rounding floor. Returns the worst
// relative error with denominator max(|analytic|, |numeric|, 1e-12).
inline double check_gradients(Tape& tape, std::map<std::string, Tensor> inputs,
                              NodeId loss, double eps) {
  if (eps <= 0.0 || eps > 1e-2)
    throw std::invalid_argument("check_gradients: eps must be in (0, 1e-2]");
  tape.forward(inputs);
  auto grads = tape.backward(loss);
  double worst = 0.0;
  for (const auto& name : tape.trainable_names()) {
    Tensor& x = inputs.at(name);
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double keep = x.data[i];
      x.data[i] = keep + eps;
      const long double fp = tape.forward_scalar_extended(inputs, loss);
      x.data[i] = keep - eps;
      const long double fm = tape.forward_scalar_extended(inputs, loss);
      x.data[i] = keep;
      const double numeric =
          static_cast<double>((fp - fm) / (2.0L * (long double)eps));
      const double analytic = g.data[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace securegate
