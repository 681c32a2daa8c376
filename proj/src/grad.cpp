#include "d3etr/grad.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace d3etr::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require(bool ok, const char* msg) {
  if (!ok) throw GradError(msg);
}

// Builds the message only on failure.
template <class F>
void require(bool ok, F&& msg) {
  if (!ok) throw GradError(msg());
}

void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw GradError(std::string(op) + ": non-finite input");
  }
}

// Accumulation target for input i of a node, or nullptr when it is frozen.
double* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer().data() : nullptr;
}

enum class Broadcast { kSame, kScalar, kRow, kCol };

struct BinaryLayout {
  Broadcast mode;
  std::size_t cols;
  // Calls fn(i, j) for every output element i and its operand-b element j.
  template <class Fn>
  void for_each(std::size_t n, Fn&& fn) const {
    switch (mode) {
      case Broadcast::kSame:
        for (std::size_t i = 0; i < n; ++i) fn(i, i);
        break;
      case Broadcast::kScalar:
        for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0});
        break;
      case Broadcast::kRow:
        for (std::size_t r = 0, i = 0; i < n; ++r)
          for (std::size_t c = 0; c < cols; ++c, ++i) fn(i, c);
        break;
      case Broadcast::kCol:
        for (std::size_t r = 0, i = 0; i < n; ++r)
          for (std::size_t c = 0; c < cols; ++c, ++i) fn(i, r);
        break;
    }
  }
};

BinaryLayout layout_for(const char* op, const DiffArray& a, const DiffArray& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return {Broadcast::kSame, 1};
  if (b.size() == 1) return {Broadcast::kScalar, 1};
  if (sa.size() == 2) {
    const std::size_t m = sa[0], n = sa[1];
    if ((sb.size() == 1 && sb[0] == n) || (sb.size() == 2 && sb[0] == 1 && sb[1] == n)) {
      return {Broadcast::kRow, n};
    }
    if (sb.size() == 2 && sb[0] == m && sb[1] == 1) return {Broadcast::kCol, n};
  }
  throw GradError(std::string(op) + ": incompatible shapes " + shape_str(sa) + " and " +
                  shape_str(sb));
}

// out = f(a, b); da/db are partials of out w.r.t. a and b given (a, b, out).
template <class F, class DA, class DB>
DiffArray binary(const char* op, const DiffArray& a, const DiffArray& b, F f, DA da, DB db) {
  const BinaryLayout lay = layout_for(op, a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  lay.for_each(out.size(), [&](std::size_t i, std::size_t j) { out[i] = f(av[i], bv[j]); });
  return DiffArray::from_op(op, a.shape(), std::move(out), {a, b}, [lay, da, db](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const auto& g = self.grad;
    double* gx = grad_of(self, 0);
    double* gy = grad_of(self, 1);
    const auto& o = self.value;
    if (gx) lay.for_each(g.size(), [&](std::size_t i, std::size_t j) { gx[i] += g[i] * da(x[i], y[j], o[i]); });
    if (gy) lay.for_each(g.size(), [&](std::size_t i, std::size_t j) { gy[j] += g[i] * db(x[i], y[j], o[i]); });
  });
}

// out = f(x); d gives d(out)/dx from (x, out).
template <class F, class D>
DiffArray unary(const char* op, const DiffArray& a, F f, D d) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return DiffArray::from_op(op, a.shape(), std::move(out), {a}, [d](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& x = self.inputs[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * d(x[i], self.value[i]);
  });
}

void require_rank2(const char* op, const DiffArray& x) {
  require(x.rank() == 2, [&] { return std::string(op) + ": expected rank-2 array, got " + shape_str(x.shape()); });
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

DiffArray DiffArray::constant(Shape shape, std::vector<double> values) {
  require(shape_size(shape) == values.size(), [&] { return
          "DiffArray: shape " + shape_str(shape) + " does not match " +
              std::to_string(values.size()) + " values"; });
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return DiffArray(std::move(n));
}

DiffArray DiffArray::parameter(Shape shape, std::vector<double> values) {
  DiffArray p = constant(std::move(shape), std::move(values));
  p.node_->requires_grad = true;
  p.node_->op = "param";
  return p;
}

DiffArray DiffArray::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  DiffArray z = constant(std::move(shape), std::vector<double>(n, 0.0));
  z.node_->requires_grad = requires_grad;
  return z;
}

DiffArray DiffArray::scalar(double v) { return constant({1}, {v}); }

DiffArray DiffArray::from_op(const char* op, Shape shape, std::vector<double> values,
                             std::vector<DiffArray> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = op;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const DiffArray& d) { return d.requires_grad(); });
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_);
    n->backward = std::move(backward);
  }
  return DiffArray(std::move(n));
}

std::size_t DiffArray::rows() const {
  return rank() == 2 ? node_->shape[0] : 1;
}

std::size_t DiffArray::cols() const {
  return rank() == 0 ? 1 : node_->shape.back();
}

double DiffArray::item() const {
  require(size() == 1, [&] { return "item(): array of shape " + shape_str(shape()) + " is not a scalar"; });
  return node_->value[0];
}

std::span<const double> DiffArray::grad() const { return node_->grad_buffer(); }
std::span<double> DiffArray::mutable_grad() { return node_->grad_buffer(); }

void DiffArray::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

DiffArray DiffArray::detach() const { return constant(shape(), node_->value); }

DiffArray DiffArray::clone() const {
  DiffArray c = constant(shape(), node_->value);
  c.node_->requires_grad = node_->requires_grad && is_leaf();
  c.node_->op = node_->op;
  return c;
}

void backward(const DiffArray& loss) {
  require(loss.defined() && loss.size() == 1, [&] { return
          "backward(): loss must be a scalar, got " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")); });
  if (!loss.requires_grad()) return;

  // Post-order DFS over nodes that carry gradients.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->grad_buffer();
      n->backward(*n);
    }
  }
}

// ---- arithmetic -------------------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

DiffArray div(const DiffArray& a, const DiffArray& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

DiffArray safe_div(const DiffArray& a, const DiffArray& b) {
  return binary(
      "safe_div", a, b, [](double x, double y) { return y == 0.0 ? 0.0 : x / y; },
      [](double, double y, double) { return y == 0.0 ? 0.0 : 1.0 / y; },
      [](double, double y, double o) { return y == 0.0 ? 0.0 : -o / y; });
}

// Ties route the gradient to the left operand.
DiffArray minimum(const DiffArray& a, const DiffArray& b) {
  return binary(
      "minimum", a, b, [](double x, double y) { return y < x ? y : x; },
      [](double x, double y, double) { return y < x ? 0.0 : 1.0; },
      [](double x, double y, double) { return y < x ? 1.0 : 0.0; });
}

DiffArray maximum(const DiffArray& a, const DiffArray& b) {
  return binary(
      "maximum", a, b, [](double x, double y) { return y > x ? y : x; },
      [](double x, double y, double) { return y > x ? 0.0 : 1.0; },
      [](double x, double y, double) { return y > x ? 1.0 : 0.0; });
}

DiffArray scale(const DiffArray& a, double s) {
  return unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

DiffArray add_scalar(const DiffArray& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

DiffArray neg(const DiffArray& a) { return scale(a, -1.0); }

DiffArray exp(const DiffArray& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

DiffArray log(const DiffArray& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

DiffArray sigmoid(const DiffArray& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double o) { return o * (1.0 - o); });
}

DiffArray relu(const DiffArray& a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

DiffArray abs(const DiffArray& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

DiffArray clamp(const DiffArray& a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- linear algebra ---------------------------------------------------------

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, [&] { return "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()); });
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.values().data(), m, k) * MapC(b.values().data(), k, n);
  return DiffArray::from_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    MapC g(self.grad.data(), m, n);
    if (double* ga = grad_of(self, 0)) {
      Map(ga, m, k).noalias() += g * MapC(self.inputs[1]->value.data(), k, n).transpose();
    }
    if (double* gb = grad_of(self, 1)) {
      Map(gb, k, n).noalias() += MapC(self.inputs[0]->value.data(), m, k).transpose() * g;
    }
  });
}

DiffArray matmul_nt(const DiffArray& a, const DiffArray& b) {
  require_rank2("matmul_nt", a);
  require_rank2("matmul_nt", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  require(b.cols() == k, [&] { return "matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T"; });
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() =
      MapC(a.values().data(), m, k) * MapC(b.values().data(), n, k).transpose();
  return DiffArray::from_op("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    MapC g(self.grad.data(), m, n);
    if (double* ga = grad_of(self, 0)) {
      Map(ga, m, k).noalias() += g * MapC(self.inputs[1]->value.data(), n, k);
    }
    if (double* gb = grad_of(self, 1)) {
      Map(gb, n, k).noalias() += g.transpose() * MapC(self.inputs[0]->value.data(), m, k);
    }
  });
}

// ---- normalization ----------------------------------------------------------

DiffArray softmax(const DiffArray& x, int axis) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, [&] { return "softmax: axis out of range for " + shape_str(s); });
  require_finite(x.values(), "softmax");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const std::size_t len = s[axis];

  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return DiffArray::from_op("softmax", s, std::move(out), {x}, [outer, inner, len](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

DiffArray masked_softmax(const DiffArray& x, std::span<const std::uint8_t> mask) {
  require_rank2("masked_softmax", x);
  require(mask.size() == x.size(), [&] { return "masked_softmax: mask size " + std::to_string(mask.size()) +
                                       " does not match " + shape_str(x.shape()); });
  require_finite(x.values(), "masked_softmax");
  const std::size_t m = x.rows(), n = x.cols();
  const auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    const std::uint8_t* allow = mask.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (allow[c]) mx = std::max(mx, row[c]);
    }
    require(std::isfinite(mx), [&] { return "masked_softmax: row " + std::to_string(r) + " is fully masked"; });
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!allow[c]) continue;
      const double e = std::exp(row[c] - mx);
      out[r * n + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  return DiffArray::from_op("masked_softmax", x.shape(), std::move(out), {x}, [m, n](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t base = r * n;
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[base + c] * y[base + c];
      for (std::size_t c = 0; c < n; ++c) gx[base + c] += y[base + c] * (g[base + c] - dot);
    }
  });
}

DiffArray layer_norm(const DiffArray& x, const DiffArray& gamma, const DiffArray& beta,
                     double eps) {
  const std::size_t n = x.cols();
  const std::size_t m = x.size() / n;
  require(gamma.size() == n && beta.size() == n, [&] { return
          "layer_norm: gamma/beta must have " + std::to_string(n) + " entries"; });
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(m);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mu) * inv_std[r];
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  return DiffArray::from_op(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& g = self.grad;
        const auto& gam = self.inputs[1]->value;
        double* gx = grad_of(self, 0);
        double* gg = grad_of(self, 1);
        double* gb = grad_of(self, 2);
        for (std::size_t r = 0; r < m; ++r) {
          const std::size_t base = r * n;
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            const double d = g[base + c] * gam[c];
            mean_d += d;
            mean_dh += d * xhat[base + c];
            if (gg) gg[c] += g[base + c] * xhat[base + c];
            if (gb) gb[c] += g[base + c];
          }
          if (!gx) continue;
          mean_d /= static_cast<double>(n);
          mean_dh /= static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) {
            const double d = g[base + c] * gam[c];
            gx[base + c] += inv_std[r] * (d - mean_d - xhat[base + c] * mean_dh);
          }
        }
      });
}

// ---- structure --------------------------------------------------------------

DiffArray concat(const std::vector<DiffArray>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const std::size_t rank = parts[0].rank();
  require(rank == 1 || rank == 2, "concat: only rank-1 and rank-2 arrays are supported");
  if (axis < 0) axis += static_cast<int>(rank);
  require(axis == 0 || (axis == 1 && rank == 2), "concat: invalid axis");

  if (rank == 1 || axis == 0) {
    // Row-major stacking is plain buffer concatenation.
    const std::size_t n = rank == 2 ? parts[0].cols() : 1;
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
      require(p.rank() == rank && (rank == 1 || p.cols() == n), [&] { return
              "concat: incompatible shape " + shape_str(p.shape()); });
      offsets.push_back(rows * n);
      rows += rank == 2 ? p.rows() : p.size();
    }
    std::vector<double> out;
    out.reserve(rows * n);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    Shape shape = rank == 2 ? Shape{rows, n} : Shape{rows};
    return DiffArray::from_op("concat", std::move(shape), std::move(out), parts,
                              [offsets](Node& self) {
                                for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                                  double* gi = grad_of(self, i);
                                  if (!gi) continue;
                                  const std::size_t len = self.inputs[i]->value.size();
                                  for (std::size_t k = 0; k < len; ++k) gi[k] += self.grad[offsets[i] + k];
                                }
                              });
  }

  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> col_offsets;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.rows() == m, [&] { return "concat: incompatible shape " + shape_str(p.shape()); });
    col_offsets.push_back(total);
    total += p.cols();
  }
  std::vector<double> out(m * total);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t w = parts[i].cols();
    const auto v = parts[i].values();
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(v.data() + r * w, w, out.data() + r * total + col_offsets[i]);
    }
  }
  return DiffArray::from_op("concat", {m, total}, std::move(out), parts,
                            [m, total, col_offsets](Node& self) {
                              for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                                double* gi = grad_of(self, i);
                                if (!gi) continue;
                                const std::size_t w = self.inputs[i]->shape[1];
                                for (std::size_t r = 0; r < m; ++r) {
                                  for (std::size_t c = 0; c < w; ++c) {
                                    gi[r * w + c] += self.grad[r * total + col_offsets[i] + c];
                                  }
                                }
                              }
                            });
}

DiffArray gather(const DiffArray& x, int axis, std::span<const std::size_t> index) {
  require_rank2("gather", x);
  require(axis == 0 || axis == 1, "gather: axis must be 0 or 1");
  const std::size_t m = x.rows(), n = x.cols();
  const std::size_t bound = axis == 0 ? m : n;
  for (std::size_t i : index) {
    require(i < bound, [&] { return "gather: index " + std::to_string(i) + " out of range " +
                           std::to_string(bound); });
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const auto xv = x.values();
  if (axis == 0) {
    std::vector<double> out(idx.size() * n);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(xv.data() + idx[r] * n, n, out.data() + r * n);
    }
    return DiffArray::from_op("gather", {idx.size(), n}, std::move(out), {x},
                              [idx, n](Node& self) {
                                double* gx = grad_of(self, 0);
                                if (!gx) return;
                                for (std::size_t r = 0; r < idx.size(); ++r) {
                                  for (std::size_t c = 0; c < n; ++c) gx[idx[r] * n + c] += self.grad[r * n + c];
                                }
                              });
  }
  const std::size_t w = idx.size();
  std::vector<double> out(m * w);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = xv[r * n + idx[c]];
  }
  return DiffArray::from_op("gather", {m, w}, std::move(out), {x}, [idx, m, n, w](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < w; ++c) gx[r * n + idx[c]] += self.grad[r * w + c];
    }
  });
}

DiffArray slice_cols(const DiffArray& x, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= x.cols(), "slice_cols: range out of bounds");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(x, 1, idx);
}

DiffArray slice_rows(const DiffArray& x, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= x.rows(), "slice_rows: range out of bounds");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(x, 0, idx);
}

DiffArray reshape(const DiffArray& x, Shape shape) {
  require(shape_size(shape) == x.size(), [&] { return
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes size"; });
  std::vector<double> out(x.values().begin(), x.values().end());
  return DiffArray::from_op("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---- reductions -------------------------------------------------------------

DiffArray sum(const DiffArray& x) {
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  return DiffArray::from_op("sum", {1}, {s}, {x}, [](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gx[i] += g;
  });
}

DiffArray mean(const DiffArray& x) {
  require(x.size() > 0, "mean: empty array");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

DiffArray max(const DiffArray& x) {
  require(x.size() > 0, "max: empty array");
  const auto xv = x.values();
  const std::size_t arg =
      static_cast<std::size_t>(std::max_element(xv.begin(), xv.end()) - xv.begin());
  return DiffArray::from_op("max", {1}, {xv[arg]}, {x}, [arg](Node& self) {
    if (double* gx = grad_of(self, 0)) gx[arg] += self.grad[0];
  });
}

DiffArray sum_axis(const DiffArray& x, int axis) {
  require_rank2("sum_axis", x);
  require(axis == 0 || axis == 1 || axis == -1, "sum_axis: axis must be 0 or 1");
  if (axis < 0) axis = 1;
  const std::size_t m = x.rows(), n = x.cols();
  const auto xv = x.values();
  if (axis == 0) {
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) out[c] += xv[r * n + c];
    return DiffArray::from_op("sum_axis", {1, n}, std::move(out), {x}, [m, n](Node& self) {
      double* gx = grad_of(self, 0);
      if (!gx) return;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += self.grad[c];
    });
  }
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += xv[r * n + c];
  return DiffArray::from_op("sum_axis", {m, 1}, std::move(out), {x}, [m, n](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += self.grad[r];
  });
}

DiffArray mse(const DiffArray& a, const DiffArray& b) {
  require(a.shape() == b.shape(), [&] { return
          "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()); });
  require(a.size() > 0, "mse: empty arrays");
  const auto av = a.values();
  const auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return DiffArray::from_op("mse", {1}, {s * inv_n}, {a, b}, [inv_n](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const double g = self.grad[0] * 2.0 * inv_n;
    double* ga = grad_of(self, 0);
    double* gb = grad_of(self, 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = g * (x[i] - y[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

}  // namespace d3etr::ad
