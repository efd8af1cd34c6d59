#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace tdvit {

// Configuration problems: bad shapes, invalid hyperparameters.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse at runtime: out-of-order timestamps, empty memory, mid-stream seeding.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss); carries the step index in the message.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d < 0) throw ConfigError("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Deterministic RNG used everywhere (init, sampling, data generation).
// Never touches std::random_device.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  // inclusive bounds
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // normal(0, stddev) with rejection outside +-2 stddev
  double trunc_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (std::abs(v) <= 2.0 * stddev) return v;
    }
  }
  std::uint64_t next_u64() { return engine_(); }

  // independent substream, stable across platforms
  Rng fork(std::uint64_t salt) const {
    std::uint64_t x = state_seed_ ^ (salt + 0x9e3779b97f4a7c15ull + (state_seed_ << 6));
    return Rng(x);
  }

  explicit Rng(std::uint64_t seed, bool) : engine_(seed) {}

 private:
  std::mt19937_64 engine_;
  std::uint64_t state_seed_ = 0;

 public:
  static Rng seeded(std::uint64_t seed) {
    Rng r(seed);
    r.state_seed_ = seed;
    return r;
  }
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

namespace detail {

// One autodiff tape node. `backward` reads this node's grad and accumulates
// into the parents' grads. Leaf nodes (parameters, inputs under check) have
// no backward function.
struct Node {
  int size = 0;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (static_cast<int>(grad.size()) != size) grad.assign(size, 0.0);
  }
};

}  // namespace detail

// Dense float64 tensor with optional reverse-mode gradient. Value-like:
// copies share the immutable data buffer; ops return fresh tensors.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(data))) {
    if (shape_numel(shape_) != static_cast<int>(data_->size()))
      throw ConfigError("tensor data length does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(const Shape& s) {
    return Tensor(s, std::vector<double>(shape_numel(s), 0.0));
  }
  static Tensor full(const Shape& s, double v) {
    return Tensor(s, std::vector<double>(shape_numel(s), v));
  }
  static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0) {
    std::vector<double> d(shape_numel(s));
    for (auto& x : d) x = rng.normal(0.0, stddev);
    return Tensor(s, std::move(d));
  }
  static Tensor trunc_normal(const Shape& s, Rng& rng, double stddev) {
    std::vector<double> d(shape_numel(s));
    for (auto& x : d) x = rng.trunc_normal(stddev);
    return Tensor(s, std::move(d));
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int numel() const { return data_ ? static_cast<int>(data_->size()) : 0; }
  int rows() const { return shape_[0]; }
  int cols() const { return shape_.back(); }

  const std::vector<double>& data() const { return *data_; }
  // In-place access for optimizers and test setup. Must not be called while a
  // graph referencing this buffer is still going to be replayed.
  std::vector<double>& mutable_data() { return *data_; }

  double operator()(int r, int c) const { return (*data_)[static_cast<size_t>(r) * cols() + c]; }
  double at(int i) const { return (*data_)[static_cast<size_t>(i)]; }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // --- autodiff plumbing ---
  bool has_node() const { return static_cast<bool>(node_); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }
  // deep copy of values, no node
  Tensor clone_values() const {
    return Tensor(shape_, *data_);
  }

  // Turn this tensor into a gradient-tracked leaf (a parameter).
  Tensor& set_parameter() {
    if (!node_) {
      node_ = std::make_shared<detail::Node>();
      node_->size = numel();
    }
    return *this;
  }
  bool is_leaf() const { return node_ && !node_->backward; }

  const std::vector<double>& grad() const {
    if (!node_) throw UsageError("grad() on tensor without node");
    const_cast<detail::Node*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad.assign(static_cast<size_t>(node_->size), 0.0);
  }

  // Backpropagate from a scalar result.
  void backward() const {
    if (numel() != 1) throw UsageError("backward() requires a scalar tensor");
    if (!node_) return;
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        detail::Node* p = n->parents[i++].get();
        if (p && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backward) (*it)->backward(**it);
  }

  // internal: used by op builders
  void attach_node(std::shared_ptr<detail::Node> n) { node_ = std::move(n); }
  const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_node(int size, std::vector<std::shared_ptr<Node>> parents,
                                        std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->size = size;
  n->parents = std::move(parents);
  n->backward = std::move(backward);
  return n;
}

inline void accumulate(const std::shared_ptr<Node>& n, int i, double v) {
  n->ensure_grad();
  n->grad[static_cast<size_t>(i)] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitive ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  Tensor t(a.shape(), std::move(out));
  if (a.has_node() || b.has_node()) {
    auto na = a.node(), nb = b.node();
    t.attach_node(detail::make_node(
        t.numel(), {na, nb}, [na, nb](detail::Node& self) {
          if (na) {
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
          }
          if (nb) {
            nb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) nb->grad[i] += self.grad[i];
          }
        }));
  }
  return t;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  Tensor t(a.shape(), std::move(out));
  if (a.has_node() || b.has_node()) {
    auto na = a.node(), nb = b.node();
    t.attach_node(detail::make_node(
        t.numel(), {na, nb}, [na, nb](detail::Node& self) {
          if (na) {
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
          }
          if (nb) {
            nb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) nb->grad[i] -= self.grad[i];
          }
        }));
  }
  return t;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  Tensor t(a.shape(), std::move(out));
  if (a.has_node() || b.has_node()) {
    auto na = a.node(), nb = b.node();
    auto da = a.buffer(), db = b.buffer();
    t.attach_node(detail::make_node(
        t.numel(), {na, nb}, [na, nb, da, db](detail::Node& self) {
          if (na) {
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i] * (*db)[i];
          }
          if (nb) {
            nb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) nb->grad[i] += self.grad[i] * (*da)[i];
          }
        }));
  }
  return t;
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  Tensor t(a.shape(), std::move(out));
  if (a.has_node()) {
    auto na = a.node();
    t.attach_node(detail::make_node(t.numel(), {na}, [na, c](detail::Node& self) {
      na->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i] * c;
    }));
  }
  return t;
}

inline void check_matrix(const Tensor& a, const char* op) {
  if (a.ndim() != 2) throw ConfigError(std::string(op) + ": expected 2-D tensor, got " + shape_str(a.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k)
    throw ConfigError("matmul: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* O = out.data();
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < k; ++p) {
        const double av = A[static_cast<size_t>(i) * k + p];
        if (av == 0.0) continue;
        const double* brow = B + static_cast<size_t>(p) * m;
        double* orow = O + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
      }
  }
  Tensor t({n, m}, std::move(out));
  if (a.has_node() || b.has_node()) {
    auto na = a.node(), nb = b.node();
    auto da = a.buffer(), db = b.buffer();
    t.attach_node(detail::make_node(
        t.numel(), {na, nb}, [na, nb, da, db, n, k, m](detail::Node& self) {
          const double* G = self.grad.data();
          if (na) {
            na->ensure_grad();
            double* GA = na->grad.data();
            const double* B = db->data();
            // gA = g . B^T
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < m; ++j) {
                const double g = G[static_cast<size_t>(i) * m + j];
                if (g == 0.0) continue;
                const double* bcol = B + j;
                double* garow = GA + static_cast<size_t>(i) * k;
                for (int p = 0; p < k; ++p) garow[p] += g * bcol[static_cast<size_t>(p) * m];
              }
          }
          if (nb) {
            nb->ensure_grad();
            double* GB = nb->grad.data();
            const double* A = da->data();
            // gB = A^T . g
            for (int i = 0; i < n; ++i)
              for (int p = 0; p < k; ++p) {
                const double av = A[static_cast<size_t>(i) * k + p];
                if (av == 0.0) continue;
                const double* grow = G + static_cast<size_t>(i) * m;
                double* gbrow = GB + static_cast<size_t>(p) * m;
                for (int j = 0; j < m; ++j) gbrow[j] += av * grow[j];
              }
          }
        }));
  }
  return t;
}

inline Tensor transpose(const Tensor& a) {
  check_matrix(a, "transpose");
  const int n = a.dim(0), m = a.dim(1);
  std::vector<double> out(static_cast<size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<size_t>(j) * n + i] = a.data()[static_cast<size_t>(i) * m + j];
  Tensor t({m, n}, std::move(out));
  if (a.has_node()) {
    auto na = a.node();
    t.attach_node(detail::make_node(t.numel(), {na}, [na, n, m](detail::Node& self) {
      na->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          na->grad[static_cast<size_t>(j) * m + i] += self.grad[static_cast<size_t>(i) * n + j];
    }));
  }
  return t;
}

// View with a new shape; shares data and node (element order unchanged).
inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel())
    throw ConfigError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
  Tensor t = a.detached();
  Tensor out(s, std::vector<double>());
  // rebuild sharing the buffer
  struct Access : Tensor {};
  (void)t;
  Tensor r;
  r = a;  // shares data_ and node_
  // overwrite shape via copy trick
  Tensor shaped(s, std::vector<double>(static_cast<size_t>(shape_numel(s)), 0.0));
  // cheaper: construct manually
  return Tensor::reshaped_view(a, s);
}

// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  Tensor t({1}, {s});
  if (a.has_node()) {
    auto na = a.node();
    const int n = a.numel();
    t.attach_node(detail::make_node(1, {na}, [na, n](detail::Node& self) {
      na->ensure_grad();
      const double g = self.grad[0];
      for (int i = 0; i < n; ++i) na->grad[static_cast<size_t>(i)] += g;
    }));
  }
  return t;
}

}  // namespace tdvit
