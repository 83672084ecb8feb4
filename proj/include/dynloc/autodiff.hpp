#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dynloc {

// Dense n-dimensional array of 64-bit reals, row-major.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until a backward pass touches it

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);
  Tensor(std::vector<std::size_t> s, std::vector<double> v);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<std::size_t> s, double v);

  std::size_t numel() const;
  std::size_t rank() const { return shape.size(); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& at(std::size_t i) { return values[i]; }
  double at(std::size_t i) const { return values[i]; }

  void zero_grad() { grad.clear(); }
  // Allocates the gradient buffer (zeros) if absent.
  std::vector<double>& ensure_grad();
};

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Gradient reversal: identity forward, -lambda * upstream backward.
struct GrlConfig {
  double lambda = 1.0;
};

// Recorded computation graph for one forward/backward cycle. Single-threaded;
// records are replayed in reverse exactly once. Parameters enter through
// leaf() and receive their gradients when backward() finishes.
class Tape {
public:
  using Id = std::size_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Non-trainable input data.
  Id constant(Tensor v);
  // Trainable parameter; repeated calls with the same pointer return the
  // same node. The tensor must outlive the tape and have requires_grad set.
  Id leaf(Tensor* param);

  Id matmul(Id a, Id b);              // (M,K) x (K,N)
  Id bmm(Id a, Id b);                 // (B,M,K) x (B,K,N)
  Id bmm_nt(Id a, Id b);              // (B,M,K) x (B,N,K) -> (B,M,N)
  Id conv2d(Id x, Id w, Id bias, const Conv2dSpec& spec);
  Id transposed_conv2d(Id x, Id w, Id bias, const Conv2dSpec& spec);
  Id add(Id a, Id b);                 // same shape, or b rank-1 broadcast over last dim
  Id sub(Id a, Id b);                 // same shape
  Id scale(Id x, double s);
  Id relu(Id x);
  Id softmax_rows(Id x);              // softmax over the last dimension
  Id reshape(Id x, std::vector<std::size_t> shape);
  Id concat(const std::vector<Id>& xs, std::size_t axis);
  Id mean(Id x);                      // scalar mean over all elements
  Id l2_norm_rows(Id x);              // (N,M) -> (N,); subgradient 0 at zero rows
  Id bce(Id prob, Id label);          // elementwise, probs clamped to [1e-7, 1-1e-7]
  Id grl(Id x, const GrlConfig& cfg);

  const Tensor& value(Id id) const;
  // Gradient buffer of a node after backward(); empty if untouched.
  const std::vector<double>& grad(Id id) const;

  // Reverse pass from a scalar root; accumulates into parameter .grad.
  void backward(Id root);

  std::size_t size() const { return nodes_.size(); }

private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* param = nullptr;
  };
  struct Record {
    Id out;
    std::function<void()> backward;
  };

  Id push_node(Tensor v, bool needs_grad);
  std::vector<double>& node_grad(Id id);
  bool wants(Id id) const { return nodes_[id].needs_grad; }
  void record(Id out, std::function<void()> fn);

  std::vector<Node> nodes_;
  std::vector<Record> records_;
  std::unordered_map<const Tensor*, Id> leaf_ids_;
  bool backward_done_ = false;
};

// p <- p - lr * grad for every parameter, then clears the grads.
// Throws InvalidArgument if any parameter is missing its gradient.
void sgd_step(const std::vector<Tensor*>& params, double lr);

// Builds a scalar graph from an input node; used by grad_check.
using ScalarGraphBuilder = std::function<Tape::Id(Tape&, Tape::Id)>;

// Central finite-difference check of the analytic gradient of the scalar
// function defined by `build` at `point`. Returns
//   max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
// Coordinates listed in `skip` are excluded (e.g. relu kinks, where the
// two-sided difference straddles the non-differentiable point).
double grad_check(const ScalarGraphBuilder& build, const Tensor& point,
                  double step, const std::vector<std::size_t>& skip = {});

// Binary checkpoint of ordered named tensors: magic "ADDL", version,
// per tensor name, rank, dims and little-endian 64-bit values.
void write_checkpoint(std::ostream& out,
                      const std::vector<std::pair<std::string, const Tensor*>>& tensors);
std::vector<std::pair<std::string, Tensor>> read_checkpoint(std::istream& in);

}  // namespace dynloc
