#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "userip/common.hpp"

namespace userip {

// Dense row-major f64 tensors with reverse-mode gradient accumulation on a
// per-thread dynamic tape. Frozen tensors are immutable and safe to share
// read-only across threads.

namespace detail {
struct TensorNode {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily; same length as values
  bool requires_grad = false;
  bool is_leaf = true;
  bool frozen = false;
  uint64_t tape_id = 0;  // tape that produced this node (0 for leaves)

  size_t size() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};
}  // namespace detail

struct BoolMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> data;  // row-major

  BoolMatrix() = default;
  BoolMatrix(int r, int c, bool fill = false)
      : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill ? 1 : 0) {}
  uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  static BoolMatrix lower_triangular(int n);
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int> shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape()[static_cast<size_t>(i)]; }
  int size() const;
  bool is_scalar() const { return size() == 1 && rank() == 0; }

  std::span<const double> values() const;
  std::span<double> values_mut();  // rejected on frozen tensors
  double at(std::initializer_list<int> idx) const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool v);  // leaves only
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  void freeze();
  bool frozen() const;

  // identity comparison (same underlying node)
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::TensorNode* node() const { return node_.get(); }
  std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend Tensor wrap_node(std::shared_ptr<detail::TensorNode>);
};

// Records backward steps in forward order; backward() replays them in exact
// reverse order. One active tape per thread; nesting is rejected.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;
  uint64_t id() const { return id_; }
  size_t op_count() const { return steps_.size(); }

  void record(std::function<void()> fn, std::shared_ptr<detail::TensorNode> out);
  // Seeds d(loss)/d(loss) = 1, replays steps in reverse, then releases the
  // grad buffers of non-leaf intermediates. Loss must be a scalar produced on
  // this tape.
  void backward(const Tensor& loss);

 private:
  struct Step {
    std::function<void()> fn;
    std::shared_ptr<detail::TensorNode> out;
  };
  std::vector<Step> steps_;
  uint64_t id_;
};

// backward via the thread's active tape
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. All record gradients when a tape is active and an input
// requires grad. Shape mismatches are rejected with both shapes reported.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor select_rows(const Tensor& table, std::span<const int> ids);
Tensor softmax(const Tensor& x, int axis);
Tensor masked_softmax(const Tensor& scores, const BoolMatrix& mask);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> mask);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor add_row_broadcast(const Tensor& x, const Tensor& bias);
Tensor row_scale(const Tensor& x, const Tensor& s);     // x[i,:] * s[i]
Tensor broadcast_row(const Tensor& v, int n);           // tile rank-1 v into n rows
Tensor stop_gradient(const Tensor& x);
Tensor dropout(const Tensor& x, double rate, Rng& rng);
Tensor sigmoid_bce_mean(const Tensor& logits, std::span<const double> labels);
Tensor clamp(const Tensor& x, double lo, double hi);

// ---------------------------------------------------------------------------
// Finite-difference verification of the tape gradient.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_index = -1;
  double worst_tape = 0.0;
  double worst_fd = 0.0;
  bool pass = false;
};

// f must build a scalar from its argument; evaluated forward-only at
// point +- step per coordinate and compared against one tape backward.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           double step = 1e-5, double tol = 1e-4);

}  // namespace userip
