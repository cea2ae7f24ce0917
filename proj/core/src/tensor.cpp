#include "userip/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace userip {

namespace {

constexpr double kEps = 1e-12;

// keep dgemm single-threaded: callers own the parallelism, and a fixed
// accumulation order keeps results reproducible
struct BlasSingleThread {
  BlasSingleThread() { openblas_set_num_threads(1); }
};
const BlasSingleThread g_blas_config;

thread_local Tape* g_active_tape = nullptr;
std::atomic<uint64_t> g_tape_counter{1};

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

size_t shape_size(const std::vector<int>& s) {
  size_t n = 1;
  for (int d : s) {
    if (d < 0) raise(Errc::config, "negative dimension in shape " + shape_str(s));
    n *= static_cast<size_t>(d);
  }
  return n;
}

std::shared_ptr<detail::TensorNode> new_node(std::vector<int> shape) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->values.assign(shape_size(n->shape), 0.0);
  return n;
}

Tensor wrap(std::shared_ptr<detail::TensorNode> n);

bool tracked(const Tensor& t) { return t.defined() && t.node()->requires_grad; }

// Marks out as a tracked intermediate and records the backward step if any
// input is tracked and a tape is active.
void finish_op(const std::shared_ptr<detail::TensorNode>& out, bool any_tracked,
               std::function<void()> backward_fn) {
  Tape* tape = Tape::active();
  if (!tape || !any_tracked) return;
  out->requires_grad = true;
  out->is_leaf = false;
  out->tape_id = tape->id();
  tape->record(std::move(backward_fn), out);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    raise(Errc::config, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

}  // namespace

Tensor wrap_node(std::shared_ptr<detail::TensorNode> n);

namespace {
Tensor wrap(std::shared_ptr<detail::TensorNode> n) { return wrap_node(std::move(n)); }
}  // namespace

Tensor wrap_node(std::shared_ptr<detail::TensorNode> n) { return Tensor(std::move(n)); }

BoolMatrix BoolMatrix::lower_triangular(int n) {
  BoolMatrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.at(i, j) = 1;
  return m;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = new_node(std::move(shape));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  auto n = new_node(std::move(shape));
  std::fill(n->values.begin(), n->values.end(), value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  if (shape_size(n->shape) != values.size())
    raise(Errc::config, "from_values: " + std::to_string(values.size()) + " values for shape " +
                            shape_str(n->shape));
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double mean, double stddev,
                     bool requires_grad) {
  auto n = new_node(std::move(shape));
  for (auto& v : n->values) v = rng.gaussian(mean, stddev);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

const std::vector<int>& Tensor::shape() const {
  if (!node_) raise(Errc::config, "undefined tensor");
  return node_->shape;
}

int Tensor::size() const { return static_cast<int>(node_->size()); }

std::span<const double> Tensor::values() const { return node_->values; }

std::span<double> Tensor::values_mut() {
  if (node_->frozen) raise(Errc::config, "write to frozen tensor rejected");
  return node_->values;
}

double Tensor::at(std::initializer_list<int> idx) const {
  size_t off = 0;
  size_t i = 0;
  for (int v : idx) {
    off = off * static_cast<size_t>(node_->shape[i]) + static_cast<size_t>(v);
    ++i;
  }
  return node_->values[off];
}

double Tensor::item() const {
  if (size() != 1) raise(Errc::config, "item() on non-scalar tensor " + shape_str(shape()));
  return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  if (!node_->is_leaf) raise(Errc::config, "set_requires_grad on non-leaf");
  node_->requires_grad = v;
}

bool Tensor::is_leaf() const { return node_->is_leaf; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) raise(Errc::config, "grad not populated");
  return node_->grad;
}

std::span<double> Tensor::grad_mut() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->grad.size() == node_->values.size())
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::freeze() {
  node_->frozen = true;
  node_->requires_grad = false;
}

bool Tensor::frozen() const { return node_ && node_->frozen; }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {
  if (g_active_tape) raise(Errc::config, "nested tapes are not supported");
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = nullptr; }

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::function<void()> fn, std::shared_ptr<detail::TensorNode> out) {
  steps_.push_back({std::move(fn), std::move(out)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) raise(Errc::config, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (loss.node()->tape_id != id_) raise(Errc::config, "backward: loss not produced on current tape");
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    if (it->out->grad.size() == it->out->values.size()) it->fn();
  }
  for (auto& step : steps_) {
    if (!step.out->is_leaf) step.out->grad.clear();
  }
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) raise(Errc::config, "backward: no active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = new_node(a.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] + bv[i];
  finish_op(out, tracked(a) || tracked(b), [an = a.node_ptr(), bn = b.node_ptr(), on = out.get()] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i];
    }
  });
  return wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = new_node(a.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] - bv[i];
  finish_op(out, tracked(a) || tracked(b), [an = a.node_ptr(), bn = b.node_ptr(), on = out.get()] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
  return wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = new_node(a.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] * bv[i];
  finish_op(out, tracked(a) || tracked(b), [an = a.node_ptr(), bn = b.node_ptr(), on = out.get()] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->values[i];
    }
  });
  return wrap(out);
}

Tensor scale(const Tensor& a, double c) {
  auto out = new_node(a.shape());
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] * c;
  finish_op(out, tracked(a), [an = a.node_ptr(), on = out.get(), c] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    }
  });
  return wrap(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    raise(Errc::config, "matmul: rank-2 required, got " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
  int r = a.dim(0), k = a.dim(1), k2 = b.dim(0), c = b.dim(1);
  if (k != k2)
    raise(Errc::config,
          "matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto out = new_node({r, c});
  if (r > 0 && c > 0 && k > 0)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, r, c, k, 1.0, a.node()->values.data(), k,
                b.node()->values.data(), c, 0.0, out->values.data(), c);
  finish_op(out, tracked(a) || tracked(b),
            [an = a.node_ptr(), bn = b.node_ptr(), on = out.get(), r, k, c] {
              if (r == 0 || c == 0 || k == 0) return;
              if (an->requires_grad) {
                an->ensure_grad();
                // dA += dOut * B^T
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, r, k, c, 1.0, on->grad.data(),
                            c, bn->values.data(), c, 1.0, an->grad.data(), k);
              }
              if (bn->requires_grad) {
                bn->ensure_grad();
                // dB += A^T * dOut
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, c, r, 1.0,
                            an->values.data(), k, on->grad.data(), c, 1.0, bn->grad.data(), c);
              }
            });
  return wrap(out);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) raise(Errc::config, "transpose: rank-2 required, got " + shape_str(a.shape()));
  int r = a.dim(0), c = a.dim(1);
  auto out = new_node({c, r});
  const auto& av = a.node()->values;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out->values[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
  finish_op(out, tracked(a), [an = a.node_ptr(), on = out.get(), r, c] {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        an->grad[static_cast<size_t>(i) * c + j] += on->grad[static_cast<size_t>(j) * r + i];
  });
  return wrap(out);
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_size(shape) != static_cast<size_t>(a.size()))
    raise(Errc::config, "reshape: size mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto out = new_node(std::move(shape));
  out->values = a.node()->values;
  finish_op(out, tracked(a), [an = a.node_ptr(), on = out.get()] {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
  });
  return wrap(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) raise(Errc::config, "concat: no parts");
  if (axis != 0 && axis != 1) raise(Errc::config, "concat: axis must be 0 or 1");
  for (const auto& p : parts)
    if (p.rank() != 2) raise(Errc::config, "concat: rank-2 required, got " + shape_str(p.shape()));
  int other = parts[0].dim(1 - axis);
  int total = 0;
  for (const auto& p : parts) {
    if (p.dim(1 - axis) != other)
      raise(Errc::config, "concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                              shape_str(p.shape()));
    total += p.dim(axis);
  }
  auto out = new_node(axis == 0 ? std::vector<int>{total, other} : std::vector<int>{other, total});
  int rows = out->shape[0], cols = out->shape[1];
  bool any = false;
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) {
    nodes.push_back(p.node_ptr());
    any = any || tracked(p);
  }
  int off = 0;
  for (const auto& p : parts) {
    int pr = p.dim(0), pc = p.dim(1);
    const auto& pv = p.node()->values;
    if (axis == 0) {
      std::memcpy(out->values.data() + static_cast<size_t>(off) * cols, pv.data(),
                  pv.size() * sizeof(double));
      off += pr;
    } else {
      for (int i = 0; i < pr; ++i)
        std::memcpy(out->values.data() + static_cast<size_t>(i) * cols + off,
                    pv.data() + static_cast<size_t>(i) * pc, static_cast<size_t>(pc) * sizeof(double));
      off += pc;
    }
  }
  finish_op(out, any, [nodes, on = out.get(), axis, rows, cols] {
    (void)rows;
    int off2 = 0;
    for (const auto& pn : nodes) {
      int pr = pn->shape[0], pc = pn->shape[1];
      if (pn->requires_grad) {
        pn->ensure_grad();
        if (axis == 0) {
          const double* src = on->grad.data() + static_cast<size_t>(off2) * cols;
          for (size_t i = 0; i < pn->grad.size(); ++i) pn->grad[i] += src[i];
        } else {
          for (int i = 0; i < pr; ++i) {
            const double* src = on->grad.data() + static_cast<size_t>(i) * cols + off2;
            double* dst = pn->grad.data() + static_cast<size_t>(i) * pc;
            for (int j = 0; j < pc; ++j) dst[j] += src[j];
          }
        }
      }
      off2 += (axis == 0) ? pr : pc;
    }
  });
  return wrap(out);
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  if (a.rank() != 2) raise(Errc::config, "slice: rank-2 required, got " + shape_str(a.shape()));
  if (axis != 0 && axis != 1) raise(Errc::config, "slice: axis must be 0 or 1");
  if (start < 0 || len < 0 || start + len > a.dim(axis))
    raise(Errc::config, "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                            ") out of bounds for " + shape_str(a.shape()));
  int r = a.dim(0), c = a.dim(1);
  auto out = new_node(axis == 0 ? std::vector<int>{len, c} : std::vector<int>{r, len});
  const auto& av = a.node()->values;
  if (axis == 0) {
    std::memcpy(out->values.data(), av.data() + static_cast<size_t>(start) * c,
                static_cast<size_t>(len) * c * sizeof(double));
  } else {
    for (int i = 0; i < r; ++i)
      std::memcpy(out->values.data() + static_cast<size_t>(i) * len,
                  av.data() + static_cast<size_t>(i) * c + start, static_cast<size_t>(len) * sizeof(double));
  }
  finish_op(out, tracked(a), [an = a.node_ptr(), on = out.get(), axis, start, len, r, c] {
    if (!an->requires_grad) return;
    an->ensure_grad();
    if (axis == 0) {
      double* dst = an->grad.data() + static_cast<size_t>(start) * c;
      for (size_t i = 0; i < on->grad.size(); ++i) dst[i] += on->grad[i];
    } else {
      for (int i = 0; i < r; ++i) {
        double* dst = an->grad.data() + static_cast<size_t>(i) * c + start;
        const double* src = on->grad.data() + static_cast<size_t>(i) * len;
        for (int j = 0; j < len; ++j) dst[j] += src[j];
      }
    }
  });
  return wrap(out);
}

Tensor select_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) raise(Errc::config, "select_rows: rank-2 table required");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      raise(Errc::config, "select_rows: row " + std::to_string(id) + " out of range [0," +
                              std::to_string(v) + ")");
  auto out = new_node({static_cast<int>(ids.size()), d});
  const auto& tv = table.node()->values;
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out->values.data() + i * static_cast<size_t>(d),
                tv.data() + static_cast<size_t>(ids[i]) * d, static_cast<size_t>(d) * sizeof(double));
  std::vector<int> idv(ids.begin(), ids.end());
  finish_op(out, tracked(table), [tn = table.node_ptr(), on = out.get(), idv, d] {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t i = 0; i < idv.size(); ++i) {
      double* dst = tn->grad.data() + static_cast<size_t>(idv[i]) * d;
      const double* src = on->grad.data() + i * static_cast<size_t>(d);
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return wrap(out);
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace {

// softmax over contiguous groups: n_groups rows of group_len, stride between
// consecutive in-group elements
void softmax_groups(const double* in, double* out, int n_groups, int group_len, int stride,
                    int group_stride) {
  for (int g = 0; g < n_groups; ++g) {
    const double* x = in + static_cast<size_t>(g) * group_stride;
    double* y = out + static_cast<size_t>(g) * group_stride;
    double mx = -HUGE_VAL;
    for (int i = 0; i < group_len; ++i) mx = std::max(mx, x[static_cast<size_t>(i) * stride]);
    double z = 0.0;
    for (int i = 0; i < group_len; ++i) {
      double e = std::exp(x[static_cast<size_t>(i) * stride] - mx);
      y[static_cast<size_t>(i) * stride] = e;
      z += e;
    }
    double inv = 1.0 / (z + kEps);
    for (int i = 0; i < group_len; ++i) y[static_cast<size_t>(i) * stride] *= inv;
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (x.rank() == 1) {
    if (axis != 0) raise(Errc::config, "softmax: axis out of range for rank-1");
  } else if (x.rank() == 2) {
    if (axis != 0 && axis != 1) raise(Errc::config, "softmax: axis out of range for rank-2");
  } else {
    raise(Errc::config, "softmax: rank-1 or rank-2 required");
  }
  auto out = new_node(x.shape());
  int rows = x.rank() == 1 ? 1 : x.dim(0);
  int cols = x.rank() == 1 ? x.dim(0) : x.dim(1);
  const double* in = x.node()->values.data();
  double* ov = out->values.data();
  int n_groups, group_len, stride, group_stride;
  if (x.rank() == 1 || axis == 1) {
    n_groups = rows, group_len = cols, stride = 1, group_stride = cols;
  } else {
    n_groups = cols, group_len = rows, stride = cols, group_stride = 1;
  }
  softmax_groups(in, ov, n_groups, group_len, stride, group_stride);
  finish_op(out, tracked(x), [xn = x.node_ptr(), on = out.get(), n_groups, group_len, stride,
                              group_stride] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int g = 0; g < n_groups; ++g) {
      const double* p = on->values.data() + static_cast<size_t>(g) * group_stride;
      const double* go = on->grad.data() + static_cast<size_t>(g) * group_stride;
      double* gx = xn->grad.data() + static_cast<size_t>(g) * group_stride;
      double dot = 0.0;
      for (int i = 0; i < group_len; ++i)
        dot += p[static_cast<size_t>(i) * stride] * go[static_cast<size_t>(i) * stride];
      for (int i = 0; i < group_len; ++i) {
        size_t k = static_cast<size_t>(i) * stride;
        gx[k] += p[k] * (go[k] - dot);
      }
    }
  });
  return wrap(out);
}

Tensor masked_softmax(const Tensor& scores, const BoolMatrix& mask) {
  if (scores.rank() != 2) raise(Errc::config, "masked_softmax: rank-2 required");
  int r = scores.dim(0), c = scores.dim(1);
  if (mask.rows != r || mask.cols != c)
    raise(Errc::config, "masked_softmax: mask " + std::to_string(mask.rows) + "x" +
                            std::to_string(mask.cols) + " vs scores " + shape_str(scores.shape()));
  auto out = new_node(scores.shape());
  const double* in = scores.node()->values.data();
  double* ov = out->values.data();
  for (int i = 0; i < r; ++i) {
    double mx = -HUGE_VAL;
    bool any = false;
    for (int j = 0; j < c; ++j)
      if (mask.at(i, j)) {
        mx = std::max(mx, in[static_cast<size_t>(i) * c + j]);
        any = true;
      }
    if (!any) raise(Errc::config, "masked_softmax: row " + std::to_string(i) + " attends nowhere");
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      size_t k = static_cast<size_t>(i) * c + j;
      if (mask.at(i, j)) {
        ov[k] = std::exp(in[k] - mx);
        z += ov[k];
      } else {
        ov[k] = 0.0;
      }
    }
    double inv = 1.0 / (z + kEps);
    for (int j = 0; j < c; ++j)
      if (mask.at(i, j)) ov[static_cast<size_t>(i) * c + j] *= inv;
  }
  BoolMatrix m = mask;
  finish_op(out, tracked(scores), [sn = scores.node_ptr(), on = out.get(), m, r, c] {
    if (!sn->requires_grad) return;
    sn->ensure_grad();
    for (int i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) {
        size_t k = static_cast<size_t>(i) * c + j;
        if (m.at(i, j)) dot += on->values[k] * on->grad[k];
      }
      for (int j = 0; j < c; ++j) {
        size_t k = static_cast<size_t>(i) * c + j;
        if (m.at(i, j)) sn->grad[k] += on->values[k] * (on->grad[k] - dot);
      }
    }
  });
  return wrap(out);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> mask) {
  if (logits.rank() != 2) raise(Errc::config, "cross_entropy: rank-2 logits required");
  int p = logits.dim(0), v = logits.dim(1);
  if (targets.size() != static_cast<size_t>(p) || mask.size() != static_cast<size_t>(p))
    raise(Errc::config, "cross_entropy: need one target and one mask flag per position");
  int n_active = 0;
  for (int i = 0; i < p; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    ++n_active;
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= v)
      raise(Errc::config, "cross_entropy: target " + std::to_string(targets[static_cast<size_t>(i)]) +
                              " out of vocabulary range [0," + std::to_string(v) + ")");
  }
  if (n_active == 0) raise(Errc::config, "cross_entropy: empty unmasked set rejected");

  auto out = new_node({});
  const double* in = logits.node()->values.data();
  // keep per-row log-sum-exp for the backward pass
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(p) * v, 0.0);
  double loss = 0.0;
  for (int i = 0; i < p; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const double* row = in + static_cast<size_t>(i) * v;
    double mx = -HUGE_VAL;
    for (int j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    double logz = std::log(z + kEps) + mx;
    loss -= row[targets[static_cast<size_t>(i)]] - logz;
    double* prow = probs->data() + static_cast<size_t>(i) * v;
    for (int j = 0; j < v; ++j) prow[j] = std::exp(row[j] - logz);
  }
  out->values[0] = loss / n_active;

  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<uint8_t> msk(mask.begin(), mask.end());
  finish_op(out, tracked(logits),
            [ln = logits.node_ptr(), on = out.get(), probs, tgt, msk, p, v, n_active] {
              if (!ln->requires_grad) return;
              ln->ensure_grad();
              double g = on->grad[0] / n_active;
              for (int i = 0; i < p; ++i) {
                if (!msk[static_cast<size_t>(i)]) continue;
                const double* prow = probs->data() + static_cast<size_t>(i) * v;
                double* grow = ln->grad.data() + static_cast<size_t>(i) * v;
                for (int j = 0; j < v; ++j) grow[j] += g * prow[j];
                grow[tgt[static_cast<size_t>(i)]] -= g;
              }
            });
  return wrap(out);
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  int d;
  int rows;
  if (x.rank() == 1) {
    rows = 1;
    d = x.dim(0);
  } else if (x.rank() == 2) {
    rows = x.dim(0);
    d = x.dim(1);
  } else {
    raise(Errc::config, "layernorm: rank-1 or rank-2 required");
  }
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    raise(Errc::config, "layernorm: gain/bias must be rank-1 of width " + std::to_string(d));

  auto out = new_node(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * d);
  auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const double* in = x.node()->values.data();
  const double* g = gain.node()->values.data();
  const double* b = bias.node()->values.data();
  for (int i = 0; i < rows; ++i) {
    const double* row = in + static_cast<size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    double is = 1.0 / std::sqrt(var + kEps);
    (*inv_sigma)[static_cast<size_t>(i)] = is;
    double* xh = xhat->data() + static_cast<size_t>(i) * d;
    double* ov = out->values.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (row[j] - mu) * is;
      ov[j] = xh[j] * g[j] + b[j];
    }
  }
  finish_op(out, tracked(x) || tracked(gain) || tracked(bias),
            [xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(), on = out.get(), xhat,
             inv_sigma, rows, d] {
              for (int i = 0; i < rows; ++i) {
                const double* go = on->grad.data() + static_cast<size_t>(i) * d;
                const double* xh = xhat->data() + static_cast<size_t>(i) * d;
                if (gn->requires_grad) {
                  gn->ensure_grad();
                  for (int j = 0; j < d; ++j) gn->grad[j] += go[j] * xh[j];
                }
                if (bn->requires_grad) {
                  bn->ensure_grad();
                  for (int j = 0; j < d; ++j) bn->grad[j] += go[j];
                }
                if (xn->requires_grad) {
                  xn->ensure_grad();
                  const double* g = gn->values.data();
                  double is = (*inv_sigma)[static_cast<size_t>(i)];
                  double mean_gy = 0.0, mean_gyx = 0.0;
                  for (int j = 0; j < d; ++j) {
                    double gy = go[j] * g[j];
                    mean_gy += gy;
                    mean_gyx += gy * xh[j];
                  }
                  mean_gy /= d;
                  mean_gyx /= d;
                  double* gx = xn->grad.data() + static_cast<size_t>(i) * d;
                  for (int j = 0; j < d; ++j) {
                    double gy = go[j] * g[j];
                    gx[j] += is * (gy - mean_gy - xh[j] * mean_gyx);
                  }
                }
              }
            });
  return wrap(out);
}

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, const char* /*name*/, Fwd fwd, Bwd dfn) {
  auto out = new_node(x.shape());
  const auto& xv = x.node()->values;
  for (size_t i = 0; i < xv.size(); ++i) out->values[i] = fwd(xv[i]);
  finish_op(out, tracked(x), [xn = x.node_ptr(), on = out.get(), dfn] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->grad.size(); ++i)
      xn->grad[i] += on->grad[i] * dfn(xn->values[i], on->values[i]);
  });
  return wrap(out);
}

}  // namespace

Tensor gelu(const Tensor& x) {
  return unary_op(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        double phi = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * phi;
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      x, "clamp", [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  auto out = new_node({});
  double s = 0.0;
  for (double v : x.node()->values) s += v;
  out->values[0] = s;
  finish_op(out, tracked(x), [xn = x.node_ptr(), on = out.get()] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += on->grad[0];
  });
  return wrap(out);
}

Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) raise(Errc::config, "mean_all: empty tensor");
  return scale(sum(x), 1.0 / x.size());
}

Tensor sum_squares(const Tensor& x) {
  auto out = new_node({});
  double s = 0.0;
  for (double v : x.node()->values) s += v * v;
  out->values[0] = s;
  finish_op(out, tracked(x), [xn = x.node_ptr(), on = out.get()] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += 2.0 * xn->values[i] * on->grad[0];
  });
  return wrap(out);
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    raise(Errc::config, "add_row_broadcast: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  int r = x.dim(0), c = x.dim(1);
  auto out = new_node(x.shape());
  const double* xv = x.node()->values.data();
  const double* bv = bias.node()->values.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->values[static_cast<size_t>(i) * c + j] = xv[static_cast<size_t>(i) * c + j] + bv[j];
  finish_op(out, tracked(x) || tracked(bias),
            [xn = x.node_ptr(), bn = bias.node_ptr(), on = out.get(), r, c] {
              if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
              }
              if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < r; ++i)
                  for (int j = 0; j < c; ++j) bn->grad[j] += on->grad[static_cast<size_t>(i) * c + j];
              }
            });
  return wrap(out);
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
  if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0))
    raise(Errc::config, "row_scale: " + shape_str(x.shape()) + " * " + shape_str(s.shape()));
  int r = x.dim(0), c = x.dim(1);
  auto out = new_node(x.shape());
  const double* xv = x.node()->values.data();
  const double* sv = s.node()->values.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->values[static_cast<size_t>(i) * c + j] = xv[static_cast<size_t>(i) * c + j] * sv[i];
  finish_op(out, tracked(x) || tracked(s), [xn = x.node_ptr(), sn = s.node_ptr(), on = out.get(), r, c] {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          xn->grad[static_cast<size_t>(i) * c + j] +=
              on->grad[static_cast<size_t>(i) * c + j] * sn->values[i];
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j)
          acc += on->grad[static_cast<size_t>(i) * c + j] * xn->values[static_cast<size_t>(i) * c + j];
        sn->grad[i] += acc;
      }
    }
  });
  return wrap(out);
}

Tensor broadcast_row(const Tensor& v, int n) {
  if (v.rank() != 1) raise(Errc::config, "broadcast_row: rank-1 required");
  if (n < 0) raise(Errc::config, "broadcast_row: negative row count");
  int d = v.dim(0);
  auto out = new_node({n, d});
  const double* vv = v.node()->values.data();
  for (int i = 0; i < n; ++i)
    std::memcpy(out->values.data() + static_cast<size_t>(i) * d, vv, static_cast<size_t>(d) * sizeof(double));
  finish_op(out, tracked(v), [vn = v.node_ptr(), on = out.get(), n, d] {
    if (!vn->requires_grad) return;
    vn->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) vn->grad[j] += on->grad[static_cast<size_t>(i) * d + j];
  });
  return wrap(out);
}

Tensor stop_gradient(const Tensor& x) {
  auto out = new_node(x.shape());
  out->values = x.node()->values;
  // no tape record: gradient is defined as zero through this op
  return wrap(out);
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) raise(Errc::config, "dropout: rate must be in [0,1)");
  auto out = new_node(x.shape());
  auto keep = std::make_shared<std::vector<uint8_t>>(x.node()->values.size());
  double scale_up = 1.0 / (1.0 - rate);
  const auto& xv = x.node()->values;
  for (size_t i = 0; i < xv.size(); ++i) {
    bool k = rng.uniform01() >= rate;
    (*keep)[i] = k;
    out->values[i] = k ? xv[i] * scale_up : 0.0;
  }
  finish_op(out, tracked(x), [xn = x.node_ptr(), on = out.get(), keep, scale_up] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->grad.size(); ++i)
      if ((*keep)[i]) xn->grad[i] += on->grad[i] * scale_up;
  });
  return wrap(out);
}

Tensor sigmoid_bce_mean(const Tensor& logits, std::span<const double> labels) {
  if (logits.rank() != 1) raise(Errc::config, "sigmoid_bce_mean: rank-1 logits required");
  int n = logits.dim(0);
  if (labels.size() != static_cast<size_t>(n))
    raise(Errc::config, "sigmoid_bce_mean: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(n) + " logits");
  if (n == 0) raise(Errc::config, "sigmoid_bce_mean: empty batch");
  for (double y : labels)
    if (y != 0.0 && y != 1.0) raise(Errc::config, "sigmoid_bce_mean: labels must be 0 or 1");
  auto out = new_node({});
  const double* z = logits.node()->values.data();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    double zi = z[i];
    // max(z,0) - z*y + log(1+exp(-|z|))
    loss += std::max(zi, 0.0) - zi * labels[static_cast<size_t>(i)] + std::log1p(std::exp(-std::abs(zi)));
  }
  out->values[0] = loss / n;
  std::vector<double> lab(labels.begin(), labels.end());
  finish_op(out, tracked(logits), [ln = logits.node_ptr(), on = out.get(), lab, n] {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    double g = on->grad[0] / n;
    for (int i = 0; i < n; ++i) {
      double zi = ln->values[static_cast<size_t>(i)];
      double p = zi >= 0.0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
      ln->grad[static_cast<size_t>(i)] += g * (p - lab[static_cast<size_t>(i)]);
    }
  });
  return wrap(out);
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           double step, double tol) {
  Tensor x = Tensor::from_values(point.shape(), {point.values().begin(), point.values().end()}, true);
  std::vector<double> tape_grad;
  {
    Tape tape;
    Tensor y = f(x);
    if (y.size() != 1) raise(Errc::config, "grad_check: f must be scalar-valued");
    tape.backward(y);
    tape_grad.assign(x.grad().begin(), x.grad().end());
  }
  GradCheckReport report;
  auto vals = x.values_mut();
  for (size_t i = 0; i < vals.size(); ++i) {
    double saved = vals[i];
    vals[i] = saved + step;
    double up = f(x).item();
    vals[i] = saved - step;
    double dn = f(x).item();
    vals[i] = saved;
    double fd = (up - dn) / (2.0 * step);
    double denom = std::max({1.0, std::abs(fd), std::abs(tape_grad[i])});
    double rel = std::abs(fd - tape_grad[i]) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = static_cast<int>(i);
      report.worst_tape = tape_grad[i];
      report.worst_fd = fd;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace userip
