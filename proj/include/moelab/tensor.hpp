#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// Dense row-major tensor of 32-bit floats with an optional gradient buffer.
// Reductions (dot products, softmax sums, loss means) accumulate in double.
struct TensorNode {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a backward pass needs it
  bool requires_grad = false;

  size_t numel() const { return data.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
  }
};

using Tensor = std::shared_ptr<TensorNode>;

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int s : shape) {
    if (s < 0) throw DimensionError("negative dimension in shape");
    n *= static_cast<size_t>(s);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline Tensor tensor_zeros(std::vector<int> shape, bool requires_grad = false) {
  auto t = std::make_shared<TensorNode>();
  t->data.assign(shape_numel(shape), 0.0f);
  t->shape = std::move(shape);
  t->requires_grad = requires_grad;
  return t;
}

inline Tensor tensor_of(std::vector<int> shape, std::vector<float> data, bool requires_grad = false) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  auto t = std::make_shared<TensorNode>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

inline Tensor tensor_scalar(float v, bool requires_grad = false) {
  return tensor_of({1}, {v}, requires_grad);
}

template <typename Rng>
Tensor tensor_randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad = false) {
  std::normal_distribution<float> d(0.0f, stddev);
  auto t = tensor_zeros(std::move(shape), requires_grad);
  for (auto& v : t->data) v = d(rng);
  return t;
}

inline bool all_finite(const TensorNode& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// Records forward operations and replays their backward rules in reverse.
// A tape is rebuilt for every training step; a no-grad tape skips recording
// entirely so evaluation pays no graph cost. Single-threaded by design:
// never share one tape between threads.
class Tape {
 public:
  enum Mode { kGrad, kNoGrad };

  explicit Tape(Mode mode = kGrad) : recording_(mode == kGrad) {}

  bool recording() const { return recording_; }
  size_t size() const { return ops_.size(); }

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
      throw DimensionError("matmul shape mismatch: " + shape_str(a->shape) + " x " + shape_str(b->shape));
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    Tensor out = tensor_zeros({m, n});
    const float* ad = a->data.data();
    const float* bd = b->data.data();
    float* od = out->data.data();
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += double(ad[i * k + p]) * double(bd[p * n + j]);
        od[i * n + j] = float(acc);
      }
    }
    record(out, {a, b}, [a, b, out, m, k, n] {
      const float* go = out->grad.data();
      if (a->requires_grad) {
        float* ga = a->grad.data();
        const float* bd = b->data.data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += double(go[i * n + j]) * double(bd[p * n + j]);
            ga[i * k + p] += float(acc);
          }
      }
      if (b->requires_grad) {
        float* gb = b->grad.data();
        const float* ad = a->data.data();
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += double(ad[i * k + p]) * double(go[i * n + j]);
            gb[p * n + j] += float(acc);
          }
      }
    });
    return out;
  }

  Tensor transpose(const Tensor& a) {
    if (a->shape.size() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a->shape));
    const int m = a->shape[0], n = a->shape[1];
    Tensor out = tensor_zeros({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out->data[j * m + i] = a->data[i * n + j];
    record(out, {a}, [a, out, m, n] {
      if (!a->requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j * m + i];
    });
    return out;
  }

  Tensor add(const Tensor& a, const Tensor& b) {
    if (a->shape != b->shape)
      throw DimensionError("add shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    Tensor out = tensor_zeros(a->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    record(out, {a, b}, [a, b, out] {
      if (a->requires_grad)
        for (size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (size_t i = 0; i < out->numel(); ++i) b->grad[i] += out->grad[i];
    });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    if (a->shape != b->shape)
      throw DimensionError("mul shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    Tensor out = tensor_zeros(a->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    record(out, {a, b}, [a, b, out] {
      if (a->requires_grad)
        for (size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * b->data[i];
      if (b->requires_grad)
        for (size_t i = 0; i < out->numel(); ++i) b->grad[i] += out->grad[i] * a->data[i];
    });
    return out;
  }

  Tensor scale(const Tensor& a, float c) {
    Tensor out = tensor_zeros(a->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
    record(out, {a}, [a, out, c] {
      if (!a->requires_grad) return;
      for (size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * c;
    });
    return out;
  }

  Tensor relu(const Tensor& a) {
    Tensor out = tensor_zeros(a->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] > 0.0f ? a->data[i] : 0.0f;
    record(out, {a}, [a, out] {
      if (!a->requires_grad) return;
      for (size_t i = 0; i < out->numel(); ++i)
        if (a->data[i] > 0.0f) a->grad[i] += out->grad[i];
    });
    return out;
  }

  // Softmax over the given axis, computed with max-subtraction. Only the last
  // axis is supported; everything in the model reduces over rows.
  Tensor softmax(const Tensor& a, int axis) {
    const int rank = int(a->shape.size());
    if (axis < 0) axis += rank;
    if (axis != rank - 1)
      throw DimensionError("softmax supports the last axis only (axis " + std::to_string(axis) + " of rank " +
                           std::to_string(rank) + ")");
    const int n = a->shape[rank - 1];
    if (n <= 0) throw DimensionError("softmax over empty axis");
    const size_t slices = a->numel() / size_t(n);
    Tensor out = tensor_zeros(a->shape);
    for (size_t s = 0; s < slices; ++s) {
      const float* x = a->data.data() + s * n;
      float* y = out->data.data() + s * n;
      float mx = x[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
      }
      const float inv = float(1.0 / sum);
      for (int i = 0; i < n; ++i) y[i] *= inv;
    }
    record(out, {a}, [a, out, n, slices] {
      if (!a->requires_grad) return;
      for (size_t s = 0; s < slices; ++s) {
        const float* y = out->data.data() + s * n;
        const float* gy = out->grad.data() + s * n;
        float* gx = a->grad.data() + s * n;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += double(gy[i]) * double(y[i]);
        for (int i = 0; i < n; ++i) gx[i] += y[i] * (gy[i] - float(dot));
      }
    });
    return out;
  }

  // Mean negative log-likelihood over unmasked positions. Fused softmax +
  // NLL with the usual (p - onehot)/n backward.
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<uint8_t>& mask) {
    if (logits->shape.size() != 2)
      throw DimensionError("cross_entropy expects rank-2 logits, got " + shape_str(logits->shape));
    const int t_len = logits->shape[0], v = logits->shape[1];
    if (int(targets.size()) != t_len || int(mask.size()) != t_len)
      throw DimensionError("cross_entropy targets/mask length " + std::to_string(targets.size()) + "/" +
                           std::to_string(mask.size()) + " vs logits rows " + std::to_string(t_len));
    int n_active = 0;
    for (int i = 0; i < t_len; ++i) {
      if (!mask[i]) continue;
      ++n_active;
      if (targets[i] < 0 || targets[i] >= v)
        throw ContractViolation("cross_entropy target id " + std::to_string(targets[i]) + " out of range at position " +
                                std::to_string(i) + " (vocab " + std::to_string(v) + ")");
    }
    if (n_active == 0) throw ContractViolation("cross_entropy: all positions masked, empty loss");

    double total = 0.0;
    for (int i = 0; i < t_len; ++i) {
      if (!mask[i]) continue;
      const float* row = logits->data.data() + size_t(i) * v;
      float mx = row[0];
      for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < v; ++j) sum += std::exp(double(row[j]) - mx);
      total += std::log(sum) + mx - double(row[targets[i]]);
    }
    Tensor out = tensor_scalar(float(total / n_active));
    record(out, {logits}, [logits, out, targets, mask, t_len, v, n_active] {
      if (!logits->requires_grad) return;
      const float g = out->grad[0] / float(n_active);
      for (int i = 0; i < t_len; ++i) {
        if (!mask[i]) continue;
        const float* row = logits->data.data() + size_t(i) * v;
        float* grow = logits->grad.data() + size_t(i) * v;
        float mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(double(row[j]) - mx);
        const double inv = 1.0 / sum;
        for (int j = 0; j < v; ++j) {
          float p = float(std::exp(double(row[j]) - mx) * inv);
          grow[j] += g * (p - (j == targets[i] ? 1.0f : 0.0f));
        }
      }
    });
    return out;
  }

  // Row gather from an embedding table; backward scatter-adds into the table.
  Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table->shape.size() != 2) throw DimensionError("embed_rows expects rank-2 table");
    const int v = table->shape[0], d = table->shape[1];
    const int n = int(ids.size());
    for (int id : ids)
      if (id < 0 || id >= v)
        throw ContractViolation("embed_rows id " + std::to_string(id) + " out of range (table rows " +
                                std::to_string(v) + ")");
    Tensor out = tensor_zeros({n, d});
    for (int i = 0; i < n; ++i)
      std::copy_n(table->data.data() + size_t(ids[i]) * d, d, out->data.data() + size_t(i) * d);
    record(out, {table}, [table, out, ids, d, n] {
      if (!table->requires_grad) return;
      for (int i = 0; i < n; ++i) {
        float* dst = table->grad.data() + size_t(ids[i]) * d;
        const float* src = out->grad.data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
    return out;
  }

  Tensor slice_rows(const Tensor& a, int start, int count) {
    if (a->shape.size() != 2) throw DimensionError("slice_rows expects rank 2");
    const int m = a->shape[0], d = a->shape[1];
    if (start < 0 || count < 0 || start + count > m)
      throw DimensionError("slice_rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                           ") out of " + std::to_string(m) + " rows");
    Tensor out = tensor_zeros({count, d});
    std::copy_n(a->data.data() + size_t(start) * d, size_t(count) * d, out->data.data());
    record(out, {a}, [a, out, start, count, d] {
      if (!a->requires_grad) return;
      for (int i = 0; i < count; ++i) {
        float* dst = a->grad.data() + size_t(start + i) * d;
        const float* src = out->grad.data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
    return out;
  }

  Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
      throw DimensionError("concat_rows width mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    const int na = a->shape[0], nb = b->shape[0], d = a->shape[1];
    Tensor out = tensor_zeros({na + nb, d});
    std::copy_n(a->data.data(), size_t(na) * d, out->data.data());
    std::copy_n(b->data.data(), size_t(nb) * d, out->data.data() + size_t(na) * d);
    record(out, {a, b}, [a, b, out, na, nb, d] {
      if (a->requires_grad)
        for (size_t i = 0; i < size_t(na) * d; ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (size_t i = 0; i < size_t(nb) * d; ++i) b->grad[i] += out->grad[size_t(na) * d + i];
    });
    return out;
  }

  // Combine expert outputs with (hard-selected) gate values:
  //   out[t] = sum_i gates[t,i] * sel[t,i] * expert_out_i[t]
  // sel is a constant 0/1 selection mask; selection itself carries no
  // gradient, gradients flow through the gate values of selected experts only.
  Tensor moe_combine(const Tensor& gates, const std::vector<float>& sel, const std::vector<Tensor>& expert_outs) {
    if (gates->shape.size() != 2) throw DimensionError("moe_combine expects rank-2 gates");
    const int n = gates->shape[0], ne = gates->shape[1];
    if (int(expert_outs.size()) != ne)
      throw DimensionError("moe_combine: " + std::to_string(expert_outs.size()) + " expert outputs for " +
                           std::to_string(ne) + " gate columns");
    if (sel.size() != gates->numel()) throw DimensionError("moe_combine selection mask size mismatch");
    const int d = expert_outs[0]->shape[1];
    for (const auto& e : expert_outs)
      if (e->shape.size() != 2 || e->shape[0] != n || e->shape[1] != d)
        throw DimensionError("moe_combine expert output shape " + shape_str(e->shape));
    Tensor out = tensor_zeros({n, d});
    for (int t = 0; t < n; ++t) {
      float* orow = out->data.data() + size_t(t) * d;
      for (int i = 0; i < ne; ++i) {
        const float w = gates->data[size_t(t) * ne + i] * sel[size_t(t) * ne + i];
        if (w == 0.0f) continue;
        const float* erow = expert_outs[i]->data.data() + size_t(t) * d;
        for (int j = 0; j < d; ++j) orow[j] += w * erow[j];
      }
    }
    std::vector<Tensor> inputs = expert_outs;
    inputs.push_back(gates);
    record(out, inputs, [gates, sel, expert_outs, out, n, ne, d] {
      for (int t = 0; t < n; ++t) {
        const float* gout = out->grad.data() + size_t(t) * d;
        for (int i = 0; i < ne; ++i) {
          const float s = sel[size_t(t) * ne + i];
          if (s == 0.0f) continue;
          const float* erow = expert_outs[i]->data.data() + size_t(t) * d;
          if (gates->requires_grad) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) acc += double(gout[j]) * double(erow[j]);
            gates->grad[size_t(t) * ne + i] += float(acc) * s;
          }
          if (expert_outs[i]->requires_grad) {
            const float w = gates->data[size_t(t) * ne + i] * s;
            float* ge = expert_outs[i]->grad.data() + size_t(t) * d;
            for (int j = 0; j < d; ++j) ge[j] += w * gout[j];
          }
        }
      }
    });
    return out;
  }

  // Sparse counterpart of moe_combine: expert_outs[i] holds rows only for the
  // tokens listed in routed[i]. out[t] += gates[t,i] * expert_outs[i][r] for
  // routed[i][r] == t. Same gradient semantics: selection is constant,
  // gradients flow through selected gate values and expert rows only.
  Tensor moe_combine_sparse(const Tensor& gates, const std::vector<std::vector<int>>& routed,
                            const std::vector<Tensor>& expert_outs, int d) {
    if (gates->shape.size() != 2) throw DimensionError("moe_combine_sparse expects rank-2 gates");
    const int n = gates->shape[0], ne = gates->shape[1];
    if (int(routed.size()) != ne || int(expert_outs.size()) != ne)
      throw DimensionError("moe_combine_sparse: routed/expert list size mismatch");
    for (int i = 0; i < ne; ++i) {
      if (routed[i].empty()) {
        if (expert_outs[i]) throw DimensionError("moe_combine_sparse: output present for unrouted expert");
        continue;
      }
      if (!expert_outs[i] || expert_outs[i]->shape != std::vector<int>{int(routed[i].size()), d})
        throw DimensionError("moe_combine_sparse: expert output shape mismatch");
      for (int t : routed[i])
        if (t < 0 || t >= n) throw DimensionError("moe_combine_sparse: token index out of range");
    }
    Tensor out = tensor_zeros({n, d});
    for (int i = 0; i < ne; ++i) {
      for (size_t r = 0; r < routed[i].size(); ++r) {
        const int t = routed[i][r];
        const float w = gates->data[size_t(t) * ne + i];
        const float* erow = expert_outs[i]->data.data() + r * d;
        float* orow = out->data.data() + size_t(t) * d;
        for (int j = 0; j < d; ++j) orow[j] += w * erow[j];
      }
    }
    std::vector<Tensor> inputs{gates};
    for (const auto& e : expert_outs)
      if (e) inputs.push_back(e);
    record(out, inputs, [gates, routed, expert_outs, out, ne, d] {
      for (int i = 0; i < ne; ++i) {
        for (size_t r = 0; r < routed[i].size(); ++r) {
          const int t = routed[i][r];
          const float* gout = out->grad.data() + size_t(t) * d;
          const float* erow = expert_outs[i]->data.data() + r * d;
          if (gates->requires_grad) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) acc += double(gout[j]) * double(erow[j]);
            gates->grad[size_t(t) * ne + i] += float(acc);
          }
          if (expert_outs[i]->requires_grad) {
            const float w = gates->data[size_t(t) * ne + i];
            float* ge = expert_outs[i]->grad.data() + r * d;
            for (int j = 0; j < d; ++j) ge[j] += w * gout[j];
          }
        }
      }
    });
    return out;
  }

  Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a->data) acc += v;
    Tensor out = tensor_scalar(float(acc));
    record(out, {a}, [a, out] {
      if (!a->requires_grad) return;
      for (size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[0];
    });
    return out;
  }

  // Switch-style load balance penalty: ne * sum_i frac_i * mean_t gates[t,i].
  // frac is the (constant) fraction of tokens routed to each expert.
  Tensor balance_penalty(const Tensor& gates, const std::vector<float>& frac) {
    const int n = gates->shape[0], ne = gates->shape[1];
    if (int(frac.size()) != ne) throw DimensionError("balance_penalty frac size mismatch");
    double acc = 0.0;
    for (int i = 0; i < ne; ++i) {
      double col = 0.0;
      for (int t = 0; t < n; ++t) col += gates->data[size_t(t) * ne + i];
      acc += double(frac[i]) * col / n;
    }
    Tensor out = tensor_scalar(float(acc * ne));
    record(out, {gates}, [gates, out, frac, n, ne] {
      if (!gates->requires_grad) return;
      const float g = out->grad[0] * float(ne) / float(n);
      for (int t = 0; t < n; ++t)
        for (int i = 0; i < ne; ++i) gates->grad[size_t(t) * ne + i] += g * frac[i];
    });
    return out;
  }

  // Reverse sweep. Zeroes the grads of tape-produced intermediates, seeds
  // d(loss)/d(loss) = 1 and touches each recorded op exactly once, newest
  // first. Leaf grads accumulate across repeated calls.
  void backward(const Tensor& loss) {
    if (loss->numel() != 1)
      throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss->shape));
    for (auto& op : ops_) op.out->zero_grad();
    loss->ensure_grad();
    loss->grad[0] += 1.0f;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->back();
  }

 private:
  struct Op {
    Tensor out;
    std::function<void()> back;
  };

  void record(Tensor& out, const std::vector<Tensor>& inputs, std::function<void()> back) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in->requires_grad;
    out->requires_grad = recording_ && needs;
    if (!out->requires_grad) return;
    out->ensure_grad();
    for (const auto& in : inputs)
      if (in->requires_grad) in->ensure_grad();
    ops_.push_back({out, std::move(back)});
  }

  bool recording_;
  std::vector<Op> ops_;
};

}  // namespace moelab
