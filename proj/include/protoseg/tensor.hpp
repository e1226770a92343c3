#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace protoseg {

// Dense row-major tensor of 64-bit floats. Values are immutable after
// construction; copies share storage, and storage identity is what ties a
// parameter to its gradient slot on a tape.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = false)
      : s_(std::make_shared<const Storage>(Storage{std::move(shape), std::move(data)})),
        requires_grad_(requires_grad) {
    std::size_t n = 1;
    for (std::size_t d : s_->shape) n *= d;
    if (s_->shape.empty() || n != s_->data.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_string(s_->shape) + " does not match " +
                                  std::to_string(s_->data.size()) + " elements");
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<std::size_t>& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->data.size(); }
  const std::vector<double>& data() const { return s_->data; }
  double operator[](std::size_t i) const { return s_->data[i]; }

  double value() const {
    if (size() != 1) {
      throw std::invalid_argument("Tensor::value: tensor of shape " + shape_string(shape()) +
                                  " is not a scalar");
    }
    return s_->data[0];
  }

  bool requires_grad() const { return requires_grad_; }
  const void* storage_id() const { return s_.get(); }

  static std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
  }

 private:
  struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> data;
  };
  std::shared_ptr<const Storage> s_;
  bool requires_grad_ = false;

  friend class GradTape;
  friend struct detail_access;
};

// Backward lambdas capture input storages to keep forward values alive for as
// long as the tape needs them.
struct detail_access {
  using StoragePtr = std::shared_ptr<const Tensor::Storage>;
  static StoragePtr storage(const Tensor& t) { return t.s_; }
  static const std::vector<double>& data_of(const StoragePtr& s) { return s->data; }
};

// Gradient map keyed by tensor storage identity. Absent entries read as zeros
// of the queried tensor's shape.
class Gradients {
 public:
  Tensor at(const Tensor& param) const {
    auto it = by_storage_.find(param.storage_id());
    if (it == by_storage_.end()) return Tensor::zeros(param.shape());
    return Tensor(param.shape(), it->second);
  }

  bool contains(const Tensor& param) const {
    return by_storage_.count(param.storage_id()) != 0;
  }

 private:
  std::unordered_map<const void*, std::vector<double>> by_storage_;
  friend class GradTape;
};

// Reverse-mode tape. Construction makes this the active tape for the current
// thread (nesting restores the previous one). Ops record a node per output;
// node order is creation order, so reversing it is a valid reverse topological
// order. One tape per thread; distinct tapes may run on distinct threads.
class GradTape {
 public:
  GradTape() : prev_(active_ref()) { active_ref() = this; }
  ~GradTape() { active_ref() = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_ref(); }

  Gradients backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  (loss.defined() ? Tensor::shape_string(loss.shape()) : "[]"));
    }
    auto it = index_.find(loss.storage_id());
    if (it == index_.end()) {
      throw std::invalid_argument("backward: loss tensor was not produced on this tape");
    }
    grads_.assign(nodes_.size(), {});
    grad_buffer(it->second, 1)[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, grads_[i]);
    }
    Gradients out;
    for (const auto& [sid, node] : leaves_) {
      if (!grads_[static_cast<std::size_t>(node)].empty()) {
        out.by_storage_.emplace(sid, grads_[static_cast<std::size_t>(node)]);
      }
    }
    grads_.clear();
    return out;
  }

  // --- recording interface used by the ops below ---

  using BackwardFn = std::function<void(GradTape&, const std::vector<double>&)>;

  // Node for an op input: reuses the node of a prior result or leaf, otherwise
  // registers the tensor as a new leaf. Registered storages are pinned for the
  // tape's lifetime so storage addresses stay unique as node keys.
  int input_node(const Tensor& t) {
    auto it = index_.find(t.storage_id());
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.size(), nullptr});
    index_.emplace(t.storage_id(), id);
    leaves_.emplace_back(t.storage_id(), id);
    pinned_.push_back(detail_access_storage(t));
    return id;
  }

  int result_node(const Tensor& out, BackwardFn backward) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{out.size(), std::move(backward)});
    index_.emplace(out.storage_id(), id);
    pinned_.push_back(detail_access_storage(out));
    return id;
  }

  std::vector<double>& grad_buffer(int node, std::size_t size) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(size, 0.0);
    return g;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t size;
    BackwardFn backward;  // null for leaves
  };

  static GradTape*& active_ref() {
    thread_local GradTape* active = nullptr;
    return active;
  }

  static std::shared_ptr<const void> detail_access_storage(const Tensor& t) { return t.s_; }

  GradTape* prev_ = nullptr;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const void*, int> index_;
  std::vector<std::pair<const void*, int>> leaves_;
  std::vector<std::shared_ptr<const void>> pinned_;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_string(a.shape()) + " vs " +
                                Tensor::shape_string(b.shape()));
  }
}

inline bool taping(std::initializer_list<const Tensor*> inputs) {
  if (GradTape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  Tensor out(a.shape(), std::move(y), a.requires_grad() || b.requires_grad());
  if (detail::taping({&a, &b})) {
    GradTape& t = *GradTape::active();
    const int ai = a.requires_grad() ? t.input_node(a) : -1;
    const int bi = b.requires_grad() ? t.input_node(b) : -1;
    const std::size_t n = a.size();
    t.result_node(out, [ai, bi, n](GradTape& tape, const std::vector<double>& g) {
      if (ai >= 0) {
        auto& ga = tape.grad_buffer(ai, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bi >= 0) {
        auto& gb = tape.grad_buffer(bi, n);
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  Tensor out(a.shape(), std::move(y), a.requires_grad() || b.requires_grad());
  if (detail::taping({&a, &b})) {
    GradTape& t = *GradTape::active();
    const int ai = a.requires_grad() ? t.input_node(a) : -1;
    const int bi = b.requires_grad() ? t.input_node(b) : -1;
    auto as = detail_access::storage(a);
    auto bs = detail_access::storage(b);
    t.result_node(out, [ai, bi, as, bs](GradTape& tape, const std::vector<double>& g) {
      const auto& av = detail_access::data_of(as);
      const auto& bv = detail_access::data_of(bs);
      if (ai >= 0) {
        auto& ga = tape.grad_buffer(ai, av.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (bi >= 0) {
        auto& gb = tape.grad_buffer(bi, bv.size());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

// y = scale * x + shift, scalar coefficients
inline Tensor affine(const Tensor& x, double scale, double shift = 0.0) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = scale * x[i] + shift;
  Tensor out(x.shape(), std::move(y), x.requires_grad());
  if (detail::taping({&x})) {
    GradTape& t = *GradTape::active();
    const int xi = t.input_node(x);
    const std::size_t n = x.size();
    t.result_node(out, [xi, n, scale](GradTape& tape, const std::vector<double>& g) {
      auto& gx = tape.grad_buffer(xi, n);
      for (std::size_t i = 0; i < n; ++i) gx[i] += scale * g[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  Tensor out(x.shape(), std::move(y), x.requires_grad());
  if (detail::taping({&x})) {
    GradTape& t = *GradTape::active();
    const int xi = t.input_node(x);
    auto xs = detail_access::storage(x);
    // subgradient at 0 is 0
    t.result_node(out, [xi, xs](GradTape& tape, const std::vector<double>& g) {
      const auto& xv = detail_access::data_of(xs);
      auto& gx = tape.grad_buffer(xi, xv.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  Tensor out = Tensor({1}, {acc}, x.requires_grad());
  if (detail::taping({&x})) {
    GradTape& t = *GradTape::active();
    const int xi = t.input_node(x);
    const std::size_t n = x.size();
    t.result_node(out, [xi, n](GradTape& tape, const std::vector<double>& g) {
      auto& gx = tape.grad_buffer(xi, n);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution / pooling
// ---------------------------------------------------------------------------

// Cross-correlation (no kernel flip), the usual deep-learning convention;
// the loop oracles in the tests assume the same.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                     int padding, int dilation) {
  if (input.rank() != 3 || kernel.rank() != 4) {
    throw std::invalid_argument("conv2d: expected input [C,H,W] and kernel [Co,Ci,kH,kW], got " +
                                Tensor::shape_string(input.shape()) + " and " +
                                Tensor::shape_string(kernel.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive, got " + std::to_string(stride));
  if (dilation < 1) throw std::invalid_argument("conv2d: dilation must be positive, got " + std::to_string(dilation));
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative, got " + std::to_string(padding));

  const std::size_t ci = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kci != ci) {
    throw std::invalid_argument("conv2d: shape mismatch, input " + Tensor::shape_string(input.shape()) +
                                " vs kernel " + Tensor::shape_string(kernel.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != co) {
    throw std::invalid_argument("conv2d: shape mismatch, bias " + Tensor::shape_string(bias.shape()) +
                                " vs kernel " + Tensor::shape_string(kernel.shape()));
  }
  const long heff = static_cast<long>(h) + 2L * padding;
  const long weff = static_cast<long>(w) + 2L * padding;
  const long kheff = static_cast<long>(dilation) * (static_cast<long>(kh) - 1) + 1;
  const long kweff = static_cast<long>(dilation) * (static_cast<long>(kw) - 1) + 1;
  if (heff < kheff || weff < kweff) {
    throw std::invalid_argument("conv2d: effective kernel " + std::to_string(kheff) + "x" +
                                std::to_string(kweff) + " exceeds padded input " + std::to_string(heff) +
                                "x" + std::to_string(weff));
  }
  const std::size_t ho = static_cast<std::size_t>((heff - kheff) / stride + 1);
  const std::size_t wo = static_cast<std::size_t>((weff - kweff) / stride + 1);

  std::vector<double> out(co * ho * wo);
  const double* xv = input.data().data();
  const double* kv = kernel.data().data();
  for (std::size_t oc = 0; oc < co; ++oc) {
    const double b = bias[oc];
    double* obase = out.data() + oc * ho * wo;
    for (std::size_t i = 0; i < ho * wo; ++i) obase[i] = b;
    for (std::size_t icn = 0; icn < ci; ++icn) {
      const double* xbase = xv + icn * h * w;
      const double* kbase = kv + (oc * ci + icn) * kh * kw;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double kw_val = kbase[ky * kw + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky) * dilation;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const double* xrow = xbase + static_cast<std::size_t>(iy) * w;
            double* orow = obase + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kx) * dilation;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              orow[ox] += kw_val * xrow[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }

  Tensor result({co, ho, wo}, std::move(out),
                input.requires_grad() || kernel.requires_grad() || bias.requires_grad());
  if (detail::taping({&input, &kernel, &bias})) {
    GradTape& t = *GradTape::active();
    const int xi = input.requires_grad() ? t.input_node(input) : -1;
    const int ki = kernel.requires_grad() ? t.input_node(kernel) : -1;
    const int bi = bias.requires_grad() ? t.input_node(bias) : -1;
    auto xs = detail_access::storage(input);
    auto ks = detail_access::storage(kernel);
    t.result_node(result, [=](GradTape& tape, const std::vector<double>& g) {
      const auto& xd = detail_access::data_of(xs);
      const auto& kd = detail_access::data_of(ks);
      std::vector<double>* gx = xi >= 0 ? &tape.grad_buffer(xi, xd.size()) : nullptr;
      std::vector<double>* gk = ki >= 0 ? &tape.grad_buffer(ki, kd.size()) : nullptr;
      std::vector<double>* gb = bi >= 0 ? &tape.grad_buffer(bi, co) : nullptr;
      for (std::size_t oc = 0; oc < co; ++oc) {
        const double* gbase = g.data() + oc * ho * wo;
        if (gb) {
          double acc = 0.0;
          for (std::size_t i = 0; i < ho * wo; ++i) acc += gbase[i];
          (*gb)[oc] += acc;
        }
        if (!gx && !gk) continue;
        for (std::size_t icn = 0; icn < ci; ++icn) {
          const double* xbase = xd.data() + icn * h * w;
          const std::size_t kofs = (oc * ci + icn) * kh * kw;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double kw_val = kd[kofs + ky * kw + kx];
              double kacc = 0.0;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky) * dilation;
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                const double* grow = gbase + oy * wo;
                const std::size_t xrow = icn * h * w + static_cast<std::size_t>(iy) * w;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const long ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kx) * dilation;
                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                  if (gk) kacc += grow[ox] * xbase[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
                  if (gx) (*gx)[xrow + static_cast<std::size_t>(ix)] += grow[ox] * kw_val;
                }
              }
              if (gk) (*gk)[kofs + ky * kw + kx] += kacc;
            }
          }
        }
      }
    });
  }
  return result;
}

// Backward routes each window's gradient to the first maximal element in
// row-major order.
inline Tensor maxpool2d(const Tensor& input, int window, int stride) {
  if (input.rank() != 3) {
    throw std::invalid_argument("maxpool2d: expected input [C,H,W], got " +
                                Tensor::shape_string(input.shape()));
  }
  if (window < 1) throw std::invalid_argument("maxpool2d: window must be positive, got " + std::to_string(window));
  if (stride < 1) throw std::invalid_argument("maxpool2d: stride must be positive, got " + std::to_string(stride));
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (static_cast<std::size_t>(window) > h || static_cast<std::size_t>(window) > w) {
    throw std::invalid_argument("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                                Tensor::shape_string(input.shape()));
  }
  const std::size_t ho = (h - static_cast<std::size_t>(window)) / static_cast<std::size_t>(stride) + 1;
  const std::size_t wo = (w - static_cast<std::size_t>(window)) / static_cast<std::size_t>(stride) + 1;

  std::vector<double> out(c * ho * wo);
  std::vector<std::uint32_t> argmax(c * ho * wo);
  const double* xv = input.data().data();
  for (std::size_t cc = 0; cc < c; ++cc) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t y0 = oy * static_cast<std::size_t>(stride);
        const std::size_t x0 = ox * static_cast<std::size_t>(stride);
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t dy = 0; dy < static_cast<std::size_t>(window); ++dy) {
          for (std::size_t dx = 0; dx < static_cast<std::size_t>(window); ++dx) {
            const std::size_t idx = cc * h * w + (y0 + dy) * w + (x0 + dx);
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        out[cc * ho * wo + oy * wo + ox] = best;
        argmax[cc * ho * wo + oy * wo + ox] = static_cast<std::uint32_t>(best_idx);
      }
    }
  }

  Tensor result({c, ho, wo}, std::move(out), input.requires_grad());
  if (detail::taping({&input})) {
    GradTape& t = *GradTape::active();
    const int xi = t.input_node(input);
    const std::size_t n = input.size();
    t.result_node(result, [xi, n, am = std::move(argmax)](GradTape& tape, const std::vector<double>& g) {
      auto& gx = tape.grad_buffer(xi, n);
      for (std::size_t i = 0; i < g.size(); ++i) gx[am[i]] += g[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// metric-space ops
// ---------------------------------------------------------------------------

inline constexpr double kCosineEps = 1e-8;

// Per-location cosine of feature columns against a single vector. A zero-norm
// side yields similarity 0 via the epsilon guard rather than NaN.
inline Tensor cosine_similarity_map(const Tensor& features, const Tensor& prototype) {
  if (features.rank() != 3 || prototype.rank() != 1) {
    throw std::invalid_argument("cosine_similarity_map: expected features [D,H,W] and prototype [D], got " +
                                Tensor::shape_string(features.shape()) + " and " +
                                Tensor::shape_string(prototype.shape()));
  }
  const std::size_t d = features.dim(0), h = features.dim(1), w = features.dim(2);
  if (prototype.dim(0) != d) {
    throw std::invalid_argument("cosine_similarity_map: shape mismatch, features " +
                                Tensor::shape_string(features.shape()) + " vs prototype " +
                                Tensor::shape_string(prototype.shape()));
  }
  const std::size_t hw = h * w;
  const double* fv = features.data().data();
  const double* pv = prototype.data().data();

  double pnorm2 = 0.0;
  for (std::size_t k = 0; k < d; ++k) pnorm2 += pv[k] * pv[k];
  const double pnorm = std::sqrt(pnorm2);

  std::vector<double> dots(hw, 0.0), fnorm(hw, 0.0), out(hw);
  for (std::size_t k = 0; k < d; ++k) {
    const double* frow = fv + k * hw;
    const double pk = pv[k];
    for (std::size_t i = 0; i < hw; ++i) {
      dots[i] += frow[i] * pk;
      fnorm[i] += frow[i] * frow[i];
    }
  }
  for (std::size_t i = 0; i < hw; ++i) {
    fnorm[i] = std::sqrt(fnorm[i]);
    out[i] = dots[i] / (fnorm[i] * pnorm + kCosineEps);
  }

  Tensor result({h, w}, std::move(out), features.requires_grad() || prototype.requires_grad());
  if (detail::taping({&features, &prototype})) {
    GradTape& t = *GradTape::active();
    const int fi = features.requires_grad() ? t.input_node(features) : -1;
    const int pi = prototype.requires_grad() ? t.input_node(prototype) : -1;
    auto fs = detail_access::storage(features);
    auto ps = detail_access::storage(prototype);
    t.result_node(result, [=, dots = std::move(dots), fnorm = std::move(fnorm)](
                              GradTape& tape, const std::vector<double>& g) {
      const auto& fd = detail_access::data_of(fs);
      const auto& pd = detail_access::data_of(ps);
      std::vector<double>* gf = fi >= 0 ? &tape.grad_buffer(fi, fd.size()) : nullptr;
      std::vector<double>* gp = pi >= 0 ? &tape.grad_buffer(pi, pd.size()) : nullptr;
      for (std::size_t i = 0; i < hw; ++i) {
        const double s = fnorm[i] * pnorm + kCosineEps;
        // d cos / d f = p/s - dot * pnorm * f / (fnorm * s^2), second term
        // vanishing in the fnorm -> 0 limit (dot is 0 there as well)
        const double c1 = g[i] / s;
        const double cf = fnorm[i] > 0.0 ? g[i] * dots[i] * pnorm / (fnorm[i] * s * s) : 0.0;
        const double cp = pnorm > 0.0 ? g[i] * dots[i] * fnorm[i] / (pnorm * s * s) : 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double fki = fd[k * hw + i];
          if (gf) (*gf)[k * hw + i] += c1 * pd[k] - cf * fki;
          if (gp) (*gp)[k] += c1 * fki - cp * pd[k];
        }
      }
    });
  }
  return result;
}

// Per-location squared Euclidean distance to a single vector.
inline Tensor squared_euclidean_map(const Tensor& features, const Tensor& prototype) {
  if (features.rank() != 3 || prototype.rank() != 1 || features.dim(0) != prototype.dim(0)) {
    throw std::invalid_argument("squared_euclidean_map: shape mismatch, features " +
                                Tensor::shape_string(features.shape()) + " vs prototype " +
                                Tensor::shape_string(prototype.shape()));
  }
  const std::size_t d = features.dim(0), h = features.dim(1), w = features.dim(2);
  const std::size_t hw = h * w;
  const double* fv = features.data().data();
  const double* pv = prototype.data().data();
  std::vector<double> out(hw, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double* frow = fv + k * hw;
    const double pk = pv[k];
    for (std::size_t i = 0; i < hw; ++i) {
      const double diff = frow[i] - pk;
      out[i] += diff * diff;
    }
  }
  Tensor result({h, w}, std::move(out), features.requires_grad() || prototype.requires_grad());
  if (detail::taping({&features, &prototype})) {
    GradTape& t = *GradTape::active();
    const int fi = features.requires_grad() ? t.input_node(features) : -1;
    const int pi = prototype.requires_grad() ? t.input_node(prototype) : -1;
    auto fs = detail_access::storage(features);
    auto ps = detail_access::storage(prototype);
    t.result_node(result, [=](GradTape& tape, const std::vector<double>& g) {
      const auto& fd = detail_access::data_of(fs);
      const auto& pd = detail_access::data_of(ps);
      std::vector<double>* gf = fi >= 0 ? &tape.grad_buffer(fi, fd.size()) : nullptr;
      std::vector<double>* gp = pi >= 0 ? &tape.grad_buffer(pi, pd.size()) : nullptr;
      for (std::size_t k = 0; k < d; ++k) {
        const double pk = pd[k];
        double pacc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          const double diff = fd[k * hw + i] - pk;
          if (gf) (*gf)[k * hw + i] += 2.0 * diff * g[i];
          pacc -= 2.0 * diff * g[i];
        }
        if (gp) (*gp)[k] += pacc;
      }
    });
  }
  return result;
}

// Mean of feature columns over selected spatial locations (masked average
// pooling kernel). The selection itself is constant data, not differentiated.
inline Tensor masked_spatial_mean(const Tensor& features, const std::vector<std::uint8_t>& select) {
  if (features.rank() != 3) {
    throw std::invalid_argument("masked_spatial_mean: expected features [D,H,W], got " +
                                Tensor::shape_string(features.shape()));
  }
  const std::size_t d = features.dim(0), hw = features.dim(1) * features.dim(2);
  if (select.size() != hw) {
    throw std::invalid_argument("masked_spatial_mean: selection size " + std::to_string(select.size()) +
                                " does not match spatial size " + std::to_string(hw));
  }
  std::size_t count = 0;
  for (std::uint8_t s : select) count += s ? 1 : 0;
  if (count == 0) {
    throw std::invalid_argument("masked_spatial_mean: empty selection");
  }
  const double inv = 1.0 / static_cast<double>(count);
  const double* fv = features.data().data();
  std::vector<double> out(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double* frow = fv + k * hw;
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      if (select[i]) acc += frow[i];
    }
    out[k] = acc * inv;
  }
  Tensor result({d}, std::move(out), features.requires_grad());
  if (detail::taping({&features})) {
    GradTape& t = *GradTape::active();
    const int fi = t.input_node(features);
    const std::size_t n = features.size();
    t.result_node(result, [fi, n, hw, inv, select](GradTape& tape, const std::vector<double>& g) {
      auto& gf = tape.grad_buffer(fi, n);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double gk = g[k] * inv;
        for (std::size_t i = 0; i < hw; ++i) {
          if (select[i]) gf[k * hw + i] += gk;
        }
      }
    });
  }
  return result;
}

// [H,W] maps stacked into [J,H,W]
inline Tensor stack_maps(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw std::invalid_argument("stack_maps: no maps given");
  if (maps[0].rank() != 2) {
    throw std::invalid_argument("stack_maps: expected [H,W] maps, got " +
                                Tensor::shape_string(maps[0].shape()));
  }
  const std::size_t h = maps[0].dim(0), w = maps[0].dim(1);
  bool req = false;
  for (const Tensor& m : maps) {
    detail::check_same_shape(m, maps[0], "stack_maps");
    req = req || m.requires_grad();
  }
  const std::size_t hw = h * w;
  std::vector<double> out(maps.size() * hw);
  for (std::size_t j = 0; j < maps.size(); ++j) {
    std::copy(maps[j].data().begin(), maps[j].data().end(), out.begin() + static_cast<long>(j * hw));
  }
  Tensor result({maps.size(), h, w}, std::move(out), req);
  if (req && GradTape::active()) {
    GradTape& t = *GradTape::active();
    std::vector<int> ids(maps.size(), -1);
    for (std::size_t j = 0; j < maps.size(); ++j) {
      if (maps[j].requires_grad()) ids[j] = t.input_node(maps[j]);
    }
    t.result_node(result, [ids, hw](GradTape& tape, const std::vector<double>& g) {
      for (std::size_t j = 0; j < ids.size(); ++j) {
        if (ids[j] < 0) continue;
        auto& gm = tape.grad_buffer(ids[j], hw);
        const double* gt = g.data() + j * hw;
        for (std::size_t i = 0; i < hw; ++i) gm[i] += gt[i];
      }
    });
  }
  return result;
}

// Rows of x placed at the given channel slots of a [channels,H,W] tensor,
// zeros elsewhere. Keeps excluded-prototype channels at exact probability 0.
inline Tensor scatter_channels(const Tensor& x, const std::vector<std::size_t>& slots,
                               std::size_t channels) {
  if (x.rank() != 3 || slots.size() != x.dim(0)) {
    throw std::invalid_argument("scatter_channels: need one slot per input channel");
  }
  const std::size_t h = x.dim(1), w = x.dim(2), hw = h * w;
  for (std::size_t s : slots) {
    if (s >= channels) throw std::invalid_argument("scatter_channels: slot out of range");
  }
  std::vector<double> out(channels * hw, 0.0);
  for (std::size_t j = 0; j < slots.size(); ++j) {
    std::copy_n(x.data().begin() + static_cast<long>(j * hw), hw,
                out.begin() + static_cast<long>(slots[j] * hw));
  }
  Tensor result({channels, h, w}, std::move(out), x.requires_grad());
  if (detail::taping({&x})) {
    GradTape& t = *GradTape::active();
    const int xi = t.input_node(x);
    const std::size_t n = x.size();
    t.result_node(result, [xi, n, slots, hw](GradTape& tape, const std::vector<double>& g) {
      auto& gx = tape.grad_buffer(xi, n);
      for (std::size_t j = 0; j < slots.size(); ++j) {
        const double* gt = g.data() + slots[j] * hw;
        for (std::size_t i = 0; i < hw; ++i) gx[j * hw + i] += gt[i];
      }
    });
  }
  return result;
}

// Max-subtracted softmax along one axis.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                                Tensor::shape_string(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t k = shape[axis];

  std::vector<double> out(x.size());
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * k * inner + i;
      double m = xv[base];
      for (std::size_t j = 1; j < k; ++j) m = std::max(m, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double e = std::exp(xv[base + j * inner] - m);
        out[base + j * inner] = e;
        z += e;
      }
      const double invz = 1.0 / z;
      for (std::size_t j = 0; j < k; ++j) out[base + j * inner] *= invz;
    }
  }

  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (detail::taping({&x})) {
    GradTape& t = *GradTape::active();
    const int xi = t.input_node(x);
    auto ys = detail_access::storage(result);
    t.result_node(result, [xi, ys, outer, inner, k](GradTape& tape, const std::vector<double>& g) {
      const auto& yv = detail_access::data_of(ys);
      auto& gx = tape.grad_buffer(xi, yv.size());
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * k * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j) dot += g[base + j * inner] * yv[base + j * inner];
          for (std::size_t j = 0; j < k; ++j) {
            gx[base + j * inner] += yv[base + j * inner] * (g[base + j * inner] - dot);
          }
        }
      }
    });
  }
  return result;
}

inline constexpr double kLogClamp = 1e-12;

// Mean negative log-likelihood of per-pixel class probabilities against an
// integer label grid. Channels flagged invalid carry probability 0; strict
// mode rejects labels that point at them, lenient mode lets the log clamp
// bound the penalty. Gradient is zero where the clamp is active.
inline Tensor cross_entropy_mean(const Tensor& probs, const std::vector<std::uint8_t>& labels,
                                 const std::vector<std::uint8_t>& valid, bool strict) {
  if (probs.rank() != 3) {
    throw std::invalid_argument("cross_entropy_mean: expected probs [J,H,W], got " +
                                Tensor::shape_string(probs.shape()));
  }
  const std::size_t j = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
  if (labels.size() != hw) {
    throw std::invalid_argument("cross_entropy_mean: label grid size " + std::to_string(labels.size()) +
                                " does not match spatial size " + std::to_string(hw));
  }
  if (valid.size() != j) {
    throw std::invalid_argument("cross_entropy_mean: validity size mismatch");
  }
  const double* pv = probs.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    const std::size_t l = labels[i];
    if (l >= j) {
      throw std::invalid_argument("cross_entropy_mean: label " + std::to_string(l) +
                                  " out of range for " + std::to_string(j) + " channels");
    }
    if (!valid[l] && strict) {
      throw std::invalid_argument("cross_entropy_mean: label " + std::to_string(l) +
                                  " refers to an excluded prototype channel");
    }
    acc -= std::log(std::max(pv[l * hw + i], kLogClamp));
  }
  const double invn = 1.0 / static_cast<double>(hw);
  Tensor result({1}, {acc * invn}, probs.requires_grad());
  if (detail::taping({&probs})) {
    GradTape& t = *GradTape::active();
    const int pi = t.input_node(probs);
    auto ps = detail_access::storage(probs);
    t.result_node(result, [pi, ps, labels, hw, invn](GradTape& tape, const std::vector<double>& g) {
      const auto& pd = detail_access::data_of(ps);
      auto& gp = tape.grad_buffer(pi, pd.size());
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = static_cast<std::size_t>(labels[i]) * hw + i;
        if (pd[idx] > kLogClamp) gp[idx] -= g[0] * invn / pd[idx];
      }
    });
  }
  return result;
}

// Nearest-neighbor resize by integer index scaling: source index (i*H)/H2.
// Identical tensor when the target equals the source size. Not differentiated;
// used to reconcile feature-resolution predictions with image resolution.
inline Tensor nearest_resize(const Tensor& input, std::size_t h2, std::size_t w2) {
  if (input.rank() != 3) {
    throw std::invalid_argument("nearest_resize: expected input [C,H,W], got " +
                                Tensor::shape_string(input.shape()));
  }
  if (h2 == 0 || w2 == 0) throw std::invalid_argument("nearest_resize: target size must be positive");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  std::vector<double> out(c * h2 * w2);
  const double* xv = input.data().data();
  for (std::size_t cc = 0; cc < c; ++cc) {
    for (std::size_t y = 0; y < h2; ++y) {
      const std::size_t sy = y * h / h2;
      for (std::size_t x = 0; x < w2; ++x) {
        const std::size_t sx = x * w / w2;
        out[(cc * h2 + y) * w2 + x] = xv[(cc * h + sy) * w + sx];
      }
    }
  }
  return Tensor({c, h2, w2}, std::move(out));
}

}  // namespace protoseg
