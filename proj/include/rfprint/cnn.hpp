#pragma once

// Small convolutional classifier over (1, 2, N) I/Q tensors: row 0 holds the
// in-phase samples, row 1 the quadrature samples. Double precision
// throughout. Forward/backward passes, Adam training with L2 weight decay,
// gradients of one softmax output with respect to the input, and a
// versioned binary model format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <json.hpp>

#include "rfprint/errors.hpp"
#include "rfprint/iqcore.hpp"

namespace rfprint::cnn {

namespace detail {
using rfprint::detail::require;
}  // namespace detail

using Rng = std::mt19937_64;

/// Row-major real tensor.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shp, std::vector<double> values)
      : shape(std::move(shp)), data(std::move(values)) {
    validate();
  }

  static Tensor zeros(std::vector<std::size_t> shp) {
    const auto n = std::accumulate(shp.begin(), shp.end(), std::size_t{1}, std::multiplies<>());
    return Tensor(std::move(shp), std::vector<double>(n, 0.0));
  }

  std::size_t size() const noexcept { return data.size(); }

  void validate() const {
    const auto n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    detail::require(!shape.empty() && n == data.size(),
                    "Tensor: data length does not match shape");
    detail::require(std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); }),
                    "Tensor: non-finite value");
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Lays a frame out as a (1, 2, N) tensor: I row then Q row.
inline Tensor to_tensor(const IQFrame& x) {
  const std::size_t n = x.size();
  std::vector<double> d(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = x[i].real();
    d[n + i] = x[i].imag();
  }
  return Tensor({1, 2, n}, std::move(d));
}

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Architecture description

struct Conv2DSpec {
  std::size_t filters = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  friend bool operator==(const Conv2DSpec&, const Conv2DSpec&) = default;
};
struct ReluSpec {
  friend bool operator==(const ReluSpec&, const ReluSpec&) = default;
};
/// Stride-1 max pooling. Columns use valid windows (width shrinks by
/// pool_w - 1). With same_rows the row extent is kept and windows are
/// clipped at the bottom edge, so a 2-row I/Q map stays 2 rows tall.
struct MaxPoolSpec {
  std::size_t pool_h = 2;
  std::size_t pool_w = 2;
  bool same_rows = true;
  friend bool operator==(const MaxPoolSpec&, const MaxPoolSpec&) = default;
};
struct DenseSpec {
  std::size_t units = 0;
  friend bool operator==(const DenseSpec&, const DenseSpec&) = default;
};
struct DropoutSpec {
  double rate = 0.5;
  friend bool operator==(const DropoutSpec&, const DropoutSpec&) = default;
};

using LayerSpec = std::variant<Conv2DSpec, ReluSpec, MaxPoolSpec, DenseSpec, DropoutSpec>;

struct ModelSpec {
  std::size_t input_channels = 1;
  std::size_t input_height = 2;
  std::size_t input_width = 288;
  std::size_t num_classes = 2;
  std::vector<LayerSpec> layers;

  /// Conv(f1, 1x7) ReLU MaxPool(2x2) Conv(f2, 2x7) ReLU MaxPool(2x2)
  /// Dense(d1) ReLU Dropout Dense(d2) ReLU Dropout Dense(classes).
  static ModelSpec conv_stack(std::size_t classes, std::size_t width, std::size_t conv1,
                              std::size_t conv2, std::size_t dense1, std::size_t dense2,
                              double dropout) {
    ModelSpec s;
    s.input_width = width;
    s.num_classes = classes;
    s.layers = {Conv2DSpec{conv1, 1, 7}, ReluSpec{}, MaxPoolSpec{},
                Conv2DSpec{conv2, 2, 7}, ReluSpec{}, MaxPoolSpec{},
                DenseSpec{dense1},       ReluSpec{}, DropoutSpec{dropout},
                DenseSpec{dense2},       ReluSpec{}, DropoutSpec{dropout},
                DenseSpec{classes}};
    return s;
  }

  /// The testbed network: 50 filters per conv layer, dense 256 and 80,
  /// dropout 0.5.
  static ModelSpec testbed(std::size_t classes, std::size_t width = 288) {
    return conv_stack(classes, width, 50, 50, 256, 80, 0.5);
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline nlohmann::json to_json(const ModelSpec& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers) {
    std::visit(
        [&layers](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, Conv2DSpec>)
            layers.push_back({{"type", "conv2d"}, {"filters", v.filters},
                              {"kernel", {v.kernel_h, v.kernel_w}}});
          else if constexpr (std::is_same_v<T, ReluSpec>)
            layers.push_back({{"type", "relu"}});
          else if constexpr (std::is_same_v<T, MaxPoolSpec>)
            layers.push_back({{"type", "maxpool2d"}, {"pool", {v.pool_h, v.pool_w}},
                              {"same_rows", v.same_rows}});
          else if constexpr (std::is_same_v<T, DenseSpec>)
            layers.push_back({{"type", "dense"}, {"units", v.units}});
          else
            layers.push_back({{"type", "dropout"}, {"rate", v.rate}});
        },
        l);
  }
  return {{"input", {s.input_channels, s.input_height, s.input_width}},
          {"classes", s.num_classes},
          {"layers", layers}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  const auto& in = j.at("input");
  s.input_channels = in.at(0).get<std::size_t>();
  s.input_height = in.at(1).get<std::size_t>();
  s.input_width = in.at(2).get<std::size_t>();
  s.num_classes = j.at("classes").get<std::size_t>();
  for (const auto& l : j.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv2d")
      s.layers.push_back(Conv2DSpec{l.at("filters").get<std::size_t>(),
                                    l.at("kernel").at(0).get<std::size_t>(),
                                    l.at("kernel").at(1).get<std::size_t>()});
    else if (type == "relu")
      s.layers.push_back(ReluSpec{});
    else if (type == "maxpool2d")
      s.layers.push_back(MaxPoolSpec{l.at("pool").at(0).get<std::size_t>(),
                                     l.at("pool").at(1).get<std::size_t>(),
                                     l.value("same_rows", true)});
    else if (type == "dense")
      s.layers.push_back(DenseSpec{l.at("units").get<std::size_t>()});
    else if (type == "dropout")
      s.layers.push_back(DropoutSpec{l.at("rate").get<double>()});
    else
      throw InvalidInput("ModelSpec: unknown layer type '" + type + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Model

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// A layer with its trainable parameters. Non-parametric layers keep empty
/// weight and bias vectors.
struct Layer {
  LayerSpec spec;
  Shape3 in;
  Shape3 out;
  std::vector<double> weights;
  std::vector<double> bias;
};

class Model {
 public:
  Model() = default;

  /// Builds the layer chain, checks that shapes line up and initialises
  /// weights uniformly in +-sqrt(6 / fan_in) (+-0.1 sqrt(3 / fan_in) for the
  /// output layer, so a fresh model starts near uniform); biases start at zero.
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    build_shapes();
    Rng rng(seed);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      if (l.weights.empty()) continue;
      const std::size_t fan_in = l.weights.size() / l.bias.size();
      const bool last = i + 1 == layers_.size();
      const double limit = last ? 0.1 * std::sqrt(3.0 / static_cast<double>(fan_in))
                                : std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (auto& w : l.weights) w = u(rng);
    }
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t num_classes() const noexcept { return spec_.num_classes; }
  Shape3 input_shape() const {
    return {spec_.input_channels, spec_.input_height, spec_.input_width};
  }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
    return n;
  }

 private:
  void build_shapes() {
    detail::require(spec_.num_classes >= 2, "ModelSpec: needs at least two classes");
    detail::require(!spec_.layers.empty(), "ModelSpec: no layers");
    Shape3 cur = input_shape();
    detail::require(cur.size() > 0, "ModelSpec: empty input shape");
    layers_.clear();
    for (const auto& ls : spec_.layers) {
      Layer l{ls, cur, cur, {}, {}};
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, Conv2DSpec>) {
              detail::require(v.filters > 0 && v.kernel_h > 0 && v.kernel_w > 0,
                              "Conv2D: invalid parameters");
              detail::require(v.kernel_h <= cur.h && v.kernel_w <= cur.w,
                              "Conv2D: kernel larger than input (" + std::to_string(v.kernel_h) +
                                  "x" + std::to_string(v.kernel_w) + " over " +
                                  std::to_string(cur.h) + "x" + std::to_string(cur.w) + ")");
              l.out = {v.filters, cur.h - v.kernel_h + 1, cur.w - v.kernel_w + 1};
              l.weights.assign(v.filters * cur.c * v.kernel_h * v.kernel_w, 0.0);
              l.bias.assign(v.filters, 0.0);
            } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
              detail::require(v.pool_h > 0 && v.pool_w > 0 && v.pool_w <= cur.w &&
                                  (v.same_rows || v.pool_h <= cur.h),
                              "MaxPool: window larger than input");
              l.out = {cur.c, v.same_rows ? cur.h : cur.h - v.pool_h + 1, cur.w - v.pool_w + 1};
            } else if constexpr (std::is_same_v<T, DenseSpec>) {
              detail::require(v.units > 0, "Dense: units must be positive");
              l.out = {v.units, 1, 1};
              l.weights.assign(v.units * cur.size(), 0.0);
              l.bias.assign(v.units, 0.0);
            } else if constexpr (std::is_same_v<T, DropoutSpec>) {
              detail::require(v.rate >= 0.0 && v.rate < 1.0, "Dropout: rate must be in [0, 1)");
            }
          },
          ls);
      cur = l.out;
      layers_.push_back(std::move(l));
    }
    detail::require(cur.size() == spec_.num_classes,
                    "ModelSpec: final layer width " + std::to_string(cur.size()) +
                        " does not match class count " + std::to_string(spec_.num_classes));
  }

  ModelSpec spec_;
  std::vector<Layer> layers_;
};

/// Per-layer parameter gradients, same layout as the model.
struct Gradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> bias;

  static Gradients like(const Model& m) {
    Gradients g;
    for (const auto& l : m.layers()) {
      g.weights.emplace_back(l.weights.size(), 0.0);
      g.bias.emplace_back(l.bias.size(), 0.0);
    }
    return g;
  }
};

/// Activations recorded by a forward pass, consumed by backward.
struct Trace {
  std::vector<std::vector<double>> inputs;  // input of layer i; last entry = logits
  std::vector<std::vector<std::uint32_t>> argmax;
  std::vector<std::vector<double>> masks;
  std::vector<double> probs;
};

namespace detail {

inline void conv_forward(const Layer& l, const Conv2DSpec& s, std::span<const double> in,
                         std::vector<double>& out) {
  const auto [ic, ih, iw] = l.in;
  const auto [oc, oh, ow] = l.out;
  out.assign(oc * oh * ow, 0.0);
  for (std::size_t o = 0; o < oc; ++o) {
    double* op = out.data() + o * oh * ow;
    std::fill(op, op + oh * ow, l.bias[o]);
    for (std::size_t c = 0; c < ic; ++c) {
      for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
        for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
          const double w = l.weights[((o * ic + c) * s.kernel_h + ky) * s.kernel_w + kx];
          for (std::size_t y = 0; y < oh; ++y) {
            const double* ip = in.data() + (c * ih + y + ky) * iw + kx;
            double* orow = op + y * ow;
            for (std::size_t x = 0; x < ow; ++x) orow[x] += w * ip[x];
          }
        }
      }
    }
  }
}

inline void conv_backward(const Layer& l, const Conv2DSpec& s, std::span<const double> in,
                          std::span<const double> dout, std::vector<double>* din,
                          std::vector<double>* dw, std::vector<double>* db) {
  const auto [ic, ih, iw] = l.in;
  const auto [oc, oh, ow] = l.out;
  if (din) din->assign(ic * ih * iw, 0.0);
  for (std::size_t o = 0; o < oc; ++o) {
    const double* gp = dout.data() + o * oh * ow;
    if (db) {
      double acc = 0.0;
      for (std::size_t i = 0; i < oh * ow; ++i) acc += gp[i];
      (*db)[o] += acc;
    }
    for (std::size_t c = 0; c < ic; ++c) {
      for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
        for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
          const std::size_t wi = ((o * ic + c) * s.kernel_h + ky) * s.kernel_w + kx;
          const double w = l.weights[wi];
          double acc = 0.0;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::size_t base = (c * ih + y + ky) * iw + kx;
            const double* grow = gp + y * ow;
            if (dw) {
              const double* ip = in.data() + base;
              for (std::size_t x = 0; x < ow; ++x) acc += grow[x] * ip[x];
            }
            if (din) {
              double* dp = din->data() + base;
              for (std::size_t x = 0; x < ow; ++x) dp[x] += w * grow[x];
            }
          }
          if (dw) (*dw)[wi] += acc;
        }
      }
    }
  }
}

inline void pool_forward(const Layer& l, const MaxPoolSpec& s, std::span<const double> in,
                         std::vector<double>& out, std::vector<std::uint32_t>& argmax) {
  const auto [c, ih, iw] = l.in;
  const auto [oc, oh, ow] = l.out;
  out.assign(oc * oh * ow, 0.0);
  argmax.assign(out.size(), 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      const std::size_t ylast = std::min(y + s.pool_h, ih);
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (ch * ih + y) * iw + x;
        double bv = in[best];
        // strict '>' keeps the first maximum on ties
        for (std::size_t yy = y; yy < ylast; ++yy) {
          for (std::size_t xx = x; xx < x + s.pool_w; ++xx) {
            const std::size_t idx = (ch * ih + yy) * iw + xx;
            if (in[idx] > bv) {
              bv = in[idx];
              best = idx;
            }
          }
        }
        const std::size_t oi = (ch * oh + y) * ow + x;
        out[oi] = bv;
        argmax[oi] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

inline void dense_forward(const Layer& l, std::span<const double> in, std::vector<double>& out) {
  const std::size_t n_in = l.in.size();
  const std::size_t n_out = l.out.size();
  out.assign(n_out, 0.0);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double* wr = l.weights.data() + j * n_in;
    double acc = l.bias[j];
    for (std::size_t i = 0; i < n_in; ++i) acc += wr[i] * in[i];
    out[j] = acc;
  }
}

inline void dense_backward(const Layer& l, std::span<const double> in,
                           std::span<const double> dout, std::vector<double>* din,
                           std::vector<double>* dw, std::vector<double>* db) {
  const std::size_t n_in = l.in.size();
  const std::size_t n_out = l.out.size();
  if (din) din->assign(n_in, 0.0);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double g = dout[j];
    if (db) (*db)[j] += g;
    if (g == 0.0) continue;
    const double* wr = l.weights.data() + j * n_in;
    if (dw) {
      double* dwr = dw->data() + j * n_in;
      for (std::size_t i = 0; i < n_in; ++i) dwr[i] += g * in[i];
    }
    if (din) {
      double* dp = din->data();
      for (std::size_t i = 0; i < n_in; ++i) dp[i] += g * wr[i];
    }
  }
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

inline void check_input(const Model& m, const Tensor& x) {
  const auto s = m.input_shape();
  const bool ok = (x.shape.size() == 3 && x.shape[0] == s.c && x.shape[1] == s.h &&
                   x.shape[2] == s.w) ||
                  (x.shape.size() == 2 && s.c == 1 && x.shape[0] == s.h && x.shape[1] == s.w);
  require(ok && x.data.size() == s.size(),
          "forward: input shape does not match model input (" + std::to_string(s.c) + ", " +
              std::to_string(s.h) + ", " + std::to_string(s.w) + ")");
}

}  // namespace detail

/// Runs the network and records what backward needs. Train mode applies
/// inverted dropout with masks drawn from `rng` (required in train mode).
inline Trace forward_trace(const Model& m, const Tensor& x, Mode mode, Rng* rng = nullptr) {
  detail::check_input(m, x);
  detail::require(mode == Mode::eval || rng != nullptr, "forward: train mode needs an rng");
  const auto& layers = m.layers();
  Trace t;
  t.inputs.resize(layers.size() + 1);
  t.argmax.resize(layers.size());
  t.masks.resize(layers.size());
  t.inputs[0] = x.data;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const auto& in = t.inputs[i];
    auto& out = t.inputs[i + 1];
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Conv2DSpec>) {
            detail::conv_forward(l, s, in, out);
          } else if constexpr (std::is_same_v<T, ReluSpec>) {
            out.resize(in.size());
            for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            detail::pool_forward(l, s, in, out, t.argmax[i]);
          } else if constexpr (std::is_same_v<T, DenseSpec>) {
            detail::dense_forward(l, in, out);
          } else {
            if (mode == Mode::eval || s.rate == 0.0) {
              out = in;
            } else {
              std::bernoulli_distribution keep(1.0 - s.rate);
              const double scale = 1.0 / (1.0 - s.rate);
              auto& mask = t.masks[i];
              mask.resize(in.size());
              out.resize(in.size());
              for (std::size_t k = 0; k < in.size(); ++k) {
                mask[k] = keep(*rng) ? scale : 0.0;
                out[k] = in[k] * mask[k];
              }
            }
          }
        },
        l.spec);
  }
  t.probs = detail::softmax(t.inputs.back());
  return t;
}

/// Backpropagates dL/dlogits. Accumulates parameter gradients into `grads`
/// when given and returns dL/dinput when `want_input` is set.
inline std::vector<double> backward(const Model& m, const Trace& t, std::vector<double> dlogits,
                                    Gradients* grads, bool want_input) {
  const auto& layers = m.layers();
  std::vector<double> g = std::move(dlogits);
  std::vector<double> next;
  for (std::size_t ii = layers.size(); ii-- > 0;) {
    const auto& l = layers[ii];
    const auto& in = t.inputs[ii];
    const bool need_din = ii > 0 || want_input;
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Conv2DSpec>) {
            detail::conv_backward(l, s, in, g, need_din ? &next : nullptr,
                                  grads ? &grads->weights[ii] : nullptr,
                                  grads ? &grads->bias[ii] : nullptr);
          } else if constexpr (std::is_same_v<T, ReluSpec>) {
            next.resize(g.size());
            for (std::size_t k = 0; k < g.size(); ++k) next[k] = in[k] > 0.0 ? g[k] : 0.0;
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            next.assign(l.in.size(), 0.0);
            const auto& am = t.argmax[ii];
            for (std::size_t k = 0; k < g.size(); ++k) next[am[k]] += g[k];
          } else if constexpr (std::is_same_v<T, DenseSpec>) {
            detail::dense_backward(l, in, g, need_din ? &next : nullptr,
                                   grads ? &grads->weights[ii] : nullptr,
                                   grads ? &grads->bias[ii] : nullptr);
          } else {
            const auto& mask = t.masks[ii];
            next = g;
            if (!mask.empty())
              for (std::size_t k = 0; k < next.size(); ++k) next[k] *= mask[k];
          }
        },
        l.spec);
    std::swap(g, next);
  }
  return want_input ? g : std::vector<double>{};
}

struct ClassProbabilities {
  std::vector<double> probs;

  std::size_t argmax() const {
    return static_cast<std::size_t>(
        std::distance(probs.begin(), std::max_element(probs.begin(), probs.end())));
  }
};

inline ClassProbabilities forward(const Model& m, const Tensor& x, Mode mode = Mode::eval,
                                  Rng* rng = nullptr) {
  return {forward_trace(m, x, mode, rng).probs};
}

/// Softmax output f_c and its gradient with respect to every input element.
struct ClassGradient {
  double prob = 0.0;
  Tensor grad;
};

inline ClassGradient class_gradient(const Model& m, const Tensor& x, std::size_t target) {
  detail::require(target < m.num_classes(),
                  "input_gradient: class " + std::to_string(target) + " out of range [0, " +
                      std::to_string(m.num_classes()) + ")");
  const auto t = forward_trace(m, x, Mode::eval);
  // d f_c / d z_j = f_c (delta_cj - f_j)
  std::vector<double> dz(t.probs.size());
  const double fc = t.probs[target];
  for (std::size_t j = 0; j < dz.size(); ++j) dz[j] = fc * ((j == target ? 1.0 : 0.0) - t.probs[j]);
  auto gin = backward(m, t, std::move(dz), nullptr, true);
  return {fc, Tensor(x.shape, std::move(gin))};
}

inline Tensor input_gradient(const Model& m, const Tensor& x, std::size_t target) {
  return class_gradient(m, x, target).grad;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 1e-4;
  double l2_lambda = 1e-4;  // adds l2_lambda * w to every weight gradient (biases excluded)
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    detail::require(learning_rate > 0.0, "TrainConfig: learning_rate must be positive");
    detail::require(l2_lambda >= 0.0, "TrainConfig: l2_lambda must be non-negative");
    detail::require(batch_size >= 1 && epochs >= 1, "TrainConfig: batch_size and epochs >= 1");
  }
};

struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;  // 0-based class indices
};

struct AdamState {
  Gradients m;
  Gradients v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every parameter.
inline void adam_step(Model& model, const Gradients& g, AdamState& st, const TrainConfig& cfg) {
  if (st.step == 0) {
    st.m = Gradients::like(model);
    st.v = Gradients::like(model);
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  auto update = [&](std::vector<double>& p, const std::vector<double>& gr, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gr[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gr[k] * gr[k];
      const double mh = m[k] / c1;
      const double vh = v[k] / c2;
      p[k] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_epsilon);
    }
  };
  auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    update(layers[i].weights, g.weights[i], st.m.weights[i], st.v.weights[i]);
    update(layers[i].bias, g.bias[i], st.m.bias[i], st.v.bias[i]);
  }
}

/// Mean cross-entropy over the batch plus (lambda / 2) * sum w^2, and the
/// matching parameter gradients.
inline double batch_loss_and_gradients(const Model& model, const Dataset& data,
                                       std::span<const std::size_t> batch, double l2_lambda,
                                       Mode mode, Rng* rng, Gradients& grads) {
  grads = Gradients::like(model);
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto idx : batch) {
    const auto t = forward_trace(model, data.inputs[idx], mode, rng);
    const auto y = data.labels[idx];
    loss -= std::log(std::max(t.probs[y], std::numeric_limits<double>::min()));
    std::vector<double> dz = t.probs;
    dz[y] -= 1.0;
    for (auto& v : dz) v *= inv;
    backward(model, t, std::move(dz), &grads, false);
  }
  loss *= inv;
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (std::size_t k = 0; k < layers[i].weights.size(); ++k) {
      const double w = layers[i].weights[k];
      loss += 0.5 * l2_lambda * w * w;
      grads.weights[i][k] += l2_lambda * w;
    }
  }
  return loss;
}

struct TrainResult {
  std::vector<double> loss_curve;  // mean minibatch objective per epoch
};

/// Minibatch Adam. Shuffling and dropout masks are driven by cfg.seed, so a
/// fixed seed reproduces the loss curve exactly.
inline TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  detail::require(!data.inputs.empty(), "train: empty dataset");
  detail::require(data.inputs.size() == data.labels.size(), "train: inputs/labels size mismatch");
  for (auto y : data.labels)
    detail::require(y < model.num_classes(), "train: label out of range");
  Rng rng(cfg.seed);
  AdamState st;
  TrainResult res;
  std::vector<std::size_t> order(data.inputs.size());
  std::iota(order.begin(), order.end(), 0);
  Gradients grads;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + b, end - b);
      total += batch_loss_and_gradients(model, data, batch, cfg.l2_lambda, Mode::train, &rng, grads);
      adam_step(model, grads, st, cfg);
      ++batches;
    }
    res.loss_curve.push_back(total / static_cast<double>(batches));
  }
  return res;
}

inline double accuracy(const Model& model, const Dataset& data) {
  detail::require(!data.inputs.empty(), "accuracy: empty dataset");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.inputs.size(); ++i)
    ok += forward(model, data.inputs[i]).argmax() == data.labels[i];
  return static_cast<double>(ok) / static_cast<double>(data.inputs.size());
}

// ---------------------------------------------------------------------------
// Persistence
//
//   bytes 0..7   magic "RFPMODEL"
//   u32          format version
//   u64          length of the JSON architecture text, then the text
//   per layer with parameters, in declaration order:
//     u64 weight count, f64[count] weights, u64 bias count, f64[count] bias
// All integers and floats little-endian.

inline constexpr char kModelMagic[8] = {'R', 'F', 'P', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <class T>
void write_le(std::ostream& os, T v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw CorruptFile("model file truncated while reading " + what);
  return byteswap_if_big(v);
}

inline void write_block(std::ostream& os, const std::vector<double>& v) {
  write_le<std::uint64_t>(os, v.size());
  for (double d : v) write_le(os, d);
}

inline void read_block(std::istream& is, std::vector<double>& v, const std::string& what) {
  const auto n = read_le<std::uint64_t>(is, what + " size");
  if (n != v.size())
    throw CorruptFile("model file: " + what + " has " + std::to_string(n) +
                      " values, architecture expects " + std::to_string(v.size()));
  for (auto& d : v) d = read_le<double>(is, what);
}

}  // namespace detail

inline void save(const Model& m, const std::string& path,
                 std::uint32_t version = kModelFormatVersion) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(kModelMagic, sizeof(kModelMagic));
  detail::write_le<std::uint32_t>(os, version);
  const std::string text = to_json(m.spec()).dump();
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& l : m.layers()) {
    if (l.weights.empty()) continue;
    detail::write_block(os, l.weights);
    detail::write_block(os, l.bias);
  }
  if (!os) throw Error("write to '" + path + "' failed");
}

inline Model load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
    throw CorruptFile("'" + path + "' is not a model file (bad magic)");
  const auto version = detail::read_le<std::uint32_t>(is, "version");
  if (version != kModelFormatVersion) throw VersionMismatch(version, kModelFormatVersion);
  const auto len = detail::read_le<std::uint64_t>(is, "architecture length");
  if (len > (1u << 24)) throw CorruptFile("model file: implausible architecture length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    throw CorruptFile("model file truncated in architecture text");
  ModelSpec spec;
  try {
    spec = model_spec_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("model file: bad architecture text: ") + e.what());
  }
  Model m(spec, 0);
  auto& layers = m.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weights.empty()) continue;
    detail::read_block(is, layers[i].weights, "layer " + std::to_string(i) + " weights");
    detail::read_block(is, layers[i].bias, "layer " + std::to_string(i) + " bias");
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw CorruptFile("model file has trailing bytes");
  return m;
}

}  // namespace rfprint::cnn
