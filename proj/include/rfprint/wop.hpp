#pragma once

// Filter-tap optimisation: maximise the summed target-class activation of a
// classifier over a slice of inputs, with respect to the complex taps of an
// FIR filter applied to every input. Gradients are propagated through the
// filter analytically; the ascent uses nonlinear conjugate gradients with
// the Fletcher-Reeves update and a secant line search.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rfprint/cnn.hpp"
#include "rfprint/errors.hpp"
#include "rfprint/iqcore.hpp"

namespace rfprint::wop {

namespace detail {
using rfprint::detail::require;
}  // namespace detail

/// S >= 1 consecutive classifier inputs of equal length.
struct Slice {
  std::vector<IQFrame> inputs;

  Slice() = default;
  explicit Slice(std::vector<IQFrame> xs) : inputs(std::move(xs)) { validate(); }

  std::size_t size() const noexcept { return inputs.size(); }
  std::size_t input_length() const { return inputs.front().size(); }

  void validate() const {
    detail::require(!inputs.empty(), "Slice: needs at least one input");
    for (const auto& x : inputs)
      detail::require(x.size() == inputs.front().size(), "Slice: inputs differ in length");
  }
};

/// B >= 1 slices with a common slice size.
struct Batch {
  std::vector<Slice> slices;

  Batch() = default;
  explicit Batch(std::vector<Slice> ss) : slices(std::move(ss)) { validate(); }

  std::size_t size() const noexcept { return slices.size(); }

  void validate() const {
    detail::require(!slices.empty(), "Batch: needs at least one slice");
    for (const auto& s : slices) {
      s.validate();
      detail::require(s.size() == slices.front().size(), "Batch: slices differ in size");
    }
  }
};

/// Partial derivatives of the objective with respect to the real and
/// imaginary part of every tap.
struct TapGradient {
  std::vector<double> d_re;
  std::vector<double> d_im;

  explicit TapGradient(std::size_t m = 0) : d_re(m, 0.0), d_im(m, 0.0) {}

  std::size_t size() const noexcept { return d_re.size(); }

  double squared_norm() const {
    double s = 0.0;
    for (std::size_t k = 0; k < size(); ++k) s += d_re[k] * d_re[k] + d_im[k] * d_im[k];
    return s;
  }

  /// Gradient packed as d_re + j d_im, the ascent direction in tap space.
  std::vector<Complex> as_complex() const {
    std::vector<Complex> out(size());
    for (std::size_t k = 0; k < size(); ++k) out[k] = {d_re[k], d_im[k]};
    return out;
  }
};

struct ValueAndGradient {
  double value = 0.0;
  TapGradient gradient;
};

/// Anything the optimiser can climb: a scalar function of the taps with its
/// tap gradient.
template <class F>
concept TapObjective = requires(const F& f, const FirFilter& phi) {
  { f.value(phi) } -> std::convertible_to<double>;
  { f.value_and_gradient(phi) } -> std::same_as<ValueAndGradient>;
};

/// Re <g, p>: the directional derivative along p.
inline double directional_derivative(const TapGradient& g, const std::vector<Complex>& p) {
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) s += g.d_re[k] * p[k].real() + g.d_im[k] * p[k].imag();
  return s;
}

inline FirFilter step_along(const FirFilter& phi, const std::vector<Complex>& p, double alpha) {
  std::vector<Complex> taps = phi.vec();
  for (std::size_t k = 0; k < taps.size(); ++k) taps[k] += alpha * p[k];
  return FirFilter(std::move(taps));
}

// ---------------------------------------------------------------------------
// Classifier objective

namespace detail {

inline void check_slice_model(const cnn::Model& model, const Slice& slice, std::size_t target) {
  slice.validate();
  const auto in = model.input_shape();
  require(in.c == 1 && in.h == 2 && in.w == slice.input_length(),
          "slice inputs of length " + std::to_string(slice.input_length()) +
              " do not match the model input (1, 2, " + std::to_string(in.w) + ")");
  require(target < model.num_classes(), "target class out of range");
}

}  // namespace detail

/// Sum over the slice of f_target(apply_fir(x_s, phi)). Divide by S for the
/// per-slice average activation.
inline double objective(const cnn::Model& model, const Slice& slice, const FirFilter& phi,
                        std::size_t target) {
  detail::check_slice_model(model, slice, target);
  double sum = 0.0;
  for (const auto& x : slice.inputs)
    sum += cnn::forward(model, cnn::to_tensor(apply_fir(x, phi))).probs[target];
  return sum;
}

/// Objective and tap gradient in one pass. For each input the classifier
/// gives d f / d xhat (I row and Q row); the chain rule through
///   xhat^R[n] = sum_k phiR_k x^R[n-k] - phiI_k x^I[n-k]
///   xhat^I[n] = sum_k phiR_k x^I[n-k] + phiI_k x^R[n-k]
/// uses d xhat^R/d phiR_k = d xhat^I/d phiI_k = x^R[n-k] and
/// d xhat^I/d phiR_k = -d xhat^R/d phiI_k = x^I[n-k], with x[m < 0] = 0.
inline ValueAndGradient objective_and_gradient(const cnn::Model& model, const Slice& slice,
                                               const FirFilter& phi, std::size_t target) {
  detail::check_slice_model(model, slice, target);
  const std::size_t m = phi.size();
  ValueAndGradient out{0.0, TapGradient(m)};
  for (const auto& x : slice.inputs) {
    const std::size_t n = x.size();
    const auto cg = cnn::class_gradient(model, cnn::to_tensor(apply_fir(x, phi)), target);
    out.value += cg.prob;
    const double* g_re = cg.grad.data.data();
    const double* g_im = g_re + n;
    for (std::size_t k = 0; k < m && k < n; ++k) {
      double d_re = 0.0;
      double d_im = 0.0;
      for (std::size_t i = k; i < n; ++i) {
        const double x_re = x[i - k].real();
        const double x_im = x[i - k].imag();
        d_re += g_re[i] * x_re + g_im[i] * x_im;
        d_im += g_re[i] * (-x_im) + g_im[i] * x_re;
      }
      out.gradient.d_re[k] += d_re;
      out.gradient.d_im[k] += d_im;
    }
  }
  return out;
}

inline TapGradient tap_gradient(const cnn::Model& model, const Slice& slice, const FirFilter& phi,
                                std::size_t target) {
  return objective_and_gradient(model, slice, phi, target).gradient;
}

/// Binds a read-only model, a slice and a target class into a TapObjective.
class SliceObjective {
 public:
  SliceObjective(const cnn::Model& model, const Slice& slice, std::size_t target)
      : model_(&model), slice_(&slice), target_(target) {
    detail::check_slice_model(model, slice, target);
  }

  double value(const FirFilter& phi) const { return objective(*model_, *slice_, phi, target_); }
  ValueAndGradient value_and_gradient(const FirFilter& phi) const {
    return objective_and_gradient(*model_, *slice_, phi, target_);
  }

 private:
  const cnn::Model* model_;
  const Slice* slice_;
  std::size_t target_;
};

// ---------------------------------------------------------------------------
// Line search

struct LineSearchOptions {
  std::size_t max_iterations = 10;
  /// First trial step, as a Euclidean step length in tap space.
  double initial_step_norm = 0.05;
  double alpha_max = 1e6;
  /// Stop once |g(alpha)| <= tolerance * |g(0)|.
  double tolerance = 1e-10;
  std::size_t max_backtracks = 40;
};

struct LineSearchResult {
  double alpha = 0.0;
  double value = 0.0;
  std::size_t evaluations = 0;
};

/// Secant iteration on g(alpha) = d/dalpha F(phi + alpha p), where the
/// curvature is approximated from successive directional derivatives. The
/// iterate is clamped to [0, alpha_max]; when the secant update is unusable
/// (flat or convex model) the step is doubled instead. If no evaluated point
/// beats F(phi) the step is halved from the first trial until one does,
/// else alpha = 0. The result always satisfies F(phi + alpha p) >= F(phi).
template <TapObjective F>
LineSearchResult line_search(const F& f, const FirFilter& phi, const std::vector<Complex>& p,
                             double f0, double g0, const LineSearchOptions& opts = {}) {
  LineSearchResult res{0.0, f0, 0};
  double pnorm = 0.0;
  for (const auto& c : p) pnorm += std::norm(c);
  pnorm = std::sqrt(pnorm);
  if (!(pnorm > 0.0) || !(g0 > 0.0)) return res;

  const double first = std::min(opts.initial_step_norm / pnorm, opts.alpha_max);
  double a_prev = 0.0;
  double g_prev = g0;
  double a = first;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    const auto vg = f.value_and_gradient(step_along(phi, p, a));
    ++res.evaluations;
    const double g = directional_derivative(vg.gradient, p);
    if (std::isfinite(vg.value) && vg.value > res.value) {
      res.value = vg.value;
      res.alpha = a;
    }
    if (std::abs(g) <= opts.tolerance * std::abs(g0)) break;

    double next;
    const double slope = (g - g_prev) / (a - a_prev);
    if (std::isfinite(slope) && slope < 0.0) {
      next = a - g / slope;
    } else if (g > 0.0) {
      next = 2.0 * a;
    } else {
      // past a maximum without curvature information: bisect back
      next = 0.5 * (a + a_prev);
    }
    if (!std::isfinite(next)) break;
    next = std::clamp(next, 0.0, opts.alpha_max);
    if (std::abs(next - a) <= 1e-15 * std::max(1.0, a)) break;
    a_prev = a;
    g_prev = g;
    a = next;
  }
  if (res.alpha > 0.0) return res;

  double b = first;
  for (std::size_t i = 0; i < opts.max_backtracks; ++i) {
    b *= 0.5;
    const double v = f.value(step_along(phi, p, b));
    ++res.evaluations;
    if (std::isfinite(v) && v > f0) {
      res.alpha = b;
      res.value = v;
      return res;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Nonlinear conjugate gradient ascent

struct NcgOptions {
  double gradient_tolerance = 1e-8;
  /// Beta above this value restarts with the plain gradient.
  double beta_restart = 1e3;
  LineSearchOptions line_search{};
};

struct NcgState {
  FirFilter phi;                   // phi^(t)
  std::vector<Complex> direction;  // p^(t)
  TapGradient gradient;            // g_t, the gradient at phi^(t-1)
  double prev_grad_sqnorm = 0.0;   // ||g_t||^2, denominator of the next beta
  double beta = 0.0;
  double alpha = 0.0;
  double value = std::numeric_limits<double>::quiet_NaN();  // objective at phi
  std::size_t t = 0;
  std::size_t t_max = 30;
  bool converged = false;
  /// Forces beta = 0 on the next step (set after the iterate is moved
  /// outside the line search, e.g. by a projection).
  bool restart_next = false;

  /// p^(0) = 0 and beta^(1) = 0.
  static NcgState start(FirFilter phi0, std::size_t t_max) {
    NcgState s;
    s.direction.assign(phi0.size(), Complex{});
    s.gradient = TapGradient(phi0.size());
    s.phi = std::move(phi0);
    s.t_max = t_max;
    return s;
  }
};

/// One iteration:
///   g_t   = grad F(phi^(t-1))
///   beta  = ||g_t||^2 / ||g_{t-1}||^2  (0 on the first step and on restarts)
///   p^(t) = g_t + beta p^(t-1)
///   phi^(t) = phi^(t-1) + alpha p^(t),  alpha from line_search.
/// A gradient norm at or below the tolerance marks the state converged and
/// leaves phi unchanged.
template <TapObjective F>
NcgState ncg_step(NcgState state, const F& f, const NcgOptions& opts = {}) {
  detail::require(state.t < state.t_max, "ncg_step: iteration budget exhausted");
  detail::require(state.direction.size() == state.phi.size(), "ncg_step: malformed state");
  auto vg = f.value_and_gradient(state.phi);
  const double gsq = vg.gradient.squared_norm();
  state.value = vg.value;
  if (std::sqrt(gsq) <= opts.gradient_tolerance) {
    state.gradient = std::move(vg.gradient);
    state.converged = true;
    return state;
  }

  const bool first = state.t == 0;
  double beta = 0.0;
  // a zero previous gradient leaves beta undefined: restart
  if (!first && !state.restart_next && state.prev_grad_sqnorm > 0.0)
    beta = gsq / state.prev_grad_sqnorm;
  if (beta > opts.beta_restart) beta = 0.0;

  const auto g = vg.gradient.as_complex();
  std::vector<Complex> p(g.size());
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = g[k] + beta * state.direction[k];
  double slope = directional_derivative(vg.gradient, p);
  if (!(slope > 0.0)) {
    beta = 0.0;
    p = g;
    slope = gsq;
  }

  const auto ls = line_search(f, state.phi, p, vg.value, slope, opts.line_search);
  state.phi = step_along(state.phi, p, ls.alpha);
  state.value = ls.value;
  state.direction = std::move(p);
  state.gradient = std::move(vg.gradient);
  state.prev_grad_sqnorm = gsq;
  state.beta = beta;
  state.alpha = ls.alpha;
  state.restart_next = false;
  ++state.t;
  return state;
}

struct OptimizeOptions {
  std::size_t num_taps = 5;
  std::size_t t_max = 30;
  /// Upper bound on epsilon_of(phi); +infinity disables the projection.
  double eps_max = 0.2;
  std::size_t eps_bins = kEpsilonBins;
  std::optional<FirFilter> warm_start{};
  NcgOptions ncg{};
};

struct IterationRecord {
  double value = 0.0;  // objective at the iterate after projection
  double gradient_norm = 0.0;
  double beta = 0.0;
  double alpha = 0.0;
  bool projected = false;
};

struct OptimizeResult {
  FirFilter phi;                    // best iterate seen
  std::vector<double> trace;        // best objective so far; trace[0] is the start
  std::vector<IterationRecord> iterations;
  NcgState state;                   // final optimiser state
  double objective_before = 0.0;
  double objective_after = 0.0;
  bool converged = false;
};

/// Runs up to t_max NCG iterations from the warm start (identity when none),
/// projecting every iterate onto {epsilon_of(phi) <= eps_max}.
template <TapObjective F>
OptimizeResult optimize_fir(const F& f, const OptimizeOptions& opts) {
  detail::require(opts.num_taps >= 1, "optimize_fir: needs at least one tap");
  FirFilter phi0 = opts.warm_start ? *opts.warm_start : FirFilter::identity(opts.num_taps);
  detail::require(phi0.size() == opts.num_taps,
                  "optimize_fir: warm start has " + std::to_string(phi0.size()) +
                      " taps, expected " + std::to_string(opts.num_taps));
  if (std::isfinite(opts.eps_max)) phi0 = project_epsilon(phi0, opts.eps_max, opts.eps_bins);

  OptimizeResult res;
  res.objective_before = f.value(phi0);
  res.phi = phi0;
  res.objective_after = res.objective_before;
  res.trace.push_back(res.objective_before);
  res.state = NcgState::start(phi0, opts.t_max);
  res.state.value = res.objective_before;

  while (res.state.t < opts.t_max) {
    res.state = ncg_step(std::move(res.state), f, opts.ncg);
    if (res.state.converged) {
      res.converged = true;
      break;
    }
    IterationRecord rec;
    rec.gradient_norm = std::sqrt(res.state.prev_grad_sqnorm);
    rec.beta = res.state.beta;
    rec.alpha = res.state.alpha;
    if (std::isfinite(opts.eps_max)) {
      auto projected = project_epsilon(res.state.phi, opts.eps_max, opts.eps_bins);
      if (!(projected == res.state.phi)) {
        res.state.phi = std::move(projected);
        res.state.value = f.value(res.state.phi);
        res.state.restart_next = true;
        rec.projected = true;
      }
    }
    rec.value = res.state.value;
    res.iterations.push_back(rec);
    if (res.state.value > res.objective_after) {
      res.objective_after = res.state.value;
      res.phi = res.state.phi;
    }
    res.trace.push_back(res.objective_after);
  }
  return res;
}

inline OptimizeResult optimize_fir(const cnn::Model& model, const Slice& slice, std::size_t target,
                                   const OptimizeOptions& opts) {
  return optimize_fir(SliceObjective(model, slice, target), opts);
}

// ---------------------------------------------------------------------------
// Epoch triggers

/// Starts a new optimisation epoch on a timer, on an accuracy floor, or on
/// either when both are set.
struct EpochTrigger {
  std::optional<std::chrono::duration<double>> period{};
  std::optional<double> accuracy_floor{};

  void validate() const {
    detail::require(period || accuracy_floor, "EpochTrigger: no condition configured");
    if (period) detail::require(period->count() > 0.0, "EpochTrigger: period must be positive");
    if (accuracy_floor)
      detail::require(*accuracy_floor > 0.0 && *accuracy_floor < 1.0,
                      "EpochTrigger: accuracy floor must lie in (0, 1)");
  }
};

/// Timer fires when elapsed >= period; the accuracy floor fires when
/// recent_psa < floor (strictly).
inline bool check_trigger(const EpochTrigger& trig, std::chrono::duration<double> elapsed,
                          std::optional<double> recent_psa) {
  trig.validate();
  if (trig.period && elapsed >= *trig.period) return true;
  if (trig.accuracy_floor && recent_psa && *recent_psa < *trig.accuracy_floor) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Feedback message sent back to the transmitter

struct FilterMessage {
  int device_id = 0;
  std::size_t epoch_index = 0;
  FirFilter taps;
  double epsilon = 0.0;
  double objective_before = 0.0;
  double objective_after = 0.0;
};

inline nlohmann::json to_json(const FilterMessage& msg) {
  nlohmann::json taps = nlohmann::json::array();
  for (const auto& t : msg.taps.taps()) taps.push_back({t.real(), t.imag()});
  return {{"device_id", msg.device_id},
          {"epoch_index", msg.epoch_index},
          {"M", msg.taps.size()},
          {"taps", taps},
          {"epsilon", msg.epsilon},
          {"objective_before", msg.objective_before},
          {"objective_after", msg.objective_after}};
}

inline FilterMessage filter_message_from_json(const nlohmann::json& j) {
  try {
    FilterMessage msg;
    msg.device_id = j.at("device_id").get<int>();
    msg.epoch_index = j.at("epoch_index").get<std::size_t>();
    std::vector<Complex> taps;
    for (const auto& t : j.at("taps")) taps.emplace_back(t.at(0).get<double>(), t.at(1).get<double>());
    detail::require(taps.size() == j.at("M").get<std::size_t>(),
                    "filter message: M does not match the number of taps");
    msg.taps = FirFilter(std::move(taps));
    msg.epsilon = j.at("epsilon").get<double>();
    msg.objective_before = j.at("objective_before").get<double>();
    msg.objective_after = j.at("objective_after").get<double>();
    return msg;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("filter message: ") + e.what());
  }
}

}  // namespace rfprint::wop
