#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sidae/losses.hpp"
#include "sidae/ops.hpp"
#include "sidae/rng.hpp"

namespace sidae {

using Fn64 = std::function<Tensor<double>(const Tensor<double>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t index = 0;  // coordinate of the worst error
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Backpropagated gradient of scalar f at x.
inline std::vector<double> analytic_gradient(const Fn64& f, const Tensor<double>& x) {
    auto leaf = x.detach();
    leaf.set_requires_grad(true);
    auto y = f(leaf);
    if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar, got " + shape_str(y.shape()));
    y.backward();
    if (!leaf.has_grad()) return std::vector<double>(x.numel(), 0.0);
    return {leaf.grad().begin(), leaf.grad().end()};
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
inline std::vector<double> numeric_gradient(const Fn64& f, const Tensor<double>& x, double h) {
    if (!(h > 0.0)) throw ParameterError("grad_check: h must be positive");
    NoGradGuard no_grad;
    auto probe = x.detach();
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + h;
        const double fp = f(probe).item();
        probe.data()[i] = orig - h;
        const double fm = f(probe).item();
        probe.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericalError("grad_check: non-finite function value at coordinate " + std::to_string(i));
        }
        out[i] = (fp - fm) / (2.0 * h);
    }
    return out;
}

inline GradCheckResult compare_gradients(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    GradCheckResult r;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        if (!std::isfinite(analytic[i])) {
            throw NumericalError("grad_check: non-finite analytic gradient at coordinate " + std::to_string(i));
        }
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-12});
        const double err = std::abs(analytic[i] - numeric[i]) / denom;
        if (err > r.max_rel_error || i == 0) r = {err, i, analytic[i], numeric[i]};
    }
    return r;
}

/// Analytic gradient of f against finite differences of `oracle`. The
/// oracle evaluates the same function with stopped branches held fixed.
inline GradCheckResult grad_check_detail(const Fn64& f, const Fn64& oracle, const Tensor<double>& x, double h = 1e-5) {
    return compare_gradients(analytic_gradient(f, x), numeric_gradient(oracle, x, h));
}

inline GradCheckResult grad_check_detail(const Fn64& f, const Tensor<double>& x, double h = 1e-5) {
    return grad_check_detail(f, f, x, h);
}

inline double grad_check(const Fn64& f, const Tensor<double>& x, double h = 1e-5) {
    return grad_check_detail(f, x, h).max_rel_error;
}

inline double grad_check(const Fn64& f, const Fn64& oracle, const Tensor<double>& x, double h = 1e-5) {
    return grad_check_detail(f, oracle, x, h).max_rel_error;
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

/// One randomized trial: draws shapes and values from rng, checks every
/// differentiable input, returns the worst result.
struct GradCase {
    std::string name;
    std::function<GradCheckResult(SeededRng&)> trial;
};

inline Tensor<double> random_tensor(Shape shape, SeededRng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(shape), std::move(v));
}

// Values bounded away from zero, for kinked ops.
inline Tensor<double> off_kink_tensor(Shape shape, SeededRng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.05, 1.0);
    return Tensor<double>::from(std::move(shape), std::move(v));
}

inline std::size_t pick(SeededRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

/// Contracts a non-scalar output with fixed random weights: checks the full
/// vector-Jacobian product.
inline Tensor<double> weighted_sum(const Tensor<double>& y, const Tensor<double>& weights) {
    return sum(mul(y, weights));
}

inline GradCheckResult worst(std::initializer_list<GradCheckResult> rs) {
    GradCheckResult w;
    for (const auto& r : rs)
        if (r.max_rel_error >= w.max_rel_error) w = r;
    return w;
}

/// Checks `op` against each of its inputs in turn, the others held fixed.
inline GradCheckResult check_inputs(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& op,
                                    const std::vector<Tensor<double>>& inputs) {
    GradCheckResult out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Fn64 f = [&, k](const Tensor<double>& xk) {
            auto args = inputs;
            args[k] = xk;
            return op(args);
        };
        auto r = grad_check_detail(f, inputs[k]);
        if (r.max_rel_error >= out.max_rel_error) out = r;
    }
    return out;
}

inline std::vector<GradCase> default_grad_cases() {
    using T = Tensor<double>;
    using Args = std::vector<T>;
    std::vector<GradCase> cases;
    auto elementwise = [](std::string name, std::function<T(const T&, const T&)> op) {
        return GradCase{name, [op](SeededRng& rng) {
                            Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
                            auto w = random_tensor(s, rng);
                            return check_inputs([&](const Args& a) { return weighted_sum(op(a[0], a[1]), w); },
                                                {random_tensor(s, rng), random_tensor(s, rng)});
                        }};
    };
    cases.push_back(elementwise("add", [](const T& a, const T& b) { return add(a, b); }));
    cases.push_back(elementwise("sub", [](const T& a, const T& b) { return sub(a, b); }));
    cases.push_back(elementwise("mul", [](const T& a, const T& b) { return mul(a, b); }));
    cases.push_back({"scale", [](SeededRng& rng) {
                         Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
                         auto w = random_tensor(s, rng);
                         const double c = rng.uniform(-2.0, 2.0);
                         return check_inputs([&](const Args& a) { return weighted_sum(scale(a[0], c), w); },
                                             {random_tensor(s, rng)});
                     }});
    cases.push_back({"relu", [](SeededRng& rng) {
                         Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
                         auto w = random_tensor(s, rng);
                         return check_inputs([&](const Args& a) { return weighted_sum(relu(a[0]), w); },
                                             {off_kink_tensor(s, rng)});
                     }});
    cases.push_back({"sigmoid", [](SeededRng& rng) {
                         Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
                         auto w = random_tensor(s, rng);
                         return check_inputs([&](const Args& a) { return weighted_sum(sigmoid(a[0]), w); },
                                             {random_tensor(s, rng, -3.0, 3.0)});
                     }});
    cases.push_back({"reshape", [](SeededRng& rng) {
                         const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4);
                         auto w = random_tensor({b, a}, rng);
                         return check_inputs([&](const Args& x) { return weighted_sum(reshape(x[0], {b, a}), w); },
                                             {random_tensor({a, b}, rng)});
                     }});
    cases.push_back({"flatten", [](SeededRng& rng) {
                         const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3), h = pick(rng, 1, 3);
                         auto w = random_tensor({n, c * h * h}, rng);
                         return check_inputs([&](const Args& x) { return weighted_sum(flatten(x[0]), w); },
                                             {random_tensor({n, c, h, h}, rng)});
                     }});
    cases.push_back({"sum", [](SeededRng& rng) {
                         return check_inputs([](const Args& x) { return sum(x[0]); },
                                             {random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)});
                     }});
    cases.push_back({"mean", [](SeededRng& rng) {
                         return check_inputs([](const Args& x) { return mean(x[0]); },
                                             {random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)});
                     }});
    cases.push_back({"global_avg_pool", [](SeededRng& rng) {
                         const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4), h = pick(rng, 1, 4);
                         auto w = random_tensor({n, c}, rng);
                         return check_inputs([&](const Args& x) { return weighted_sum(global_avg_pool(x[0]), w); },
                                             {random_tensor({n, c, h, h}, rng)});
                     }});
    cases.push_back({"matmul", [](SeededRng& rng) {
                         const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
                         auto w = random_tensor({m, n}, rng);
                         return check_inputs([&](const Args& x) { return weighted_sum(matmul(x[0], x[1]), w); },
                                             {random_tensor({m, k}, rng), random_tensor({k, n}, rng)});
                     }});
    cases.push_back({"linear", [](SeededRng& rng) {
                         const std::size_t b = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 4);
                         auto w = random_tensor({b, out}, rng);
                         return check_inputs([&](const Args& x) { return weighted_sum(linear(x[0], x[1], x[2]), w); },
                                             {random_tensor({b, in}, rng), random_tensor({out, in}, rng),
                                              random_tensor({out}, rng)});
                     }});
    cases.push_back({"add_channel_bias", [](SeededRng& rng) {
                         const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4), h = pick(rng, 1, 3);
                         auto w = random_tensor({n, c, h, h}, rng);
                         return check_inputs(
                             [&](const Args& x) { return weighted_sum(add_channel_bias(x[0], x[1]), w); },
                             {random_tensor({n, c, h, h}, rng), random_tensor({c}, rng)});
                     }});
    cases.push_back({"conv2d", [](SeededRng& rng) {
                         const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                         const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                         const std::size_t h = pick(rng, k, 6);
                         auto x = random_tensor({n, cin, h, h}, rng);
                         auto wt = random_tensor({cout, cin, k, k}, rng);
                         const Shape os = conv2d(x, wt, stride, pad).shape();
                         auto w = random_tensor(os, rng);
                         return check_inputs(
                             [&](const Args& a) { return weighted_sum(conv2d(a[0], a[1], stride, pad), w); }, {x, wt});
                     }});
    cases.push_back({"conv_transpose2d", [](SeededRng& rng) {
                         const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                         const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                         const std::size_t outpad = stride > 1 ? pick(rng, 0, 1) : 0;
                         const std::size_t h = pick(rng, 1, 4);
                         auto x = random_tensor({n, cin, h, h}, rng);
                         auto wt = random_tensor({cin, cout, 3, 3}, rng);
                         const Shape os = conv_transpose2d(x, wt, stride, pad, outpad).shape();
                         auto w = random_tensor(os, rng);
                         return check_inputs(
                             [&](const Args& a) {
                                 return weighted_sum(conv_transpose2d(a[0], a[1], stride, pad, outpad), w);
                             },
                             {x, wt});
                     }});
    auto bn_case = [](std::string name, bool spatial, Mode mode) {
        // Two values per channel normalize to +-1 whatever x is; the
        // gradient there is pure round-off, so batches start at three.
        return GradCase{name, [spatial, mode](SeededRng& rng) {
                            const std::size_t n = pick(rng, 3, 5), c = pick(rng, 1, 3), h = spatial ? pick(rng, 1, 3) : 0;
                            const Shape s = spatial ? Shape{n, c, h, h} : Shape{n, c};
                            auto w = random_tensor(s, rng);
                            RunningStats<double> stats(c);
                            for (std::size_t j = 0; j < c; ++j) {
                                stats.mean[j] = rng.uniform(-0.5, 0.5);
                                stats.var[j] = rng.uniform(0.5, 2.0);
                            }
                            return check_inputs(
                                [&](const Args& a) {
                                    RunningStats<double> scratch = stats;  // keep evaluations independent
                                    return weighted_sum(batch_norm(a[0], a[1], a[2], scratch, mode), w);
                                },
                                {random_tensor(s, rng, -2.0, 2.0), random_tensor({c}, rng, 0.5, 1.5),
                                 random_tensor({c}, rng)});
                        }};
    };
    cases.push_back(bn_case("batch_norm_train_2d", false, Mode::train));
    cases.push_back(bn_case("batch_norm_train_4d", true, Mode::train));
    cases.push_back(bn_case("batch_norm_eval", true, Mode::eval));
    cases.push_back({"cosine_similarity", [](SeededRng& rng) {
                         const std::size_t b = pick(rng, 1, 4), d = pick(rng, 2, 6);
                         auto w = random_tensor({b}, rng);
                         return check_inputs(
                             [&](const Args& x) { return weighted_sum(cosine_similarity(x[0], x[1]), w); },
                             {random_tensor({b, d}, rng), random_tensor({b, d}, rng)});
                     }});
    cases.push_back({"cross_entropy", [](SeededRng& rng) {
                         const std::size_t b = pick(rng, 1, 5), k = pick(rng, 2, 5);
                         std::vector<int> labels(b);
                         for (auto& l : labels) l = static_cast<int>(rng.below(k));
                         return check_inputs(
                             [&](const Args& x) { return cross_entropy(x[0], std::span<const int>(labels)); },
                             {random_tensor({b, k}, rng, -3.0, 3.0)});
                     }});
    cases.push_back({"stop_gradient", [](SeededRng& rng) {
                         // f(x) = sum(x * sg(x)^2): the stopped factor is held at x0 by the oracle.
                         auto x0 = random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
                         Fn64 f = [](const T& x) {
                             auto s = stop_gradient(x);
                             return sum(mul(x, mul(s, s)));
                         };
                         Fn64 oracle = [x0](const T& x) {
                             auto s = x0.detach();
                             return sum(mul(x, mul(s, s)));
                         };
                         return grad_check_detail(f, oracle, x0);
                     }});
    cases.push_back({"ncs_distance", [](SeededRng& rng) {
                         const std::size_t b = pick(rng, 1, 4), d = pick(rng, 2, 6);
                         return check_inputs([](const Args& x) { return ncs_distance(x[0], x[1]); },
                                             {random_tensor({b, d}, rng), random_tensor({b, d}, rng)});
                     }});
    cases.push_back({"mse_distance", [](SeededRng& rng) {
                         const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), 2, 2};
                         return check_inputs([](const Args& x) { return mse_distance(x[0], x[1]); },
                                             {random_tensor(s, rng), random_tensor(s, rng)});
                     }});
    cases.push_back({"simsiam_loss", [](SeededRng& rng) {
                         // p inputs are live; z inputs are targets, checked against a frozen-target oracle.
                         const std::size_t b = pick(rng, 1, 4), d = pick(rng, 2, 6);
                         Args in{random_tensor({b, d}, rng), random_tensor({b, d}, rng), random_tensor({b, d}, rng),
                                 random_tensor({b, d}, rng)};
                         auto live = check_inputs(
                             [&](const Args& x) { return simsiam_loss(x[0], x[1], in[2], in[3]).total; },
                             {in[0], in[1]});
                         // Shared z feeding both a live and a stopped path: z also drives p through p = z * m.
                         auto m = random_tensor({b, d}, rng);
                         Fn64 f = [&](const T& z) {
                             auto p = mul(z, m);
                             return simsiam_loss(p, p, z, z).total;
                         };
                         Fn64 oracle = [&](const T& z) {
                             auto p = mul(z, m);
                             return simsiam_loss(p, p, in[2], in[2]).total;
                         };
                         auto shared = grad_check_detail(f, oracle, in[2]);
                         return worst({live, shared});
                     }});
    cases.push_back({"dae_loss", [](SeededRng& rng) {
                         const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), 2, 2};
                         return check_inputs([](const Args& x) { return dae_loss(x[0], x[1], x[2], x[3]).total; },
                                             {random_tensor(s, rng), random_tensor(s, rng), random_tensor(s, rng),
                                              random_tensor(s, rng)});
                     }});
    cases.push_back({"sidae_loss", [](SeededRng& rng) {
                         const std::size_t b = pick(rng, 1, 3), d = pick(rng, 2, 4);
                         const Shape s{b, 1, 2, 2};
                         const double w = rng.uniform();
                         auto z1 = random_tensor({b, d}, rng), z2 = random_tensor({b, d}, rng);
                         auto x = random_tensor(s, rng, 0.0, 1.0);
                         return check_inputs(
                             [&](const Args& a) {
                                 return sidae_loss(w, simsiam_loss(a[0], a[1], z1, z2), dae_loss(x, a[2], a[3])).total;
                             },
                             {random_tensor({b, d}, rng), random_tensor({b, d}, rng), random_tensor(s, rng),
                              random_tensor(s, rng)});
                     }});
    return cases;
}

struct GradCaseReport {
    std::string name;
    std::size_t trials = 0;
    GradCheckResult worst;
    bool passed = false;
    std::string error;  // exception text, if a trial threw
};

struct GradSuiteReport {
    std::vector<GradCaseReport> cases;
    double seconds = 0.0;

    bool passed() const {
        for (const auto& c : cases)
            if (!c.passed) return false;
        return !cases.empty();
    }
};

inline constexpr double kGradTolerance = 1e-4;
inline constexpr std::size_t kGradTrials = 20;

inline GradSuiteReport run_grad_suite(const std::vector<GradCase>& cases, std::size_t trials = kGradTrials,
                                      double tolerance = kGradTolerance, std::uint64_t seed = 2024) {
    const auto t0 = std::chrono::steady_clock::now();
    GradSuiteReport report;
    for (std::size_t c = 0; c < cases.size(); ++c) {
        GradCaseReport r;
        r.name = cases[c].name;
        SeededRng rng(seed, c + 1);
        try {
            for (std::size_t t = 0; t < trials; ++t, ++r.trials) {
                auto res = cases[c].trial(rng);
                if (res.max_rel_error >= r.worst.max_rel_error) r.worst = res;
            }
            r.passed = r.worst.max_rel_error < tolerance;
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        report.cases.push_back(std::move(r));
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace sidae
