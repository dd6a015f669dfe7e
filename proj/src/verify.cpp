#include "fsf/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace fsf {

namespace {

using ScalarFn = std::function<double(const ParamStore&)>;

double norm_of(const GradMap& g) {
  double acc = 0;
  for (const auto& [_, m] : g) acc += m.squaredNorm();
  return std::sqrt(acc);
}

// Central differences of `f` with the tape replaying every recorded
// stop-gradient branch. The tape must already hold one recorded pass.
GradMap fd_gradient(const ScalarFn& f, ParamStore& params, StopGradientTape& tape, double step) {
  GradMap out;
  std::vector<std::string> names;
  for (const auto& [name, _] : params) names.push_back(name);
  NoGradGuard guard;
  for (const auto& name : names) {
    Matrix& d = params.at(name).mutable_data();
    Matrix g(d.rows(), d.cols());
    for (Index k = 0; k < d.size(); ++k) {
      const double orig = d.data()[k];
      d.data()[k] = orig + step;
      tape.set_mode(StopGradientTape::Mode::Replay);
      const double up = f(params);
      d.data()[k] = orig - step;
      tape.set_mode(StopGradientTape::Mode::Replay);
      const double down = f(params);
      d.data()[k] = orig;
      g.data()[k] = (up - down) / (2 * step);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

GradientComparison compare(const GradMap& analytic, const GradMap& fd) {
  GradientComparison c;
  double diff = 0;
  for (const auto& [name, a] : analytic) {
    const Matrix& b = fd.at(name);
    diff += (a - b).squaredNorm();
    c.max_abs_error = std::max(c.max_abs_error, (a - b).cwiseAbs().maxCoeff());
    c.entries += static_cast<std::size_t>(a.size());
  }
  c.analytic_norm = norm_of(analytic);
  const double denom = std::max({c.analytic_norm, norm_of(fd), 1e-300});
  c.relative_error = std::sqrt(diff) / denom;
  return c;
}

Matrix row_matrix(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index j = 0;
  for (double x : v) m(0, j++) = x;
  return m;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index j = 0;
  for (double x : v) out(j++) = x;
  return out;
}

CheckResult make(std::string name, double measured, double tol, std::string detail = {}) {
  return {std::move(name), measured <= tol, measured, tol, std::move(detail)};
}

std::vector<LinearGaussianFlow> gaussian_cases() {
  return {LinearGaussianFlow{vec({2.0}), 1.0}, LinearGaussianFlow{vec({0.5, -1.0}), 0.3},
          LinearGaussianFlow{vec({-1.0, 0.25, 3.0}), 2.0}};
}

// ---- analytic identities ---------------------------------------------------

CheckResult check_score_velocity(const VerifyHooks& hooks) {
  const std::vector<GaussianMixtureSpec> specs = {gm8_ring(), gm2_sym(vec({1.5, 0.0}), 0.3), g1(vec({2.0}), 1.0)};
  double worst = 0;
  for (const auto& spec : specs) {
    for (int i = 0; i < 20; ++i) {
      const double t = 0.02 + 0.96 * i / 19.0;
      for (int j = 0; j < 20; ++j) {
        const double a = -1.5 + 3.0 * j / 19.0;
        Vector x(spec.dim());
        x(0) = a;
        if (spec.dim() > 1) x(1) = 0.7 - 0.9 * a;
        const Vector v = gm_marginal_velocity(spec, x, t);
        const Vector s = hooks.score_from_velocity(v, x, t);
        const Vector ref = gm_marginal_score(spec, x, t);
        worst = std::max(worst, (s - ref).norm() / std::max(1.0, ref.norm()));
      }
    }
  }
  return make("score-velocity", worst, 1e-9, "3 mixtures x 20 t x 20 points");
}

CheckResult check_round_trip(Rng& rng) {
  double worst = 0;
  for (const auto& flow : gaussian_cases()) {
    const auto d = flow.mean.size();
    for (int k = 0; k < 200; ++k) {
      const double t = rng.uniform(0.05, 1.0);
      const double s = rng.uniform(0.0, t);
      const Vector x = flow.path_mean(t) + flow.path_stdev(t) * rng.normal_matrix(d, 1).col(0);
      const Vector back = analytic_flow_map(flow, analytic_flow_map(flow, x, t, s), s, t);
      worst = std::max(worst, (back - x).norm() / std::max(1.0, x.norm()));
    }
  }
  return make("flow-map-round-trip", worst, 1e-12);
}

CheckResult check_semigroup(Rng& rng) {
  double worst = 0;
  for (const auto& flow : gaussian_cases()) {
    const auto d = flow.mean.size();
    for (int k = 0; k < 200; ++k) {
      const double t = rng.uniform(0.05, 1.0);
      const double s = rng.uniform(0.0, t);
      const double r = rng.uniform(s, t);
      const Vector x = flow.path_mean(t) + flow.path_stdev(t) * rng.normal_matrix(d, 1).col(0);
      const Vector direct = analytic_flow_map(flow, x, t, s);
      const Vector composed = analytic_flow_map(flow, analytic_flow_map(flow, x, t, r), r, s);
      worst = std::max(worst, (direct - composed).norm() / std::max(1.0, direct.norm()));
    }
  }
  return make("flow-map-semigroup", worst, 1e-12);
}

// The generator-side rollout of the exact map lands on the one-step image for any N.
CheckResult check_rollout_semigroup(Rng& rng) {
  const LinearGaussianFlow flow{vec({0.5, -1.0}), 0.3};
  const GaussianFlowModel model(2);
  const ParamStore params = GaussianFlowModel::params_for(flow.mean, flow.stdev);
  const Matrix z = rng.normal_matrix(64, 2);
  const std::vector<int> labels(64, 0);
  double worst = 0;
  for (int steps : {1, 2, 4, 7}) {
    const Matrix x = rollout(model, params, z, labels, steps).sample;
    for (Index i = 0; i < z.rows(); ++i) {
      const Vector ref = analytic_flow_map(flow, z.row(i).transpose(), 1.0, 0.0);
      worst = std::max(worst, (x.row(i).transpose() - ref).norm() / std::max(1.0, ref.norm()));
    }
  }
  return make("rollout-semigroup", worst, 1e-12, "N in {1,2,4,7}");
}

CheckResult check_average_velocity(Rng& rng) {
  constexpr int kNodes = 10000;
  double worst = 0;
  for (const auto& flow : gaussian_cases()) {
    const auto spec = g1(flow.mean, flow.stdev);
    const auto d = flow.mean.size();
    for (int k = 0; k < 6; ++k) {
      const double t = 0.1 + 0.85 * k / 5.0;
      const Vector xt = flow.path_mean(t) + flow.path_stdev(t) * rng.normal_matrix(d, 1).col(0);
      const Vector endpoint = (xt - analytic_flow_map(flow, xt, t, 0.0)) / t;
      Vector avg = Vector::Zero(d);
      const double h = t / kNodes;
      for (int n = 0; n < kNodes; ++n) {
        const double tau = (n + 0.5) * h;
        avg += gm_marginal_velocity(spec, analytic_flow_map(flow, xt, t, tau), tau);
      }
      avg /= kNodes;
      worst = std::max(worst, (avg - endpoint).norm() / std::max(1.0, endpoint.norm()));
    }
  }
  return make("average-velocity", worst, 1e-6, "midpoint rule, 1e4 nodes");
}

CheckResult check_jvp_linear() {
  // F = t x: JVP along (3, 1, 0) at x = 2, t = 0.5 is 0.5 * 3 + 2.
  const TwoTimeField field = [](const Matrix& x, std::span<const double> t, std::span<const double>) {
    return Matrix(x * t[0]);
  };
  const std::vector<double> t{0.5}, s{0.0};
  const Matrix j = jvp_central_difference(field, row_matrix({2.0}), t, s, JvpTangent{row_matrix({3.0}), 1, 0}, 0.005);
  return make("jvp-linear-exact", std::abs(j(0, 0) - 3.5), 1e-12);
}

CheckResult check_jvp_order() {
  const TwoTimeField field = [](const Matrix& x, std::span<const double> t, std::span<const double> s) {
    return Matrix(std::sin(3 * t[0]) * x + s[0] * x.cwiseProduct(x));
  };
  const double x0 = 0.7, dx = -1.3, t0 = 0.6, s0 = 0.2;
  const double exact = std::sin(3 * t0) * dx + 2 * s0 * x0 * dx + 3 * std::cos(3 * t0) * x0;
  const std::vector<double> t{t0}, s{s0};
  auto err = [&](double eps) {
    const Matrix j = jvp_central_difference(field, row_matrix({x0}), t, s, JvpTangent{row_matrix({dx}), 1, 0}, eps);
    return std::abs(j(0, 0) - exact);
  };
  const double ratio = err(0.02) / err(0.01);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "error ratio %.4f at eps 0.02 / 0.01", ratio);
  return make("jvp-second-order", std::abs(ratio - 4.0), 0.4, buf);
}

CheckResult check_sg_identity() {
  const Value x = Value::parameter(row_matrix({3.0}));
  const Value loss = sum(x * stop_gradient(x));
  backward(loss);
  const double g1v = x.grad()(0, 0);
  const Value loss2 = sum(square(x - stop_gradient(x)));
  backward(loss2);
  const double g2v = x.grad()(0, 0);
  return make("sg-contract", std::abs(g1v - 3.0) + std::abs(g2v), 0.0, "d/dx x sg[x] = 3, d/dx (x - sg[x])^2 = 0");
}

// The gradient of the squared sg-target loss is 2 w delta^T dF/dtheta.
CheckResult check_fsf_gradient_form(const VerifyHooks& hooks, Rng& rng) {
  const auto model = gradient_check_model();
  ParamStore params = gradient_check_params(model, 11);
  const std::vector<int> labels{0, 1, 2, kNullLabel, 1};
  const Matrix z = rng.normal_matrix(5, 2);
  const Matrix delta = rng.normal_matrix(5, 2);
  std::vector<double> w(5);
  for (auto& x : w) x = rng.uniform(0.5, 2.0);

  const RolloutTrace trace = backward_simulate(model, params, z, labels, 2);
  const GradMap got = backward(hooks.fsf_dmd_loss(trace.tilde_F, delta, w), params);

  const RolloutTrace trace2 = backward_simulate(model, params, z, labels, 2);
  Matrix coeff = delta;
  for (Index i = 0; i < coeff.rows(); ++i) coeff.row(i) *= 2 * w[static_cast<std::size_t>(i)] / 5.0;
  const GradMap want = backward(sum(trace2.tilde_F * Value::constant(coeff)), params);
  return make("fsf-gradient-form", relative_gradient_error(got, want), 1e-6);
}

CheckResult check_eq18_identity(Rng& rng) {
  const auto model = gradient_check_model();
  ParamStore params = gradient_check_params(model, 12);
  const std::vector<int> labels{2, 0, kNullLabel, 1};
  double worst = 0;
  for (int steps : {1, 2, 3}) {
    const Matrix z = rng.normal_matrix(4, 2);
    const Matrix u = rng.normal_matrix(4, 2);
    StopGradientTape tape;
    StopGradientTapeScope scope(tape);
    tape.set_mode(StopGradientTape::Mode::Record);
    const RolloutTrace trace = backward_simulate(model, params, z, labels, steps);
    GradMap analytic = backward(sum(trace.tilde_F * Value::constant(u)), params);
    for (auto& [_, g] : analytic) g = -g;
    const ScalarFn probe = [&](const ParamStore& p) {
      return backward_simulate(model, p, z, labels, steps).endpoint.cwiseProduct(u).sum();
    };
    worst = std::max(worst, compare(analytic, fd_gradient(probe, params, tape, 1e-5)).relative_error);
  }
  return make("eq18-identity", worst, 1e-4, "M in {1,2,3}, FD of <u, x> vs -grad <u, tilde F>");
}

std::vector<CheckResult> check_time_sampler(const VerifyHooks& hooks) {
  const TimeSamplerConfig cfg;
  Rng rng(2024);
  constexpr int n = 100000;
  int violations = 0, collapsed = 0;
  for (int i = 0; i < n; ++i) {
    const TimePair p = sample_time_pair(cfg, rng, hooks.order_time_pair);
    if (!(p.t >= p.s) || p.s < kMinTime || p.t > 1) ++violations;
    if (p.t == p.s) ++collapsed;
  }
  const double rate = static_cast<double>(collapsed) / n;
  const double sd = std::sqrt(cfg.mask_prob * (1 - cfg.mask_prob) / n);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "P(s = t) = %.4f", rate);
  return {make("time-sampler-order", violations, 0, "draws with s > t out of 1e5"),
          make("time-sampler-mask-rate", std::abs(rate - cfg.mask_prob), 5 * sd, buf)};
}

CheckResult check_stationarity() {
  const LinearGaussianFlow flow{vec({2.0}), 1.0};
  double delta = 0, grad = 0;
  for (int steps : {1, 2}) {
    const auto r = fsf_stationarity(flow, analytic_endpoint_velocity(flow), steps, 99);
    delta = std::max(delta, r.delta_max);
    grad = std::max(grad, r.grad_max);
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max |delta| = %.2e, max |grad| = %.2e", delta, grad);
  return make("stationarity", std::max(delta / 1e-6, grad / 1e-5), 1.0, buf);
}

// ---- gradient suite ----------------------------------------------------------

struct GradCase {
  std::string name;
  std::function<Value(const ParamStore&)> loss;
};

std::vector<CheckResult> check_gradients() {
  const auto model = gradient_check_model();
  const ParamStore teacher_params = gradient_check_params(model, 21);
  const ParamStore fake_params = gradient_check_params(model, 22);
  const VelocityField teacher = model_velocity(model, teacher_params);
  Rng data_rng(5);
  const LabeledBatch batch = sample_mixture(gm2_sym(vec({1.0, 0.5}), 0.2), 6, data_rng);
  LabeledBatch labelled = batch;
  labelled.labels = {0, 1, 2, kNullLabel, 1, 0};
  const std::vector<int>& labels = labelled.labels;
  const GuidanceConfig guidance{2.0, 0.0, 0.9};

  auto fsf_cfg = [&](int steps, SimulationMode mode, WeightMode weight) {
    FsfConfig c;
    c.sim_steps = steps;
    c.sim_mode = mode;
    c.weight_mode = weight;
    c.gamma_shift = 3.0;
    c.guidance = guidance;
    return c;
  };
  const ConsistencyConfig cc;
  Rng draw(6);
  const auto times = sample_time_pairs(cc.sampler, 6, draw);
  const Matrix z = draw.normal_matrix(6, 2);
  const Matrix xt = interpolate(labelled.x, z, times.t);
  const std::vector<double> emd_w{0.3, 1.0, 0.7, 2.0, 0.5, 1.1};

  std::vector<GradCase> cases = {
      {"grad-cfm", [&](const ParamStore& p) { Rng r(1); return cfm_loss(model, p, labelled, r); }},
      {"grad-ct", [&](const ParamStore& p) { Rng r(2); return ct_loss(model, p, labelled, cc, r); }},
      {"grad-cd", [&](const ParamStore& p) { Rng r(3); return cd_loss(model, p, teacher, labelled, cc, guidance, r); }},
      {"grad-flow-map-derivative",
       [&](const ParamStore& p) {
         return flow_map_derivative_loss(model, p, xt, times.t, times.s, labels, z - labelled.x, emd_w, cc.jvp_eps);
       }},
      {"grad-fsf-single",
       [&](const ParamStore& p) {
         Rng r(4);
         return fsf_dmd_objective(model, p, fake_params, teacher, labels,
                                  fsf_cfg(1, SimulationMode::FlowMap, WeightMode::Adaptive), r);
       }},
      {"grad-fsf-single-live-fake",
       [&](const ParamStore& p) {
         Rng r(5);
         return fsf_dmd_objective(model, p, p, teacher, labels,
                                  fsf_cfg(1, SimulationMode::FlowMap, WeightMode::AdaptiveCosine), r);
       }},
      {"grad-fsf-rollout",
       [&](const ParamStore& p) {
         Rng r(6);
         return fsf_dmd_objective(model, p, fake_params, teacher, labels,
                                  fsf_cfg(3, SimulationMode::FlowMap, WeightMode::Adaptive), r);
       }},
      {"grad-fsf-dmd2-simulation",
       [&](const ParamStore& p) {
         Rng r(7);
         return fsf_dmd_objective(model, p, fake_params, teacher, labels,
                                  fsf_cfg(2, SimulationMode::Dmd2, WeightMode::Constant), r);
       }},
      {"grad-fsf-scratch",
       [&](const ParamStore& p) {
         Rng r(8);
         return fsf_scratch_objective(model, p, p, labels, fsf_cfg(2, SimulationMode::FlowMap, WeightMode::Cosine), r);
       }},
      {"grad-dmd2-fake", [&](const ParamStore& p) { Rng r(9); return dmd2_fake_loss(model, p, labelled.x, labels, r); }},
      {"grad-dmd2-generator",
       [&](const ParamStore& p) {
         Rng r(10);
         return dmd2_generator_objective(model, p, fake_params, teacher, labels, DmdBaselineConfig{}, guidance, r);
       }},
      {"grad-dmd2-generator-simulated",
       [&](const ParamStore& p) {
         Rng r(11);
         DmdBaselineConfig c;
         c.sim_steps = 3;
         return dmd2_generator_objective(model, p, fake_params, teacher, labels, c, guidance, r);
       }},
  };

  std::vector<CheckResult> out;
  ParamStore params = gradient_check_params(model, 23);
  for (const auto& c : cases) {
    const auto cmp = compare_with_finite_differences(c.loss, params);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%zu entries, |grad| = %.3e", cmp.entries, cmp.analytic_norm);
    out.push_back(make(c.name, cmp.relative_error, 1e-4, buf));
  }

  // The flow-map form and the squared consistency loss share one gradient
  // when w = w~ (t - s) / 2.
  std::vector<double> ct_w(emd_w.size());
  for (std::size_t i = 0; i < ct_w.size(); ++i) ct_w[i] = emd_w[i] * (times.t[i] - times.s[i]) / 2;
  const GradMap a = backward(
      flow_map_derivative_loss(model, params, xt, times.t, times.s, labels, z - labelled.x, emd_w, cc.jvp_eps), params);
  const GradMap b =
      backward(consistency_loss(model, params, xt, times.t, times.s, labels, z - labelled.x, ct_w, cc.jvp_eps), params);
  out.push_back(make("flow-map-form-equivalence", relative_gradient_error(a, b), 1e-9));
  return out;
}

}  // namespace

std::vector<std::string> canary_names() { return {"score-sign", "drop-sg", "drop-reorder"}; }

VerifyHooks canary_hooks(const std::string& name) {
  VerifyHooks h;
  if (name == "score-sign") {
    h.score_from_velocity = [](const Vector& v, const Vector& xt, double t) -> Vector {
      return (xt + (1 - t) * v) / t;
    };
  } else if (name == "drop-sg") {
    h.fsf_dmd_loss = [](const Value& f, const Matrix& delta, std::span<const double> w) {
      Matrix wm(static_cast<Index>(w.size()), 1);
      for (std::size_t i = 0; i < w.size(); ++i) wm(static_cast<Index>(i), 0) = w[i];
      const Value target = f - detach(delta);
      return mean(mul_rows(row_sum(square(f - target)), Value::constant(wm)));
    };
  } else if (name == "drop-reorder") {
    h.order_time_pair = [](double a, double b, bool mask) { return TimePair{a, mask ? a : b}; };
  } else {
    throw std::invalid_argument("unknown canary '" + name + "'");
  }
  return h;
}

bool VerifyReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::string VerifyReport::table() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-30s %-6s %-12s %-10s %s\n", "check", "status", "measured", "tolerance", "detail");
  out += line;
  for (const auto& c : checks) {
    std::snprintf(line, sizeof(line), "%-30s %-6s %-12.3e %-10.1e %s\n", c.name.c_str(), c.passed ? "PASS" : "FAIL",
                  c.measured, c.tolerance, c.detail.c_str());
    out += line;
  }
  const auto failed = std::count_if(checks.begin(), checks.end(), [](const CheckResult& c) { return !c.passed; });
  std::snprintf(line, sizeof(line), "%zu checks, %ld failed, %.1f s\n", checks.size(), static_cast<long>(failed),
                seconds);
  out += line;
  return out;
}

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : checks) {
    arr.push_back({{"name", c.name},
                   {"passed", c.passed},
                   {"measured", c.measured},
                   {"tolerance", c.tolerance},
                   {"detail", c.detail}});
  }
  return {{"passed", passed()}, {"seconds", seconds}, {"checks", arr}};
}

VerifyReport run_verify(const VerifyHooks& hooks) {
  const auto start = std::chrono::steady_clock::now();
  VerifyReport r;
  Rng rng(7);
  r.checks.push_back(check_score_velocity(hooks));
  r.checks.push_back(check_round_trip(rng));
  r.checks.push_back(check_semigroup(rng));
  r.checks.push_back(check_rollout_semigroup(rng));
  r.checks.push_back(check_average_velocity(rng));
  r.checks.push_back(check_jvp_linear());
  r.checks.push_back(check_jvp_order());
  r.checks.push_back(check_sg_identity());
  r.checks.push_back(check_fsf_gradient_form(hooks, rng));
  r.checks.push_back(check_eq18_identity(rng));
  for (auto& c : check_time_sampler(hooks)) r.checks.push_back(std::move(c));
  r.checks.push_back(check_stationarity());
  for (auto& c : check_gradients()) r.checks.push_back(std::move(c));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

GradientComparison compare_with_finite_differences(const LossFn& loss, ParamStore& params, double step) {
  StopGradientTape tape;
  StopGradientTapeScope scope(tape);
  tape.set_mode(StopGradientTape::Mode::Record);
  const GradMap analytic = backward(loss(params), params);
  const ScalarFn f = [&](const ParamStore& p) { return loss(p).item(); };
  return compare(analytic, fd_gradient(f, params, tape, step));
}

double relative_gradient_error(const GradMap& a, const GradMap& b) {
  double diff = 0, na = 0, nb = 0;
  for (const auto& [name, ga] : a) {
    const auto it = b.find(name);
    if (it == b.end()) continue;
    diff += (ga - it->second).squaredNorm();
    na += ga.squaredNorm();
    nb += it->second.squaredNorm();
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

MlpPseudoVelocity gradient_check_model(int classes) {
  MlpArchitecture arch;
  arch.dim = 2;
  arch.hidden = {32, 32};
  arch.num_classes = classes;
  return MlpPseudoVelocity(arch);
}

ParamStore gradient_check_params(const MlpPseudoVelocity& model, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore p = model.init_params(rng);
  for (const char* name : {"out.weight", "out.bias"}) {
    Matrix& m = p.at(name).mutable_data();
    m = 0.3 * rng.normal_matrix(m.rows(), m.cols());
  }
  return p;
}

VelocityField analytic_endpoint_velocity(const LinearGaussianFlow& flow) {
  return [flow](const Matrix& xt, std::span<const double> t, std::span<const int>) {
    Matrix out(xt.rows(), xt.cols());
    for (Index i = 0; i < xt.rows(); ++i) {
      out.row(i) = analytic_pseudo_velocity(flow, xt.row(i).transpose(), t[static_cast<std::size_t>(i)], 0.0).transpose();
    }
    return out;
  };
}

StationarityResult fsf_stationarity(const LinearGaussianFlow& flow, const VelocityField& teacher, int rollout_steps,
                                    std::uint64_t seed) {
  const int d = static_cast<int>(flow.mean.size());
  const GaussianFlowModel model(d);
  ParamStore params = GaussianFlowModel::params_for(flow.mean, flow.stdev);
  FsfConfig cfg;
  cfg.guidance.scale = 1.0;
  cfg.sim_steps = rollout_steps;
  StationarityResult r;

  // Delta on a grid of (x_t, t) around the perturbed marginal.
  for (int i = 0; i < 20; ++i) {
    const double t = 0.02 + 0.96 * i / 19.0;
    Matrix xt(20, d);
    for (int j = 0; j < 20; ++j) {
      xt.row(j) = (flow.path_mean(t).array() + flow.path_stdev(t) * (-3.0 + 6.0 * j / 19.0)).matrix().transpose();
    }
    const std::vector<double> tv(20, t);
    const std::vector<int> labels(20, 0);
    const auto dr = fsf_delta(model, params, teacher, xt, tv, labels, cfg.guidance);
    r.delta_max = std::max(r.delta_max, dr.delta.cwiseAbs().maxCoeff());
  }

  Rng rng(seed);
  const std::vector<int> labels(256, 0);
  for (int b = 0; b < 4; ++b) {
    r.gradient = backward(fsf_dmd_objective(model, params, params, teacher, labels, cfg, rng), params);
    for (const auto& [_, g] : r.gradient) r.grad_max = std::max(r.grad_max, g.cwiseAbs().maxCoeff());
  }
  return r;
}

}  // namespace fsf
