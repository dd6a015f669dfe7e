#include "fsf/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fsf {

namespace {

void check_batch(const Value& x, int dim, std::span<const double> t, std::span<const double> s,
                 std::span<const int> labels) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (x.cols() != dim) throw std::invalid_argument("model: input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(dim));
  if (t.size() != n || s.size() != n || labels.size() != n) throw std::invalid_argument("model: batch size mismatch");
}

std::string layer_name(std::size_t i) { return "fc" + std::to_string(i); }

}  // namespace

MlpPseudoVelocity::MlpPseudoVelocity(MlpArchitecture arch) : arch_(std::move(arch)) {
  if (arch_.dim < 1 || arch_.hidden.empty() || arch_.time_freqs < 1 || arch_.num_classes < 0 || arch_.class_embed_dim < 1) {
    throw std::invalid_argument("MlpPseudoVelocity: invalid architecture");
  }
  for (int w : arch_.hidden) {
    if (w < 1) throw std::invalid_argument("MlpPseudoVelocity: hidden widths must be positive");
  }
}

std::vector<double> MlpPseudoVelocity::frequencies() const {
  std::vector<double> f(static_cast<std::size_t>(arch_.time_freqs));
  for (int k = 0; k < arch_.time_freqs; ++k) f[static_cast<std::size_t>(k)] = 0.5 * std::numbers::pi * std::pow(2.0, 0.5 * k);
  return f;
}

Matrix MlpPseudoVelocity::time_features(std::span<const double> times) const {
  const auto freqs = frequencies();
  Matrix out(static_cast<Index>(times.size()), 2 * arch_.time_freqs);
  for (std::size_t i = 0; i < times.size(); ++i) {
    for (int k = 0; k < arch_.time_freqs; ++k) {
      const double a = freqs[static_cast<std::size_t>(k)] * times[i];
      out(static_cast<Index>(i), 2 * k) = std::sin(a);
      out(static_cast<Index>(i), 2 * k + 1) = std::cos(a);
    }
  }
  return out;
}

Value MlpPseudoVelocity::forward(const ParamStore& params, const Value& x, std::span<const double> t,
                                 std::span<const double> s, std::span<const int> labels) const {
  check_batch(x, arch_.dim, t, s, labels);
  std::vector<int> rows(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = labels[i];
    if (c == kNullLabel) {
      rows[i] = arch_.num_classes;
    } else if (c >= 0 && c < arch_.num_classes) {
      rows[i] = c;
    } else {
      throw std::out_of_range("MlpPseudoVelocity: class label " + std::to_string(c) + " out of range");
    }
  }

  Value h = concat_cols({x, Value::constant(time_features(t)), Value::constant(time_features(s)),
                         gather_rows(params.at("class_embed"), rows)});
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    const auto name = layer_name(i);
    h = silu(add_row(matmul(h, params.at(name + ".weight")), params.at(name + ".bias")));
  }
  return add_row(matmul(h, params.at("out.weight")), params.at("out.bias"));
}

ParamStore MlpPseudoVelocity::init_params(Rng& rng) const {
  ParamStore p;
  Matrix embed = rng.normal_matrix(arch_.num_classes + 1, arch_.class_embed_dim) * 0.5;
  p.add("class_embed", std::move(embed));
  int fan_in = arch_.input_width();
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i) {
    const int width = arch_.hidden[i];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix w(fan_in, width), b(1, width);
    for (Index k = 0; k < w.size(); ++k) w.data()[k] = rng.uniform(-bound, bound);
    for (Index k = 0; k < b.size(); ++k) b.data()[k] = rng.uniform(-bound, bound);
    p.add(layer_name(i) + ".weight", std::move(w));
    p.add(layer_name(i) + ".bias", std::move(b));
    fan_in = width;
  }
  p.add("out.weight", Matrix::Zero(fan_in, arch_.dim));
  p.add("out.bias", Matrix::Zero(1, arch_.dim));
  return p;
}

nlohmann::json MlpPseudoVelocity::describe() const {
  return {{"type", "mlp"},
          {"dim", arch_.dim},
          {"hidden", arch_.hidden},
          {"time_freqs", arch_.time_freqs},
          {"num_classes", arch_.num_classes},
          {"class_embed_dim", arch_.class_embed_dim}};
}

Value GaussianFlowModel::forward(const ParamStore& params, const Value& x, std::span<const double> t,
                                 std::span<const double> s, std::span<const int> labels) const {
  check_batch(x, dim_, t, s, labels);
  const Value& mu = params.at("mu");
  const Value& sigma_v = params.at("sigma");
  const double sigma = sigma_v.item();
  if (!(sigma > 0)) throw NumericalError("GaussianFlowModel: sigma must stay positive");
  const Index n = x.rows();

  // F = A x + B mu per row, with A, B and their sigma-derivatives in closed form.
  std::vector<double> A(static_cast<std::size_t>(n)), B(A.size()), dA(A.size()), dB(A.size());
  const double s2 = sigma * sigma;
  auto rho = [&](double tau) { return std::sqrt((1 - tau) * (1 - tau) * s2 + tau * tau); };
  auto drho = [&](double tau) { return (1 - tau) * (1 - tau) * sigma / rho(tau); };
  for (Index i = 0; i < n; ++i) {
    const double ti = t[static_cast<std::size_t>(i)], si = s[static_cast<std::size_t>(i)];
    const auto k = static_cast<std::size_t>(i);
    if (ti == si) {
      const double r2 = (1 - ti) * (1 - ti) * s2 + ti * ti;
      const double num = ti - (1 - ti) * s2;
      const double L = num / r2;
      const double dL = (-2 * (1 - ti) * sigma * r2 - num * 2 * (1 - ti) * (1 - ti) * sigma) / (r2 * r2);
      A[k] = L;
      B[k] = -1 - L * (1 - ti);
      dA[k] = dL;
      dB[k] = -(1 - ti) * dL;
    } else {
      const double rt = rho(ti), rs = rho(si);
      const double r = rs / rt;
      const double dr = (drho(si) * rt - rs * drho(ti)) / (rt * rt);
      const double h = ti - si;
      A[k] = (1 - r) / h;
      B[k] = (r * (1 - ti) - (1 - si)) / h;
      dA[k] = -dr / h;
      dB[k] = dr * (1 - ti) / h;
    }
  }

  Matrix out(n, dim_);
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out.row(i) = A[k] * x.data().row(i) + B[k] * mu.data().row(0);
  }
  return Value::make(std::move(out), {x, mu, sigma_v},
                     [x, mu, A, B, dA, dB](const Matrix& g, std::span<Matrix*> pg) {
                       for (Index i = 0; i < g.rows(); ++i) {
                         const auto k = static_cast<std::size_t>(i);
                         if (pg[0]) pg[0]->row(i) += A[k] * g.row(i);
                         if (pg[1]) pg[1]->row(0) += B[k] * g.row(i);
                         if (pg[2]) {
                           (*pg[2])(0, 0) += g.row(i).dot(dA[k] * x.data().row(i) + dB[k] * mu.data().row(0));
                         }
                       }
                     },
                     "gaussian_flow");
}

ParamStore GaussianFlowModel::init_params(Rng& rng) const {
  Vector mu(dim_);
  for (int j = 0; j < dim_; ++j) mu(j) = rng.normal();
  return params_for(mu, 1.0);
}

ParamStore GaussianFlowModel::params_for(const Vector& mu, double sigma) {
  ParamStore p;
  p.add("mu", Matrix(mu.transpose()));
  Matrix s(1, 1);
  s(0, 0) = sigma;
  p.add("sigma", std::move(s));
  return p;
}

nlohmann::json GaussianFlowModel::describe() const { return {{"type", "gaussian-flow"}, {"dim", dim_}}; }

std::unique_ptr<PseudoVelocityModel> model_from_json(const nlohmann::json& d) {
  const auto type = d.at("type").get<std::string>();
  if (type == "mlp") {
    MlpArchitecture a;
    a.dim = d.at("dim").get<int>();
    a.hidden = d.at("hidden").get<std::vector<int>>();
    a.time_freqs = d.at("time_freqs").get<int>();
    a.num_classes = d.at("num_classes").get<int>();
    a.class_embed_dim = d.at("class_embed_dim").get<int>();
    return std::make_unique<MlpPseudoVelocity>(a);
  }
  if (type == "gaussian-flow") return std::make_unique<GaussianFlowModel>(d.at("dim").get<int>());
  throw std::invalid_argument("unknown model type '" + type + "'");
}

Matrix evaluate(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& x, std::span<const double> t,
                std::span<const double> s, std::span<const int> labels) {
  NoGradGuard guard;
  return model.forward(params, Value::constant(x), t, s, labels).data();
}

}  // namespace fsf
