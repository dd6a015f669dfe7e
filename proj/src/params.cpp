#include "fsf/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace fsf {

namespace {

template <class A, class B>
void require_same_keys(const A& a, const B& b, const char* what) {
  bool same = a.size() == b.size();
  if (same) {
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib) {
      if (ia->first != ib->first) {
        same = false;
        break;
      }
    }
  }
  if (!same) throw std::invalid_argument(std::string(what) + ": parameter key sets differ");
}

bool bits_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

ParamStore::ParamStore(const ParamStore& other) : step_count_(other.step_count_) {
  for (const auto& [name, v] : other.params_) params_.emplace(name, Value::parameter(v.data()));
}

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this != &other) {
    ParamStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

const Value& ParamStore::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.emplace(name, Value::parameter(std::move(init)));
  if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter name '" + name + "'");
  return it->second;
}

const Value& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second;
}

Value& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v.data().size());
  return n;
}

bool ParamStore::same_keys(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
  }
  return true;
}

bool ParamStore::bit_equal(const ParamStore& other) const {
  if (!same_keys(other)) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (!bits_equal(a->second.data(), b->second.data())) return false;
  }
  return true;
}

GradMap backward(const Value& loss, const ParamStore& params) {
  for (const auto& [_, v] : params) v.zero_grad();
  backward(loss);
  GradMap grads;
  for (const auto& [name, v] : params) grads.emplace(name, v.grad());
  return grads;
}

AdamState AdamState::for_params(const ParamStore& params, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  for (const auto& [name, v] : params) {
    s.first_moment.emplace(name, Matrix::Zero(v.rows(), v.cols()));
    s.second_moment.emplace(name, Matrix::Zero(v.rows(), v.cols()));
  }
  return s;
}

void AdamState::validate() const {
  if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw std::invalid_argument("Adam: betas must lie in (0,1)");
  if (!(epsilon > 0)) throw std::invalid_argument("Adam: epsilon must be positive");
}

void adam_step(ParamStore& params, const GradMap& grads, AdamState& state) {
  state.validate();
  require_same_keys(params, grads, "adam_step");
  require_same_keys(params, state.first_moment, "adam_step");
  for (const auto& [name, g] : grads) {
    if (!g.allFinite()) throw NumericalError("adam_step: non-finite gradient for " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [name, g] : grads) {
    Value& p = params.at(name);
    Matrix& m = state.first_moment.at(name);
    Matrix& v = state.second_moment.at(name);
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseAbs2();
    auto m_hat = m.array() / c1;
    auto v_hat = v.array() / c2;
    p.mutable_data().array() -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
  }
  params.increment_step();
}

EmaState EmaState::from_params(const ParamStore& params, double decay) {
  if (!(decay >= 0 && decay <= 1)) throw std::invalid_argument("EMA decay must lie in [0,1]");
  EmaState e;
  e.decay = decay;
  for (const auto& [name, v] : params) e.shadow.emplace(name, v.data());
  return e;
}

ParamStore EmaState::as_params() const {
  ParamStore p;
  for (const auto& [name, m] : shadow) p.add(name, m);
  return p;
}

void ema_update(EmaState& ema, const ParamStore& params) {
  require_same_keys(ema.shadow, params, "ema_update");
  for (auto& [name, s] : ema.shadow) s = ema.decay * s + (1.0 - ema.decay) * params.at(name).data();
}

void ida_blend(ParamStore& psi, const ParamStore& theta, double lambda_ida) {
  if (!(lambda_ida >= 0 && lambda_ida <= 1)) throw std::invalid_argument("ida_blend: lambda must lie in [0,1]");
  require_same_keys(psi, theta, "ida_blend");
  for (const auto& [name, v] : theta) {
    Matrix& target = psi.at(name).mutable_data();
    target = lambda_ida * target + (1.0 - lambda_ida) * v.data();
  }
}

}  // namespace fsf
