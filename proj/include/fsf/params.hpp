#pragma once

#include "fsf/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace fsf {

using GradMap = std::map<std::string, Matrix>;

/// Named trainable parameters. Copies are deep: two stores never share
/// storage, so an EMA shadow or a frozen teacher cannot alias live weights.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  /// Registers a new parameter; names must be unique.
  const Value& add(const std::string& name, Matrix init);
  const Value& at(const std::string& name) const;
  Value& at(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  std::uint64_t step_count() const { return step_count_; }
  void set_step_count(std::uint64_t s) { step_count_ = s; }
  void increment_step() { ++step_count_; }

  // Iteration is ordered by name.
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool same_keys(const ParamStore& other) const;
  /// Bitwise equality of names, shapes and values.
  bool bit_equal(const ParamStore& other) const;

 private:
  std::map<std::string, Value> params_;
  std::uint64_t step_count_ = 0;
};

/// Reverse pass from a scalar loss; returns d loss / d param for every entry
/// of `params` (zeros for parameters the loss does not depend on).
GradMap backward(const Value& loss, const ParamStore& params);

struct AdamState {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Matrix> first_moment;
  std::map<std::string, Matrix> second_moment;

  static AdamState for_params(const ParamStore& params, double learning_rate);
  void validate() const;
};

/// Bias-corrected Adam update, in place. Increments the store's step count.
void adam_step(ParamStore& params, const GradMap& grads, AdamState& state);

struct EmaState {
  double decay = 0.99995;
  std::map<std::string, Matrix> shadow;

  static EmaState from_params(const ParamStore& params, double decay);
  /// Shadow weights as a parameter store with the same names.
  ParamStore as_params() const;
};

/// shadow <- decay * shadow + (1 - decay) * param
void ema_update(EmaState& ema, const ParamStore& params);

/// psi <- lambda * psi + (1 - lambda) * theta
void ida_blend(ParamStore& psi, const ParamStore& theta, double lambda_ida);

}  // namespace fsf
