#pragma once

#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ornet/autodiff.hpp"

namespace ornet {

/// Named trainable tensors in registration order. Names are unique; the order
/// fixes checkpoint layout and optimizer state layout.
class ParameterStore {
 public:
  /// Fan-in scaled uniform weights U(-1/sqrt(rows), 1/sqrt(rows)).
  ad::Tensor add_weight(std::string name, std::size_t rows, std::size_t cols, std::mt19937_64& rng);
  ad::Tensor add_zeros(std::string name, std::size_t rows, std::size_t cols);

  [[nodiscard]] const std::vector<std::pair<std::string, ad::Tensor>>& entries() const {
    return entries_;
  }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  /// Total number of scalar parameters.
  [[nodiscard]] std::size_t scalar_count() const;
  [[nodiscard]] bool contains(std::string_view name) const;
  [[nodiscard]] ad::Tensor get(std::string_view name) const;

  void zero_grad();

 private:
  ad::Tensor add(std::string name, ad::Tensor t);
  std::vector<std::pair<std::string, ad::Tensor>> entries_;
};

/// y = x W + b with parameters registered under `<name>.weight` and `<name>.bias`.
struct Linear {
  ad::Tensor weight;
  ad::Tensor bias;

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in,
                       std::size_t out, std::mt19937_64& rng);
  [[nodiscard]] ad::Tensor operator()(const ad::Tensor& x) const;
};

/// Affine layers with relu between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParameterStore& store, const std::string& name,
                    std::initializer_list<std::size_t> widths, std::mt19937_64& rng);
  [[nodiscard]] ad::Tensor operator()(const ad::Tensor& x) const;
};

}  // namespace ornet
