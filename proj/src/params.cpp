#include "ornet/params.hpp"

#include <algorithm>
#include <cmath>

#include "ornet/errors.hpp"

namespace ornet {

ad::Tensor ParameterStore::add(std::string name, ad::Tensor t) {
  if (contains(name)) throw UsageError("duplicate parameter name " + name);
  t.set_requires_grad(true);
  entries_.emplace_back(std::move(name), t);
  return t;
}

ad::Tensor ParameterStore::add_weight(std::string name, std::size_t rows, std::size_t cols,
                                      std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = u(rng);
  return add(std::move(name), ad::Tensor::from(rows, cols, std::move(v)));
}

ad::Tensor ParameterStore::add_zeros(std::string name, std::size_t rows, std::size_t cols) {
  return add(std::move(name), ad::Tensor::zeros(rows, cols));
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

bool ParameterStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

ad::Tensor ParameterStore::get(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw UsageError("no parameter named " + std::string(name));
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

Linear Linear::create(ParameterStore& store, const std::string& name, std::size_t in,
                      std::size_t out, std::mt19937_64& rng) {
  return {store.add_weight(name + ".weight", in, out, rng), store.add_zeros(name + ".bias", 1, out)};
}

ad::Tensor Linear::operator()(const ad::Tensor& x) const {
  return ad::add_row(ad::matmul(x, weight), bias);
}

Mlp Mlp::create(ParameterStore& store, const std::string& name,
                std::initializer_list<std::size_t> widths, std::mt19937_64& rng) {
  if (widths.size() < 2) throw UsageError("an MLP needs at least input and output widths");
  Mlp mlp;
  auto it = widths.begin();
  std::size_t in = *it++;
  for (std::size_t k = 0; it != widths.end(); ++it, ++k) {
    mlp.layers.push_back(Linear::create(store, name + "." + std::to_string(k), in, *it, rng));
    in = *it;
  }
  return mlp;
}

ad::Tensor Mlp::operator()(const ad::Tensor& x) const {
  ad::Tensor h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    h = layers[k](h);
    if (k + 1 < layers.size()) h = ad::relu(h);
  }
  return h;
}

}  // namespace ornet
