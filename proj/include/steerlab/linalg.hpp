#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "steerlab/error.hpp"

// Small dense helpers. Accumulation is always in double regardless of the
// element type of the inputs.
namespace steerlab::linalg {

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: size " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename A, typename B>
double dot(const std::vector<A>& a, const std::vector<B>& b) {
  return dot(std::span<const A>(a), std::span<const B>(b));
}

template <typename T>
double squared_norm(std::span<const T> a) {
  double acc = 0.0;
  for (const auto v : a) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename T>
double norm(std::span<const T> a) {
  return std::sqrt(squared_norm(a));
}

template <typename T>
double norm(const std::vector<T>& a) {
  return norm(std::span<const T>(a));
}

template <typename T>
double cosine(std::span<const T> a, std::span<const T> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw ValueError("cosine of a zero vector");
  return dot(a, b) / (na * nb);
}

template <typename T>
double cosine(const std::vector<T>& a, const std::vector<T>& b) {
  return cosine(std::span<const T>(a), std::span<const T>(b));
}

template <typename T>
std::vector<double> to_double(std::span<const T> a) {
  return {a.begin(), a.end()};
}

template <typename T>
std::vector<float> to_float(std::span<const T> a) {
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(a[i]);
  return out;
}

template <typename T>
bool all_finite(std::span<const T> a) {
  for (const auto v : a) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

}  // namespace steerlab::linalg
