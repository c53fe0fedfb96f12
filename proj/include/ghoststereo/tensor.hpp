#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace gs {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

i64 shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Dense row-major n-d array of doubles. The whole pipeline runs in double
// so the finite-difference gradient checks share the production code path.
struct Array {
  Shape shape;
  std::vector<double> v;

  Array() = default;
  explicit Array(Shape s) : shape(std::move(s)), v(static_cast<size_t>(shape_numel(shape)), 0.0) {}
  Array(Shape s, double fill)
      : shape(std::move(s)), v(static_cast<size_t>(shape_numel(shape)), fill) {}

  static Array zeros(Shape s) { return Array(std::move(s)); }
  static Array full(Shape s, double val) { return Array(std::move(s), val); }
  static Array scalar(double val) { return Array(Shape{}, val); }

  i64 numel() const { return static_cast<i64>(v.size()); }
  i64 dim(size_t i) const { return shape[i]; }
  int rank() const { return static_cast<int>(shape.size()); }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& operator[](i64 i) { return v[static_cast<size_t>(i)]; }
  double operator[](i64 i) const { return v[static_cast<size_t>(i)]; }

  // Row-major strides, in elements.
  Shape strides() const;

  bool all_finite() const;
  double abs_max() const;
};

// Deterministic RNG used everywhere (init, data generation, sampling).
// Box-Muller instead of std::normal_distribution so sequences are
// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal();                        // N(0, 1)
  i64 uniform_int(i64 lo, i64 hi);        // inclusive bounds

  std::string serialize() const;
  static Rng deserialize(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gs
