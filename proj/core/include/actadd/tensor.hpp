#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace actadd {

// Dense row-major float matrix. Rows are token positions almost everywhere in
// this library.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool empty() const noexcept { return data.empty(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

}  // namespace actadd
