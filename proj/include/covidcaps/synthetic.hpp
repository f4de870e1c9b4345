/*
 * Copyright 2026 The covidcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Seeded toy shape datasets for smoke tests and demos.

#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "covidcaps/trainer.hpp"

namespace covidcaps::synthetic {

enum class Shape2d {
  filled_square,  // side in [8, 10]: 64..100 bright pixels
  hollow_ring,    // one-pixel square outline, side in [8, 12]: 28..44 bright pixels
  cross,
  diagonal,
  blank,
};

inline constexpr double kBrightThreshold = 0.5;

/// Draws `shape` at a random position into a [1,size,size] canvas with
/// background noise in [0, 0.2) and foreground in [0.8, 1.0).
template <std::floating_point T>
Tensor<T> draw(Shape2d shape, std::size_t size, std::mt19937_64& rng) {
  if (size < 16) throw ParameterError("synthetic images need size >= 16");
  std::uniform_real_distribution<double> bg(0.0, 0.2), fg(0.8, 1.0);
  Tensor<T> img(covidcaps::Shape{1, size, size});
  for (auto& v : img.data()) v = static_cast<T>(bg(rng));
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto set = [&](std::size_t y, std::size_t x) { img[y * size + x] = static_cast<T>(fg(rng)); };

  switch (shape) {
    case Shape2d::filled_square: {
      const std::size_t a = pick(8, 10);
      const std::size_t y0 = pick(0, size - a), x0 = pick(0, size - a);
      for (std::size_t y = y0; y < y0 + a; ++y)
        for (std::size_t x = x0; x < x0 + a; ++x) set(y, x);
      break;
    }
    case Shape2d::hollow_ring: {
      const std::size_t a = pick(8, 12);
      const std::size_t y0 = pick(0, size - a), x0 = pick(0, size - a);
      for (std::size_t y = y0; y < y0 + a; ++y)
        for (std::size_t x = x0; x < x0 + a; ++x)
          if (y == y0 || y == y0 + a - 1 || x == x0 || x == x0 + a - 1) set(y, x);
      break;
    }
    case Shape2d::cross: {
      const std::size_t a = pick(7, 11) | 1;
      const std::size_t y0 = pick(0, size - a), x0 = pick(0, size - a);
      for (std::size_t i = 0; i < a; ++i) {
        set(y0 + a / 2, x0 + i);
        set(y0 + i, x0 + a / 2);
      }
      break;
    }
    case Shape2d::diagonal: {
      const std::size_t a = pick(8, 12);
      const std::size_t y0 = pick(0, size - a), x0 = pick(0, size - a);
      for (std::size_t i = 0; i < a; ++i) set(y0 + i, x0 + i);
      break;
    }
    case Shape2d::blank:
      break;
  }
  return img;
}

inline std::size_t bright_pixels(const Tensor<float>& img) {
  std::size_t n = 0;
  for (float v : img.data()) n += v > kBrightThreshold;
  return n;
}

/// Linear rule on the bright-pixel count: squares have at least 64, rings
/// at most 44.
inline bool pixel_count_rule(const Tensor<float>& img) { return bright_pixels(img) >= 54; }

/// Binary set: label 1 = filled square, 0 = hollow ring, classes alternate.
template <std::floating_point T>
LabeledImages<T> squares_vs_rings(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0xC0FFEEu};
  std::mt19937_64 rng(seq);
  LabeledImages<T> set;
  set.scheme = LabelScheme::covid_binary;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i % 2 == 0;
    set.push_back(draw<T>(pos ? Shape2d::filled_square : Shape2d::hollow_ring, size, rng),
                  pos ? 1 : 0, pos ? "COVID-19" : "Normal");
  }
  return set;
}

/// Five-class set over all shapes, cycling through classes.
template <std::floating_point T>
LabeledImages<T> five_shapes(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x5A5Eu};
  std::mt19937_64 rng(seq);
  LabeledImages<T> set;
  set.scheme = LabelScheme::nih_5class;
  const auto names = class_names(LabelScheme::nih_5class);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % 5;
    set.push_back(draw<T>(static_cast<Shape2d>(k), size, rng), k, names[k]);
  }
  return set;
}

}  // namespace covidcaps::synthetic
