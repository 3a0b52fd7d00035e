#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace avnet {

// Trainable classes index the model's output channels; kIgnore marks
// uncertain pixels and never appears as a model class.
enum class ClassId : std::uint8_t {
  Background = 0,
  Arteriole = 1,
  Venule = 2,
  Intersection = 3,
};

inline constexpr std::uint8_t kIgnore = 255;
inline constexpr std::size_t kNumClasses = 4;

inline constexpr std::uint8_t class_index(ClassId c) {
  return static_cast<std::uint8_t>(c);
}

inline std::string_view class_name(std::uint8_t label) {
  switch (label) {
    case 0: return "background";
    case 1: return "arteriole";
    case 2: return "venule";
    case 3: return "intersection";
    case kIgnore: return "ignore";
    default: return "unknown";
  }
}

// Per-pixel class labels for a batch, N x H x W row-major.
struct ClassMap {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  ClassMap() = default;
  ClassMap(std::size_t n, std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : batch(n), height(h), width(w), labels(n * h * w, fill) {}

  std::uint8_t& at(std::size_t n, std::size_t y, std::size_t x) {
    return labels[(n * height + y) * width + x];
  }
  std::uint8_t at(std::size_t n, std::size_t y, std::size_t x) const {
    return labels[(n * height + y) * width + x];
  }
  std::size_t size() const { return labels.size(); }
};

}  // namespace avnet
