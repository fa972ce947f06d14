#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rbc {

/// Raised when an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on tensor/mask shape disagreement.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kIgnore = 255;

/// Dense channel-major (C, H, W) array.
template <typename T>
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c, int h, int w, T fill = T(0))
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }

  T& at(int c, int y, int x) { return data[(c * plane()) + static_cast<std::size_t>(y) * width + x]; }
  const T& at(int c, int y, int x) const {
    return data[(c * plane()) + static_cast<std::size_t>(y) * width + x];
  }

  T* channel(int c) { return data.data() + c * plane(); }
  const T* channel(int c) const { return data.data() + c * plane(); }

  bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(channels, height, width);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

/// Single-channel 8-bit label map, row-major (H, W).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = kBackground)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return data.size(); }
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const Mask&) const = default;
};

template <typename T>
void require_same_extent(const Tensor<T>& t, const Mask& m, const char* what) {
  if (t.height != m.height || t.width != m.width)
    throw ShapeError(std::string(what) + ": tensor is " + std::to_string(t.height) + "x" +
                     std::to_string(t.width) + ", mask is " + std::to_string(m.height) + "x" +
                     std::to_string(m.width));
}

inline void require_same_extent(const Mask& a, const Mask& b, const char* what) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError(std::string(what) + ": mask extents differ");
}

}  // namespace rbc
