#pragma once

#include <algorithm>
#include <array>

namespace dsaa {

/// Axis-aligned box in normalized image coordinates.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool valid() const { return x0 < x1 && y0 < y1; }
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
  std::array<double, 4> coords() const { return {x0, y0, x1, y1}; }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace dsaa
