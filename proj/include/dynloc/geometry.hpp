#pragma once

#include <cmath>

namespace dynloc {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  bool operator==(const Vec2& o) const = default;

  double norm() const { return std::hypot(x, y); }
};

inline double distance(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

// Axis-aligned rectangle, min corner inclusive.
struct Rect {
  double min_x = 0.0;
  double min_y = 0.0;
  double max_x = 0.0;
  double max_y = 0.0;

  bool operator==(const Rect& o) const = default;

  double width() const { return max_x - min_x; }
  double height() const { return max_y - min_y; }
  Vec2 center() const { return {(min_x + max_x) / 2.0, (min_y + max_y) / 2.0}; }
  bool contains(const Vec2& p) const {
    return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y;
  }
  bool degenerate() const { return width() <= 0.0 || height() <= 0.0; }

  Rect expanded(double margin) const {
    return {min_x - margin, min_y - margin, max_x + margin, max_y + margin};
  }
  Rect including(const Vec2& p) const {
    return {std::min(min_x, p.x), std::min(min_y, p.y), std::max(max_x, p.x),
            std::max(max_y, p.y)};
  }
};

}  // namespace dynloc
