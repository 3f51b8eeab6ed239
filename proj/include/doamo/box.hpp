#ifndef DOAMO_BOX_HPP_
#define DOAMO_BOX_HPP_

#include <algorithm>
#include <cmath>
#include <string>

namespace doamo {

// Axis-aligned corner box. Units are whatever the caller uses (pixels for
// annotations, [0,1] for anchors).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x2 > x1 && y2 > y1;
  }
  bool operator==(const Box&) const = default;
};

// Intersection over union; 0 for disjoint or degenerate boxes.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline std::string box_str(const Box& b) {
  return "(" + std::to_string(b.x1) + "," + std::to_string(b.y1) + "," + std::to_string(b.x2) +
         "," + std::to_string(b.y2) + ")";
}

}  // namespace doamo

#endif  // DOAMO_BOX_HPP_
