#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace coview {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

// normalize to (-pi, pi]
inline double normalize_angle(double a) {
    a = std::fmod(a, 2.0 * M_PI);
    if (a <= -M_PI) a += 2.0 * M_PI;
    if (a > M_PI) a -= 2.0 * M_PI;
    return a;
}

// Planar rigid motion: rotate by yaw, then translate by (x, y).
struct SE2 {
    double x = 0.0;
    double y = 0.0;
    double yaw = 0.0;

    static SE2 make(double x, double y, double yaw) { return {x, y, normalize_angle(yaw)}; }

    Vec2 apply(const Vec2& p) const {
        double c = std::cos(yaw), s = std::sin(yaw);
        return {c * p.x - s * p.y + x, s * p.x + c * p.y + y};
    }

    SE2 compose(const SE2& other) const {
        Vec2 t = apply({other.x, other.y});
        return {t.x, t.y, normalize_angle(yaw + other.yaw)};
    }

    SE2 inverse() const {
        double c = std::cos(yaw), s = std::sin(yaw);
        return {-(c * x + s * y), -(-s * x + c * y), normalize_angle(-yaw)};
    }
};

// Axis-aligned rectangle; w extends along x, l along y.
struct Rect {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double l = 0.0;

    double x_min() const { return cx - 0.5 * w; }
    double x_max() const { return cx + 0.5 * w; }
    double y_min() const { return cy - 0.5 * l; }
    double y_max() const { return cy + 0.5 * l; }
    double area() const { return w * l; }

    bool contains(const Vec2& p, double margin = 0.0) const {
        return p.x >= x_min() - margin && p.x <= x_max() + margin && p.y >= y_min() - margin &&
               p.y <= y_max() + margin;
    }
};

inline double rect_intersection_area(const Rect& a, const Rect& b) {
    double ix = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
    double iy = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    return ix * iy;
}

inline double rect_iou(const Rect& a, const Rect& b) {
    double inter = rect_intersection_area(a, b);
    double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline bool rects_overlap(const Rect& a, const Rect& b, double margin = 0.0) {
    return std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min()) > -margin &&
           std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min()) > -margin;
}

inline Rect aabb_of(std::span<const Vec2> pts) {
    double xmin = pts[0].x, xmax = pts[0].x, ymin = pts[0].y, ymax = pts[0].y;
    for (const Vec2& p : pts) {
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
        ymin = std::min(ymin, p.y);
        ymax = std::max(ymax, p.y);
    }
    return {0.5 * (xmin + xmax), 0.5 * (ymin + ymax), xmax - xmin, ymax - ymin};
}

inline std::vector<Vec2> rect_corners(const Rect& r) {
    return {{r.x_min(), r.y_min()}, {r.x_max(), r.y_min()}, {r.x_max(), r.y_max()}, {r.x_min(), r.y_max()}};
}

// AABB of a rectangle carried through a rigid transform.
inline Rect transform_rect_aabb(const Rect& r, const SE2& t) {
    std::vector<Vec2> corners = rect_corners(r);
    for (Vec2& c : corners) c = t.apply(c);
    return aabb_of(corners);
}

} // namespace coview
