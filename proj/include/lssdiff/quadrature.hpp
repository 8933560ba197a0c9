#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "lssdiff/error.hpp"

namespace lssdiff {

using cplx = std::complex<double>;

/// Gauss-Legendre rule on [-1, 1].
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Nodes by Newton iteration on the Legendre recurrence, started from the
/// Tricomi approximation. Accurate to machine precision for order <= ~500.
inline QuadratureRule gauss_legendre(int order) {
  if (order < 1) throw InvalidArgument("gauss_legendre: order must be >= 1");
  QuadratureRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  const int half = (order + 1) / 2;
  for (int i = 0; i < half; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (order + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= order; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = pk;
      }
      dp = order * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // recompute derivative at the converged node
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= order; ++k) {
      const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = pk;
    }
    dp = order * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = -x;
    rule.nodes[order - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[order - 1 - i] = w;
  }
  return rule;
}

/// One quadrature node on a complex path: integral ~= sum f(z) * dz.
struct PathNode {
  cplx z;
  cplx dz;
};

/// Composite Gauss-Legendre nodes on the straight segment a -> b, using
/// panels of `panel_order` nodes with about `nodes` nodes in total.
inline std::vector<PathNode> segment_nodes(cplx a, cplx b, int nodes,
                                           int panel_order = 16) {
  if (nodes < 1) throw InvalidArgument("segment_nodes: nodes must be >= 1");
  const int order = std::min(nodes, panel_order);
  const int panels = std::max(1, nodes / order);
  static thread_local int cached_order = 0;
  static thread_local QuadratureRule cached;
  if (cached_order != order) {
    cached = gauss_legendre(order);
    cached_order = order;
  }
  std::vector<PathNode> out;
  out.reserve(static_cast<std::size_t>(panels) * order);
  const cplx step = (b - a) / static_cast<double>(panels);
  for (int k = 0; k < panels; ++k) {
    const cplx lo = a + step * static_cast<double>(k);
    const cplx mid = lo + 0.5 * step;
    for (int i = 0; i < order; ++i) {
      out.push_back({mid + 0.5 * step * cached.nodes[i],
                     0.5 * step * cached.weights[i]});
    }
  }
  return out;
}

/// Trapezoidal nodes on the circle |xi| = radius, anticlockwise.
inline std::vector<PathNode> circle_nodes(double radius, int nodes) {
  std::vector<PathNode> out(nodes);
  const double dtheta = 2.0 * std::numbers::pi / nodes;
  for (int k = 0; k < nodes; ++k) {
    const cplx xi = std::polar(radius, k * dtheta);
    out[k] = {xi, cplx(0.0, 1.0) * xi * dtheta};
  }
  return out;
}

}  // namespace lssdiff
