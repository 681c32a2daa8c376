#include <cmath>

#include "d3etr/boxes.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace d3etr;
using namespace d3etr::box;

TEST_CASE("corner conversion") {
  CHECK(cxcywh_to_xyxy({0.5, 0.5, 1, 1}) == BoxXYXY{0, 0, 1, 1});
  CHECK(cxcywh_to_xyxy({0.5, 0.5, 0, 0}) == BoxXYXY{0.5, 0.5, 0.5, 0.5});
  SplitMix64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const double x1 = rng.uniform(), y1 = rng.uniform();
    const BoxXYXY b{x1, y1, x1 + rng.uniform(), y1 + rng.uniform()};
    const auto r = cxcywh_to_xyxy(xyxy_to_cxcywh(b));
    CHECK(std::abs(r.x1 - b.x1) < 1e-12);
    CHECK(std::abs(r.y1 - b.y1) < 1e-12);
    CHECK(std::abs(r.x2 - b.x2) < 1e-12);
    CHECK(std::abs(r.y2 - b.y2) < 1e-12);
  }
}

TEST_CASE("iou") {
  CHECK(iou({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {1, 1, 2, 2}) == 0.0);
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
  CHECK(iou({0.5, 0.5, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.5}) == 0.0);
}

TEST_CASE("giou") {
  CHECK(giou({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  CHECK(giou({0, 0, 1, 1}, {1, 1, 2, 2}) == doctest::Approx(-0.5).epsilon(1e-14));
  CHECK(giou({0, 0, 1, 1}, {9, 0, 10, 1}) == doctest::Approx(-0.8).epsilon(1e-14));
  CHECK(giou({0.2, 0.2, 0.2, 0.2}, {0.2, 0.2, 0.2, 0.2}) == 0.0);
}

TEST_CASE("box loss") {
  CHECK(box_loss({0.3, 0.4, 0.2, 0.1}, {0.3, 0.4, 0.2, 0.1}) == 0.0);
  CHECK(box_loss({0.6, 0.5, 1, 1}, {0.5, 0.5, 1, 1}) == doctest::Approx(0.5 + 2.0 * 2.0 / 11.0).epsilon(1e-13));
}

TEST_CASE("geometry properties on random boxes") {
  SplitMix64 rng(9);
  for (int i = 0; i < 1000; ++i) {
    const BoxCxCyWH a{rng.uniform(), rng.uniform(), rng.uniform(0, 0.6), rng.uniform(0, 0.6)};
    const BoxCxCyWH b{rng.uniform(), rng.uniform(), rng.uniform(0, 0.6), rng.uniform(0, 0.6)};
    const auto ax = cxcywh_to_xyxy(a), bx = cxcywh_to_xyxy(b);
    const double g = giou(ax, bx);
    CHECK(g <= iou(ax, bx) + 1e-15);
    CHECK(g > -1.0);
    CHECK(g <= 1.0);
    CHECK(std::abs(g - giou(bx, ax)) < 1e-15);
    const double dx = rng.uniform(-1, 1), dy = rng.uniform(-1, 1);
    const BoxXYXY as{ax.x1 + dx, ax.y1 + dy, ax.x2 + dx, ax.y2 + dy};
    const BoxXYXY bs{bx.x1 + dx, bx.y1 + dy, bx.x2 + dx, bx.y2 + dy};
    CHECK(std::abs(giou(as, bs) - g) < 1e-9);
    CHECK(box_loss(a, b) >= 0.0);
  }
}

TEST_CASE("differentiable box loss matches the scalar one") {
  SplitMix64 rng(4);
  std::vector<double> p, t;
  double expect = 0.0;
  for (int i = 0; i < 5; ++i) {
    const BoxCxCyWH a{rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)};
    const BoxCxCyWH b{rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)};
    p.insert(p.end(), {a.cx, a.cy, a.w, a.h});
    t.insert(t.end(), {b.cx, b.cy, b.w, b.h});
    expect += box_loss(a, b);
  }
  const auto P = ad::DiffArray::constant({5, 4}, p);
  const auto T = ad::DiffArray::constant({5, 4}, t);
  CHECK(box_loss_sum(P, T).item() == doctest::Approx(expect).epsilon(1e-13));
  CHECK(box_loss_sum(ad::DiffArray::constant({0, 4}, {}), ad::DiffArray::constant({0, 4}, {})).item() == 0.0);
}

TEST_CASE("box loss gradient away from kinks") {
  SplitMix64 rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ad::ParamStore ps;
    ps.add("p", oracle::random_param(rng, {3, 4}, 0.1, 0.6));
    const auto t = ad::DiffArray::constant({3, 4}, [&] {
      std::vector<double> v(12);
      for (double& x : v) x = rng.uniform(0.1, 0.6);
      return v;
    }());
    worst = std::max(worst, oracle::grad_error(ps, [&](ad::ParamStore& s) { return box_loss_sum(s.get("p"), t); }));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("degenerate boxes stay finite") {
  const auto p = ad::DiffArray::parameter({1, 4}, {0.5, 0.5, 0.0, 0.0});
  const auto t = ad::DiffArray::constant({1, 4}, {0.5, 0.5, 0.0, 0.0});
  const auto l = box_loss_sum(p, t);
  ad::backward(l);
  CHECK(std::isfinite(l.item()));
  for (double g : p.grad()) CHECK(std::isfinite(g));
}
