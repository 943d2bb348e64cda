#!/usr/bin/env python3
"""Brute-force evaluation of the loss fixtures used in tests/fixtures.rs.

Every quantity is computed term by term from the defining sums with plain
floats, sharing no code with the Rust implementation.
"""
import math


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def relative(points):
    n = len(points)
    d = [[dist(p, q) for q in points] for p in points]
    mu = [sum(row) / n for row in d]
    return [[d[i][j] / mu[i] for j in range(n)] for i in range(n)], mu


def relaxed_contrastive(points, w, delta):
    n = len(points)
    r, _ = relative(points)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += w[i][j] * r[i][j] ** 2
            total += (1 - w[i][j]) * max(delta - r[i][j], 0.0) ** 2
    return total / n


def relaxed_ms(points, w, alpha, beta, delta):
    n = len(points)
    r, _ = relative(points)
    total = 0.0
    for i in range(n):
        pos = sum(w[i][j] * math.exp(alpha * r[i][j]) for j in range(n) if j != i)
        neg = sum((1 - w[i][j]) * math.exp(beta * (delta - r[i][j])) for j in range(n) if j != i)
        total += math.log(1 + pos) / alpha + math.log(1 + neg) / beta
    return total / n


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def hkd(student, teacher, t):
    p = softmax([v / t for v in teacher])
    q = softmax([v / t for v in student])
    return t * t * sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


if __name__ == "__main__":
    pts = [[0.0], [1.0], [3.0]]
    w = [[1.0, 1.0, 0.0], [1.0, 1.0, 0.5], [0.0, 0.5, 1.0]]
    r, mu = relative(pts)
    print("mu", mu)
    print("r01 r12 r20", r[0][1], r[1][2], r[2][0])
    print("relaxed_contrastive", repr(relaxed_contrastive(pts, w, 1.0)))
    print("relaxed_ms a=1 b=2", repr(relaxed_ms(pts, w, 1.0, 2.0, 1.0)))
    # unrelaxed: positive-only batch at equal spacing (0,1,2), all y = 1
    eq = [[0.0], [1.0], [2.0]]
    ones = [[1.0] * 3 for _ in range(3)]
    print("unrelaxed equal-spacing positives", repr(relaxed_contrastive(eq, ones, 1.0)))
    print("hkd (2,0) vs (0,0), T=1", repr(hkd([0.0, 0.0], [2.0, 0.0], 1.0)))
    print("exp(-1)", repr(math.exp(-1)), "exp(-2)", repr(math.exp(-2)), "exp(-4)", repr(math.exp(-4)))
