"""Deterministic numerical primitives: quadrature, root finding, finite
differences, and counter-based random streams.

Everything here is a pure function of its inputs.  In particular the
random streams are keyed by ``(seed, stream_id, counter)`` so parallel
callers can split work without sharing state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import (
    BracketError,
    DomainStencilError,
    EvaluationFailure,
    InvalidIntervalError,
)

DEFAULT_ROOT_TOL = 1e-10
DEFAULT_FD_STEP_FRACTION = 1e-5


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes and weights on a closed interval."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.nodes.shape != self.weights.shape:
            raise InvalidIntervalError("nodes and weights must have the same length")

    def integrate(self, f) -> float:
        """Apply the rule to a vectorized callable."""
        return float(np.dot(self.weights, np.asarray(f(self.nodes), dtype=float)))


@lru_cache(maxsize=64)
def _leggauss(order: int):
    x, w = np.polynomial.legendre.leggauss(int(order))
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_rule(order: int, lo: float, hi: float) -> QuadratureRule:
    """Gauss-Legendre rule with ``order`` points mapped to [lo, hi].

    Exact for polynomials of degree <= 2*order - 1.
    """
    if order < 1:
        raise InvalidIntervalError(f"order must be >= 1, got {order}")
    if not lo < hi:
        raise InvalidIntervalError(f"need lo < hi, got [{lo}, {hi}]")
    x, w = _leggauss(int(order))
    half = 0.5 * (hi - lo)
    return QuadratureRule(nodes=lo + half * (x + 1.0), weights=half * w)


def composite_rule(lo: float, hi: float, order: int, breaks=()) -> QuadratureRule:
    """Piecewise Gauss-Legendre rule split at the interior ``breaks``.

    Breakpoints outside (lo, hi) are discarded; duplicates are merged.
    Used to keep integrands smooth on each panel (kinks at option strike
    prices and at the edges of moving supports).
    """
    if not lo < hi:
        raise InvalidIntervalError(f"need lo < hi, got [{lo}, {hi}]")
    pts = [lo, hi]
    for b in np.atleast_1d(np.asarray(breaks, dtype=float)):
        if lo < b < hi:
            pts.append(float(b))
    edges = np.unique(np.asarray(pts, dtype=float))
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a < 1e-15 * max(1.0, abs(a)):
            continue
        r = gauss_rule(order, a, b)
        nodes.append(r.nodes)
        weights.append(r.weights)
    return QuadratureRule(np.concatenate(nodes), np.concatenate(weights))


def geometric_breaks(depth: int = 6, coarse=(0.1, 0.5, 0.9)) -> np.ndarray:
    """Breakpoints on (0, 1) geometrically graded toward both endpoints.

    Suitable for integrands with integrable power singularities at the
    corners of the unit cube (e.g. copula densities).
    """
    fine = [10.0 ** (-k) for k in range(2, depth + 2)]
    pts = sorted(set(fine) | {1.0 - f for f in fine} | set(coarse))
    return np.asarray(pts, dtype=float)


def tensor_rule(box, orders, breaks=None):
    """Tensor product of per-axis composite rules.

    Returns ``(points, weights)`` with points of shape (N, d).
    """
    box = [tuple(map(float, ab)) for ab in box]
    d = len(box)
    orders = [int(o) for o in (orders if np.ndim(orders) else [orders] * d)]
    if len(orders) != d:
        raise InvalidIntervalError("orders must match the box dimension")
    if breaks is None:
        breaks = [()] * d
    axes = [
        composite_rule(lo, hi, orders[k], breaks[k])
        for k, (lo, hi) in enumerate(box)
    ]
    grids = np.meshgrid(*[r.nodes for r in axes], indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*[r.weights for r in axes], indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return points, weights


def tensor_integrate(f, box, orders, breaks=None) -> float:
    """Integrate ``f`` over a box with tensor-product Gauss quadrature.

    ``f`` must accept an (N, d) array of points and return N values.
    Non-finite evaluations raise :class:`EvaluationFailure` carrying the
    first offending point.
    """
    points, weights = tensor_rule(box, orders, breaks)
    vals = np.asarray(f(points), dtype=float).reshape(-1)
    if vals.shape[0] != points.shape[0]:
        raise EvaluationFailure("integrand returned a wrong number of values")
    bad = ~np.isfinite(vals)
    if bad.any():
        raise EvaluationFailure(
            "integrand returned a non-finite value", point=points[int(np.argmax(bad))]
        )
    return float(np.dot(weights, vals))


def bisect_root(g, lo: float, hi: float, tol: float = DEFAULT_ROOT_TOL) -> float:
    """Deterministic bisection for a sign change of ``g`` on [lo, hi].

    Accepts an exact root at either endpoint.  Raises
    :class:`BracketError` when both endpoints have the same strict sign.
    Stops when |g| <= tol or the bracket width falls below tol.
    """
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise InvalidIntervalError(f"need lo < hi, got [{lo}, {hi}]")
    glo, ghi = float(g(lo)), float(g(hi))
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    if glo * ghi > 0.0:
        raise BracketError(f"g({lo})={glo} and g({hi})={ghi} have the same sign")
    a, b, ga = lo, hi, glo
    while b - a > tol:
        m = 0.5 * (a + b)
        gm = float(g(m))
        if gm == 0.0:
            return m
        if ga * gm < 0.0:
            b = m
        else:
            a, ga = m, gm
    return 0.5 * (a + b)


def fd_partial(f, point, axis: int, step: float, bounds=None) -> float:
    """Central difference of ``f`` along one axis at ``point``.

    ``bounds`` is an optional list of per-axis (lo, hi); when given and
    the stencil leaves the box, :class:`DomainStencilError` is raised so
    the caller can shrink the step or switch to a one-sided stencil.
    """
    point = np.asarray(point, dtype=float)
    if step <= 0:
        raise InvalidIntervalError("step must be positive")
    hvec = np.zeros_like(point)
    hvec[axis] = step
    if bounds is not None:
        lo, hi = bounds[axis]
        if point[axis] - step < lo or point[axis] + step > hi:
            raise DomainStencilError(
                f"stencil [{point[axis] - step}, {point[axis] + step}] leaves "
                f"axis {axis} domain [{lo}, {hi}]"
            )
    return float((f(point + hvec) - f(point - hvec)) / (2.0 * step))


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id, counter).

    The output is a pure function of the key, so distinct stream ids can
    be handed to parallel workers with no shared state.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        bg = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64)
        )
        if self.counter:
            bg.advance(int(self.counter))
        return np.random.Generator(bg)

    def advanced(self, steps: int) -> "RngStream":
        return replace(self, counter=self.counter + int(steps))

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(seed=self.seed, stream_id=stream_id)


def uniform_draws(stream: RngStream, count: int, dim: int) -> np.ndarray:
    """Reproducible U([0,1]^dim) draws; returns an array of shape (count, dim)."""
    if count < 1 or dim < 1:
        raise InvalidIntervalError("count and dim must be positive")
    return stream.generator().random((int(count), int(dim)))
