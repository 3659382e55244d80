"""Copula families coupling percentile ranks across goods.

Each copula exposes, for a pre-contract type ``gamma``:

* ``cdf(u, gamma)``        joint distribution on the unit cube,
* ``density(u, gamma)``    its density,
* ``partial_log_density``  componentwise d ln c / d u_j,
* ``conditional_chain``    the inverse Rosenblatt map z -> u used for
  sequential sampling (z uniform on the cube gives u distributed as the
  copula).

Parameters may drift with ``gamma`` through a linear path ``base +
slope * gamma``; a copula is invariant exactly when every slope is zero.
Exact 0/1 components of ``z`` are mapped to 0/1 components of ``u`` so
corner draws stay at corners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import InvalidIntervalError
from .numerics import gauss_rule

_Z_CLIP = 1e-15


@dataclass(frozen=True)
class ParamPath:
    """Scalar copula parameter as an affine function of gamma."""

    base: float
    slope: float = 0.0

    def __call__(self, gamma: float) -> float:
        return self.base + self.slope * float(gamma)

    @property
    def invariant(self) -> bool:
        return self.slope == 0.0


class IndependenceCopula:
    """Product copula: percentiles are independent across goods."""

    def __init__(self, dim: int):
        if dim < 1:
            raise InvalidIntervalError("dim must be >= 1")
        self.dim = int(dim)

    name = "independence"
    is_gamma_invariant = True

    def cdf(self, u, gamma: float = 0.0):
        u = np.asarray(u, dtype=float)
        return np.prod(np.clip(u, 0.0, 1.0), axis=-1)

    def density(self, u, gamma: float = 0.0):
        u = np.asarray(u, dtype=float)
        return np.ones(u.shape[:-1], dtype=float)

    def partial_log_density(self, u, gamma: float = 0.0):
        u = np.asarray(u, dtype=float)
        return np.zeros_like(u)

    def conditional_chain(self, z, gamma: float = 0.0):
        return np.asarray(z, dtype=float).copy()


class ClaytonCopula:
    """Clayton copula with lower-tail dependence, alpha > 0.

    C(u) = (sum_j u_j^-alpha - n + 1)^(-1/alpha)
    c(u) = prod_{k=1}^{n-1}(k*alpha + 1) * (prod_j u_j)^-(alpha+1)
           * (sum_j u_j^-alpha - n + 1)^-(n + 1/alpha)
    """

    name = "clayton"

    def __init__(self, dim: int, alpha: float, alpha_slope: float = 0.0):
        if dim < 2:
            raise InvalidIntervalError("clayton copula needs dim >= 2")
        self.dim = int(dim)
        self.alpha = ParamPath(float(alpha), float(alpha_slope))

    @property
    def is_gamma_invariant(self) -> bool:
        return self.alpha.invariant

    def _alpha(self, gamma: float) -> float:
        a = self.alpha(gamma)
        if a <= 0:
            raise InvalidIntervalError(f"clayton alpha must be positive, got {a}")
        return a

    def cdf(self, u, gamma: float = 0.0):
        a = self._alpha(gamma)
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        with np.errstate(divide="ignore", over="ignore"):
            s = np.sum(u ** (-a), axis=-1) - self.dim + 1.0
            out = np.where(np.isfinite(s), np.maximum(s, 1.0) ** (-1.0 / a), 0.0)
        return out

    def density(self, u, gamma: float = 0.0):
        a = self._alpha(gamma)
        u = np.asarray(u, dtype=float)
        n = self.dim
        lead = math.prod(k * a + 1.0 for k in range(1, n))
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            s = np.sum(u ** (-a), axis=-1) - n + 1.0
            out = lead * np.prod(u, axis=-1) ** (-(a + 1.0)) * s ** (-(n + 1.0 / a))
        return out

    def partial_log_density(self, u, gamma: float = 0.0):
        a = self._alpha(gamma)
        u = np.asarray(u, dtype=float)
        n = self.dim
        s = np.sum(u ** (-a), axis=-1, keepdims=True) - n + 1.0
        return -(a + 1.0) / u + a * (n + 1.0 / a) * u ** (-(a + 1.0)) / s

    def conditional_chain(self, z, gamma: float = 0.0):
        a = self._alpha(gamma)
        z = np.asarray(z, dtype=float)
        zc = np.clip(z, _Z_CLIP, 1.0 - _Z_CLIP)
        u = np.empty_like(zc)
        u[..., 0] = zc[..., 0]
        t = u[..., 0] ** (-a)  # running sum_j u_j^-a - (k-1) + 1
        for k in range(1, self.dim):
            expo = -a / (1.0 + a * k)
            u[..., k] = (t * (zc[..., k] ** expo - 1.0) + 1.0) ** (-1.0 / a)
            t = t + u[..., k] ** (-a) - 1.0
        corner = (z <= 0.0) | (z >= 1.0)
        return np.where(corner, np.clip(z, 0.0, 1.0), u)


_GL6_W = np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904])
_GL6_X = np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970])
_GL12_W = np.array(
    [0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
     0.2031674267230659, 0.2334925365383547, 0.2491470458134029]
)
_GL12_X = np.array(
    [0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
     0.5873179542866171, 0.3678314989981802, 0.1252334085114692]
)
_GL20_W = np.array(
    [0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
     0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
     0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
     0.1527533871307259]
)
_GL20_X = np.array(
    [0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
     0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
     0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
     0.07652652113349733]
)


def bvn_upper(dh: float, dk: float, r: float) -> float:
    """P(X > dh, Y > dk) for a standard bivariate normal with correlation r.

    Deterministic Gauss-Legendre evaluation of the angle-parameterized
    integral, with the classic tail expansion for |r| >= 0.925; absolute
    accuracy around 5e-16.
    """
    if math.isinf(dh) or math.isinf(dk):
        if dh == math.inf or dk == math.inf:
            return 0.0
        if dh == -math.inf:
            return 1.0 if dk == -math.inf else float(ndtr(-dk))
        return float(ndtr(-dh))
    if r == 0.0:
        return float(ndtr(-dh) * ndtr(-dk))

    tp = 2.0 * math.pi
    h, k, hk = float(dh), float(dk), float(dh) * float(dk)
    if abs(r) < 0.3:
        w, x = _GL6_W, _GL6_X
    elif abs(r) < 0.75:
        w, x = _GL12_W, _GL12_X
    else:
        w, x = _GL20_W, _GL20_X
    w = np.concatenate([w, w])
    x = np.concatenate([1.0 - x, 1.0 + x])

    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = math.asin(r)
        sn = np.sin(0.5 * asr * x)
        bvn = float(np.dot(np.exp((sn * hk - hs) / (1.0 - sn * sn)), w))
        return max(0.0, min(1.0, bvn * asr / (2.0 * tp) + float(ndtr(-h) * ndtr(-k))))

    if r < 0.0:
        k, hk = -k, -hk
    bvn = 0.0
    if abs(r) < 1.0:
        a_s = (1.0 - r) * (1.0 + r)
        a = math.sqrt(a_s)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        asr = -0.5 * (bs / a_s + hk)
        if asr > -100.0:
            bvn = a * math.exp(asr) * (
                1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0
                + c * d * a_s * a_s / 5.0
            )
        if -hk < 100.0:
            b = math.sqrt(bs)
            bvn -= (
                math.exp(-0.5 * hk)
                * math.sqrt(tp)
                * float(ndtr(-b / a))
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
            )
        a *= 0.5
        xs = (a * x) ** 2
        rs = np.sqrt(1.0 - xs)
        asr_v = -0.5 * (bs / xs + hk)
        ix = asr_v > -100.0
        if np.any(ix):
            term = np.exp(-0.5 * hk * (1.0 - rs[ix]) / (1.0 + rs[ix])) / rs[ix] - (
                1.0 + c * xs[ix] * (1.0 + d * xs[ix])
            )
            bvn += a * float(np.dot(np.exp(asr_v[ix]) * term, w[ix]))
        bvn = -bvn / tp
    if r > 0.0:
        bvn += float(ndtr(-max(h, k)))
    else:
        bvn = -bvn
        if k > h:
            if h < 0.0:
                bvn += float(ndtr(k) - ndtr(h))
            else:
                bvn += float(ndtr(-h) - ndtr(-k))
    return max(0.0, min(1.0, bvn))


class GaussianCopula:
    """Gaussian copula with an equicorrelated matrix, |rho| < 1.

    For dim n the correlation matrix is (1-rho) I + rho J; rho may drift
    with gamma through a linear path.
    """

    name = "gaussian"

    def __init__(self, dim: int, rho: float, rho_slope: float = 0.0):
        if dim < 2:
            raise InvalidIntervalError("gaussian copula needs dim >= 2")
        self.dim = int(dim)
        self.rho = ParamPath(float(rho), float(rho_slope))

    @property
    def is_gamma_invariant(self) -> bool:
        return self.rho.invariant

    def _rho(self, gamma: float) -> float:
        r = self.rho(gamma)
        n = self.dim
        if not (-1.0 / (n - 1) < r < 1.0):
            raise InvalidIntervalError(f"equicorrelation rho {r} invalid for dim {n}")
        return r

    def density(self, u, gamma: float = 0.0):
        r = self._rho(gamma)
        n = self.dim
        u = np.asarray(u, dtype=float)
        x = ndtri(np.clip(u, _Z_CLIP, 1.0 - _Z_CLIP))
        det = (1.0 - r) ** (n - 1) * (1.0 + (n - 1) * r)
        # (R^-1 - I) x computed via the closed form for equicorrelation
        srow = np.sum(x, axis=-1, keepdims=True)
        rinv_x = (x - r / (1.0 + (n - 1) * r) * srow) / (1.0 - r)
        quad = np.sum(x * (rinv_x - x), axis=-1)
        return np.exp(-0.5 * quad) / math.sqrt(det)

    def partial_log_density(self, u, gamma: float = 0.0):
        r = self._rho(gamma)
        n = self.dim
        u = np.asarray(u, dtype=float)
        x = ndtri(np.clip(u, _Z_CLIP, 1.0 - _Z_CLIP))
        srow = np.sum(x, axis=-1, keepdims=True)
        rinv_x = (x - r / (1.0 + (n - 1) * r) * srow) / (1.0 - r)
        phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return -(rinv_x - x) / phi

    def _cholesky(self, gamma: float) -> np.ndarray:
        r = self._rho(gamma)
        n = self.dim
        corr = np.full((n, n), r)
        np.fill_diagonal(corr, 1.0)
        return np.linalg.cholesky(corr)

    def conditional_chain(self, z, gamma: float = 0.0):
        z = np.asarray(z, dtype=float)
        chol = self._cholesky(gamma)
        xi = ndtri(np.clip(z, _Z_CLIP, 1.0 - _Z_CLIP))
        x = xi @ chol.T
        u = ndtr(x)
        corner = (z <= 0.0) | (z >= 1.0)
        return np.where(corner, np.clip(z, 0.0, 1.0), u)

    def cdf(self, u, gamma: float = 0.0):
        r = self._rho(gamma)
        u = np.asarray(u, dtype=float)
        flat = np.atleast_2d(u.reshape(-1, self.dim))
        out = np.array([self._cdf_point(row, r) for row in flat])
        return out.reshape(u.shape[:-1])

    def _cdf_point(self, u, r, order: int = 48):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if np.any(u <= 0.0):
            return 0.0
        active = u < 1.0
        if not np.any(active):
            return 1.0
        vals = u[active]
        if vals.size == 1:
            return float(vals[0])
        x = ndtri(vals)
        if vals.size == 2:
            return bvn_upper(-x[0], -x[1], r)
        # condition on the first coordinate and recurse on the
        # equicorrelated remainder (conditional correlation r/(1+r))
        rule = gauss_rule(order, 0.0, float(vals[0]))
        rcond = r / (1.0 + r)
        scale = math.sqrt(1.0 - r * r)
        total = 0.0
        sub = GaussianCopula(vals.size - 1, rcond)
        for t, wt in zip(rule.nodes, rule.weights):
            xt = ndtri(t)
            cond_u = ndtr((x[1:] - r * xt) / scale)
            total += wt * sub._cdf_point(cond_u, rcond)
        return total


def make_copula(name: str, dim: int, **params):
    """Build a copula by registry name: independence | clayton | gaussian."""
    name = name.lower()
    if name == "independence":
        return IndependenceCopula(dim)
    if name == "clayton":
        return ClaytonCopula(dim, params.get("alpha", 1.0), params.get("alpha_slope", 0.0))
    if name == "gaussian":
        return GaussianCopula(dim, params.get("rho", 0.0), params.get("rho_slope", 0.0))
    raise InvalidIntervalError(f"unknown copula family '{name}'")
