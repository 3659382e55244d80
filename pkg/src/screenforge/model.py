"""Primitives of the screening environment.

A :class:`JointModel` bundles the prior over the pre-contract type
``gamma``, one conditional marginal per good for the valuation vector
``theta``, and a copula coupling percentile ranks across goods.  The
joint density factorizes as

    f(theta | gamma) = c(F^1(theta^1|gamma), ..., F^n(theta^n|gamma))
                       * prod_j f^j(theta^j|gamma)

Marginals with moving supports are embedded in a fixed enclosing box
with the density extended by zero, so every conditional cdf is pinned
at 0/1 on the box boundary for all gamma.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import copulas
from .errors import (
    ConfigError,
    DensityZeroError,
    InvalidIntervalError,
    InvarianceRequiredError,
    QuantileError,
)
from .numerics import DEFAULT_FD_STEP_FRACTION, bisect_root, tensor_integrate

_FD_GAMMA_STEP = 1e-6


# ---------------------------------------------------------------------------
# prior over the pre-contract type
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaPrior:
    """Distribution of the pre-contract type on [lo, hi]."""

    lo: float
    hi: float
    cdf: Callable
    pdf: Callable
    label: str = ""

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidIntervalError("prior support is degenerate")


def uniform_prior(lo: float = 0.0, hi: float = 1.0) -> GammaPrior:
    width = hi - lo

    def cdf(g):
        return np.clip((np.asarray(g, dtype=float) - lo) / width, 0.0, 1.0)

    def pdf(g):
        g = np.asarray(g, dtype=float)
        return np.where((g >= lo) & (g <= hi), 1.0 / width, 0.0)

    return GammaPrior(lo, hi, cdf, pdf, label=f"uniform[{lo},{hi}]")


def truncated_exponential_prior(rate: float, lo: float, hi: float) -> GammaPrior:
    if rate <= 0:
        raise InvalidIntervalError("rate must be positive")
    norm = np.exp(-rate * lo) - np.exp(-rate * hi)

    def cdf(g):
        g = np.clip(np.asarray(g, dtype=float), lo, hi)
        return (np.exp(-rate * lo) - np.exp(-rate * g)) / norm

    def pdf(g):
        g = np.asarray(g, dtype=float)
        inside = (g >= lo) & (g <= hi)
        return np.where(inside, rate * np.exp(-rate * g) / norm, 0.0)

    return GammaPrior(lo, hi, cdf, pdf, label=f"exp({rate})[{lo},{hi}]")


def hazard(prior: GammaPrior, gamma: float) -> float:
    """Inverse hazard rate (1 - G(gamma)) / g(gamma) of the type prior."""
    g = float(prior.pdf(gamma))
    if g <= 0.0:
        if float(prior.cdf(gamma)) >= 1.0:
            return 0.0
        raise DensityZeroError(f"prior density vanishes at gamma={gamma}")
    return float((1.0 - prior.cdf(gamma)) / g)


# ---------------------------------------------------------------------------
# conditional marginals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalMarginal:
    """One good's valuation distribution conditional on the type.

    ``cdf``, ``pdf`` and the optional derivative/quantile callables take
    ``(theta, gamma)`` with ``theta`` vectorized and ``gamma`` scalar.
    ``impulse_fn`` supplies F_gamma/f extended continuously to the whole
    box (needed where the density vanishes off a moving support).
    """

    support: tuple
    cdf: Callable
    pdf: Callable
    dcdf_dgamma: Optional[Callable] = None
    dpdf_dgamma: Optional[Callable] = None
    quantile_fn: Optional[Callable] = None
    effective_fn: Optional[Callable] = None
    impulse_fn: Optional[Callable] = None
    # True when the density is differentiable in gamma pointwise on the
    # whole box; moving supports concentrate the derivative on their
    # edges and must say False so score-based integrals are avoided
    smooth_in_gamma: bool = False
    label: str = ""

    def __post_init__(self):
        lo, hi = self.support
        if not lo < hi:
            raise InvalidIntervalError("marginal support is degenerate")

    def effective_support(self, gamma: float) -> tuple:
        """Interval where the conditional density is positive."""
        if self.effective_fn is None:
            return self.support
        return self.effective_fn(gamma)

    def F_gamma(self, theta, gamma: float):
        """Type-derivative of the conditional cdf (analytic or central FD)."""
        if self.dcdf_dgamma is not None:
            return self.dcdf_dgamma(theta, gamma)
        h = _FD_GAMMA_STEP
        return (np.asarray(self.cdf(theta, gamma + h), dtype=float)
                - np.asarray(self.cdf(theta, gamma - h), dtype=float)) / (2.0 * h)

    def impulse(self, theta, gamma: float):
        """F_gamma/f, the valuation response to a type shift."""
        if self.impulse_fn is not None:
            return self.impulse_fn(theta, gamma)
        dens = np.asarray(self.pdf(theta, gamma), dtype=float)
        if np.any(dens <= 0.0):
            raise DensityZeroError("impulse requested where the density vanishes")
        return np.asarray(self.F_gamma(theta, gamma), dtype=float) / dens

    def quantile(self, p, gamma: float):
        """Inverse conditional cdf; p = 0/1 map to the box endpoints."""
        p = np.asarray(p, dtype=float)
        lo, hi = self.support
        if self.quantile_fn is not None:
            interior = self.quantile_fn(np.clip(p, 1e-300, 1.0 - 1e-16), gamma)
        else:
            interior = self._quantile_bisect(p, gamma)
        out = np.where(p <= 0.0, lo, np.where(p >= 1.0, hi, interior))
        return out if out.ndim else float(out)

    def _quantile_bisect(self, p, gamma: float):
        lo, hi = self.support
        flat = np.atleast_1d(p).ravel()
        vals = np.empty_like(flat)
        for i, pi in enumerate(flat):
            if pi <= 0.0:
                vals[i] = lo
            elif pi >= 1.0:
                vals[i] = hi
            else:
                try:
                    vals[i] = bisect_root(
                        lambda t: float(self.cdf(t, gamma)) - pi, lo, hi, tol=1e-12
                    )
                except Exception as exc:  # noqa: BLE001 - rewrap with context
                    raise QuantileError(
                        f"quantile inversion failed at p={pi}, gamma={gamma}"
                    ) from exc
        return vals.reshape(np.shape(p))


def shifted_uniform_marginal(width: float = 1.0, box: tuple = (0.0, 2.0)) -> ConditionalMarginal:
    """Valuation uniform on [gamma, gamma + width], embedded in ``box``."""

    def cdf(t, g):
        return np.clip((np.asarray(t, dtype=float) - g) / width, 0.0, 1.0)

    def pdf(t, g):
        t = np.asarray(t, dtype=float)
        return np.where((t >= g) & (t <= g + width), 1.0 / width, 0.0)

    def dcdf(t, g):
        t = np.asarray(t, dtype=float)
        return np.where((t >= g) & (t <= g + width), -1.0 / width, 0.0)

    def dpdf(t, g):
        return np.zeros_like(np.asarray(t, dtype=float))

    def quant(p, g):
        return g + width * np.asarray(p, dtype=float)

    return ConditionalMarginal(
        support=box,
        cdf=cdf,
        pdf=pdf,
        dcdf_dgamma=dcdf,
        dpdf_dgamma=dpdf,
        quantile_fn=quant,
        effective_fn=lambda g: (g, g + width),
        impulse_fn=lambda t, g: np.full_like(np.asarray(t, dtype=float), -1.0),
        label=f"uniform-shift(w={width})",
    )


def fixed_uniform_marginal(lo: float = 0.0, hi: float = 1.0) -> ConditionalMarginal:
    """Type-independent uniform valuation on [lo, hi]."""
    width = hi - lo

    def cdf(t, g):
        return np.clip((np.asarray(t, dtype=float) - lo) / width, 0.0, 1.0)

    def pdf(t, g):
        t = np.asarray(t, dtype=float)
        return np.where((t >= lo) & (t <= hi), 1.0 / width, 0.0)

    zeros = lambda t, g: np.zeros_like(np.asarray(t, dtype=float))

    return ConditionalMarginal(
        support=(lo, hi),
        cdf=cdf,
        pdf=pdf,
        dcdf_dgamma=zeros,
        dpdf_dgamma=zeros,
        quantile_fn=lambda p, g: lo + width * np.asarray(p, dtype=float),
        impulse_fn=zeros,
        smooth_in_gamma=True,
        label=f"uniform[{lo},{hi}]",
    )


def truncated_logistic_marginal(
    box: tuple = (-4.0, 5.0),
    loc: float = 0.0,
    shift: float = 1.0,
    scale: float = 0.7,
) -> ConditionalMarginal:
    """Logistic-shaped cdf with location loc + shift*gamma, renormalized
    to ``box`` so the cdf is exactly 0/1 at the box edges for every type.

    Smooth in both arguments; the canonical family for derivative tests.
    """
    a, b = box
    if scale <= 0:
        raise InvalidIntervalError("scale must be positive")

    def _parts(g):
        mu = loc + shift * g
        sa = _sigmoid((a - mu) / scale)
        sb = _sigmoid((b - mu) / scale)
        return mu, sa, sb, sb - sa

    def cdf(t, g):
        mu, sa, sb, d = _parts(g)
        s = _sigmoid((np.asarray(t, dtype=float) - mu) / scale)
        return np.clip((s - sa) / d, 0.0, 1.0)

    def pdf(t, g):
        mu, sa, sb, d = _parts(g)
        s = _sigmoid((np.asarray(t, dtype=float) - mu) / scale)
        return s * (1.0 - s) / (scale * d)

    def dcdf(t, g):
        mu, sa, sb, d = _parts(g)
        s = _sigmoid((np.asarray(t, dtype=float) - mu) / scale)
        ds = -s * (1.0 - s) * shift / scale
        dsa = -sa * (1.0 - sa) * shift / scale
        dsb = -sb * (1.0 - sb) * shift / scale
        return ((ds - dsa) * d - (s - sa) * (dsb - dsa)) / (d * d)

    def dpdf(t, g):
        mu, sa, sb, d = _parts(g)
        s = _sigmoid((np.asarray(t, dtype=float) - mu) / scale)
        ds = -s * (1.0 - s) * shift / scale
        dsa = -sa * (1.0 - sa) * shift / scale
        dsb = -sb * (1.0 - sb) * shift / scale
        num = (1.0 - 2.0 * s) * ds
        return (num * d - s * (1.0 - s) * (dsb - dsa)) / (scale * d * d)

    def quant(p, g):
        mu, sa, sb, d = _parts(g)
        inner = sa + np.asarray(p, dtype=float) * d
        return mu + scale * (np.log(inner) - np.log1p(-inner))

    return ConditionalMarginal(
        support=box,
        cdf=cdf,
        pdf=pdf,
        dcdf_dgamma=dcdf,
        dpdf_dgamma=dpdf,
        quantile_fn=quant,
        smooth_in_gamma=True,
        label=f"logistic(loc={loc},shift={shift},s={scale})",
    )


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    pos = 1.0 / (1.0 + np.exp(-np.clip(x, 0.0, None)))
    ex = np.exp(np.clip(x, None, 0.0))
    neg = ex / (1.0 + ex)
    return np.where(x >= 0, pos, neg)


# ---------------------------------------------------------------------------
# the joint model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointModel:
    """Immutable environment: type prior, per-good marginals, copula."""

    prior: GammaPrior
    marginals: tuple
    copula: object
    invariant_flag: bool
    label: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if self.copula.dim != len(self.marginals) and len(self.marginals) > 1:
            raise ConfigError("copula dimension must match the number of goods")

    @property
    def n(self) -> int:
        return len(self.marginals)

    @property
    def box(self):
        return [m.support for m in self.marginals]

    def percentiles(self, gamma: float, theta) -> np.ndarray:
        """Stack of per-good conditional cdf values, shape (..., n)."""
        theta = np.asarray(theta, dtype=float)
        return np.stack(
            [np.asarray(m.cdf(theta[..., j], gamma), dtype=float)
             for j, m in enumerate(self.marginals)],
            axis=-1,
        )


def joint_density(model: JointModel, gamma: float, theta) -> np.ndarray:
    """f(theta|gamma); zero outside the support."""
    theta = np.asarray(theta, dtype=float)
    dens = np.ones(theta.shape[:-1], dtype=float)
    for j, m in enumerate(model.marginals):
        dens = dens * np.asarray(m.pdf(theta[..., j], gamma), dtype=float)
    if model.n > 1:
        pos = dens > 0.0
        if np.any(pos):
            u = model.percentiles(gamma, theta)
            cvals = np.asarray(model.copula.density(u, gamma), dtype=float)
            dens = np.where(pos, dens * np.where(pos, cvals, 1.0), 0.0)
    return dens


def score(model: JointModel, gamma: float, theta, force_fd: bool = False) -> np.ndarray:
    """Likelihood sensitivity d ln f(theta|gamma) / d gamma.

    Uses the analytic composition through the marginals when the
    dependency structure is invariant and the marginals carry analytic
    derivatives; otherwise falls back to a central difference in gamma.
    """
    theta = np.asarray(theta, dtype=float)
    analytic = (
        not force_fd
        and model.invariant_flag
        and all(m.dcdf_dgamma is not None and m.dpdf_dgamma is not None
                for m in model.marginals)
    )
    if analytic:
        total = np.zeros(theta.shape[:-1], dtype=float)
        if model.n > 1:
            u = model.percentiles(gamma, theta)
            dlogc = np.asarray(model.copula.partial_log_density(u, gamma), dtype=float)
        for j, m in enumerate(model.marginals):
            tj = theta[..., j]
            fj = np.asarray(m.pdf(tj, gamma), dtype=float)
            if np.any(fj <= 0.0):
                raise DensityZeroError("score requested where the density vanishes")
            total = total + np.asarray(m.dpdf_dgamma(tj, gamma), dtype=float) / fj
            if model.n > 1:
                total = total + np.asarray(m.dcdf_dgamma(tj, gamma), dtype=float) * dlogc[..., j]
        return total
    h = max(_FD_GAMMA_STEP, 1e-7 * (model.prior.hi - model.prior.lo))
    g0 = max(gamma - h, model.prior.lo)
    g1 = min(gamma + h, model.prior.hi)
    f0 = joint_density(model, g0, theta)
    f1 = joint_density(model, g1, theta)
    if np.any(f0 <= 0.0) or np.any(f1 <= 0.0):
        raise DensityZeroError("score stencil left the support")
    return (np.log(f1) - np.log(f0)) / (g1 - g0)


def impulse_response(model: JointModel, gamma: float, theta) -> np.ndarray:
    """Per-good valuation response F^j_gamma/f^j, shape (..., n).

    Only meaningful under invariant dependencies; each component is
    nonpositive under the regularity assumed of the marginals.
    """
    if not model.invariant_flag:
        raise InvarianceRequiredError(
            "impulse response requires an invariant dependency structure"
        )
    theta = np.asarray(theta, dtype=float)
    return np.stack(
        [np.asarray(m.impulse(theta[..., j], gamma), dtype=float)
         for j, m in enumerate(model.marginals)],
        axis=-1,
    )


def sample_theta(model: JointModel, gamma: float, z) -> np.ndarray:
    """Push uniform draws z in [0,1]^n through the conditional-quantile
    chain of the copula and then the marginal quantiles.

    The pushforward of the uniform cube equals F(.|gamma); components of
    z at exactly 0/1 land on the enclosing box corners for every gamma.
    """
    z = np.asarray(z, dtype=float)
    u = model.copula.conditional_chain(z, gamma) if model.n > 1 else z.copy()
    cols = [
        np.asarray(model.marginals[j].quantile(u[..., j], gamma), dtype=float)
        for j in range(model.n)
    ]
    return np.stack(cols, axis=-1)


def invariance_residual(model: JointModel, grid, gamma_pair) -> float:
    """Max copula-density discrepancy between two types over a percentile grid.

    Zero (up to roundoff) exactly when the dependency structure does not
    drift between the two types on the grid.
    """
    g1, g2 = gamma_pair
    if np.isscalar(grid):
        axis = np.linspace(0.1, 0.9, int(grid))
        mesh = np.meshgrid(*([axis] * model.n), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
    else:
        pts = np.asarray(grid, dtype=float)
    c1 = np.asarray(model.copula.density(pts, g1), dtype=float)
    c2 = np.asarray(model.copula.density(pts, g2), dtype=float)
    return float(np.max(np.abs(c1 - c2)))


def divergence_residual(model: JointModel, gamma: float, theta,
                        step: float = DEFAULT_FD_STEP_FRACTION) -> float:
    """Continuity-equation defect at an interior point.

    Compares div_theta(V f) against f_gamma, both by central differences,
    where V is the per-good impulse response.  Small residuals certify
    that rewriting rents through V is legitimate at this point.
    """
    theta = np.asarray(theta, dtype=float)

    def vf_component(j, t):
        pt = theta.copy()
        pt[j] = t
        v = np.asarray(model.marginals[j].impulse(t, gamma), dtype=float)
        return float(v * joint_density(model, gamma, pt))

    div = 0.0
    for j in range(model.n):
        lo, hi = model.marginals[j].effective_support(gamma)
        h = step * (model.marginals[j].support[1] - model.marginals[j].support[0])
        if theta[j] - h < lo or theta[j] + h > hi:
            raise InvalidIntervalError("divergence stencil leaves the support interior")
        div += (vf_component(j, theta[j] + h) - vf_component(j, theta[j] - h)) / (2.0 * h)
    hg = step * (model.prior.hi - model.prior.lo)
    f_up = float(joint_density(model, gamma + hg, theta))
    f_dn = float(joint_density(model, gamma - hg, theta))
    f_gamma = (f_up - f_dn) / (2.0 * hg)
    return abs(div - f_gamma)


def boundary_residual(model: JointModel, gamma: float, use_fd: bool = False) -> float:
    """Max |F^j_gamma| over the box faces; must vanish for the divergence
    rewriting to drop its boundary term."""
    worst = 0.0
    for m in model.marginals:
        lo, hi = m.support
        for edge in (lo, hi):
            if use_fd or m.dcdf_dgamma is None:
                h = _FD_GAMMA_STEP
                val = (float(m.cdf(edge, gamma + h)) - float(m.cdf(edge, gamma - h))) / (2 * h)
            else:
                val = float(m.dcdf_dgamma(edge, gamma))
            worst = max(worst, abs(val))
    return worst


def joint_mass(model: JointModel, gamma: float, order: int = 24) -> float:
    """Numeric total mass of f(.|gamma) over the box (should be 1)."""
    breaks = []
    for m in model.marginals:
        lo_e, hi_e = m.effective_support(gamma)
        pts = [lo_e, hi_e]
        # grade toward the effective corners where copula densities can blow up
        for eps in (1e-6, 1e-4, 1e-2, 0.1):
            pts.append(float(m.quantile(eps, gamma)))
            pts.append(float(m.quantile(1.0 - eps, gamma)))
        breaks.append(pts)
    return tensor_integrate(
        lambda pts: joint_density(model, gamma, pts),
        model.box,
        [order] * model.n,
        breaks=breaks,
    )


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

FAMILY_NAMES = ("cl_uniform", "uniform_iid", "logistic_shift")


def build_model(config: dict) -> JointModel:
    """Construct a registered family from a configuration mapping.

    Expected keys: ``name``, ``goods``, optional ``copula`` block and
    family-specific parameters.
    """
    if "name" not in config:
        raise ConfigError("family config needs a 'name'")
    name = str(config["name"]).lower()
    goods = int(config.get("goods", 1))
    if goods < 1:
        raise ConfigError("goods must be >= 1")
    cop_cfg = dict(config.get("copula", {"name": "independence"}))
    cop_name = cop_cfg.pop("name", "independence")
    try:
        copula = copulas.make_copula(cop_name, max(goods, 2), **cop_cfg)
    except (TypeError, InvalidIntervalError) as exc:
        raise ConfigError(f"bad copula config: {exc}") from exc

    if name == "cl_uniform":
        marg = shifted_uniform_marginal(width=float(config.get("width", 1.0)))
        marginals = [marg] * goods
        prior = uniform_prior(0.0, 1.0)
    elif name == "uniform_iid":
        lo, hi = config.get("box", (0.0, 1.0))
        marginals = [fixed_uniform_marginal(float(lo), float(hi))] * goods
        prior = uniform_prior(0.0, 1.0)
    elif name == "logistic_shift":
        marg = truncated_logistic_marginal(
            box=tuple(config.get("box", (-4.0, 5.0))),
            loc=float(config.get("loc", 0.0)),
            shift=float(config.get("shift", 1.0)),
            scale=float(config.get("scale", 0.7)),
        )
        marginals = [marg] * goods
        prior = uniform_prior(0.0, 1.0)
    else:
        raise ConfigError(f"unknown family '{name}' (known: {FAMILY_NAMES})")

    return JointModel(
        prior=prior,
        marginals=tuple(marginals),
        copula=copula,
        invariant_flag=bool(copula.is_gamma_invariant),
        label=f"{name}/{goods}g/{cop_name}",
        config={"name": name, "goods": goods, "copula": {"name": cop_name, **cop_cfg},
                **{k: v for k, v in config.items() if k not in ("name", "goods", "copula")}},
    )
