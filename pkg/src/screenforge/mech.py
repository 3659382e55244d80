"""Optimal option-contract menus and their audits.

The solved menu assigns every type on a grid a vector of per-good
strike prices (the zero of that good's virtual value) and an upfront
fee chosen so the lowest type keeps zero rent and local truth-telling
is exactly binding.  Between grid points the menu is piecewise
constant: a type uses the entry of the highest grid point below it.

Three ways of accounting revenue are provided; they agree (up to
quadrature) for any menu, which is the main internal consistency check:

* ``revenue_direct``        expected fee plus expected exercise payments,
* ``revenue_functional``    surplus minus score-weighted information rents,
* ``revenue_impulse_form``  per-good virtual-value integrals (needs an
  invariant dependency structure).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .copulas import IndependenceCopula
from .errors import InvarianceRequiredError, InvalidIntervalError, RegularityError
from .model import JointModel, hazard, score
from .numerics import bisect_root, gauss_rule, geometric_breaks, tensor_rule

DEFAULT_GRID_SIZE = 101
_SCAN_POINTS = 257


@dataclass(frozen=True)
class QuadSpec:
    """Quadrature orders used by the continuum solver."""

    marginal_order: int = 48     # per-good percentile integrals
    gamma_cell_order: int = 8    # per menu cell in gamma
    joint_order: int = 10        # per axis segment of joint score integrals
    corner_depth: int = 4        # grading depth toward percentile corners
    root_tol: float = 1e-12


@dataclass(frozen=True)
class ThresholdMechanism:
    """Menu of option contracts on a type grid.

    ``strikes[i, j]`` is the exercise price of good j for menu entry i;
    ``upfront[i]`` the entry's fee (None until filled).  Exercise uses
    ``theta >= strike`` except when the strike sits at the top of the
    enclosing box, where the comparison is strict (never sell).
    """

    gamma_grid: np.ndarray
    strikes: np.ndarray
    upfront: Optional[np.ndarray] = None
    box_top: Optional[np.ndarray] = None

    def __post_init__(self):
        grid = np.asarray(self.gamma_grid, dtype=float)
        strikes = np.asarray(self.strikes, dtype=float)
        object.__setattr__(self, "gamma_grid", grid)
        object.__setattr__(self, "strikes", strikes)
        if self.upfront is not None:
            object.__setattr__(self, "upfront", np.asarray(self.upfront, dtype=float))
        if self.box_top is not None:
            object.__setattr__(self, "box_top", np.asarray(self.box_top, dtype=float))
        if strikes.shape[0] != grid.shape[0]:
            raise InvalidIntervalError("one strike vector per grid point required")
        if np.any(np.diff(grid) <= 0):
            raise InvalidIntervalError("gamma grid must be strictly increasing")

    @property
    def n_goods(self) -> int:
        return self.strikes.shape[1]

    def menu_index(self, gamma: float) -> int:
        i = int(np.searchsorted(self.gamma_grid, gamma, side="right")) - 1
        return min(max(i, 0), len(self.gamma_grid) - 1)

    def strikes_at(self, gamma: float) -> np.ndarray:
        return self.strikes[self.menu_index(gamma)]

    def t1_at(self, gamma: float) -> float:
        if self.upfront is None:
            raise InvalidIntervalError("upfront fees not filled yet")
        return float(self.upfront[self.menu_index(gamma)])

    def allocation(self, gamma: float, theta) -> np.ndarray:
        """Exercise indicator per good, shape (..., n)."""
        theta = np.asarray(theta, dtype=float)
        p = self.strikes_at(gamma)
        q = theta >= p
        if self.box_top is not None:
            never = p >= self.box_top
            q = np.where(never, theta > p, q)
        return q.astype(float)


@dataclass(frozen=True)
class InterimUtilityCurve:
    """Truthful information rent per grid type; zero at the bottom type."""

    gamma_grid: np.ndarray
    values: np.ndarray


# ---------------------------------------------------------------------------
# virtual values and strike solving
# ---------------------------------------------------------------------------


def virtual_value(model: JointModel, j: int, gamma: float, theta_j):
    """Pointwise marginal revenue of good j: theta plus the rent distortion.

    Equals theta at the top type (zero hazard) and for type-independent
    marginals (zero impulse).
    """
    h = hazard(model.prior, gamma)
    t = np.asarray(theta_j, dtype=float)
    return t + np.asarray(model.marginals[j].impulse(t, gamma), dtype=float) * h


def _solve_strike(model: JointModel, j: int, gamma: float, tol: float) -> float:
    lo, hi = model.marginals[j].support
    grid = np.linspace(lo, hi, _SCAN_POINTS)
    phi = np.asarray(virtual_value(model, j, gamma, grid), dtype=float)
    scale = max(1.0, float(np.max(np.abs(phi))))
    nonneg = phi >= 0.0
    if nonneg.any():
        first = int(np.argmax(nonneg))
        if np.any(phi[first:] < -1e-9 * scale):
            back = first + int(np.argmax(phi[first:] < -1e-9 * scale))
            raise RegularityError(
                f"virtual value of good {j} re-crosses zero at gamma={gamma}, "
                f"theta={grid[back]}"
            )
        if first == 0:
            return lo
        return bisect_root(
            lambda t: float(virtual_value(model, j, gamma, t)),
            float(grid[first - 1]),
            float(grid[first]),
            tol=tol,
        )
    return hi


def solve_thresholds(
    model: JointModel,
    gamma_grid=None,
    quad: QuadSpec = QuadSpec(),
    threads: int = 1,
) -> ThresholdMechanism:
    """Strike prices per grid type: the zero of each good's virtual value
    over the enclosing box, clipped to a box endpoint when the sign is
    constant.  Fees are left unfilled.
    """
    if gamma_grid is None:
        gamma_grid = np.linspace(model.prior.lo, model.prior.hi, DEFAULT_GRID_SIZE)
    gamma_grid = np.asarray(gamma_grid, dtype=float)

    def solve_one(g: float) -> np.ndarray:
        return np.array(
            [_solve_strike(model, j, g, quad.root_tol) for j in range(model.n)]
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(solve_one, gamma_grid))
    else:
        rows = [solve_one(g) for g in gamma_grid]
    return ThresholdMechanism(
        gamma_grid=gamma_grid,
        strikes=np.vstack(rows),
        box_top=np.array([m.support[1] for m in model.marginals]),
    )


def efficient_cutoff(model: JointModel, j: int) -> float:
    """Strike implementing the surplus-efficient rule (sell iff value >= 0),
    posted on the enclosing box."""
    lo, hi = model.marginals[j].support
    return float(min(max(0.0, lo), hi))


# ---------------------------------------------------------------------------
# pointwise menu objects
# ---------------------------------------------------------------------------


def utility_u(mech: ThresholdMechanism, gamma: float, theta):
    """Option value of the menu entry: sum_j max(0, theta_j - strike_j).

    Convex and componentwise 1-Lipschitz in theta by construction.
    """
    theta = np.asarray(theta, dtype=float)
    p = mech.strikes_at(gamma)
    return np.sum(np.maximum(theta - p, 0.0), axis=-1)


def transfer_t2(mech: ThresholdMechanism, gamma: float, theta):
    """Exercise payments: sum_j strike_j * 1{exercised}; equals
    theta . q - u identically."""
    theta = np.asarray(theta, dtype=float)
    p = mech.strikes_at(gamma)
    return np.sum(p * mech.allocation(gamma, theta), axis=-1)


# ---------------------------------------------------------------------------
# quadrature backbone
# ---------------------------------------------------------------------------


def _gamma_panels(model: JointModel, grid: np.ndarray, order: int):
    """Per menu cell: gamma nodes and plain dgamma weights."""
    panels = []
    for i in range(len(grid) - 1):
        rule = gauss_rule(order, float(grid[i]), float(grid[i + 1]))
        panels.append((i, rule.nodes, rule.weights))
    return panels


def _strike_percentile(model: JointModel, j: int, p: float, gamma: float) -> float:
    return float(np.clip(model.marginals[j].cdf(p, gamma), 0.0, 1.0))


def _marginal_integrals(model, gamma, strikes, order):
    """Per-good percentile-space integrals of the menu at one gamma.

    Returns (E[u], E[theta * q], E[t2], rent slope) for the menu with the
    given strike vector under F(.|gamma).
    """
    e_u = e_thq = e_t2 = slope = 0.0
    for j, m in enumerate(model.marginals):
        p = float(strikes[j])
        s = _strike_percentile(model, j, p, gamma)
        e_t2 += p * (1.0 - s)
        if s >= 1.0 - 1e-14:
            continue
        rule = gauss_rule(order, s, 1.0)
        qvals = np.asarray(m.quantile(rule.nodes, gamma), dtype=float)
        e_u += float(np.dot(rule.weights, qvals - p))
        e_thq += float(np.dot(rule.weights, qvals))
        vvals = np.asarray(m.impulse(qvals, gamma), dtype=float)
        slope += -float(np.dot(rule.weights, vvals))
    return e_u, e_thq, e_t2, slope


def _menu_expected_u(model, gamma, strikes, order) -> float:
    e_u = 0.0
    for j, m in enumerate(model.marginals):
        p = float(strikes[j])
        s = _strike_percentile(model, j, p, gamma)
        if s >= 1.0 - 1e-14:
            continue
        rule = gauss_rule(order, s, 1.0)
        qvals = np.asarray(m.quantile(rule.nodes, gamma), dtype=float)
        e_u += float(np.dot(rule.weights, qvals - p))
    return e_u


def _rent_curve(model: JointModel, mech: ThresholdMechanism, quad: QuadSpec) -> np.ndarray:
    """Cumulative envelope integral of the rent slope along the grid."""
    grid = mech.gamma_grid
    values = np.zeros(len(grid))
    for i, nodes, weights in _gamma_panels(model, grid, quad.gamma_cell_order):
        inc = 0.0
        for g, w in zip(nodes, weights):
            _, _, _, sl = _marginal_integrals(model, g, mech.strikes[i], quad.marginal_order)
            inc += w * sl
        values[i + 1] = values[i] + inc
    return values


def upfront_t1(
    model: JointModel, mech: ThresholdMechanism, quad: QuadSpec = QuadSpec()
) -> ThresholdMechanism:
    """Fees leaving the bottom type zero rent and local truth-telling
    binding: expected option value minus the accumulated rent."""
    rents = _rent_curve(model, mech, quad)
    fees = np.empty(len(mech.gamma_grid))
    for i, g in enumerate(mech.gamma_grid):
        fees[i] = _menu_expected_u(model, g, mech.strikes[i], quad.marginal_order) - rents[i]
    return replace(mech, upfront=fees)


def interim_utility(
    model: JointModel, mech: ThresholdMechanism, gamma: float, quad: QuadSpec = QuadSpec()
) -> float:
    """Truthful rent of a type: expected option value minus its fee."""
    e_u = _menu_expected_u(model, gamma, mech.strikes_at(gamma), quad.marginal_order)
    return e_u - mech.t1_at(gamma)


def rent_curve(
    model: JointModel, mech: ThresholdMechanism, quad: QuadSpec = QuadSpec()
) -> InterimUtilityCurve:
    return InterimUtilityCurve(mech.gamma_grid.copy(), _rent_curve(model, mech, quad))


# ---------------------------------------------------------------------------
# revenue forms
# ---------------------------------------------------------------------------


def revenue_direct(model: JointModel, mech: ThresholdMechanism, quad: QuadSpec = QuadSpec()) -> float:
    """Expected fee plus expected exercise payments."""
    if mech.upfront is None:
        raise InvalidIntervalError("fill upfront fees before computing revenue")
    grid = mech.gamma_grid
    gmass = np.diff(np.asarray(model.prior.cdf(grid), dtype=float))
    total = float(np.dot(mech.upfront[:-1], gmass))
    for i, nodes, weights in _gamma_panels(model, grid, quad.gamma_cell_order):
        dens = np.asarray(model.prior.pdf(nodes), dtype=float)
        for g, w, dg in zip(nodes, weights, dens):
            _, _, e_t2, _ = _marginal_integrals(model, g, mech.strikes[i], quad.marginal_order)
            total += w * dg * e_t2
    return total


def revenue_impulse_form(
    model: JointModel, mech: ThresholdMechanism, quad: QuadSpec = QuadSpec()
) -> float:
    """Per-good integral of allocated virtual values; valid only when the
    dependency structure is invariant in the type."""
    if not model.invariant_flag:
        raise InvarianceRequiredError("impulse-form revenue needs invariant dependencies")
    grid = mech.gamma_grid
    total = 0.0
    for i, nodes, weights in _gamma_panels(model, grid, quad.gamma_cell_order):
        dens = np.asarray(model.prior.pdf(nodes), dtype=float)
        for g, w, dg in zip(nodes, weights, dens):
            hz = hazard(model.prior, g)
            inner = 0.0
            for j, m in enumerate(model.marginals):
                p = float(mech.strikes[i][j])
                s = _strike_percentile(model, j, p, g)
                if s >= 1.0 - 1e-14:
                    continue
                rule = gauss_rule(quad.marginal_order, s, 1.0)
                qvals = np.asarray(m.quantile(rule.nodes, g), dtype=float)
                phi = qvals + np.asarray(m.impulse(qvals, g), dtype=float) * hz
                inner += float(np.dot(rule.weights, phi))
            total += w * dg * inner
    return total


def _expected_u_score(model: JointModel, gamma: float, strikes, quad: QuadSpec) -> float:
    """E[u * score | gamma] for the menu with the given strikes.

    Pointwise score integrals need the density to be differentiable in
    gamma everywhere; moving supports carry derivative mass on their
    edges, so such families are handled by differentiating the expected
    option value in gamma instead (the option value depends on the
    marginals only, making this exact for every copula).
    """
    if not all(m.smooth_in_gamma for m in model.marginals):
        h = 1e-6 * (model.prior.hi - model.prior.lo)
        up = _menu_expected_u(model, gamma + h, strikes, quad.marginal_order)
        dn = _menu_expected_u(model, gamma - h, strikes, quad.marginal_order)
        return (up - dn) / (2.0 * h)
    independent = model.n == 1 or isinstance(model.copula, IndependenceCopula)
    if independent and all(
        m.dcdf_dgamma is not None and m.dpdf_dgamma is not None for m in model.marginals
    ):
        # cross terms E[u_j] E[score_k] vanish since each marginal score
        # integrates to zero; only matched-good terms remain
        total = 0.0
        for j, m in enumerate(model.marginals):
            p = float(strikes[j])
            s = _strike_percentile(model, j, p, gamma)
            if s >= 1.0 - 1e-14:
                continue
            rule = gauss_rule(quad.marginal_order, s, 1.0)
            qvals = np.asarray(m.quantile(rule.nodes, gamma), dtype=float)
            sj = (np.asarray(m.dpdf_dgamma(qvals, gamma), dtype=float)
                  / np.asarray(m.pdf(qvals, gamma), dtype=float))
            total += float(np.dot(rule.weights, (qvals - p) * sj))
        return total
    # joint percentile-space integral with grading toward the cube corners
    breaks = []
    graded = geometric_breaks(depth=quad.corner_depth)
    for j, m in enumerate(model.marginals):
        s = _strike_percentile(model, j, float(strikes[j]), gamma)
        pts = list(graded)
        if 0.0 < s < 1.0:
            pts.append(s)
        breaks.append(pts)
    pts, wts = tensor_rule([(0.0, 1.0)] * model.n, [quad.joint_order] * model.n, breaks)
    theta = np.stack(
        [np.asarray(model.marginals[j].quantile(pts[:, j], gamma), dtype=float)
         for j in range(model.n)],
        axis=-1,
    )
    u_util = np.sum(np.maximum(theta - np.asarray(strikes, dtype=float), 0.0), axis=-1)
    svals = np.asarray(score(model, gamma, theta), dtype=float)
    cvals = np.asarray(model.copula.density(pts, gamma), dtype=float)
    return float(np.dot(wts, u_util * svals * cvals))


def revenue_functional(
    model: JointModel, mech: ThresholdMechanism, quad: QuadSpec = QuadSpec()
) -> float:
    """Allocated surplus minus score-weighted, hazard-weighted rents."""
    grid = mech.gamma_grid
    total = 0.0
    for i, nodes, weights in _gamma_panels(model, grid, quad.gamma_cell_order):
        dens = np.asarray(model.prior.pdf(nodes), dtype=float)
        for g, w, dg in zip(nodes, weights, dens):
            _, e_thq, _, _ = _marginal_integrals(model, g, mech.strikes[i], quad.marginal_order)
            total += w * dg * e_thq
    # The rent term is smooth on each menu cell, and the expensive joint
    # score integral is only needed for smooth dependent families, so a
    # low-order panel per cell is enough.
    joint_path = (
        all(m.smooth_in_gamma for m in model.marginals)
        and model.n > 1
        and not isinstance(model.copula, IndependenceCopula)
    )
    rent_order = 2 if joint_path else quad.gamma_cell_order
    for i, nodes, weights in _gamma_panels(model, grid, rent_order):
        surv = 1.0 - np.asarray(model.prior.cdf(nodes), dtype=float)
        for g, w, sv in zip(nodes, weights, surv):
            rent = _expected_u_score(model, g, mech.strikes[i], quad)
            total -= w * sv * rent
    return total


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditReport:
    max_gain: float
    gain_argmax: tuple
    ir_slack: float
    curve: InterimUtilityCurve
    gain_matrix: np.ndarray


def ic_audit(
    model: JointModel,
    mech: ThresholdMechanism,
    gamma_grid=None,
    quad: QuadSpec = QuadSpec(),
    threads: int = 1,
) -> AuditReport:
    """Cross-report rents over all grid pairs.

    For type gamma_i facing menu entry j the rent is the expected option
    value of entry j under F(.|gamma_i) minus entry j's fee; the report
    carries the worst gain over truthful play and the IR slack.
    """
    if mech.upfront is None:
        raise InvalidIntervalError("fill upfront fees before auditing")
    if gamma_grid is None:
        grid = mech.gamma_grid
        menus = list(range(len(grid)))
    else:
        grid = np.asarray(gamma_grid, dtype=float)
        menus = [mech.menu_index(g) for g in grid]
    m_count = len(grid)
    fees = mech.upfront

    def row(i: int) -> np.ndarray:
        gi = float(grid[i])
        vals = np.empty(m_count)
        for jj, mj in enumerate(menus):
            e_u = _menu_expected_u(model, gi, mech.strikes[mj], quad.marginal_order)
            vals[jj] = e_u - fees[mj]
        return vals

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(m_count)))
    else:
        rows = [row(i) for i in range(m_count)]
    cross = np.vstack(rows)  # cross[i, j] = rent of type i reporting entry j
    truthful = np.diag(cross).copy()
    gains = cross - truthful[:, None]
    worst = int(np.argmax(gains))
    i_star, j_star = np.unravel_index(worst, gains.shape)
    return AuditReport(
        max_gain=float(gains[i_star, j_star]),
        gain_argmax=(float(grid[i_star]), float(grid[j_star])),
        ir_slack=float(np.min(truthful)),
        curve=InterimUtilityCurve(np.asarray(grid, dtype=float).copy(), truthful),
        gain_matrix=gains,
    )


@dataclass(frozen=True)
class RegularityReport:
    ok: bool
    worst_f_gamma: float
    worst_gamma_monotonicity: float
    crossing_violations: list
    locations: dict


def regularity_report(model: JointModel, gamma_grid=None, theta_points: int = 129) -> RegularityReport:
    """Grid checks of the standing assumptions: nonpositive cdf response
    to the type, virtual values rising in the type, single crossing."""
    if gamma_grid is None:
        gamma_grid = np.linspace(model.prior.lo, model.prior.hi, 21)
    gamma_grid = np.asarray(gamma_grid, dtype=float)
    worst_fg = -np.inf
    worst_mono = np.inf
    crossings = []
    locations = {}
    for j, m in enumerate(model.marginals):
        lo, hi = m.support
        thetas = np.linspace(lo, hi, theta_points)
        prev_phi = None
        for g in gamma_grid:
            fg = np.asarray(m.F_gamma(thetas, g), dtype=float)
            k = int(np.argmax(fg))
            if fg[k] > worst_fg:
                worst_fg = float(fg[k])
                locations["f_gamma"] = {"good": j, "gamma": float(g), "theta": float(thetas[k])}
            phi = np.asarray(virtual_value(model, j, g, thetas), dtype=float)
            scale = max(1.0, float(np.max(np.abs(phi))))
            nonneg = phi >= 0.0
            if nonneg.any():
                first = int(np.argmax(nonneg))
                if np.any(phi[first:] < -1e-9 * scale):
                    k2 = first + int(np.argmax(phi[first:] < -1e-9 * scale))
                    crossings.append(
                        {"good": j, "gamma": float(g), "theta": float(thetas[k2]),
                         "value": float(phi[k2])}
                    )
            if prev_phi is not None:
                d = float(np.min(phi - prev_phi))
                if d < worst_mono:
                    worst_mono = d
                    k3 = int(np.argmin(phi - prev_phi))
                    locations["gamma_monotonicity"] = {
                        "good": j, "gamma": float(g), "theta": float(thetas[k3])
                    }
            prev_phi = phi
    tol = 1e-9
    ok = worst_fg <= tol and worst_mono >= -tol and not crossings
    return RegularityReport(
        ok=ok,
        worst_f_gamma=float(worst_fg),
        worst_gamma_monotonicity=float(worst_mono),
        crossing_violations=crossings,
        locations=locations,
    )


def max_cycle_gain(q_fn, cycles) -> float:
    """Worst cycle sum sum_i q(theta_i) . (theta_{i+1} - theta_i).

    Nonpositive (up to roundoff) exactly when the allocation is the
    gradient of a convex option value.
    """
    worst = -np.inf
    for cyc in cycles:
        cyc = np.asarray(cyc, dtype=float)
        total = 0.0
        k = cyc.shape[0]
        for i in range(k):
            q = np.asarray(q_fn(cyc[i]), dtype=float)
            total += float(np.dot(q, cyc[(i + 1) % k] - cyc[i]))
        worst = max(worst, total)
    return float(worst)


def cyclic_monotonicity_check(mech: ThresholdMechanism, gamma: float, cycles) -> float:
    """Worst cycle sum of the menu's allocation at one type."""
    return max_cycle_gain(lambda th: mech.allocation(gamma, th), cycles)


def random_cycles(box, count: int, length: int, stream) -> list:
    """Deterministic batch of valuation cycles inside the box."""
    from .numerics import uniform_draws

    n = len(box)
    draws = uniform_draws(stream, count * length, n)
    los = np.array([b[0] for b in box])
    his = np.array([b[1] for b in box])
    pts = los + draws * (his - los)
    return [pts[i * length:(i + 1) * length] for i in range(count)]
