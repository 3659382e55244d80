"""Exact finite-grid mechanism design used to verify the continuum solver.

Three contracting regimes are solved as linear programs on a common
discretized instance:

* simultaneous  - all valuations drawn and reported at once; truthful
  type reporting is enforced against every joint misreporting map,
  generated lazily as cutting planes by a cellwise best-response oracle;
* sequential    - goods sold one period at a time; allocations are
  measurable in the revealed history and deviations are adapted
  strategies, separated by backward induction;
* relaxed       - the orthogonalized shock z is publicly observed and
  only the type is screened; a pure LP on a common z rectangulation
  whose pushforward reproduces each type's cell masses exactly.

``separate_selling_value`` prices each good on its own marginal
instance; the joint optimum can only improve on it, and under invariant
coupling the improvement vanishes with grid refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    ConvergenceError,
    DegenerateCellError,
    InvalidIntervalError,
    ShapeMismatchError,
)
from .lp import lp_solve
from .mech import ThresholdMechanism, transfer_t2
from .model import JointModel

DEFAULT_TOL = 1e-10
MAX_ROUNDS = 200
CAP_FACTOR = 10.0


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteInstance:
    """Finite type support with per-type joint cell masses."""

    gamma_values: np.ndarray
    gamma_probs: np.ndarray
    theta_grids: tuple
    pmf: np.ndarray  # (M, C), C-order over the per-good cell indices
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "gamma_values", np.asarray(self.gamma_values, dtype=float))
        object.__setattr__(self, "gamma_probs", np.asarray(self.gamma_probs, dtype=float))
        object.__setattr__(self, "theta_grids", tuple(np.asarray(t, dtype=float) for t in self.theta_grids))
        object.__setattr__(self, "pmf", np.asarray(self.pmf, dtype=float))
        if self.pmf.shape != (len(self.gamma_values), self.n_cells):
            raise ShapeMismatchError("pmf shape does not match supports")
        if np.any(self.pmf < -1e-12) or np.any(self.gamma_probs < -1e-12):
            raise DegenerateCellError("negative probability mass")
        for m in range(len(self.gamma_values)):
            if abs(self.pmf[m].sum() - 1.0) > 1e-9:
                raise DegenerateCellError(f"pmf of type {m} does not sum to one")
        if abs(self.gamma_probs.sum() - 1.0) > 1e-9:
            raise DegenerateCellError("type probabilities do not sum to one")

    @property
    def n_goods(self) -> int:
        return len(self.theta_grids)

    @property
    def dims(self) -> tuple:
        return tuple(len(t) for t in self.theta_grids)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_types(self) -> int:
        return len(self.gamma_values)

    @property
    def cell_values(self) -> np.ndarray:
        """(C, n) matrix of cell representative valuations."""
        grids = np.meshgrid(*self.theta_grids, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def to_jsonable(self) -> dict:
        return {
            "gamma_values": self.gamma_values.tolist(),
            "gamma_probs": self.gamma_probs.tolist(),
            "theta_grids": [t.tolist() for t in self.theta_grids],
            "pmf": self.pmf.tolist(),
            "lineage": self.lineage,
        }

    @staticmethod
    def from_jsonable(data: dict) -> "DiscreteInstance":
        return DiscreteInstance(
            gamma_values=np.asarray(data["gamma_values"], dtype=float),
            gamma_probs=np.asarray(data["gamma_probs"], dtype=float),
            theta_grids=tuple(np.asarray(t, dtype=float) for t in data["theta_grids"]),
            pmf=np.asarray(data["pmf"], dtype=float),
            lineage=dict(data.get("lineage", {})),
        )


def discretize(model: JointModel, gamma_cells: int, theta_cells) -> DiscreteInstance:
    """Cell-midpoint discretization of a continuum model.

    Type masses come from prior cdf differences; joint cell masses from
    inclusion-exclusion differences of the joint cdf at cell corners,
    renormalized exactly.
    """
    if gamma_cells < 1:
        raise InvalidIntervalError("need at least one type cell")
    theta_cells = [int(k) for k in (theta_cells if np.ndim(theta_cells) else [theta_cells] * model.n)]
    if len(theta_cells) != model.n or any(k < 1 for k in theta_cells):
        raise InvalidIntervalError("bad per-good cell counts")

    gedges = np.linspace(model.prior.lo, model.prior.hi, gamma_cells + 1)
    gvals = 0.5 * (gedges[:-1] + gedges[1:])
    gprobs = np.diff(np.asarray(model.prior.cdf(gedges), dtype=float))
    gprobs = np.maximum(gprobs, 0.0)
    gprobs = gprobs / gprobs.sum()

    edges = []
    reps = []
    for j, m in enumerate(model.marginals):
        lo, hi = m.support
        e = np.linspace(lo, hi, theta_cells[j] + 1)
        edges.append(e)
        reps.append(0.5 * (e[:-1] + e[1:]))

    dims = tuple(theta_cells)
    pmf = np.empty((gamma_cells, int(np.prod(dims))))
    corner_axes = np.meshgrid(*edges, indexing="ij")
    corners = np.stack([c.ravel() for c in corner_axes], axis=-1)
    for mi, g in enumerate(gvals):
        if model.n == 1:
            cdf_tab = np.asarray(model.marginals[0].cdf(edges[0], g), dtype=float)
        else:
            u = np.stack(
                [np.asarray(model.marginals[j].cdf(corners[:, j], g), dtype=float)
                 for j in range(model.n)],
                axis=-1,
            )
            cdf_tab = np.asarray(model.copula.cdf(u, g), dtype=float)
            cdf_tab = cdf_tab.reshape([len(e) for e in edges])
        mass = cdf_tab
        for ax in range(model.n):
            mass = np.diff(mass, axis=ax)
        mass = mass.reshape(-1)
        if np.any(mass < -1e-12):
            raise DegenerateCellError(
                f"negative cell mass {mass.min()} at type {g}; cdf is not a distribution"
            )
        mass = np.maximum(mass, 0.0)
        pmf[mi] = mass / mass.sum()

    return DiscreteInstance(
        gamma_values=gvals,
        gamma_probs=gprobs,
        theta_grids=tuple(reps),
        pmf=pmf,
        lineage={
            "family": dict(model.config),
            "gamma_cells": gamma_cells,
            "theta_cells": list(theta_cells),
        },
    )


def marginal_instance(instance: DiscreteInstance, j: int) -> DiscreteInstance:
    """One-good instance carrying good j's marginal cell masses."""
    dims = instance.dims
    pmf = instance.pmf.reshape((instance.n_types,) + dims)
    axes = tuple(1 + ax for ax in range(instance.n_goods) if ax != j)
    marg = pmf.sum(axis=axes) if axes else pmf
    return DiscreteInstance(
        gamma_values=instance.gamma_values,
        gamma_probs=instance.gamma_probs,
        theta_grids=(instance.theta_grids[j],),
        pmf=marg.reshape(instance.n_types, dims[j]),
        lineage={**instance.lineage, "marginal_of": j},
    )


def full_surplus(instance: DiscreteInstance) -> float:
    """Expected efficient surplus: every positive-value good sold."""
    pos = np.maximum(instance.cell_values, 0.0).sum(axis=1)
    return float(np.dot(instance.gamma_probs, instance.pmf @ pos))


# ---------------------------------------------------------------------------
# mechanisms and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteMechanism:
    q: np.ndarray    # (M, C, n)
    t1: np.ndarray   # (M,)
    t2: np.ndarray   # (M, C)
    regime: str
    aux: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolveReport:
    value: float
    mechanism: DiscreteMechanism
    iterations: int
    cut_log: list
    round_values: list
    status: str


@dataclass(frozen=True)
class EvalReport:
    revenue: float
    ic2_violation: float
    ir_violation: float
    ic1_violation: float


def _truthful_values(instance: DiscreteInstance, mech: DiscreteMechanism) -> np.ndarray:
    vals = np.einsum("mcn,cn->mc", mech.q, instance.cell_values) - mech.t2
    return np.einsum("mc,mc->m", instance.pmf, vals) - mech.t1


def mechanism_revenue(instance: DiscreteInstance, mech: DiscreteMechanism) -> float:
    per_type = mech.t1 + np.einsum("mc,mc->m", instance.pmf, mech.t2)
    return float(np.dot(instance.gamma_probs, per_type))


# ---------------------------------------------------------------------------
# simultaneous regime
# ---------------------------------------------------------------------------


class _SimProblem:
    """Variable layout and row factory for the simultaneous LP."""

    def __init__(self, instance: DiscreteInstance, cap: float):
        self.inst = instance
        m_count, c_count, n = instance.n_types, instance.n_cells, instance.n_goods
        self.nq = m_count * c_count * n
        self.nt2 = m_count * c_count
        self.nvar = self.nq + self.nt2 + m_count
        self.cap = cap
        self.theta = instance.cell_values

    def iq(self, m, c, j):
        return (m * self.inst.n_cells + c) * self.inst.n_goods + j

    def it2(self, m, c):
        return self.nq + m * self.inst.n_cells + c

    def it1(self, m):
        return self.nq + self.nt2 + m

    def objective(self) -> np.ndarray:
        c = np.zeros(self.nvar)
        for m in range(self.inst.n_types):
            c[self.it1(m)] = self.inst.gamma_probs[m]
            for cell in range(self.inst.n_cells):
                c[self.it2(m, cell)] = self.inst.gamma_probs[m] * self.inst.pmf[m, cell]
        return c

    def bounds(self, capped: bool = True):
        cap = self.cap if capped else None
        lo_t = -self.cap if capped else None
        b = [(0.0, 1.0)] * self.nq
        b += [(lo_t, cap)] * (self.nt2 + self.inst.n_types)
        return b

    def _truth_row(self, m):
        """Coefficients of U_m (truthful interim value) as a sparse dict."""
        row = {}
        for cell in range(self.inst.n_cells):
            f = self.inst.pmf[m, cell]
            for j in range(self.inst.n_goods):
                row[self.iq(m, cell, j)] = row.get(self.iq(m, cell, j), 0.0) + f * self.theta[cell, j]
            row[self.it2(m, cell)] = row.get(self.it2(m, cell), 0.0) - f
        row[self.it1(m)] = row.get(self.it1(m), 0.0) - 1.0
        return row

    def base_rows(self):
        """Truth-telling in valuations (all cell pairs) and participation."""
        data, rows, cols, rhs = [], [], [], []
        r = 0
        inst = self.inst
        for m in range(inst.n_types):
            for a in range(inst.n_cells):
                for b in range(inst.n_cells):
                    if a == b:
                        continue
                    # reporting cell b with true values theta_a must not beat truth
                    for j in range(inst.n_goods):
                        cols += [self.iq(m, b, j), self.iq(m, a, j)]
                        data += [self.theta[a, j], -self.theta[a, j]]
                        rows += [r, r]
                    cols += [self.it2(m, b), self.it2(m, a)]
                    data += [-1.0, 1.0]
                    rows += [r, r]
                    rhs.append(0.0)
                    r += 1
        for m in range(inst.n_types):
            for col, v in self._truth_row(m).items():
                cols.append(col)
                data.append(-v)
                rows.append(r)
            rhs.append(0.0)
            r += 1
        mat = sp.csr_matrix((data, (rows, cols)), shape=(r, self.nvar))
        return mat, np.asarray(rhs)

    def deviation_row(self, m, m_rep, dev_map):
        """Row for: type m reports m_rep, then misreports cells via dev_map."""
        row = {}
        for cell in range(self.inst.n_cells):
            f = self.inst.pmf[m, cell]
            target = int(dev_map[cell])
            for j in range(self.inst.n_goods):
                key = self.iq(m_rep, target, j)
                row[key] = row.get(key, 0.0) + f * self.theta[cell, j]
            key = self.it2(m_rep, target)
            row[key] = row.get(key, 0.0) - f
        row[self.it1(m_rep)] = row.get(self.it1(m_rep), 0.0) - 1.0
        for col, v in self._truth_row(m).items():
            row[col] = row.get(col, 0.0) - v
        return row

    def unpack(self, x: np.ndarray) -> DiscreteMechanism:
        inst = self.inst
        q = x[: self.nq].reshape(inst.n_types, inst.n_cells, inst.n_goods)
        t2 = x[self.nq : self.nq + self.nt2].reshape(inst.n_types, inst.n_cells)
        t1 = x[self.nq + self.nt2 :]
        return DiscreteMechanism(q=q.copy(), t1=t1.copy(), t2=t2.copy(), regime="simultaneous")


def _sim_separate(instance: DiscreteInstance, mech: DiscreteMechanism):
    """Worst joint-misreport per ordered type pair against a candidate."""
    theta = instance.cell_values
    truthful = _truthful_values(instance, mech)
    found = []
    for m in range(instance.n_types):
        for m_rep in range(instance.n_types):
            # W[c, c'] = value of true cell c reporting cell c' on menu m_rep
            w = theta @ mech.q[m_rep].T - mech.t2[m_rep][None, :]
            dev = np.argmax(w, axis=1)
            val = float(np.dot(instance.pmf[m], w[np.arange(instance.n_cells), dev])) - mech.t1[m_rep]
            violation = val - truthful[m]
            found.append((m, m_rep, tuple(int(d) for d in dev), violation))
    return found


def solve_simultaneous(
    instance: DiscreteInstance,
    tol: float = DEFAULT_TOL,
    max_rounds: int = MAX_ROUNDS,
) -> SolveReport:
    """Cutting-plane solution of the one-shot screening LP."""
    cap = CAP_FACTOR * max(1.0, abs(full_surplus(instance)))
    prob = _SimProblem(instance, cap)
    obj = prob.objective()
    base, base_rhs = prob.base_rows()

    cut_rows: list = []
    cut_keys: set = set()
    cut_log: list = []

    def add_cut(m, m_rep, dev):
        key = (m, m_rep, dev)
        if key in cut_keys:
            return False
        cut_keys.add(key)
        cut_rows.append(prob.deviation_row(m, m_rep, dev))
        return True

    # identity maps: plain type misreports with truthful cell reporting
    for m in range(instance.n_types):
        for m_rep in range(instance.n_types):
            if m != m_rep:
                add_cut(m, m_rep, tuple(range(instance.n_cells)))

    def assemble():
        if not cut_rows:
            return base, base_rhs
        data, rows, cols = [], [], []
        for r, row in enumerate(cut_rows):
            for col, v in row.items():
                rows.append(r)
                cols.append(col)
                data.append(v)
        cuts = sp.csr_matrix((data, (rows, cols)), shape=(len(cut_rows), prob.nvar))
        return sp.vstack([base, cuts]).tocsr(), np.concatenate([base_rhs, np.zeros(len(cut_rows))])

    round_values = []
    for rnd in range(max_rounds):
        a_ub, b_ub = assemble()
        sol = lp_solve(obj, a_ub=a_ub, b_ub=b_ub, bounds=prob.bounds())
        mech = prob.unpack(sol.x)
        round_values.append(sol.value)
        violated = [
            (m, mr, dev, v) for (m, mr, dev, v) in _sim_separate(instance, mech) if v > tol
        ]
        cut_log.append([(m, mr, float(v)) for (m, mr, dev, v) in violated])
        if violated and any([add_cut(m, mr, dev) for m, mr, dev, _ in violated]):
            continue
        # verification: drop the transfer caps; the cap-free optimum can sit
        # at a different vertex of the optimal face, so separate it too
        sol = lp_solve(obj, a_ub=a_ub, b_ub=b_ub, bounds=prob.bounds(capped=False))
        mech = prob.unpack(sol.x)
        violated = [
            (m, mr, dev, v) for (m, mr, dev, v) in _sim_separate(instance, mech) if v > tol
        ]
        if violated and any([add_cut(m, mr, dev) for m, mr, dev, _ in violated]):
            cut_log.append([(m, mr, float(v)) for (m, mr, dev, v) in violated])
            continue
        if violated:
            raise ConvergenceError(
                "separation keeps finding a violated constraint already in the program"
            )
        return SolveReport(
            value=sol.value,
            mechanism=mech,
            iterations=rnd + 1,
            cut_log=cut_log,
            round_values=round_values,
            status="optimal",
        )
    raise ConvergenceError(f"no clean separation pass within {max_rounds} rounds")


# ---------------------------------------------------------------------------
# sequential regime
# ---------------------------------------------------------------------------


class _SeqProblem:
    """Layout with history-measurable allocations: q^i lives on the
    revealed prefix (gamma, theta^1..theta^i); transfers settle at the
    final history, which nests any per-period payment schedule."""

    def __init__(self, instance: DiscreteInstance, cap: float):
        self.inst = instance
        self.dims = instance.dims
        self.cap = cap
        m_count, n = instance.n_types, instance.n_goods
        self.prefix_sizes = [int(np.prod(self.dims[: i + 1])) for i in range(n)]
        self.q_offsets = []
        off = 0
        for i in range(n):
            self.q_offsets.append(off)
            off += m_count * self.prefix_sizes[i]
        self.nq = off
        self.nt2 = m_count * instance.n_cells
        self.nvar = self.nq + self.nt2
        # flat cell -> prefix index per period
        self.cell_multi = np.stack(np.unravel_index(np.arange(instance.n_cells), self.dims), axis=-1)
        self.prefix_of_cell = [
            np.ravel_multi_index(
                tuple(self.cell_multi[:, : i + 1].T), self.dims[: i + 1]
            )
            for i in range(n)
        ]

    def iq(self, i, m, prefix):
        return self.q_offsets[i] + m * self.prefix_sizes[i] + prefix

    def it2(self, m, c):
        return self.nq + m * self.inst.n_cells + c

    def objective(self):
        c = np.zeros(self.nvar)
        for m in range(self.inst.n_types):
            for cell in range(self.inst.n_cells):
                c[self.it2(m, cell)] = self.inst.gamma_probs[m] * self.inst.pmf[m, cell]
        return c

    def bounds(self, capped: bool = True):
        cap = self.cap if capped else None
        lo = -self.cap if capped else None
        return [(0.0, 1.0)] * self.nq + [(lo, cap)] * self.nt2

    def _truth_row(self, m):
        row = {}
        theta = self.inst.cell_values
        for cell in range(self.inst.n_cells):
            f = self.inst.pmf[m, cell]
            for i in range(self.inst.n_goods):
                key = self.iq(i, m, int(self.prefix_of_cell[i][cell]))
                row[key] = row.get(key, 0.0) + f * theta[cell, i]
            key = self.it2(m, cell)
            row[key] = row.get(key, 0.0) - f
        return row

    def base_rows(self):
        """Participation only; all truth-telling arrives as cuts."""
        data, rows, cols, rhs = [], [], [], []
        for m in range(self.inst.n_types):
            for col, v in self._truth_row(m).items():
                rows.append(m)
                cols.append(col)
                data.append(-v)
            rhs.append(0.0)
        return (
            sp.csr_matrix((data, (rows, cols)), shape=(self.inst.n_types, self.nvar)),
            np.asarray(rhs),
        )

    def deviation_row(self, m, m_rep, reported_cells):
        """reported_cells[c] = full reported history when the true cell is c."""
        row = {}
        theta = self.inst.cell_values
        rep_multi = self.cell_multi[np.asarray(reported_cells, dtype=int)]
        for cell in range(self.inst.n_cells):
            f = self.inst.pmf[m, cell]
            if f == 0.0:
                continue
            for i in range(self.inst.n_goods):
                rep_prefix = np.ravel_multi_index(
                    tuple(rep_multi[cell, : i + 1]), self.dims[: i + 1]
                )
                key = self.iq(i, m_rep, int(rep_prefix))
                row[key] = row.get(key, 0.0) + f * theta[cell, i]
            key = self.it2(m_rep, int(reported_cells[cell]))
            row[key] = row.get(key, 0.0) - f
        for col, v in self._truth_row(m).items():
            row[col] = row.get(col, 0.0) - v
        return row

    def unpack(self, x: np.ndarray) -> DiscreteMechanism:
        inst = self.inst
        q = np.empty((inst.n_types, inst.n_cells, inst.n_goods))
        for m in range(inst.n_types):
            for i in range(inst.n_goods):
                for cell in range(inst.n_cells):
                    q[m, cell, i] = x[self.iq(i, m, int(self.prefix_of_cell[i][cell]))]
        t2 = x[self.nq :].reshape(inst.n_types, inst.n_cells)
        return DiscreteMechanism(
            q=q, t1=np.zeros(inst.n_types), t2=t2.copy(), regime="sequential"
        )


def _seq_best_response(instance: DiscreteInstance, prob: _SeqProblem, mech: DiscreteMechanism, m: int, m_rep: int):
    """Adapted best response of true type m on menu m_rep, by backward
    induction over (true history, reported history) states.

    Returns (value, reported_cells) with reported_cells[c] the induced
    full report for each true cell c.
    """
    dims = prob.dims
    n = instance.n_goods
    pmf = instance.pmf[m].reshape(dims)
    # q tables per period on prefixes of the REPORTED history
    q_pref = []
    for i in range(n):
        tab = np.empty((prob.prefix_sizes[i],))
        # mech.q is expanded on full cells; collapse to the prefix table
        for cell in range(instance.n_cells):
            tab[int(prob.prefix_of_cell[i][cell])] = mech.q[m_rep, cell, i]
        q_pref.append(tab.reshape(dims[: i + 1]))
    t2 = mech.t2[m_rep].reshape(dims)

    # prefix marginals of the true distribution
    prefix_prob = []
    for i in range(n + 1):
        axes = tuple(range(i, n))
        prefix_prob.append(pmf.sum(axis=axes) if axes else pmf)

    theta = [instance.theta_grids[i] for i in range(n)]

    # value tensors carry axes (true prefix..., reported prefix...);
    # terminal level: V_n(t_full, r_full) = -t2(r_full)
    policies = [None] * n
    v = np.broadcast_to(-t2, dims + dims).copy()

    for level in range(n, 0, -1):
        i = level - 1
        tdims, rdims = dims[:level], dims[:level]
        pol = np.empty(tdims + rdims[:-1], dtype=int)
        v_new = np.zeros(dims[: level - 1] + dims[: level - 1])
        for t_pre in np.ndindex(*dims[: level - 1]):
            p_pre = prefix_prob[level - 1][t_pre] if level - 1 > 0 else 1.0
            for r_pre in np.ndindex(*dims[: level - 1]):
                total = 0.0
                for t_i in range(dims[i]):
                    p_joint = prefix_prob[level][t_pre + (t_i,)]
                    if p_pre <= 0.0 or p_joint <= 0.0:
                        pol[t_pre + (t_i,) + r_pre] = 0
                        continue
                    w = p_joint / p_pre
                    best, best_r = -np.inf, 0
                    for r_i in range(dims[i]):
                        gain = theta[i][t_i] * q_pref[i][r_pre + (r_i,)]
                        cont = v[t_pre + (t_i,) + r_pre + (r_i,)]
                        cand = gain + cont
                        if cand > best + 1e-15:
                            best, best_r = cand, r_i
                    pol[t_pre + (t_i,) + r_pre] = best_r
                    total += w * best
                v_new[t_pre + r_pre] = total
        policies[i] = pol
        v = v_new
    dev_value = float(v[()])

    # roll the policy forward to a full reported history per true cell
    reported = np.empty(instance.n_cells, dtype=int)
    for cell in range(instance.n_cells):
        t_multi = tuple(prob.cell_multi[cell])
        r_hist: tuple = ()
        for i in range(n):
            r_i = int(policies[i][t_multi[: i + 1] + r_hist])
            r_hist = r_hist + (r_i,)
        reported[cell] = int(np.ravel_multi_index(r_hist, dims))
    return dev_value, reported


def solve_sequential(
    instance: DiscreteInstance,
    tol: float = DEFAULT_TOL,
    max_rounds: int = MAX_ROUNDS,
) -> SolveReport:
    """Cutting-plane solution of the period-by-period selling LP."""
    cap = CAP_FACTOR * max(1.0, abs(full_surplus(instance)))
    prob = _SeqProblem(instance, cap)
    obj = prob.objective()
    base, base_rhs = prob.base_rows()

    cut_rows: list = []
    cut_keys: set = set()
    cut_log: list = []

    def add_cut(m, m_rep, reported):
        key = (m, m_rep, tuple(int(r) for r in reported))
        if key in cut_keys:
            return False
        cut_keys.add(key)
        cut_rows.append(prob.deviation_row(m, m_rep, reported))
        return True

    for m in range(instance.n_types):
        for m_rep in range(instance.n_types):
            if m != m_rep:
                add_cut(m, m_rep, np.arange(instance.n_cells))

    def assemble():
        if not cut_rows:
            return base, base_rhs
        data, rows, cols = [], [], []
        for r, row in enumerate(cut_rows):
            for col, v in row.items():
                rows.append(r)
                cols.append(col)
                data.append(v)
        cuts = sp.csr_matrix((data, (rows, cols)), shape=(len(cut_rows), prob.nvar))
        return sp.vstack([base, cuts]).tocsr(), np.concatenate([base_rhs, np.zeros(len(cut_rows))])

    def separate(mech):
        truthful = _truthful_values(instance, mech)
        out = []
        for m in range(instance.n_types):
            for m_rep in range(instance.n_types):
                val, reported = _seq_best_response(instance, prob, mech, m, m_rep)
                violation = val - float(truthful[m])
                if violation > tol:
                    out.append((m, m_rep, reported, violation))
        return out

    round_values = []
    for rnd in range(max_rounds):
        a_ub, b_ub = assemble()
        sol = lp_solve(obj, a_ub=a_ub, b_ub=b_ub, bounds=prob.bounds())
        round_values.append(sol.value)
        violated = separate(prob.unpack(sol.x))
        cut_log.append([(m, mr, float(v)) for (m, mr, _, v) in violated])
        if violated and any([add_cut(m, mr, rep) for m, mr, rep, _ in violated]):
            continue
        sol = lp_solve(obj, a_ub=a_ub, b_ub=b_ub, bounds=prob.bounds(capped=False))
        mech = prob.unpack(sol.x)
        violated = separate(mech)
        if violated and any([add_cut(m, mr, rep) for m, mr, rep, _ in violated]):
            cut_log.append([(m, mr, float(v)) for (m, mr, _, v) in violated])
            continue
        if violated:
            raise ConvergenceError(
                "adapted separation keeps finding a violated constraint already in the program"
            )
        return SolveReport(
            value=sol.value,
            mechanism=mech,
            iterations=rnd + 1,
            cut_log=cut_log,
            round_values=round_values,
            status="optimal",
        )
    raise ConvergenceError(f"no clean adapted separation within {max_rounds} rounds")


# ---------------------------------------------------------------------------
# relaxed regime (observed orthogonalized shock)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RelaxedTables:
    """Common rectangulation of the shock cube.

    Each z cell maps, for every type, to exactly one valuation cell, and
    the pushforward of the cell masses reproduces each type's pmf
    exactly; the quantile chain is cut at every type's conditional cdf
    breakpoints to make that literal.
    """

    masses: np.ndarray       # (Z,)
    cell_of: np.ndarray      # (Z, M) flat valuation cell per type
    values: np.ndarray       # (Z, M, n) valuation vectors per type


def build_relaxed_tables(instance: DiscreteInstance, tol: float = 1e-13) -> RelaxedTables:
    dims = instance.dims
    m_count, n = instance.n_types, instance.n_goods
    pmfs = [instance.pmf[m].reshape(dims) for m in range(m_count)]
    cells: list = []

    def conditional(m, chosen):
        slab = pmfs[m][tuple(chosen)] if chosen else pmfs[m]
        axes = tuple(range(1, n - len(chosen)))
        cond = slab.sum(axis=axes) if axes else slab
        total = cond.sum()
        if total <= 0.0:
            return np.full(dims[len(chosen)], 1.0 / dims[len(chosen)])
        return cond / total

    def recurse(depth, mass, chosen):
        if depth == n:
            flat = np.array(
                [np.ravel_multi_index(tuple(chosen[m]), dims) for m in range(m_count)],
                dtype=int,
            )
            cells.append((mass, flat))
            return
        cums = []
        for m in range(m_count):
            cum = np.concatenate([[0.0], np.cumsum(conditional(m, chosen[m]))])
            cum[-1] = 1.0
            cums.append(cum)
        breaks = np.unique(np.concatenate(cums))
        keep = [0.0]
        for b in breaks[1:]:
            if b - keep[-1] > tol:
                keep.append(float(b))
        keep[-1] = 1.0
        for a, b in zip(keep[:-1], keep[1:]):
            mid = 0.5 * (a + b)
            nxt = [
                chosen[m] + [int(np.searchsorted(cums[m], mid, side="right") - 1)]
                for m in range(m_count)
            ]
            recurse(depth + 1, mass * (b - a), nxt)

    recurse(0, 1.0, [[] for _ in range(m_count)])
    masses = np.array([c[0] for c in cells])
    cell_of = np.vstack([c[1] for c in cells])
    reps = instance.cell_values
    values = reps[cell_of]  # (Z, M, n)

    # the pushforward must reproduce each type's pmf
    for m in range(m_count):
        agg = np.zeros(instance.n_cells)
        np.add.at(agg, cell_of[:, m], masses)
        if np.max(np.abs(agg - instance.pmf[m])) > 1e-9:
            raise DegenerateCellError("z rectangulation does not reproduce the pmf")
    return RelaxedTables(masses=masses, cell_of=cell_of, values=values)


def solve_relaxed(instance: DiscreteInstance, tables: Optional[RelaxedTables] = None) -> SolveReport:
    """One-transfer screening with the shock publicly observed: pure LP,
    type misreports only."""
    if tables is None:
        tables = build_relaxed_tables(instance)
    m_count, n = instance.n_types, instance.n_goods
    z_count = len(tables.masses)
    nq = m_count * z_count * n
    nvar = nq + m_count

    def iq(m, z, j):
        return (m * z_count + z) * n + j

    def it(m):
        return nq + m

    obj = np.zeros(nvar)
    obj[nq:] = instance.gamma_probs
    cap = CAP_FACTOR * max(1.0, abs(full_surplus(instance)))
    bounds = [(0.0, 1.0)] * nq + [(-cap, cap)] * m_count

    data, rows, cols, rhs = [], [], [], []
    r = 0
    # participation: that_m <= E_z[qhat(m,z).v(m,z)]
    for m in range(m_count):
        cols.append(it(m))
        data.append(1.0)
        rows.append(r)
        for z in range(z_count):
            for j in range(n):
                cols.append(iq(m, z, j))
                data.append(-tables.masses[z] * tables.values[z, m, j])
                rows.append(r)
        rhs.append(0.0)
        r += 1
    # type misreports: menu m_rep valued with type m's valuation map
    for m in range(m_count):
        for m_rep in range(m_count):
            if m == m_rep:
                continue
            for z in range(z_count):
                for j in range(n):
                    cols.append(iq(m_rep, z, j))
                    data.append(tables.masses[z] * tables.values[z, m, j])
                    rows.append(r)
                    cols.append(iq(m, z, j))
                    data.append(-tables.masses[z] * tables.values[z, m, j])
                    rows.append(r)
            cols.append(it(m_rep))
            data.append(-1.0)
            rows.append(r)
            cols.append(it(m))
            data.append(1.0)
            rows.append(r)
            rhs.append(0.0)
            r += 1
    a_ub = sp.csr_matrix((data, (rows, cols)), shape=(r, nvar))
    sol = lp_solve(obj, a_ub=a_ub, b_ub=np.asarray(rhs), bounds=bounds)

    qhat = sol.x[:nq].reshape(m_count, z_count, n)
    that = sol.x[nq:]
    # conditional-average allocation per valuation cell, for reporting
    q_cells = np.zeros((m_count, instance.n_cells, n))
    for m in range(m_count):
        wsum = np.zeros(instance.n_cells)
        np.add.at(wsum, tables.cell_of[:, m], tables.masses)
        for j in range(n):
            acc = np.zeros(instance.n_cells)
            np.add.at(acc, tables.cell_of[:, m], tables.masses * qhat[m, :, j])
            q_cells[m, :, j] = np.divide(acc, wsum, out=np.zeros_like(acc), where=wsum > 0)
    mech = DiscreteMechanism(
        q=q_cells,
        t1=that.copy(),
        t2=np.zeros((m_count, instance.n_cells)),
        regime="relaxed",
        aux={"qhat": qhat, "masses": tables.masses, "cell_of": tables.cell_of},
    )
    return SolveReport(
        value=sol.value,
        mechanism=mech,
        iterations=1,
        cut_log=[],
        round_values=[sol.value],
        status="optimal",
    )


# ---------------------------------------------------------------------------
# separate selling, evaluation, projection, brute force
# ---------------------------------------------------------------------------


def separate_selling_value(instance: DiscreteInstance, tol: float = DEFAULT_TOL) -> float:
    """Sum of one-good optima on the marginal instances; a feasible
    (separable) mechanism of the joint problem, hence a lower bound."""
    total = 0.0
    for j in range(instance.n_goods):
        rep = solve_simultaneous(marginal_instance(instance, j), tol=tol)
        total += rep.value
    return total


def evaluate_mechanism(instance: DiscreteInstance, mech: DiscreteMechanism) -> EvalReport:
    """Recompute revenue and worst constraint violations for a mechanism.

    The deviation sets match the regime: all misreport maps for the
    one-shot program, adapted strategies for the sequential one, and
    type misreports on the shock rectangulation for the relaxed one.
    """
    if mech.q.shape != (instance.n_types, instance.n_cells, instance.n_goods):
        raise ShapeMismatchError("allocation table does not match the instance")
    revenue = mechanism_revenue(instance, mech)
    if mech.regime == "relaxed":
        return _evaluate_relaxed(instance, mech, revenue)
    truthful = _truthful_values(instance, mech)
    ir_violation = float(np.maximum(-truthful, 0.0).max())
    theta = instance.cell_values
    ic2 = -np.inf
    for m in range(instance.n_types):
        w = theta @ mech.q[m].T - mech.t2[m][None, :]
        own = np.diag(w)
        ic2 = max(ic2, float(np.max(w - own[:, None])))
    ic1 = -np.inf
    if mech.regime == "sequential":
        prob = _SeqProblem(instance, 1.0)
        for m in range(instance.n_types):
            for m_rep in range(instance.n_types):
                val, _ = _seq_best_response(instance, prob, mech, m, m_rep)
                ic1 = max(ic1, val - float(truthful[m]))
    else:
        for m, m_rep, _, v in _sim_separate(instance, mech):
            ic1 = max(ic1, v)
    return EvalReport(
        revenue=revenue,
        ic2_violation=max(ic2, 0.0),
        ir_violation=ir_violation,
        ic1_violation=max(ic1, 0.0),
    )


def _evaluate_relaxed(instance: DiscreteInstance, mech: DiscreteMechanism, revenue: float) -> EvalReport:
    if "qhat" not in mech.aux:
        raise ShapeMismatchError("relaxed mechanism is missing its shock-space table")
    qhat = np.asarray(mech.aux["qhat"], dtype=float)
    masses = np.asarray(mech.aux["masses"], dtype=float)
    cell_of = np.asarray(mech.aux["cell_of"], dtype=int)
    reps = instance.cell_values
    m_count = instance.n_types
    # value[m, m_rep] = E_z[qhat(m_rep, z) . v(m, z)] - that(m_rep)
    value = np.empty((m_count, m_count))
    for m in range(m_count):
        v_m = reps[cell_of[:, m]]  # (Z, n)
        for m_rep in range(m_count):
            value[m, m_rep] = float(np.dot(masses, np.sum(qhat[m_rep] * v_m, axis=1))) - mech.t1[m_rep]
    truthful = np.diag(value)
    ic1 = float(np.max(value - truthful[:, None]))
    ir = float(np.maximum(-truthful, 0.0).max())
    return EvalReport(revenue=revenue, ic2_violation=0.0, ir_violation=ir, ic1_violation=max(ic1, 0.0))


def project_mechanism(
    model: JointModel, tmech: ThresholdMechanism, instance: DiscreteInstance
) -> DiscreteMechanism:
    """Restrict a continuum option menu to the instance's grid."""
    m_count, c_count, n = instance.n_types, instance.n_cells, instance.n_goods
    q = np.zeros((m_count, c_count, n))
    t2 = np.zeros((m_count, c_count))
    t1 = np.zeros(m_count)
    reps = instance.cell_values
    for m, g in enumerate(instance.gamma_values):
        q[m] = tmech.allocation(g, reps)
        t2[m] = transfer_t2(tmech, g, reps)
        t1[m] = tmech.t1_at(g)
    return DiscreteMechanism(q=q, t1=t1, t2=t2, regime="simultaneous")


def _cyclically_monotone(theta: np.ndarray, alloc: np.ndarray) -> bool:
    """Feasibility of valuation truth-telling for a fixed 0/1 allocation:
    the misreport graph may not contain a negative cycle."""
    c_count = theta.shape[0]
    w = np.empty((c_count, c_count))
    for a in range(c_count):
        w[a] = (alloc[a] - alloc) @ theta[a]
    dist = w.copy()
    for k in range(c_count):
        dist = np.minimum(dist, dist[:, k][:, None] + dist[k][None, :])
    return not np.any(np.diag(dist) < -1e-12)


def brute_force_value(instance: DiscreteInstance) -> float:
    """Exhaustive deterministic-allocation optimum with exact transfer LPs.

    Every 0/1 allocation table per type is enumerated (non-implementable
    ones pruned by the negative-cycle test), and the transfers solve an
    LP carrying the complete deviation set: all cell misreport pairs and
    every joint misreporting map for every ordered type pair.  The
    constraint matrix over transfers does not depend on the allocation,
    so it is assembled once and only the right-hand side moves.  Only
    sensible for a handful of cells.
    """
    m_count, c_count, n = instance.n_types, instance.n_cells, instance.n_goods
    if c_count ** c_count > 100_000 or 2 ** (c_count * n) > 4096:
        raise InvalidIntervalError("instance too large for exhaustive search")
    theta = instance.cell_values

    allocs = []
    for mask in range(2 ** (c_count * n)):
        a = np.array([(mask >> k) & 1 for k in range(c_count * n)], dtype=float)
        a = a.reshape(c_count, n)
        if _cyclically_monotone(theta, a):
            allocs.append(a)

    maps = np.array(list(np.ndindex(*([c_count] * c_count))), dtype=int)  # (n_maps, C)
    nvar = m_count * c_count + m_count  # t2 then t1
    obj = np.zeros(nvar)
    for m in range(m_count):
        obj[m_count * c_count + m] = instance.gamma_probs[m]
        obj[m * c_count: (m + 1) * c_count] = instance.gamma_probs[m] * instance.pmf[m]

    rows, cols, data = [], [], []
    r = 0
    pair_index = []  # row ranges of the map blocks per ordered type pair
    # cell-misreport rows: t2(m,a) - t2(m,b) <= value difference (rhs)
    for m in range(m_count):
        for a in range(c_count):
            for b in range(c_count):
                if a == b:
                    continue
                rows += [r, r]
                cols += [m * c_count + a, m * c_count + b]
                data += [1.0, -1.0]
                r += 1
    # participation rows: sum_c f t2 + t1 <= E[q.theta] (rhs)
    for m in range(m_count):
        for cell in range(c_count):
            rows.append(r)
            cols.append(m * c_count + cell)
            data.append(float(instance.pmf[m, cell]))
        rows.append(r)
        cols.append(m_count * c_count + m)
        data.append(1.0)
        r += 1
    # joint-map rows per ordered pair: transfer coefficients are fixed
    for m in range(m_count):
        for m_rep in range(m_count):
            if m == m_rep:
                continue
            pair_index.append((m, m_rep, r))
            for mp_row in maps:
                coeff = np.zeros(nvar)
                for cell in range(c_count):
                    coeff[m_rep * c_count + mp_row[cell]] -= instance.pmf[m, cell]
                coeff[m * c_count: (m + 1) * c_count] += instance.pmf[m]
                coeff[m_count * c_count + m_rep] -= 1.0
                coeff[m_count * c_count + m] += 1.0
                for col in np.nonzero(coeff)[0]:
                    rows.append(r)
                    cols.append(int(col))
                    data.append(float(coeff[col]))
                r += 1
    a_ub = sp.csr_matrix((data, (rows, cols)), shape=(r, nvar))

    cell_ids = np.arange(c_count)
    best = -np.inf
    for combo in np.ndindex(*([len(allocs)] * m_count)):
        q = np.stack([allocs[combo[m]] for m in range(m_count)])
        qtheta = np.einsum("mcn,an->mac", q, theta)  # report c at true a on menu m
        u_const = np.einsum("mc,mc->m", instance.pmf, np.einsum("mcn,cn->mc", q, theta))
        rhs = np.empty(r)
        i = 0
        for m in range(m_count):
            for a in range(c_count):
                for b in range(c_count):
                    if a == b:
                        continue
                    rhs[i] = qtheta[m, a, a] - qtheta[m, a, b]
                    i += 1
        for m in range(m_count):
            rhs[i] = u_const[m]
            i += 1
        for m, m_rep, start in pair_index:
            dev_gain = qtheta[m_rep][cell_ids[None, :], maps] @ instance.pmf[m]
            rhs[start: start + len(maps)] = u_const[m] - dev_gain
        try:
            sol = lp_solve(obj, a_ub=a_ub, b_ub=rhs, bounds=[(None, None)] * nvar)
        except Exception:  # noqa: BLE001 - infeasible allocation profile
            continue
        best = max(best, sol.value)
    return float(best)


# ---------------------------------------------------------------------------
# regime comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegimeRow:
    spec: dict
    v_simultaneous: float
    v_sequential: float
    v_relaxed: float
    v_separate: float
    surplus: float

    @property
    def gap_separate(self) -> float:
        return self.v_simultaneous - self.v_separate

    @property
    def gap_sequential(self) -> float:
        return self.v_sequential - self.v_simultaneous

    @property
    def gap_relaxed(self) -> float:
        return self.v_relaxed - self.v_simultaneous


def compare_regimes(model: JointModel, grid_specs: Sequence[dict], tol: float = DEFAULT_TOL) -> list:
    """Solve all four values per refinement spec.

    Each spec is ``{"gamma_cells": int, "theta_cells": int | list}``.
    """
    out = []
    for spec in grid_specs:
        inst = discretize(model, int(spec["gamma_cells"]), spec["theta_cells"])
        sim = solve_simultaneous(inst, tol=tol)
        seq = solve_sequential(inst, tol=tol)
        rel = solve_relaxed(inst)
        sep = separate_selling_value(inst, tol=tol)
        out.append(
            RegimeRow(
                spec=dict(spec),
                v_simultaneous=sim.value,
                v_sequential=seq.value,
                v_relaxed=rel.value,
                v_separate=sep,
                surplus=full_surplus(inst),
            )
        )
    return out
