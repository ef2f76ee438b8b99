"""Dense Levenberg-Marquardt with Huber IRLS weighting and fixed-parameter masks.

Parameters live in named *groups* (all rotations, all landmarks, ...); each
element of a group is one parameter block with its own on-manifold update.
Residuals are added in *batches*: one factor object evaluates ``N``
same-shaped residuals at once, each referencing one element per slot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from viinit.errors import ConfigError, InvalidArgumentError
from viinit.geometry import skew, so3_exp

log = logging.getLogger(__name__)

HUBER_MONO = float(np.sqrt(5.991))
HUBER_STEREO = float(np.sqrt(7.815))


# --------------------------------------------------------------------------- manifolds


class Euclidean:
    def __init__(self, dim: int):
        self.dim = dim
        self.shape = (dim,)

    def plus(self, x, delta):
        return x + delta

    def __repr__(self):
        return f"Euclidean({self.dim})"


class SO3Manifold:
    dim = 3
    shape = (3, 3)

    def plus(self, R, delta):
        return R @ so3_exp(delta)

    def __repr__(self):
        return "SO3"


class UnitVectorManifold:
    """Unit 3-vectors updated by rotating about two axes orthogonal to them."""

    dim = 2
    shape = (3,)

    @staticmethod
    def basis(d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        e = np.zeros(3)
        e[int(np.argmin(np.abs(d)))] = 1.0
        b1 = np.cross(d, e)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(d, b1)
        return np.stack([b1, b2], axis=1)

    def plus(self, d, delta):
        out = so3_exp(self.basis(d) @ delta) @ d
        return out / np.linalg.norm(out)

    @classmethod
    def jacobian(cls, d) -> np.ndarray:
        """d(direction)/d(tangent) at ``d``, shape (3, 2)."""
        return -skew(d) @ cls.basis(d)

    def __repr__(self):
        return "S2"


EUCLIDEAN3 = Euclidean(3)
SO3 = SO3Manifold()
UNIT_VECTOR = UnitVectorManifold()


# --------------------------------------------------------------------------- robust loss


def huber_weight(residual_norm, delta):
    """IRLS weight: 1 inside the threshold, ``delta / |r|`` outside."""
    if np.any(np.asarray(delta) <= 0):
        raise ConfigError("Huber threshold must be positive")
    s = np.asarray(residual_norm, dtype=float)
    w = np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))
    return float(w) if w.ndim == 0 else w


def huber_rho(squared_norm, delta):
    """Huber cost of a squared whitened norm; equals ``squared_norm`` inside ``delta``."""
    s2 = np.asarray(squared_norm, dtype=float)
    s = np.sqrt(s2)
    out = np.where(s <= delta, s2, 2.0 * delta * s - delta * delta)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- problem


@dataclass
class ParameterGroup:
    name: str
    values: np.ndarray
    manifold: object
    fixed: np.ndarray
    eliminate: bool = False

    def __len__(self):
        return len(self.values)


@dataclass
class ResidualBatch:
    factor: object
    refs: list
    sqrt_info: np.ndarray
    huber: float | None
    name: str


class LeastSquaresProblem:
    def __init__(self):
        self.groups: dict[str, ParameterGroup] = {}
        self.batches: list[ResidualBatch] = []

    def add_group(self, name, values, manifold, fixed=None, eliminate=False):
        values = np.array(values, dtype=float)
        if values.shape[1:] != manifold.shape:
            raise InvalidArgumentError(
                f"group {name}: values shape {values.shape[1:]} does not match {manifold!r}"
            )
        n = len(values)
        mask = np.zeros(n, dtype=bool)
        if fixed is not None:
            mask[np.asarray(fixed, dtype=int)] = True
        self.groups[name] = ParameterGroup(name, values, manifold, mask, eliminate)
        return self.groups[name]

    def set_fixed(self, name, indices, fixed=True):
        self.groups[name].fixed[np.asarray(indices, dtype=int)] = fixed

    def add_residuals(self, factor, refs, sqrt_info=None, huber=None, name=None):
        """Register ``N`` residuals. ``refs`` is a list of ``(group, index_array)`` per slot."""
        norm_refs = []
        n = None
        for group, idx in refs:
            if group not in self.groups:
                raise InvalidArgumentError(f"unknown parameter group {group!r}")
            idx = np.asarray(idx, dtype=int).reshape(-1)
            if np.any(idx < 0) or np.any(idx >= len(self.groups[group])):
                raise InvalidArgumentError(f"residual references a missing block of {group!r}")
            if n is None:
                n = len(idx)
            elif len(idx) != n:
                raise InvalidArgumentError("all slots of a batch must have equal length")
            norm_refs.append((group, idx))
        d = factor.dim
        if sqrt_info is None:
            sqrt_info = np.broadcast_to(np.eye(d), (n, d, d))
        else:
            sqrt_info = np.asarray(sqrt_info, dtype=float)
            if sqrt_info.ndim == 2:
                sqrt_info = np.broadcast_to(sqrt_info, (n, d, d))
        if huber is not None and huber <= 0:
            raise ConfigError("Huber threshold must be positive")
        self.batches.append(
            ResidualBatch(factor, norm_refs, sqrt_info, huber, name or type(factor).__name__)
        )

    def values(self, name) -> np.ndarray:
        return self.groups[name].values

    # -- evaluation ---------------------------------------------------------

    def _slot_values(self, batch, state):
        return [state[g][idx] for g, idx in batch.refs]

    def snapshot(self):
        return {name: g.values.copy() for name, g in self.groups.items()}

    def _restore(self, state):
        for name, vals in state.items():
            self.groups[name].values = vals

    def evaluate_cost(self, state=None, with_jacobians=False):
        """Robust cost ``0.5 * sum rho(|W r|^2)`` and optionally per-batch linearization."""
        state = state if state is not None else {n: g.values for n, g in self.groups.items()}
        total = 0.0
        dropped = 0
        lin = []
        for batch in self.batches:
            r, Js, valid = batch.factor.evaluate(*self._slot_values(batch, state), jacobians=with_jacobians)
            if valid is None:
                valid = np.ones(len(r), dtype=bool)
            dropped += int(np.count_nonzero(~valid))
            rw = np.einsum("nij,nj->ni", batch.sqrt_info, r)
            rw[~valid] = 0.0
            s2 = np.einsum("ni,ni->n", rw, rw)
            if batch.huber is not None:
                total += 0.5 * float(np.sum(huber_rho(s2, batch.huber)))
                w = np.where(np.sqrt(s2) <= batch.huber, 1.0, batch.huber / np.sqrt(np.maximum(s2, 1e-300)))
            else:
                total += 0.5 * float(np.sum(s2))
                w = np.ones(len(r))
            w = w * valid
            if with_jacobians:
                Jw = [np.einsum("nij,njk->nik", batch.sqrt_info, J) for J in Js]
                lin.append((batch, rw, Jw, w))
        return total, lin, dropped

    # -- tangent layout -----------------------------------------------------

    def layout(self):
        """Tangent offsets per group (-1 for fixed), eliminated groups ordered last."""
        offsets = {}
        pos = 0
        ordered = sorted(self.groups.values(), key=lambda g: g.eliminate)
        n_reduced = 0
        for g in ordered:
            if g.eliminate and n_reduced == 0:
                n_reduced = pos
            off = np.full(len(g), -1, dtype=int)
            free = np.nonzero(~g.fixed)[0]
            off[free] = pos + np.arange(len(free)) * g.manifold.dim
            pos += len(free) * g.manifold.dim
            offsets[g.name] = off
        if not any(g.eliminate for g in self.groups.values()):
            n_reduced = pos
        return offsets, pos, n_reduced

    def apply_step(self, delta, offsets):
        state = {}
        for name, g in self.groups.items():
            vals = g.values.copy()
            off = offsets[name]
            dim = g.manifold.dim
            for i in np.nonzero(off >= 0)[0]:
                vals[i] = g.manifold.plus(vals[i], delta[off[i]:off[i] + dim])
            state[name] = vals
        return state


def _assemble(lin, offsets, n):
    b = np.zeros(n)
    h_idx, h_val = [], []
    for batch, rw, Jw, w in lin:
        slots = []
        for (group, idx), J in zip(batch.refs, Jw):
            off = offsets[group][idx]
            t = J.shape[2]
            cols = off[:, None] + np.arange(t)[None, :]
            slots.append((off >= 0, cols, J))
        for ma, ca, Ja in slots:
            Jaw = Ja * w[:, None, None]
            g = np.einsum("nda,nd->na", Jaw, rw)
            if ma.any():
                b += np.bincount(ca[ma].ravel(), weights=g[ma].ravel(), minlength=n)
            for mb, cb, Jb in slots:
                m = ma & mb
                if not m.any():
                    continue
                h_val.append(np.einsum("nda,ndb->nab", Jaw[m], Jb[m]).ravel())
                h_idx.append((ca[m][:, :, None] * n + cb[m][:, None, :]).ravel())
    if not h_idx:
        return np.zeros((n, n)), b
    H = np.bincount(np.concatenate(h_idx), weights=np.concatenate(h_val), minlength=n * n)
    return H.reshape(n, n), b


def _solve_dense(H, rhs):
    c = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
    return scipy.linalg.cho_solve(c, rhs, check_finite=False)


def _solve_schur(H, rhs, n_reduced):
    A = H[:n_reduced, :n_reduced]
    B = H[:n_reduced, n_reduced:]
    m = (H.shape[0] - n_reduced) // 3
    idx = n_reduced + 3 * np.arange(m)
    rows = idx[:, None, None] + np.arange(3)[None, :, None]
    cols = idx[:, None, None] + np.arange(3)[None, None, :]
    C = H[rows, cols]
    # Cholesky per 3x3 block to detect indefiniteness like the dense path
    np.linalg.cholesky(C)
    Cinv = np.linalg.inv(C)
    u, v = rhs[:n_reduced], rhs[n_reduced:].reshape(m, 3)
    B3 = B.reshape(n_reduced, m, 3)
    BC = np.einsum("alj,ljk->alk", B3, Cinv)
    S = A - BC.reshape(n_reduced, -1) @ B.T
    x = _solve_dense(S, u - BC.reshape(n_reduced, -1) @ v.ravel()) if n_reduced else np.zeros(0)
    y = np.einsum("lij,lj->li", Cinv, v - np.einsum("alj,a->lj", B3, x))
    return np.concatenate([x, y.ravel()])


# --------------------------------------------------------------------------- solve


@dataclass
class SolverOptions:
    max_iter: int = 100
    lambda_init: float = 1e-4
    gradient_tol: float = 1e-10
    # a cost this small is zero up to rounding; stop without stepping
    abs_cost_tol: float = 1e-18
    rel_cost_tol: float = 1e-9
    lambda_min: float = 1e-12
    lambda_max: float = 1e6
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    schur_threshold: int = 200


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination_reason: str
    cost_history: list = field(default_factory=list)
    dropped_residuals: int = 0

    @property
    def success(self) -> bool:
        return self.termination_reason in ("converged", "max-iter", "stalled")


def solve(problem: LeastSquaresProblem, opts: SolverOptions | None = None) -> SolveReport:
    """Minimize the problem in place. Parameters end at the best accepted point."""
    opts = opts or SolverOptions()
    offsets, n, n_reduced = problem.layout()
    eliminated = sum(int(np.count_nonzero(~g.fixed)) for g in problem.groups.values() if g.eliminate)
    use_schur = eliminated > opts.schur_threshold and n_reduced < n

    cost, lin, dropped = problem.evaluate_cost(with_jacobians=True)
    report = SolveReport(cost, cost, 0, "converged", [cost], dropped)
    if n == 0:
        return report
    H, g = _assemble(lin, offsets, n)
    if not np.all(np.isfinite(g)) or not np.isfinite(cost):
        report.termination_reason = "numerical-failure"
        return report
    if cost <= opts.abs_cost_tol or np.max(np.abs(g)) < opts.gradient_tol:
        return report

    lam = opts.lambda_init
    for it in range(1, opts.max_iter + 1):
        report.iterations = it
        D = np.maximum(np.diag(H), 1e-9)
        Hd = H + np.diag(lam * D)
        try:
            delta = _solve_schur(Hd, -g, n_reduced) if use_schur else _solve_dense(Hd, -g)
            ok = np.all(np.isfinite(delta))
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            ok = False
        if ok:
            trial = problem.apply_step(delta, offsets)
            new_cost, _, _ = problem.evaluate_cost(trial)
        if ok and np.isfinite(new_cost) and new_cost < cost:
            problem._restore(trial)
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            report.cost_history.append(cost)
            lam = max(lam * opts.lambda_down, opts.lambda_min)
            cost, lin, dropped = problem.evaluate_cost(with_jacobians=True)
            report.dropped_residuals = dropped
            H, g = _assemble(lin, offsets, n)
            if rel < opts.rel_cost_tol or cost <= opts.abs_cost_tol or np.max(np.abs(g)) < opts.gradient_tol:
                report.termination_reason = "converged"
                break
        else:
            if lam >= opts.lambda_max:
                report.termination_reason = "stalled" if ok else "numerical-failure"
                break
            lam = min(lam * opts.lambda_up, opts.lambda_max)
    else:
        report.termination_reason = "max-iter"
    report.final_cost = cost
    return report


# --------------------------------------------------------------------------- Jacobian checks


def numeric_jacobians(factor, values, manifolds, step=1e-7):
    """Central differences of ``factor`` w.r.t. each slot's tangent space."""
    out = []
    for k, (vals, man) in enumerate(zip(values, manifolds)):
        n = len(vals)
        cols = []
        for j in range(man.dim):
            e = np.zeros(man.dim)
            e[j] = step
            plus = [man.plus(v, e) for v in vals]
            minus = [man.plus(v, -e) for v in vals]
            args_p = list(values)
            args_m = list(values)
            args_p[k] = np.array(plus).reshape(vals.shape)
            args_m[k] = np.array(minus).reshape(vals.shape)
            rp, _, _ = factor.evaluate(*args_p, jacobians=False)
            rm, _, _ = factor.evaluate(*args_m, jacobians=False)
            cols.append((rp - rm) / (2 * step))
        out.append(np.stack(cols, axis=2) if n else np.zeros((0, factor.dim, man.dim)))
    return out


def jacobian_errors(factor, values, manifolds, step=1e-7):
    """Per-slot, per-row relative error ``|J_analytic - J_fd| / max(|J_fd|, 1e-8)``."""
    _, Js, valid = factor.evaluate(*values, jacobians=True)
    fds = numeric_jacobians(factor, values, manifolds, step)
    errs = []
    for Ja, Jn in zip(Js, fds):
        num = np.linalg.norm((Ja - Jn).reshape(len(Ja), -1), axis=1)
        den = np.maximum(np.linalg.norm(Jn.reshape(len(Jn), -1), axis=1), 1e-8)
        e = num / den
        if valid is not None:
            e = np.where(valid, e, 0.0)
        errs.append(e)
    return errs
