"""Embedded convex quadratic-program solver.

Solves the standard form

    minimize   0.5 x'Px + q'x
    subject to l <= Ax <= u

with an over-relaxed operator-splitting iteration: the problem data is
first equilibrated (a Ruiz-style scaling of rows, columns, and cost), then
each pass solves one quasi-definite KKT system (factorized once and
cached), projects onto the constraint box, and takes a relaxed dual step.
Equalities are encoded as ``l == u`` and weighted more heavily in the
splitting. Termination is always judged on the original, unscaled data. A
finishing step re-solves the KKT system restricted to the active
constraints, which typically brings the solution to near machine
precision; it is also attempted opportunistically once the iterates are
close, which ends most solves early.

The solver is fully deterministic: identical inputs and settings produce
bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .validation import DimensionError, InputError, frozen

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible-detected"

_EQ_WEIGHT = 1e3          # splitting weight boost for equality rows
_RHO_LIMITS = (1e-6, 1e6)
_INFEAS_TOL = 1e-9        # relative certificate tolerance
_RUIZ_ITERS = 10
_ADAPT_EVERY = 200        # iterations between stepsize re-tunings


@dataclass(frozen=True)
class QuadraticProgram:
    """Sparse standard-form convex QP. Equality rows have ``lower == upper``.

    ``row_labels`` optionally names the constraint family of each row; it is
    used for infeasibility diagnostics and ignored by the solver itself.
    """

    p_mat: sparse.csc_matrix
    q_vec: np.ndarray
    a_mat: sparse.csc_matrix
    lower: np.ndarray
    upper: np.ndarray
    row_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        p = sparse.csc_matrix(self.p_mat)
        a = sparse.csc_matrix(self.a_mat)
        q = np.asarray(self.q_vec, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        up = np.asarray(self.upper, dtype=float)
        n = p.shape[0]
        if p.shape != (n, n):
            raise DimensionError("P must be square")
        if q.shape != (n,):
            raise DimensionError(f"q has length {q.shape}, expected {n}")
        if a.shape[1] != n:
            raise DimensionError(f"A has {a.shape[1]} columns, expected {n}")
        m = a.shape[0]
        if lo.shape != (m,) or up.shape != (m,):
            raise DimensionError("bounds must match the number of rows of A")
        gap = abs(p - p.T)
        if gap.nnz and gap.max() > 1e-12:
            raise InputError("P must be symmetric (within 1e-12)")
        if np.any(lo > up):
            raise InputError("lower bounds must not exceed upper bounds")
        if self.row_labels is not None and len(self.row_labels) != m:
            raise DimensionError("row_labels must have one entry per row")
        object.__setattr__(self, "p_mat", p)
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "q_vec", frozen(q))
        object.__setattr__(self, "lower", frozen(lo))
        object.__setattr__(self, "upper", frozen(up))

    @property
    def n(self) -> int:
        return self.p_mat.shape[0]

    @property
    def m(self) -> int:
        return self.a_mat.shape[0]


@dataclass(frozen=True)
class SolverSettings:
    """Termination tolerances and splitting parameters.

    ``seed`` is reserved for future randomized features; the current
    iteration uses no randomness.
    """

    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling: bool = True
    adaptive_rho: bool = True
    polish: bool = True
    check_every: int = 25
    record_history: bool = False
    seed: int | None = None

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise InputError("tolerances must be positive")
        if self.max_iter < 1:
            raise InputError("max_iter must be at least 1")
        if not (self.rho > 0 and self.sigma > 0):
            raise InputError("rho and sigma must be positive")
        if not 0 < self.alpha < 2:
            raise InputError("over-relaxation factor must lie in (0, 2)")


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    objective: float
    residual_history: tuple[tuple[int, float, float], ...] = ()
    infeasibility_certificate: np.ndarray | None = None


def _norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _col_norms(mat: sparse.csc_matrix) -> np.ndarray:
    out = np.zeros(mat.shape[1])
    absmat = abs(mat)
    if absmat.nnz:
        out = np.asarray(absmat.max(axis=0).todense()).ravel()
    return out


def _row_norms(mat: sparse.csc_matrix) -> np.ndarray:
    out = np.zeros(mat.shape[0])
    absmat = abs(mat)
    if absmat.nnz:
        out = np.asarray(absmat.max(axis=1).todense()).ravel()
    return out


class QpSolver:
    """Reusable solver workspace.

    One instance per concurrent solve; the cached KKT factorization is
    reused while the quadratic part, constraint matrix, and splitting
    weights are unchanged, which makes repeated solves of the same problem
    with new linear terms cheap.
    """

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()
        self._qp: QuadraticProgram | None = None
        self._lu = None
        self._rho_vec: np.ndarray | None = None
        self._rho_base: np.ndarray | None = None
        # scaled data and the scaling itself
        self._sp = None
        self._sq = None
        self._sa = None
        self._sl = None
        self._su = None
        self._d: np.ndarray | None = None
        self._e: np.ndarray | None = None
        self._cost_scale: float = 1.0
        # warm state, kept in scaled space
        self._x = None
        self._y = None
        self._z = None

    # -- workspace management -------------------------------------------------

    def setup(self, qp: QuadraticProgram) -> None:
        self._qp = qp
        self._compute_scaling(qp)
        self._apply_scaling(qp)
        self._rho_vec = self._initial_rho(qp)
        self._factorize()
        self._x = np.zeros(qp.n)
        self._y = np.zeros(qp.m)
        self._z = np.clip(np.zeros(qp.m), self._sl, self._su)

    def update(self, q_vec=None, lower=None, upper=None, p_mat=None) -> None:
        """Swap problem data without rebuilding the workspace.

        Changing ``p_mat`` triggers a refactorization; the scaling computed
        at setup time is kept, so updates must not change the data's order
        of magnitude wildly. The sparsity pattern of A must stay fixed.
        """
        if self._qp is None:
            raise InputError("update() before setup()")
        qp = self._qp
        kwargs = {}
        if q_vec is not None:
            kwargs["q_vec"] = q_vec
        if lower is not None:
            kwargs["lower"] = lower
        if upper is not None:
            kwargs["upper"] = upper
        if p_mat is not None:
            kwargs["p_mat"] = p_mat
        old_eq = qp.lower == qp.upper
        self._qp = replace(qp, **kwargs)
        new = self._qp
        d, e, c = self._d, self._e, self._cost_scale
        if q_vec is not None:
            self._sq = c * d * new.q_vec
        if lower is not None or upper is not None:
            self._sl = np.where(np.isfinite(new.lower), e * new.lower, new.lower)
            self._su = np.where(np.isfinite(new.upper), e * new.upper, new.upper)
        if p_mat is not None:
            dmat = sparse.diags(d)
            self._sp = (c * (dmat @ new.p_mat @ dmat)).tocsc()
        eq_changed = not np.array_equal(new.lower == new.upper, old_eq)
        if eq_changed:
            self._rho_vec = self._initial_rho(new)
        if p_mat is not None or eq_changed:
            self._factorize()

    def _compute_scaling(self, qp: QuadraticProgram) -> None:
        n, m = qp.n, qp.m
        d = np.ones(n)
        e = np.ones(m)
        c = 1.0
        if not self.settings.scaling:
            self._d, self._e, self._cost_scale = d, e, c
            return
        p = qp.p_mat.copy()
        a = qp.a_mat.copy()
        q = qp.q_vec.copy()
        for _ in range(_RUIZ_ITERS):
            col = np.maximum(_col_norms(p), _col_norms(a))
            col[col == 0] = 1.0
            dj = 1.0 / np.sqrt(col)
            row = _row_norms(a)
            row[row == 0] = 1.0
            ei = 1.0 / np.sqrt(row)
            dmat = sparse.diags(dj)
            p = (dmat @ p @ dmat).tocsc()
            a = (sparse.diags(ei) @ a @ dmat).tocsc()
            q = dj * q
            d *= dj
            e *= ei
            # normalize the cost so its gradient is O(1)
            pcols = _col_norms(p)
            gamma = max(float(np.mean(pcols)), _norm(q))
            if gamma > 0:
                gamma = 1.0 / gamma
                p = p * gamma
                q = q * gamma
                c *= gamma
        self._d, self._e, self._cost_scale = d, e, c

    def _apply_scaling(self, qp: QuadraticProgram) -> None:
        d, e, c = self._d, self._e, self._cost_scale
        dmat = sparse.diags(d)
        self._sp = (c * (dmat @ qp.p_mat @ dmat)).tocsc()
        self._sq = c * d * qp.q_vec
        self._sa = (sparse.diags(e) @ qp.a_mat @ dmat).tocsc()
        with np.errstate(invalid="ignore"):
            self._sl = np.where(np.isfinite(qp.lower), e * qp.lower, qp.lower)
            self._su = np.where(np.isfinite(qp.upper), e * qp.upper, qp.upper)

    def _initial_rho(self, qp: QuadraticProgram) -> np.ndarray:
        rho = np.full(qp.m, self.settings.rho)
        rho[qp.lower == qp.upper] = self.settings.rho * _EQ_WEIGHT
        self._rho_base = rho.copy()
        return rho

    def _factorize(self) -> None:
        n, m = self._qp.n, self._qp.m
        sig_i = sparse.identity(n, format="csc") * self.settings.sigma
        if m:
            kkt = sparse.bmat(
                [[self._sp + sig_i, self._sa.T],
                 [self._sa, -sparse.diags(1.0 / self._rho_vec)]],
                format="csc")
        else:
            kkt = (self._sp + sig_i).tocsc()
        self._lu = splu(kkt)

    # -- main loop ------------------------------------------------------------

    def solve(self, qp: QuadraticProgram | None = None,
              x0: np.ndarray | None = None,
              y0: np.ndarray | None = None) -> QpSolution:
        if qp is not None and qp is not self._qp:
            self.setup(qp)
        if self._qp is None:
            raise InputError("no problem set up")
        s = self.settings
        qp = self._qp
        n, m = qp.n, qp.m
        d, e, c = self._d, self._e, self._cost_scale
        lo, up, q = self._sl, self._su, self._sq

        if x0 is not None:
            xs = np.asarray(x0, dtype=float) / d
        else:
            xs = self._x.copy()
        if y0 is not None:
            ys = c * (np.asarray(y0, dtype=float) / e) if m else np.zeros(0)
        else:
            ys = self._y.copy()
        if xs.shape != (n,) or ys.shape != (m,):
            raise DimensionError("warm-start vectors have the wrong shape")
        zs = np.clip(self._sa @ xs, lo, up) if m else np.zeros(0)

        history: list[tuple[int, float, float]] = []
        y_prev_check = (e * ys / c).copy() if m else np.zeros(0)
        abs_tol, rel_tol = s.abs_tol, s.rel_tol
        best: tuple[float, np.ndarray, np.ndarray] | None = None
        iters = 0
        last_adapt = 0
        last_polish_res = np.inf
        stall_window: list[float] = []
        shakes = 0

        while iters < s.max_iter:
            for _ in range(s.check_every):
                iters += 1
                rhs = np.concatenate([s.sigma * xs - q, zs - ys / self._rho_vec]) \
                    if m else s.sigma * xs - q
                sol = self._lu.solve(rhs)
                xt = sol[:n]
                x_new = s.alpha * xt + (1 - s.alpha) * xs
                if m:
                    nu = sol[n:]
                    zt = zs + (nu - ys) / self._rho_vec
                    z_rel = s.alpha * zt + (1 - s.alpha) * zs
                    z_new = np.clip(z_rel + ys / self._rho_vec, lo, up)
                    ys = ys + self._rho_vec * (z_rel - z_new)
                    zs = z_new
                xs = x_new
                if iters >= s.max_iter:
                    break

            # unscaled iterates and residuals
            x = d * xs
            y = e * ys / c if m else np.zeros(0)
            z = zs / e if m else np.zeros(0)
            ax = qp.a_mat @ x
            px = qp.p_mat @ x
            aty = qp.a_mat.T @ y if m else np.zeros(n)
            r_prim = _norm(ax - z) if m else 0.0
            r_dual = _norm(px + qp.q_vec + aty)
            if s.record_history:
                history.append((iters, r_prim, r_dual))
            combined = max(r_prim, r_dual)
            if best is None or combined < best[0]:
                best = (combined, x.copy(), y.copy())
            stall_window.append(best[0])

            # the exit test is the strict optimality gate itself; a final
            # refinement usually lands near machine precision
            result = self._finish(x, y, iters, history)
            if result.status == OPTIMAL:
                if s.polish:
                    clip_mask = (zs == lo, zs == up) if m else None
                    polished = self._try_polish(x, y, clip_mask)
                    if polished is not None:
                        refined = self._finish(*polished, iters, history)
                        if refined.status == OPTIMAL:
                            result = refined
                self._save_state(xs, ys, zs)
                return result
            eps_prim = abs_tol + rel_tol * max(_norm(ax), _norm(z))
            eps_dual = abs_tol + rel_tol * max(_norm(px), _norm(aty),
                                               _norm(qp.q_vec))
            near = (r_prim <= max(1e4 * eps_prim, 1e-5)
                    and r_dual <= max(1e4 * eps_dual, 1e-5))
            # retry a failed refinement only once the residuals have moved
            # substantially; each attempt costs a factorization
            if s.polish and near and combined < 0.25 * last_polish_res:
                # a successful active-set refinement ends the run early even
                # when the splitting iteration has not fully converged
                clip_mask = (zs == lo, zs == up) if m else None
                polished = self._try_polish(x, y, clip_mask)
                if polished is not None:
                    result = self._finish(*polished, iters, history)
                    if result.status == OPTIMAL:
                        self._save_state(xs, ys, zs)
                        return result
                last_polish_res = combined

            if m:
                dy = y - y_prev_check
                cert = self._primal_infeasibility(dy)
                if cert is not None:
                    return QpSolution(
                        x=frozen(x), y=frozen(y), status=INFEASIBLE,
                        primal_residual=float("inf"), dual_residual=float("inf"),
                        iterations=iters, objective=float("nan"),
                        residual_history=tuple(history),
                        infeasibility_certificate=frozen(cert))
                y_prev_check = y.copy()

            if len(stall_window) >= 81 and stall_window[-1] > 0.98 * stall_window[-81]:
                # the best residual has been essentially flat for ~2000
                # iterations: the iteration sits in a limit cycle of the
                # current stepsize; walk a deterministic ladder of stepsizes
                # before giving up
                if m and s.adaptive_rho and shakes < 8:
                    exponent = shakes // 2 + 1
                    mult = 10.0 ** (exponent if shakes % 2 == 0 else -exponent)
                    self._rho_vec = np.clip(self._rho_base * mult, *_RHO_LIMITS)
                    self._factorize()
                    shakes += 1
                    stall_window.clear()
                    last_adapt = iters
                else:
                    break

            if (s.adaptive_rho and m and iters < s.max_iter
                    and iters - last_adapt >= _ADAPT_EVERY):
                if self._adapt_rho(r_prim, r_dual, ax, z, px, aty):
                    last_adapt = iters

        x_best, y_best = best[1], best[2]
        if s.polish:
            polished = self._try_polish(x_best, y_best)
            if polished is not None:
                x_best, y_best = polished
        result = self._finish(x_best, y_best, iters, history)
        if result.status == OPTIMAL:
            return result
        return replace(result, status=MAX_ITER)

    def _save_state(self, xs, ys, zs) -> None:
        self._x, self._y, self._z = xs.copy(), ys.copy(), zs.copy()

    # -- helpers --------------------------------------------------------------

    def _adapt_rho(self, r_prim, r_dual, ax, z, px, aty) -> bool:
        if max(r_prim, r_dual) < 1e-6:
            # endgame: re-tuning the splitting weights here only causes
            # limit cycles; let the contraction finish the job
            return False
        denom_p = max(_norm(ax), _norm(z), 1e-12)
        denom_d = max(_norm(px), _norm(aty), _norm(self._qp.q_vec), 1e-12)
        ratio = (r_prim / denom_p) / max(r_dual / denom_d, 1e-16)
        scale = float(np.sqrt(ratio))
        if scale > 5.0 or scale < 0.2:
            new_rho = np.clip(self._rho_vec * scale, *_RHO_LIMITS)
            if not np.allclose(new_rho, self._rho_vec):
                self._rho_vec = new_rho
                self._factorize()
                return True
        return False

    def _primal_infeasibility(self, dy: np.ndarray) -> np.ndarray | None:
        qp = self._qp
        scale = _norm(dy)
        if scale <= 1e-12:
            return None
        if _norm(qp.a_mat.T @ dy) > _INFEAS_TOL * scale * max(1.0, _norm(qp.a_mat.data)):
            return None
        pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
        if np.any(pos[np.isinf(qp.upper)] > 1e-12 * scale):
            return None
        if np.any(-neg[np.isinf(qp.lower)] > 1e-12 * scale):
            return None
        finite_u = np.where(np.isinf(qp.upper), 0.0, qp.upper)
        finite_l = np.where(np.isinf(qp.lower), 0.0, qp.lower)
        support = float(finite_u @ pos + finite_l @ neg)
        if support <= -_INFEAS_TOL * scale:
            return dy / scale
        return None

    def _try_polish(self, x: np.ndarray, y: np.ndarray, clip_mask=None,
                    ) -> tuple[np.ndarray, np.ndarray] | None:
        """Polish with a few active-set guesses and keep the best improving
        result. The first guess, when available, is the face the projection
        step itself identified (rows clipped exactly onto a bound), which is
        the sharpest signal on degenerate problems."""
        y_scale = max(1.0, _norm(y))
        guesses = [(1e-10, 0.0, None), (1e-6 * y_scale, 1e-7, None),
                   (1e-4 * y_scale, 1e-5, None)]
        if clip_mask is not None:
            guesses.insert(0, (1e-10, 0.0, clip_mask))
        best = None
        best_merit = self._merit(x, y)
        ax = self._qp.a_mat @ x if self._qp.m else np.zeros(0)
        for act_tol, prox_tol, mask in guesses:
            polished = self._polish(x, y, ax, act_tol=act_tol,
                                    prox_tol=prox_tol, clip_mask=mask)
            if polished is None:
                continue
            merit = self._merit(*polished)
            if merit < best_merit:
                best, best_merit = polished, merit
                if merit < 1e-12:
                    break
        return best

    def _polish(self, x: np.ndarray, y: np.ndarray, ax: np.ndarray,
                act_tol: float = 1e-10, prox_tol: float = 0.0, clip_mask=None,
                ) -> tuple[np.ndarray, np.ndarray] | None:
        """Solve the KKT system on the active set (original data) with
        regularization and iterative refinement.

        A row counts as active when its multiplier has the right sign or,
        for ``prox_tol > 0``, when the iterate sits on the bound; the latter
        catches degenerate constraints with vanishing multipliers. When
        ``clip_mask`` is given it overrides the inequality selection.
        """
        qp = self._qp
        n, m = qp.n, qp.m
        if m:
            eq = qp.lower == qp.upper
            if clip_mask is not None:
                act_low = ~eq & np.isfinite(qp.lower) & clip_mask[0]
                act_up = ~eq & ~act_low & np.isfinite(qp.upper) & clip_mask[1]
            else:
                scale_b = 1.0 \
                    + np.where(np.isfinite(qp.lower), np.abs(qp.lower), 0.0) \
                    + np.where(np.isfinite(qp.upper), np.abs(qp.upper), 0.0)
                near_low = ax - qp.lower <= prox_tol * scale_b
                near_up = qp.upper - ax <= prox_tol * scale_b
                act_low = ~eq & np.isfinite(qp.lower) & ((y < -act_tol) | near_low)
                act_up = (~eq & ~act_low & np.isfinite(qp.upper)
                          & ((y > act_tol) | near_up))
            active = np.nonzero(eq | act_low | act_up)[0]
            b = np.where(eq, qp.lower, np.where(act_low, qp.lower, qp.upper))[active]
            a_act = qp.a_mat[active]
        else:
            active = np.array([], dtype=int)
            b = np.zeros(0)
            a_act = sparse.csc_matrix((0, n))
        k = active.size
        delta = 1e-9
        kkt = sparse.bmat(
            [[qp.p_mat + delta * sparse.identity(n), a_act.T],
             [a_act, -delta * sparse.identity(k)]],
            format="csc") if k else (qp.p_mat + delta * sparse.identity(n)).tocsc()
        try:
            lu = splu(kkt)
        except RuntimeError:
            return None
        rhs = np.concatenate([-qp.q_vec, b]) if k else -qp.q_vec
        sol = lu.solve(rhs)

        def residual(vec):
            xs, ys = vec[:n], vec[n:]
            res_top = -qp.q_vec - (qp.p_mat @ xs) - (a_act.T @ ys if k else 0.0)
            res_bot = b - (a_act @ xs) if k else np.zeros(0)
            return np.concatenate([res_top, res_bot]) if k else res_top

        # refinement against the unregularized KKT system; keep the best
        # iterate seen, since a degenerate active set can make the exact
        # system inconsistent and the correction drift
        res = residual(sol)
        best_sol, best_res = sol, _norm(res)
        for _ in range(8):
            if best_res < 1e-14 * max(1.0, _norm(rhs)):
                break
            sol = sol + lu.solve(res)
            res = residual(sol)
            if _norm(res) < best_res:
                best_sol, best_res = sol, _norm(res)
        sol = best_sol
        x_p = sol[:n]
        y_p = np.zeros(m)
        if k:
            y_p[active] = sol[n:]
        if not (np.all(np.isfinite(x_p)) and np.all(np.isfinite(y_p))):
            return None
        if self._merit(x_p, y_p) <= self._merit(x, y):
            return x_p, y_p
        return None

    def _kkt_errors(self, x, y) -> tuple[float, float, float]:
        """(violation, stationarity, complementarity) at a candidate point."""
        qp = self._qp
        if not qp.m:
            stat = _norm(qp.p_mat @ x + qp.q_vec)
            return 0.0, stat, 0.0
        ax = qp.a_mat @ x
        viol = max(_norm(np.maximum(qp.lower - ax, 0.0)),
                   _norm(np.maximum(ax - qp.upper, 0.0)))
        stat = _norm(qp.p_mat @ x + qp.q_vec + qp.a_mat.T @ y)
        # complementarity: either the multiplier or its slack must vanish;
        # min of the two is robust to the scale of the other
        pos = np.maximum(y, 0.0)
        neg = np.maximum(-y, 0.0)
        up_slack = np.maximum(qp.upper - ax, 0.0)
        low_slack = np.maximum(ax - qp.lower, 0.0)
        comp = max(_norm(np.minimum(pos, up_slack)),
                   _norm(np.minimum(neg, low_slack)))
        return viol, stat, comp

    def _merit(self, x, y) -> float:
        return max(self._kkt_errors(x, y))

    def _finish(self, x, y, iters, history) -> QpSolution:
        qp, s = self._qp, self.settings
        viol, stat, comp = self._kkt_errors(x, y)
        gate = s.abs_tol * (1 + _norm(qp.q_vec))
        status = OPTIMAL if (viol <= s.abs_tol and stat <= gate and comp <= gate) \
            else MAX_ITER
        obj = float(0.5 * x @ (qp.p_mat @ x) + qp.q_vec @ x)
        return QpSolution(
            x=frozen(x), y=frozen(y), status=status,
            primal_residual=viol, dual_residual=stat,
            iterations=iters, objective=obj,
            residual_history=tuple(history))


def solve(qp: QuadraticProgram, settings: SolverSettings | None = None,
          x0: np.ndarray | None = None, y0: np.ndarray | None = None) -> QpSolution:
    """One-shot solve with a fresh workspace."""
    solver = QpSolver(settings)
    solver.setup(qp)
    return solver.solve(x0=x0, y0=y0)
