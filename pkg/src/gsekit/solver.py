"""Weighted least-absolute-value estimation as a linear program.

The estimation problem

    min sum_j c_j |n_j|   s.t.  A @ [x; n] = b

is solved through its differentiable epigraph form ``min c^T t`` with
``-t <= n <= t``, using a primal-dual interior point method.  Full Newton
steps are taken on (x, n, lambda); the inequality multipliers and the
epigraph variables are instead corrected by component-wise limiting rules
(:func:`variable_limit`), which keeps every multiplier inside [0, c] and
restores ``t >= |n|`` after each step.

A dense two-phase simplex (:func:`reference_lp_solve`) provides an
independent optimum for cross-checking on small systems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .circuit import StampedCircuit
from .errors import SolverFailure

_MU_INTERIOR = 1e-12  # relative safeguard keeping multipliers strictly inside (0, c)
_T_FLOOR = 1e-14
_SIGMA_BAND = 1e10  # barrier ratios mu/s are clipped into tau/s^2 times [1/band, band]


@dataclass
class SolverConfig:
    """Tolerances, iteration limits, and the default weighting rules.

    ``step_limit`` bounds how far an inequality multiplier may move per
    iteration.  ``None`` selects the default of half of each component's own
    weight; a scalar or per-component array can be supplied instead.
    """

    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    step_limit: float | np.ndarray | None = None
    barrier_reduction: float = 0.1
    switch_weight: float = 0.001
    pmu_current_weight: float = 1.0
    pmu_voltage_weight: float = 1.0

    def __post_init__(self):
        if self.feas_tol <= 0 or self.gap_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.step_limit is not None and np.any(np.asarray(self.step_limit) <= 0):
            raise ValueError("step limit must be positive")

    @staticmethod
    def rtu_weight(sigma: float) -> float:
        """Continuous-meter weight rule: sigma = 0.001 maps to weight 1."""
        return (0.001 / sigma) ** 2


@dataclass
class EpigraphLP:
    """min c^T t  s.t.  A [x; n] = b,  -t <= n <= t  (componentwise)."""

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    nx: int
    nn: int

    def __post_init__(self):
        if np.any(self.c < 0):
            raise ValueError("epigraph weights must be nonnegative")
        A = self.A.tocsr()
        self.Ax = A[:, : self.nx].tocsr()
        self.An = A[:, self.nx :].tocsr()
        self.AxT = self.Ax.T.tocsr()
        self.AnT = self.An.T.tocsr()

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_circuit(cls, circuit: StampedCircuit) -> "EpigraphLP":
        return cls(
            A=circuit.A,
            b=circuit.b,
            c=circuit.c.copy(),
            nx=circuit.catalog.n_state,
            nn=circuit.catalog.n_noise,
        )


@dataclass
class PdipState:
    """Iterate of the interior point method; strictly interior in (t, mu)."""

    x: np.ndarray
    n: np.ndarray
    t: np.ndarray
    lam: np.ndarray
    mu1: np.ndarray  # multipliers of n - t <= 0
    mu2: np.ndarray  # multipliers of -n - t <= 0
    tau: float
    iteration: int = 0


@dataclass
class WlavSolution:
    """Result of a WLAV solve.

    ``noise_labels`` parallels ``n``; ``residuals`` carries the final
    equality/dual/complementarity norms.  ``circuit`` links back to the
    stamped system so downstream diagnostics can interpret the solution.
    """

    x: np.ndarray
    n: np.ndarray
    noise_labels: tuple
    objective: float
    iterations: int
    residuals: dict
    converged: bool
    circuit: StampedCircuit | None = None
    trace: list = field(default_factory=list)

    def full_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.n])

    def voltage(self, node_id: int) -> complex:
        return self.circuit.catalog.voltage(self.full_vector(), node_id)

    def noise_of(self, kind: str, device) -> complex:
        return self.circuit.catalog.noise_value(self.full_vector(), kind, device)


def variable_limit(mu_old, mu_new, t, n, d, c):
    """Component-wise limiting of multiplier moves and epigraph restoration.

    Each multiplier moves from its previous value toward the Newton value by
    at most ``d``, clamped by its headroom to the nearest bound of [0, c]:

        delta = mu_new - mu_old;  dir = sign(delta)
        h = c - mu_old  if dir >= 0 else  mu_old
        mu = mu_old + dir * min(d, h, |delta|)

    Any epigraph component overtaken by its noise value is reset to twice
    the noise magnitude.  Returns (mu, t).
    """
    mu_old = np.asarray(mu_old, dtype=float)
    delta = np.asarray(mu_new, dtype=float) - mu_old
    direction = np.sign(delta)
    h = np.where(direction >= 0, np.asarray(c, dtype=float) - mu_old, mu_old)
    step = np.minimum(np.asarray(d, dtype=float), np.minimum(h, np.abs(delta)))
    mu = mu_old + direction * step
    abs_n = np.abs(np.asarray(n, dtype=float))
    t = np.asarray(t, dtype=float)
    t_out = np.where(abs_n > t, 2.0 * abs_n, t)
    return mu, t_out


def _residuals(state: PdipState, lp: EpigraphLP):
    s1 = state.t - state.n
    s2 = state.t + state.n
    r_x = lp.AxT @ state.lam
    r_n = lp.AnT @ state.lam + state.mu1 - state.mu2
    r_t = lp.c - state.mu1 - state.mu2
    r_eq = lp.Ax @ state.x + lp.An @ state.n - lp.b
    return r_x, r_n, r_t, r_eq, s1, s2


def _step_limit(config: SolverConfig, c: np.ndarray):
    if config.step_limit is not None:
        return config.step_limit
    # half of each component's own weight: scale-free across mixed weights
    return 0.5 * np.maximum(c, 1e-10)


def _boundary_fraction(value, step, fraction=0.995):
    """Largest alpha in (0, 1] with value + alpha*step >= (1-fraction)*value."""
    shrink = step < 0
    if not np.any(shrink):
        return 1.0
    alpha = fraction * np.min(value[shrink] / -step[shrink])
    return float(min(1.0, alpha))


def pdip_step(state: PdipState, lp: EpigraphLP, config: SolverConfig) -> PdipState:
    """One damped Newton step on the perturbed KKT system, then limiting.

    The saddle system is solved for (dx, dn, dlam); dt and the multiplier
    steps are recovered by back substitution.  Steps are damped by the
    standard fraction-to-boundary rule (slacks and multipliers may not
    collapse in one step), then the component-wise limiting heuristics cap
    multiplier travel and restore ``t >= |n|``.  The barrier parameter for
    the next iterate is a fixed fraction of the achieved complementarity
    gap.
    """
    r_x, r_n, r_t, r_eq, s1, s2 = _residuals(state, lp)
    c = lp.c
    ceff = np.maximum(c, 1e-10)
    mu1 = np.clip(state.mu1, _MU_INTERIOR * ceff, (1 - _MU_INTERIOR) * ceff)
    mu2 = np.clip(state.mu2, _MU_INTERIOR * ceff, (1 - _MU_INTERIOR) * ceff)
    s1 = np.maximum(s1, _T_FLOOR)
    s2 = np.maximum(s2, _T_FLOOR)

    rc1 = mu1 * s1 - state.tau
    rc2 = mu2 * s2 - state.tau
    # barrier curvature, with the ratios held in a wide band around the
    # central-path value tau/s^2: a multiplier sitting on a bound would
    # otherwise zero the curvature and unleash an unbounded Newton step
    tau = max(state.tau, 1e-16)
    th1 = np.clip(mu1 / s1, tau / (_SIGMA_BAND * s1**2), _SIGMA_BAND * tau / s1**2)
    th2 = np.clip(mu2 / s2, tau / (_SIGMA_BAND * s2**2), _SIGMA_BAND * tau / s2**2)
    th_sum = np.maximum(th1 + th2, 1e-300)
    phi = 4.0 * th1 * th2 / th_sum

    big_r = r_t + rc1 / s1 + rc2 / s2
    rho_n = -r_n + rc1 / s1 - rc2 / s2 - (th1 - th2) / th_sum * big_r

    dx, dn, dlam = _solve_kkt(lp, phi, rho_n, r_x, r_eq)

    dt = ((th1 - th2) * dn - big_r) / th_sum
    dmu1 = -rc1 / s1 - th1 * (dt - dn)
    dmu2 = -rc2 / s2 - th2 * (dt + dn)

    alpha_p = min(
        _boundary_fraction(s1, dt - dn),
        _boundary_fraction(s2, dt + dn),
    )
    alpha_d = min(
        _boundary_fraction(mu1, dmu1),
        _boundary_fraction(mu2, dmu2),
    )

    n_new = state.n + alpha_p * dn
    t_new = state.t + alpha_p * dt
    d = _step_limit(config, c)
    mu1_new, t_new = variable_limit(mu1, mu1 + alpha_d * dmu1, t_new, n_new, d, c)
    mu2_new, t_new = variable_limit(mu2, mu2 + alpha_d * dmu2, t_new, n_new, d, c)
    # the epigraph never needs to grow beyond twice the noise it covers
    t_new = np.minimum(t_new, np.maximum(state.t, 2.0 * np.abs(n_new)))
    t_new = np.maximum(t_new, _T_FLOOR)

    s1n = np.maximum(t_new - n_new, _T_FLOOR)
    s2n = np.maximum(t_new + n_new, _T_FLOOR)
    gap = float(mu1_new @ s1n + mu2_new @ s2n) / max(1, 2 * lp.nn)

    return PdipState(
        x=state.x + alpha_p * dx,
        n=n_new,
        t=t_new,
        lam=state.lam + alpha_d * dlam,
        mu1=mu1_new,
        mu2=mu2_new,
        tau=config.barrier_reduction * gap,
        iteration=state.iteration + 1,
    )


def _solve_kkt(lp: EpigraphLP, phi, rho_n, r_x, r_eq, reg: float = 0.0):
    """Solve the saddle system for (dx, dn, dlam) with one refinement pass.

    The noise diagonal ``phi`` may contain (near) zeros when multipliers sit
    on their bounds; keeping it on the diagonal instead of inverting it
    leaves the factorization to SuperLU's pivoting.
    """
    m, nx, nn = lp.m, lp.nx, lp.nn
    blocks = [
        [sp.diags(np.full(nx, reg)) if reg else None, None, lp.AxT],
        [None, sp.diags(phi + reg), lp.AnT],
        [lp.Ax, lp.An, sp.diags(np.full(m, -reg)) if reg else None],
    ]
    if nx == 0:
        blocks = [row[1:] for row in blocks[1:]]
    K = sp.bmat(blocks, format="csc")
    rhs = np.concatenate([-r_x, rho_n, -r_eq] if nx else [rho_n, -r_eq])
    try:
        lu = spla.splu(K)
        sol = lu.solve(rhs)
        # one refinement pass keeps equality feasibility near machine precision
        sol += lu.solve(rhs - K @ sol)
    except RuntimeError:
        if reg == 0.0:
            return _solve_kkt(lp, phi, rho_n, r_x, r_eq, reg=1e-10)
        raise SolverFailure(
            "KKT factorization is singular; the equality system is rank deficient"
        ) from None
    if not np.all(np.isfinite(sol)):
        if reg == 0.0:
            return _solve_kkt(lp, phi, rho_n, r_x, r_eq, reg=1e-10)
        raise SolverFailure("KKT solve produced non-finite step")
    return sol[:nx], sol[nx : nx + nn], sol[nx + nn :]


def _converged(state: PdipState, lp: EpigraphLP, config: SolverConfig):
    r_x, r_n, r_t, r_eq, s1, s2 = _residuals(state, lp)
    norms = {
        "equality": float(np.max(np.abs(r_eq))) if r_eq.size else 0.0,
        "dual": float(
            max(
                np.max(np.abs(r_x)) if r_x.size else 0.0,
                np.max(np.abs(r_n)) if r_n.size else 0.0,
                np.max(np.abs(r_t)) if r_t.size else 0.0,
            )
        ),
        "complementarity": float(
            max(
                np.max(state.mu1 * np.maximum(s1, 0.0)) if s1.size else 0.0,
                np.max(state.mu2 * np.maximum(s2, 0.0)) if s2.size else 0.0,
            )
        ),
        "interior": float(np.min(np.minimum(s1, s2))) if s1.size else 0.0,
    }
    ok = (
        norms["equality"] <= config.feas_tol
        and norms["dual"] <= config.feas_tol
        and norms["complementarity"] <= config.gap_tol
        and norms["interior"] >= -config.feas_tol
    )
    return ok, norms


def initial_state(lp: EpigraphLP) -> PdipState:
    """Flat start: V = 1 + j0 per node, zero noise, small interior epigraph."""
    x = np.zeros(lp.nx)
    x[0::2] = 1.0
    n = np.zeros(lp.nn)
    t = np.full(lp.nn, 1e-3)
    mu1 = np.maximum(lp.c, 1e-10) / 2.0
    mu2 = mu1.copy()
    s = t.copy()
    gap = float(mu1 @ s + mu2 @ s) / max(1, 2 * lp.nn)
    return PdipState(
        x=x, n=n, t=t, lam=np.zeros(lp.m), mu1=mu1, mu2=mu2, tau=0.1 * gap
    )


def solve_wlav(
    circuit: StampedCircuit, config: SolverConfig | None = None, keep_trace: bool = False
) -> WlavSolution:
    """Solve the WLAV estimation for a stamped circuit.

    Raises SolverFailure (with residual history attached) when the
    iteration limit is hit before all KKT tolerances are met.
    """
    config = config or SolverConfig()
    lp = EpigraphLP.from_circuit(circuit)

    if lp.nn == 0:
        # no noise variables: the system must be solved exactly
        x = spla.lsqr(lp.Ax, lp.b, atol=1e-14, btol=1e-14)[0]
        r = float(np.max(np.abs(lp.Ax @ x - lp.b))) if lp.b.size else 0.0
        if r > config.feas_tol:
            raise SolverFailure(f"noise-free system is infeasible (residual {r:.2e})")
        return WlavSolution(
            x=x, n=np.zeros(0), noise_labels=(), objective=0.0, iterations=0,
            residuals={"equality": r, "dual": 0.0, "complementarity": 0.0},
            converged=True, circuit=circuit,
        )

    state = initial_state(lp)
    trace = []
    history = []
    for _ in range(config.max_iter + 1):
        ok, norms = _converged(state, lp, config)
        history.append(norms)
        if keep_trace:
            trace.append({"iteration": state.iteration, "tau": state.tau, **norms})
        if ok:
            return WlavSolution(
                x=state.x.copy(),
                n=state.n.copy(),
                noise_labels=tuple(circuit.catalog.noise_labels),
                objective=float(lp.c @ np.abs(state.n)),
                iterations=state.iteration,
                residuals=norms,
                converged=True,
                circuit=circuit,
                trace=trace,
            )
        if state.iteration >= config.max_iter:
            break
        state = pdip_step(state, lp, config)

    raise SolverFailure(
        f"no convergence in {config.max_iter} iterations "
        f"(equality {history[-1]['equality']:.2e}, dual {history[-1]['dual']:.2e}, "
        f"gap {history[-1]['complementarity']:.2e})",
        diagnostics={"history": history, "trace": trace},
    )


# ---------------------------------------------------------------------------
# reference simplex oracle

@dataclass
class SimplexResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    objective: float
    x: np.ndarray
    n: np.ndarray


def reference_lp_solve(lp: EpigraphLP) -> SimplexResult:
    """Textbook two-phase dense simplex (Bland's rule) on the same problem.

    Internally uses the split form n = p - q, |n| = p + q with p, q >= 0,
    whose optimum equals the epigraph optimum for nonnegative weights.
    Intended as an independent oracle for systems of a few hundred
    variables; not a scalable solver.
    """
    A = lp.A.toarray()
    m, _ = A.shape
    Ax, An = A[:, : lp.nx], A[:, lp.nx :]
    # columns: x+, x-, p, q
    tableau_A = np.hstack([Ax, -Ax, An, -An])
    cost = np.concatenate([np.zeros(2 * lp.nx), lp.c, lp.c])
    b = lp.b.copy()
    # row equilibration: switch rows carry 1/x_sw entries orders of magnitude
    # above meter rows, which otherwise wrecks the pivot tolerances
    scale = np.maximum(np.abs(tableau_A).max(axis=1), 1e-300)
    tableau_A /= scale[:, None]
    b /= scale
    neg = b < 0
    tableau_A[neg] *= -1.0
    b[neg] *= -1.0

    status, basis, T = _simplex_two_phase(tableau_A, b, cost)
    if status != "optimal":
        return SimplexResult(status, np.nan, np.zeros(lp.nx), np.zeros(lp.nn))

    nv = tableau_A.shape[1]
    z = np.zeros(nv)
    for i, j in enumerate(basis):
        if j < nv:
            z[j] = T[i, -1]
    x = z[: lp.nx] - z[lp.nx : 2 * lp.nx]
    p = z[2 * lp.nx : 2 * lp.nx + lp.nn]
    q = z[2 * lp.nx + lp.nn :]
    return SimplexResult("optimal", float(cost @ z), x, p - q)


def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]
    basis[row] = col


def _simplex_phase(T, basis, n_real, allow, tol=1e-9):
    """Minimize the cost row (last row) in place; Bland's rule throughout."""
    m = T.shape[0] - 1
    while True:
        entering = -1
        for j in range(allow):
            if T[-1, j] < -tol:
                entering = j
                break
        if entering < 0:
            return "optimal"
        ratio, leaving = np.inf, -1
        for i in range(m):
            if T[i, entering] > tol:
                r = T[i, -1] / T[i, entering]
                if leaving < 0 or r < ratio - tol or (
                    abs(r - ratio) <= tol and basis[i] < basis[leaving]
                ):
                    ratio, leaving = r, i
        if leaving < 0:
            return "unbounded"
        _pivot(T, basis, leaving, entering)


def _simplex_two_phase(A, b, cost, tol=1e-9):
    m, nv = A.shape
    # phase I tableau: [A | I | b] with artificial basis
    T = np.zeros((m + 1, nv + m + 1))
    T[:m, :nv] = A
    T[:m, nv : nv + m] = np.eye(m)
    T[:m, -1] = b
    basis = list(range(nv, nv + m))
    T[-1, :] = 0.0
    T[-1, nv : nv + m] = 1.0
    for i in range(m):  # price out the artificial basis
        T[-1] -= T[i]
    status = _simplex_phase(T, basis, nv, allow=nv, tol=tol)
    if status != "optimal" or -T[-1, -1] > 1e-7:
        return "infeasible", basis, T
    # drive out artificials still basic (at zero level)
    for i in range(m):
        if basis[i] >= nv:
            for j in range(nv):
                if abs(T[i, j]) > tol:
                    _pivot(T, basis, i, j)
                    break
    # phase II
    T[-1, :] = 0.0
    T[-1, :nv] = cost
    for i in range(m):
        if basis[i] < nv:
            T[-1] -= cost[basis[i]] * T[i]
    T[:, nv : nv + m] = 0.0  # retire artificial columns
    status = _simplex_phase(T, basis, nv, allow=nv, tol=tol)
    return status, basis, T
