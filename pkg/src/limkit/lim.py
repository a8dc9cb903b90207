"""Linear inverse models: estimation from lagged covariances, deterministic
and stochastic ensemble forecasting, forecast covariance, and optimal
initial structures.

A stationary operator holds one (L, Q) pair; a cyclostationary operator
holds twelve monthly pairs, where ``L[j]`` governs the step from calendar
month ``j+1`` into the following month. The matrix logarithm and
exponential are evaluated through complex eigendecomposition with the
principal branch; eigenvalues of the sampled propagator near the negative
real axis are rejected as unresolvable (the monthly sampling cannot
distinguish rotation direction there).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    BranchAmbiguityError,
    ConditioningError,
    DataError,
    InstabilityError,
)
from .io import Reader, Writer, find_section, read_sections, write_sections

__all__ = [
    "LimOperator",
    "EnsembleForecast",
    "OptimalStructure",
    "estimate_stationary_lim",
    "estimate_cyclostationary_lim",
    "propagator",
    "deterministic_forecast",
    "integrate_ensemble",
    "forecast_covariance",
    "optimal_initial_condition",
    "optimal_growth_projection",
    "repair_psd",
    "save_operator",
    "load_operator",
    "fit_report",
]

_COND_LIMIT = 1e12
_BRANCH_ANGLE = 0.75 * np.pi


def _matrix_exp(A):
    """exp(A) via complex eigendecomposition, scipy fallback if defective."""
    w, V = np.linalg.eig(A)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > 1e10:
        return scipy.linalg.expm(A)
    return np.real(V @ np.diag(np.exp(w)) @ np.linalg.inv(V))


def _matrix_log(G, what=""):
    """Principal-branch log of a real matrix with stability/branch checks."""
    w, V = np.linalg.eig(G)
    mod = np.abs(w)
    if np.any(mod >= 1.0):
        raise InstabilityError(
            f"propagator{what} has spectral radius {mod.max():.4f} >= 1; "
            "the sampled system is not decaying"
        )
    if np.any(mod < 1e-14):
        raise ConditioningError(f"propagator{what} is numerically singular")
    ang = np.abs(np.angle(w))
    if np.any((w.real < 0) & (ang > _BRANCH_ANGLE)):
        raise BranchAmbiguityError(
            f"propagator{what} has an eigenvalue near the negative real axis "
            f"(|angle| {ang.max():.3f} rad); rotation is ambiguous at this sampling"
        )
    Lc = V @ np.diag(np.log(w.astype(complex))) @ np.linalg.inv(V)
    scale = max(np.abs(Lc).max(), 1e-300)
    if np.abs(Lc.imag).max() > 1e-8 * scale:
        raise BranchAmbiguityError(
            f"matrix log{what} has imaginary residue "
            f"{np.abs(Lc.imag).max() / scale:.2e} relative to its norm"
        )
    return Lc.real


def repair_psd(Q):
    """Symmetrize and clip a covariance estimate to PSD, preserving trace.

    Negative eigenvalues (a finite-sample artifact of the fluctuation-
    dissipation estimate) are clipped to zero and the remaining spectrum is
    rescaled so the trace is unchanged. Already-PSD input is returned
    symmetrized but otherwise untouched.

    Returns
    -------
    repaired : ndarray
    log : dict with n_clipped, min_eig, trace_ratio
    """
    sym = 0.5 * (Q + Q.T)
    w, V = np.linalg.eigh(sym)
    log = {"n_clipped": int((w < 0).sum()), "min_eig": float(w.min()), "trace_ratio": 1.0}
    if log["n_clipped"] == 0:
        return sym, log
    clipped = np.clip(w, 0.0, None)
    total = w.sum()
    kept = clipped.sum()
    if total > 0 and kept > 0:
        log["trace_ratio"] = float(total / kept)
        clipped = clipped * (total / kept)
    out = V @ np.diag(clipped) @ V.T
    return 0.5 * (out + out.T), log


def _lower_factor(Q):
    """Lower-triangular F with F @ F.T == Q for PSD (possibly singular) Q."""
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    F = V @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
    # LQ via QR of the transpose; column sign flips keep F@F.T invariant.
    _, R = np.linalg.qr(F.T)
    low = R.T
    sign = np.sign(np.diag(low))
    sign[sign == 0] = 1.0
    return low * sign[None, :]


@dataclass
class LimOperator:
    """Fitted dynamics matrix/matrices and noise covariance(s).

    ``L`` and ``Q`` have shape (1, d, d) for the stationary kind and
    (12, d, d) for the cyclostationary kind (index 0 = January).
    """

    kind: str
    L: np.ndarray
    Q: np.ndarray
    tau0: int = 1
    repair_log: list = field(default_factory=list)
    noise_chol: np.ndarray = None
    one_step: np.ndarray = None
    strict: bool = True

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if self.kind not in ("stationary", "cyclostationary"):
            raise DataError(f"unknown operator kind {self.kind!r}")
        n_ops = 1 if self.kind == "stationary" else 12
        if self.L.shape[0] != n_ops or self.L.shape != self.Q.shape:
            raise DataError(f"expected {n_ops} (L, Q) pairs, got {self.L.shape} / {self.Q.shape}")
        if self.noise_chol is None:
            self.noise_chol = np.stack([_lower_factor(q) for q in self.Q])
        if self.one_step is None:
            self.one_step = np.stack([_matrix_exp(l) for l in self.L])
        for j, (l, g) in enumerate(zip(self.L, self.one_step)):
            if not self.strict:
                continue
            ev = np.linalg.eigvals(l)
            if np.any(ev.real >= 0):
                raise InstabilityError(f"operator {j} has eigenvalue with Re >= 0: {ev.real.max():.4f}")
            if np.abs(np.linalg.eigvals(g)).max() >= 1.0:
                raise InstabilityError(f"one-month propagator {j} has spectral radius >= 1")
        for q, c in zip(self.Q, self.noise_chol):
            if np.abs(c @ c.T - q).max() > 1e-10 * max(1.0, np.abs(q).max()):
                raise DataError("noise factor does not reproduce Q")

    @property
    def d(self):
        return self.L.shape[1]

    def op_index(self, month):
        """Index into L/Q for a calendar month (1..12)."""
        if self.kind == "stationary":
            return 0
        return (int(month) - 1) % 12


@dataclass
class EnsembleForecast:
    """Stochastic forecast members indexed (member, lead, component)."""

    members: np.ndarray  # [M, T, d]
    init_time: int
    init_month: int
    basis_id: str = ""

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 3 or self.members.shape[0] < 1:
            raise DataError("members must be [M, T, d] with M >= 1")
        if not np.isfinite(self.members).all():
            raise DataError("forecast members contain non-finite values")
        if not 1 <= int(self.init_month) <= 12:
            raise DataError(f"init_month {self.init_month} out of range")

    @property
    def n_members(self):
        return self.members.shape[0]

    @property
    def n_lead(self):
        return self.members.shape[1]

    @property
    def lead_months(self):
        return np.arange(1, self.n_lead + 1)

    def mean(self):
        return self.members.mean(axis=0)

    def month_of_lead(self, tau):
        return (self.init_month - 1 + int(tau)) % 12 + 1


@dataclass
class OptimalStructure:
    """Leading singular triplet of a composed propagator."""

    oic: np.ndarray
    evolved: np.ndarray
    sigma1: float
    lead: int
    start_month: int | None = None


def _lagged_cov(z0, z1):
    """<z1 z0^T> over paired samples (plain mean)."""
    return z1.T @ z0 / z0.shape[0]


def _check_cond(C, what):
    cond = np.linalg.cond(C)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise ConditioningError(f"{what} is singular or near-singular (cond {cond:.2e})")


def estimate_stationary_lim(z, tau0=1):
    """Fit a stationary operator from lagged covariances.

    ``C(0)`` and ``C(tau0)`` give the lag-``tau0`` propagator
    ``G = C(tau0) C(0)^-1``; its principal-branch log over ``tau0`` is L and
    the fluctuation-dissipation relation ``Q = -(L C0 + C0 L^T)`` gives the
    noise covariance, PSD-repaired.
    """
    x = np.asarray(z.z if hasattr(z, "z") else z, dtype=np.float64)
    n, d = x.shape
    if tau0 < 1:
        raise DataError("tau0 must be >= 1 month")
    if n < 10 * d:
        raise DataError(f"need >= 10*d = {10 * d} samples, got {n}")
    C0 = _lagged_cov(x, x)
    _check_cond(C0, "C(0)")
    Ct = _lagged_cov(x[:-tau0], x[tau0:])
    G = np.linalg.solve(C0.T, Ct.T).T
    L = _matrix_log(G, " G(tau0)") / tau0
    Q_raw = -(L @ C0 + C0 @ L.T)
    Q, log = repair_psd(Q_raw)
    return LimOperator(kind="stationary", L=L[None], Q=Q[None], tau0=tau0,
                       repair_log=[{"op": 0, **log}])


def estimate_cyclostationary_lim(z, include_cdot=True, min_per_month=30):
    """Fit twelve monthly operators from month-stratified lag-1 covariances.

    For month j: ``G_j = C_j(1) C_j(0)^-1`` with ``C_j(1)`` pairing month-j
    states with their successors, ``L_j = log G_j``, and
    ``Q_j = Cdot_j - L_j C_j(0) - C_j(0) L_j^T`` where ``Cdot_j`` is the
    centered difference of the monthly covariance cycle (dropped when
    ``include_cdot`` is false).
    """
    x = np.asarray(z.z, dtype=np.float64)
    months = np.asarray(z.month)
    n, d = x.shape
    C0 = []
    for m in range(1, 13):
        sel = np.flatnonzero(months == m)
        if sel.size < min_per_month:
            raise DataError(
                f"month {m} has {sel.size} samples; cyclostationary fit needs >= {min_per_month}"
            )
        C0.append(_lagged_cov(x[sel], x[sel]))
    C0 = np.stack(C0)
    Ls, Qs, logs = [], [], []
    for m in range(1, 13):
        sel = np.flatnonzero(months == m)
        sel = sel[sel + 1 < n]
        try:
            _check_cond(C0[m - 1], f"C_{m}(0)")
            C1 = _lagged_cov(x[sel], x[sel + 1])
            G = np.linalg.solve(C0[m - 1].T, C1.T).T
            L = _matrix_log(G, f" G_{m}")
        except (ConditioningError, InstabilityError, BranchAmbiguityError) as exc:
            raise type(exc)(f"month {m}: {exc}") from exc
        cdot = 0.5 * (C0[m % 12] - C0[(m - 2) % 12]) if include_cdot else 0.0
        Q_raw = cdot - (L @ C0[m - 1] + C0[m - 1] @ L.T)
        Q, log = repair_psd(Q_raw)
        Ls.append(L)
        Qs.append(Q)
        logs.append({"op": m - 1, **log})
    return LimOperator(kind="cyclostationary", L=np.stack(Ls), Q=np.stack(Qs), tau0=1,
                       repair_log=logs)


def propagator(op, start_month, tau):
    """Expected-evolution map over ``tau`` months from ``start_month``.

    Stationary: ``exp(L tau)``. Cyclostationary: the ordered product of the
    one-month propagators for the months traversed, latest on the left.
    """
    tau = int(tau)
    if tau < 0:
        raise DataError("tau must be >= 0")
    if tau == 0:
        return np.eye(op.d)
    if op.kind == "stationary":
        return _matrix_exp(op.L[0] * tau)
    G = np.eye(op.d)
    for k in range(tau):
        G = op.one_step[(start_month - 1 + k) % 12] @ G
    return G


def deterministic_forecast(op, z0, init_month, T):
    """Infinite-ensemble mean trajectory for leads 1..T."""
    z0 = np.asarray(z0, dtype=np.float64)
    out = np.empty((T, op.d))
    if op.kind == "stationary":
        for t in range(1, T + 1):
            out[t - 1] = _matrix_exp(op.L[0] * t) @ z0
    else:
        cur = z0
        for t in range(1, T + 1):
            cur = op.one_step[(init_month - 1 + t - 1) % 12] @ cur
            out[t - 1] = cur
    return out


def _substeps(delta):
    n_sub = round(1.0 / delta)
    if n_sub < 1 or abs(n_sub * delta - 1.0) > 1e-9:
        raise DataError(f"delta={delta} must divide one month evenly")
    return n_sub


def member_noise(seed, member, n_steps, d):
    """Standard-normal increments for one member's substream (seed XOR index)."""
    rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(member))
    return rng.standard_normal((n_steps, d))


def integrate_ensemble(op, z0, init_month, T, M=16, delta=1.0 / 16.0, seed=0):
    """Euler-Maruyama ensemble forecast recorded at month boundaries.

    Each member integrates ``z += L_m z delta + chol(Q_m) eta sqrt(delta)``
    with the operator of the month containing the step's start time. Member
    ``i`` draws from an independent substream keyed ``seed XOR i``, so
    results do not depend on scheduling order.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if not np.isfinite(z0).all():
        raise DataError("initial state must be finite")
    if M < 1:
        raise DataError("M must be >= 1")
    n_sub = _substeps(delta)
    n_steps = T * n_sub
    noise = np.empty((M, n_steps, op.d))
    for i in range(M):
        noise[i] = member_noise(seed, i, n_steps, op.d)
    state = np.tile(z0, (M, 1))
    out = np.empty((M, T, op.d))
    sq = np.sqrt(delta)
    for step in range(n_steps):
        mi = op.op_index(init_month + step // n_sub)
        state = state + (state @ op.L[mi].T) * delta + (noise[:, step] @ op.noise_chol[mi].T) * sq
        if (step + 1) % n_sub == 0:
            out[:, (step + 1) // n_sub - 1] = state
    return EnsembleForecast(out, init_time=-1, init_month=init_month)


def forecast_covariance(op, init_month, tau, delta=1.0 / 16.0):
    """Forecast covariance by the substep recursion.

    ``S <- G_d S G_d^T + Q_m delta`` from ``S = 0``, with ``G_d`` the exact
    substep propagator ``exp(L_m delta)``.
    """
    if tau < 1:
        raise DataError("tau must be >= 1 month")
    n_sub = _substeps(delta)
    sub = {}
    S = np.zeros((op.d, op.d))
    for step in range(int(tau) * n_sub):
        mi = op.op_index(init_month + step // n_sub)
        if mi not in sub:
            sub[mi] = _matrix_exp(op.L[mi] * delta)
        G = sub[mi]
        S = G @ S @ G.T + op.Q[mi] * delta
    return 0.5 * (S + S.T)


def optimal_initial_condition(op, init_month, tau):
    """Leading right singular vector of the composed propagator.

    The returned unit state evolves into the largest-amplitude lead-``tau``
    state; the sign makes the evolved pattern's largest-magnitude component
    positive. A degenerate leading pair triggers a warning and a
    deterministic lexicographic tie-break.
    """
    G = propagator(op, init_month, tau)
    _, s, vt = np.linalg.svd(G)
    cands = [0]
    if s.size > 1 and s[0] - s[1] < 1e-12 * s[0]:
        cands = [k for k in range(s.size) if s[0] - s[k] < 1e-12 * s[0]]
        warnings.warn("leading singular pair is degenerate; lexicographic tie-break used")

    def fixed(k):
        v = vt[k].copy()
        ev = G @ v
        j = int(np.argmax(np.abs(ev)))
        if ev[j] < 0:
            v, ev = -v, -ev
        return v, ev

    best_v, best_ev = max((fixed(k) for k in cands), key=lambda p: tuple(p[0]))
    return OptimalStructure(
        oic=best_v,
        evolved=best_ev,
        sigma1=float(s[0]),
        lead=int(tau),
        start_month=None if op.kind == "stationary" else int(init_month),
    )


def optimal_growth_projection(z0, structure):
    """Signed projection of a state onto the optimal initial condition."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape[-1] != structure.oic.shape[0]:
        raise DataError("state dimension does not match the optimal structure")
    return z0 @ structure.oic


def fit_report(op):
    """Eigenvalue and PSD-repair summary of a fitted operator."""
    rows = []
    for j in range(op.L.shape[0]):
        ev_l = np.linalg.eigvals(op.L[j])
        ev_g = np.linalg.eigvals(op.one_step[j])
        rows.append({
            "op": j,
            "max_re_eig_L": float(ev_l.real.max()),
            "max_abs_eig_G": float(np.abs(ev_g).max()),
            "repair": op.repair_log[j] if j < len(op.repair_log) else None,
        })
    return {"kind": op.kind, "d": op.d, "tau0": op.tau0, "operators": rows}


_LIMO_VERSION = 1


def operator_to_bytes(op):
    w = Writer()
    w.string(op.kind)
    w.u32(op.d)
    w.u32(op.tau0)
    w.array(op.L)
    w.array(op.Q)
    w.string(json.dumps(op.repair_log))
    return w.getvalue()


def operator_from_bytes(payload):
    r = Reader(payload)
    kind = r.string("kind")
    _ = r.u32("d")
    tau0 = r.u32("tau0")
    L = r.array("L")
    Q = r.array("Q")
    repair_log = json.loads(r.string("repair_log"))
    return LimOperator(kind=kind, L=L, Q=Q, tau0=tau0, repair_log=repair_log)


def save_operator(path, op):
    write_sections(path, [("LIMO", _LIMO_VERSION, operator_to_bytes(op))])


def load_operator(path):
    _, payload = find_section(read_sections(path), "LIMO")
    return operator_from_bytes(payload)
