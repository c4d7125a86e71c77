"""AC power-flow physics: branch flows, constraint residuals, their gradients,
and a Newton-Raphson solver.

A state is the flat vector ``x = (p, q, v, theta)`` of length ``4B``.  Every
function accepts either a :class:`PowerFlowRecord` or an array whose last axis
has length ``4B``; leading axes are treated as a batch.

Branch flows follow the pi-model without line charging::

    f^p_ij = v_i v_j [g cos(t_ij) + b sin(t_ij)] - g v_i^2
    f^q_ij = v_i v_j [g sin(t_ij) - b cos(t_ij)] + b v_i^2

with ``(g, b) = (G_ij, B_ij)`` the off-diagonal admittance entries, so a branch
carries no flow when both ends sit at the same voltage phasor and the per-bus
sums reproduce ``V * conj(Y V)`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .grid import GridCase, build_admittance

__all__ = [
    "PowerFlowRecord",
    "DivergenceError",
    "NewtonResult",
    "as_state",
    "split_state",
    "branch_flow",
    "line_flows",
    "power_injections",
    "equality_residual",
    "inequality_residual",
    "inequality_labels",
    "residual_norm_H",
    "residual_norm_G",
    "grad_residual_H",
    "grad_residual_G",
    "jacobian_H",
    "dispatch",
    "newton_iterate",
    "newton_solve",
]


@dataclass(frozen=True)
class PowerFlowRecord:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    theta: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.v, self.theta])

    @classmethod
    def from_vector(cls, x) -> "PowerFlowRecord":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % 4:
            raise ValueError(f"expected a flat vector of length 4B, got shape {x.shape}")
        p, q, v, theta = np.split(x.copy(), 4)
        return cls(p, q, v, theta)

    @property
    def n_bus(self) -> int:
        return self.p.shape[0]


State = Union[PowerFlowRecord, np.ndarray]


class DivergenceError(RuntimeError):
    """Newton-Raphson failed to reach the mismatch tolerance."""

    def __init__(self, mismatch: float, iterations: int):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(f"power flow did not converge after {iterations} iterations "
                         f"(mismatch {mismatch:.3e} p.u.)")


def as_state(state: State, case: GridCase | None = None) -> np.ndarray:
    x = state.to_vector() if isinstance(state, PowerFlowRecord) else np.asarray(state, dtype=float)
    if case is not None and x.shape[-1] != 4 * case.n_bus:
        raise ValueError(f"state width {x.shape[-1]} does not match 4B = {4 * case.n_bus}")
    return x


def split_state(x: np.ndarray):
    """Views ``(p, q, v, theta)`` along the last axis."""
    n = x.shape[-1] // 4
    return x[..., :n], x[..., n:2 * n], x[..., 2 * n:3 * n], x[..., 3 * n:]


def branch_flow(v_i, v_j, theta_i, theta_j, g_l, b_l):
    """Flows ``(f_p_ij, f_q_ij, f_p_ji, f_q_ji)`` on one branch."""
    d = theta_i - theta_j
    c, s = np.cos(d), np.sin(d)
    vv = v_i * v_j
    fp_ij = vv * (g_l * c + b_l * s) - g_l * v_i ** 2
    fq_ij = vv * (g_l * s - b_l * c) + b_l * v_i ** 2
    fp_ji = vv * (g_l * c - b_l * s) - g_l * v_j ** 2
    fq_ji = vv * (-g_l * s - b_l * c) + b_l * v_j ** 2
    return fp_ij, fq_ij, fp_ji, fq_ji


def line_flows(state: State, case: GridCase):
    """Flows on every branch, each array shaped ``(..., L)``."""
    x = as_state(state, case)
    _, _, v, th = split_state(x)
    f, t = case.from_idx, case.to_idx
    return branch_flow(v[..., f], v[..., t], th[..., f], th[..., t], case.g_l, case.b_l)


def power_injections(state: State, case: GridCase):
    """Net injections implied by ``(v, theta)``: branch-flow sums plus shunts."""
    x = as_state(state, case)
    _, _, v, _ = split_state(x)
    fp_ij, fq_ij, fp_ji, fq_ji = line_flows(x, case)
    cf, ct = case.from_incidence, case.to_incidence
    P = fp_ij @ cf + fp_ji @ ct + v ** 2 * case.shunt_g
    Q = fq_ij @ cf + fq_ji @ ct - v ** 2 * case.shunt_b
    return P, Q


def equality_residual(state: State, case: GridCase) -> np.ndarray:
    """Nodal balance mismatch ``(dp, dq)`` flattened to length ``2B``."""
    x = as_state(state, case)
    p, q, _, _ = split_state(x)
    P, Q = power_injections(x, case)
    return np.concatenate([p - P, q - Q], axis=-1)


def inequality_residual(state: State, case: GridCase) -> np.ndarray:
    """Inequality constraints as ``g(x) <= 0`` entries.

    Layout: ``p - pmax, pmin - p, q - qmax, qmin - q, v - vmax, vmin - v`` (``B``
    entries each) followed by ``|S_ij|^2 - smax^2`` for the ``L`` branches.
    """
    x = as_state(state, case)
    p, q, v, _ = split_state(x)
    fp, fq, _, _ = line_flows(x, case)
    return np.concatenate([
        p - case.p_max, case.p_min - p,
        q - case.q_max, case.q_min - q,
        v - case.v_max, case.v_min - v,
        fp ** 2 + fq ** 2 - case.s_max ** 2,
    ], axis=-1)


def inequality_labels(case: GridCase) -> list[str]:
    labels = []
    for name in ("p_max", "p_min", "q_max", "q_min", "v_max", "v_min"):
        labels += [f"{name}[{b}]" for b in range(1, case.n_bus + 1)]
    labels += [f"s_max[{br.from_bus}-{br.to_bus}]" for br in case.branches]
    return labels


def residual_norm_H(state: State, case: GridCase) -> np.ndarray:
    h = equality_residual(state, case)
    return np.sum(h * h, axis=-1)


def residual_norm_G(state: State, case: GridCase) -> np.ndarray:
    g = np.maximum(inequality_residual(state, case), 0.0)
    return np.sum(g * g, axis=-1)


def _branch_vjp(x, case, a_pij, a_qij, a_pji, a_qji):
    """Pull per-branch flow cotangents back onto ``(v, theta)``."""
    _, _, v, th = split_state(x)
    f, t = case.from_idx, case.to_idx
    g, b = case.g_l, case.b_l
    vi, vj = v[..., f], v[..., t]
    d = th[..., f] - th[..., t]
    c, s = np.cos(d), np.sin(d)
    k1 = g * c + b * s
    k2 = g * s - b * c
    k3 = g * c - b * s
    k4 = -g * s - b * c
    vv = vi * vj
    dvi = a_pij * (vj * k1 - 2 * g * vi) + a_qij * (vj * k2 + 2 * b * vi) + a_pji * vj * k3 + a_qji * vj * k4
    dvj = a_pij * vi * k1 + a_qij * vi * k2 + a_pji * (vi * k3 - 2 * g * vj) + a_qji * (vi * k4 + 2 * b * vj)
    dd = vv * (-a_pij * k2 + a_qij * k1 + a_pji * k4 - a_qji * k3)
    cf, ct = case.from_incidence, case.to_incidence
    gv = dvi @ cf + dvj @ ct
    gth = dd @ cf - dd @ ct
    return gv, gth


def grad_residual_H(state: State, case: GridCase) -> np.ndarray:
    """Gradient of ``||H(x)||^2`` with respect to ``x = (p, q, v, theta)``."""
    x = as_state(state, case)
    n = case.n_bus
    h = equality_residual(x, case)
    dp, dq = h[..., :n], h[..., n:]
    f, t = case.from_idx, case.to_idx
    gv, gth = _branch_vjp(x, case, -2 * dp[..., f], -2 * dq[..., f], -2 * dp[..., t], -2 * dq[..., t])
    if case.has_shunts:
        v = x[..., 2 * n:3 * n]
        gv = gv - 4 * dp * v * case.shunt_g + 4 * dq * v * case.shunt_b
    return np.concatenate([2 * dp, 2 * dq, gv, gth], axis=-1)


def grad_residual_G(state: State, case: GridCase) -> np.ndarray:
    """Gradient of ``||max(G(x), 0)||^2``; the kink at ``g = 0`` contributes zero."""
    x = as_state(state, case)
    n, L = case.n_bus, case.n_branch
    c = 2 * np.maximum(inequality_residual(x, case), 0.0)
    gp = c[..., 0:n] - c[..., n:2 * n]
    gq = c[..., 2 * n:3 * n] - c[..., 3 * n:4 * n]
    gv = c[..., 4 * n:5 * n] - c[..., 5 * n:6 * n]
    cs = c[..., 6 * n:6 * n + L]
    fp, fq, _, _ = line_flows(x, case)
    zero = np.zeros_like(cs)
    fv, fth = _branch_vjp(x, case, 2 * cs * fp, 2 * cs * fq, zero, zero)
    return np.concatenate([gp, gq, gv + fv, fth], axis=-1)


def _ds_dv(Y, V):
    """Derivatives of complex injections ``V conj(Y V)`` w.r.t. |V| and angle."""
    ibus = Y @ V
    diag_v = np.diag(V)
    diag_i = np.diag(ibus)
    diag_vn = np.diag(V / np.abs(V))
    ds_dvm = diag_v @ np.conj(Y @ diag_vn) + np.conj(diag_i) @ diag_vn
    ds_dva = 1j * diag_v @ np.conj(diag_i - Y @ diag_v)
    return ds_dvm, ds_dva


def jacobian_H(state: State, case: GridCase) -> np.ndarray:
    """Dense Jacobian of ``H`` (``2B x 4B``) for a single state, via the admittance matrix."""
    x = as_state(state, case)
    if x.ndim != 1:
        raise ValueError("jacobian_H takes a single state")
    n = case.n_bus
    _, _, v, th = split_state(x)
    Y = build_admittance(case).Y
    ds_dvm, ds_dva = _ds_dv(Y, v * np.exp(1j * th))
    eye = np.eye(n)
    zero = np.zeros((n, n))
    top = np.hstack([eye, zero, -ds_dvm.real, -ds_dva.real])
    bottom = np.hstack([zero, eye, -ds_dvm.imag, -ds_dva.imag])
    return np.vstack([top, bottom])


def dispatch(case: GridCase, p_load: np.ndarray, loss_allowance: float = 0.02) -> np.ndarray:
    """Generator set-points: total load plus a loss allowance, shared by capacity.

    Every generator bus (PV and slack) gets a share proportional to its ``p_max``;
    the slack entry is only nominal, since the solver lets the slack absorb
    whatever imbalance remains.
    """
    p_load = np.asarray(p_load, dtype=float)
    gen = np.concatenate([case.pv_idx, case.slack_idx])
    weights = np.maximum(case.p_max[gen], 0.0)
    total = (1.0 + loss_allowance) * p_load.sum()
    p_gen = np.zeros(case.n_bus)
    if weights.sum() > 0:
        p_gen[gen] = total * weights / weights.sum()
    return p_gen


class NewtonResult(NamedTuple):
    record: PowerFlowRecord
    iterations: int
    mismatch: float


def newton_iterate(case: GridCase, p_load, q_load, p_gen=None, v_set=None,
                   tol: float = 1e-8, max_iter: int = 50) -> NewtonResult:
    n = case.n_bus
    p_load = np.asarray(p_load, dtype=float)
    q_load = np.asarray(q_load, dtype=float)
    p_gen = np.zeros(n) if p_gen is None else np.asarray(p_gen, dtype=float)
    v_set = case.v_setpoint if v_set is None else np.asarray(v_set, dtype=float)

    pv, pq, slack = case.pv_idx, case.pq_idx, case.slack_idx
    non_slack = np.sort(np.concatenate([pv, pq]))
    p_spec = p_gen - p_load
    q_spec = -q_load

    v = np.ones(n)
    v[pv] = v_set[pv]
    v[slack] = v_set[slack]
    th = np.zeros(n)
    Y = build_admittance(case).Y

    def mismatch(v, th):
        x = np.concatenate([p_spec, q_spec, v, th])
        P, Q = power_injections(x, case)
        return np.concatenate([P[non_slack] - p_spec[non_slack], Q[pq] - q_spec[pq]])

    F = mismatch(v, th)
    norm = float(np.max(np.abs(F), initial=0.0))
    it = 0
    while norm > tol:
        if it >= max_iter or not np.isfinite(norm):
            raise DivergenceError(norm, it)
        ds_dvm, ds_dva = _ds_dv(Y, v * np.exp(1j * th))
        J = np.block([
            [ds_dva.real[np.ix_(non_slack, non_slack)], ds_dvm.real[np.ix_(non_slack, pq)]],
            [ds_dva.imag[np.ix_(pq, non_slack)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise DivergenceError(norm, it) from None
        th[non_slack] += dx[:len(non_slack)]
        v[pq] += dx[len(non_slack):]
        it += 1
        F = mismatch(v, th)
        norm = float(np.max(np.abs(F), initial=0.0))

    P, Q = power_injections(np.concatenate([p_spec, q_spec, v, th]), case)
    p = p_spec.copy()
    q = q_spec.copy()
    p[slack] = P[slack]
    q[slack] = Q[slack]
    q[pv] = Q[pv]
    return NewtonResult(PowerFlowRecord(p, q, v, th), it, norm)


def newton_solve(case: GridCase, p_load, q_load, p_gen=None, v_set=None,
                 tol: float = 1e-8, max_iter: int = 50) -> PowerFlowRecord:
    """Solve the power flow from a flat start.

    PQ buses inject ``-load``, PV buses ``p_gen - load`` at fixed ``v_set``; the
    slack bus holds ``v_set`` at angle zero and absorbs the imbalance.  Returned
    injections are net (generation minus load).
    """
    return newton_iterate(case, p_load, q_load, p_gen, v_set, tol, max_iter).record
