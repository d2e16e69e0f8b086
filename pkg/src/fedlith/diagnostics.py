"""Convergence monitors: consensus error, constant estimation, rate bounds.

Everything here is pure post-processing of immutable history rows that the
engine logged while running plain SGD. The consensus bound is asserted in its
Cauchy-Schwarz-safe form eta^2 * E^2 * G^2 (E summed gradient steps per round
support E^2, not (E-1)^2); the (E-1)^2 variant is reported alongside for
comparison but never asserted. The stationarity bound instantiates its big-O
smoothness term with unit constant, flagged as ``modulo_constant``.

Monitors require the SGD optimizer; under Adam the report states
"not applicable" instead of emitting rows.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from fedlith.errors import ConfigurationError


class ConsensusBound(NamedTuple):
    safe: float    # eta^2 * E^2 * G^2, the asserted form
    paper: float   # eta^2 * (E-1)^2 * G^2, reported only


@dataclass
class TheoryConstants:
    """Estimated smoothness/noise constants from an SGD run."""

    L_hat: float
    G_hat: float
    sigma2_hat: float
    F_star_hat: float

    def __post_init__(self):
        for name in ("L_hat", "G_hat", "sigma2_hat"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")


@dataclass
class BoundReport:
    applicable: bool
    reason: str
    constants: TheoryConstants | None
    rows: list


def consensus_error(global_blocks) -> tuple:
    """Per-client squared distance to the client-average global block."""
    if len(global_blocks) < 2:
        raise ConfigurationError("consensus error needs at least 2 clients")
    stack = np.stack(global_blocks)
    mean = stack.mean(axis=0)
    per_k = np.sum((stack - mean) ** 2, axis=1)
    return per_k, float(per_k.max())


def consensus_bound(eta: float, e_steps: int, g_hat: float) -> ConsensusBound:
    """Round-drift bound on the consensus error after e_steps inner steps."""
    if eta < 0 or e_steps < 0 or g_hat < 0:
        raise ConfigurationError("bound inputs must be nonnegative")
    return ConsensusBound(
        safe=eta ** 2 * e_steps ** 2 * g_hat ** 2,
        paper=eta ** 2 * (e_steps - 1) ** 2 * g_hat ** 2 if e_steps >= 1 else 0.0,
    )


def secant_ratios(points) -> list:
    """||grad(v) - grad(w)|| / ||v - w|| over consecutive probe points.

    Degenerate pairs (identical parameters) are skipped.
    """
    out = []
    for (w0, g0), (w1, g1) in zip(points, points[1:]):
        dw = float(np.linalg.norm(np.asarray(w1) - np.asarray(w0)))
        if dw > 1e-12:
            out.append(float(np.linalg.norm(np.asarray(g1) - np.asarray(g0))) / dw)
    return out


def _diag_rows(history):
    return [r for r in history if "mean_sq_grad_norm" in r]


def estimate_constants(history) -> TheoryConstants:
    """Assemble constants from the per-round probes the engine logged."""
    rows = _diag_rows(history)
    if len(rows) < 2:
        raise ConfigurationError("need at least 2 rounds of gradient probes")
    g_candidates = [r.get("g_max_step", 0.0) for r in rows]
    g_candidates += [np.sqrt(r["mean_sq_grad_norm"]) for r in rows]
    r0 = rows[0]
    if "init_mean_sq_grad_norm" in r0:
        g_candidates.append(np.sqrt(r0["init_mean_sq_grad_norm"]))
    secants = [r["secant_max"] for r in rows if r.get("secant_max") is not None]
    losses = [r["mean_loss"] for r in rows]
    if "init_mean_loss" in r0:
        losses.append(r0["init_mean_loss"])
    return TheoryConstants(
        L_hat=float(max(secants)) if secants else 0.0,
        G_hat=float(max(g_candidates)),
        sigma2_hat=float(max(r["sigma2_probe"] for r in rows)),
        F_star_hat=float(min(losses)),
    )


def theorem1_monitor(history, constants: TheoryConstants, eta: float,
                     e_steps: int, n_clients: int) -> BoundReport:
    """Running stationarity check against the O(1/T) + steady-error bound.

    At row t the LHS is the running average of the per-client full-shard
    squared gradient norms over states w_0 .. w_t; the RHS combines the
    initial suboptimality term 2[F(w_0) - F*]/(T eta), the smoothness term
    eta*L*G^2 (unit constant), and the consensus term
    2*sqrt(N)*(E-1)*G*(sigma^2 + G^2) which vanishes at E = 1.
    """
    rows = _diag_rows(history)
    if not rows:
        return BoundReport(False, "no SGD gradient probes in history "
                                  "(monitors are not applicable under adam)",
                           None, [])
    r0 = rows[0]
    init_sq = r0.get("init_mean_sq_grad_norm")
    init_loss = r0.get("init_mean_loss")
    if init_sq is None or init_loss is None:
        return BoundReport(False, "missing initial-state probe", None, [])
    g, l_hat, s2, f_star = (constants.G_hat, constants.L_hat,
                            constants.sigma2_hat, constants.F_star_hat)
    term_smooth = eta * l_hat * g ** 2
    term_consensus = 2.0 * np.sqrt(n_clients) * (e_steps - 1) * g * (s2 + g ** 2)
    cbound = consensus_bound(eta, e_steps, g)
    out = []
    running = init_sq
    for i, r in enumerate(rows):
        # average over states w_0 .. w_i (i.e. T = i + 1 in the bound)
        t_eff = i + 1
        lhs = running / t_eff
        term_init = 2.0 * max(init_loss - f_star, 0.0) / (t_eff * eta)
        rhs = term_init + term_smooth + term_consensus
        cmax = r.get("consensus_max")
        violation = bool(lhs > rhs) or (cmax is not None and cmax > cbound.safe)
        out.append({
            "round": r["round"],
            "consensus_max": cmax,
            "consensus_bound_safe": cbound.safe,
            "consensus_bound_paper": cbound.paper,
            "thm_lhs": lhs,
            "thm_rhs": rhs,
            "thm_term_init": term_init,
            "thm_term_smooth_modulo_constant": term_smooth,
            "thm_term_consensus": term_consensus,
            "violation": violation,
        })
        running += r["mean_sq_grad_norm"]
    return BoundReport(True, "", constants, out)


def min_so_far_series(history) -> np.ndarray:
    """Min-so-far of the per-round mean squared gradient norm, init included."""
    rows = _diag_rows(history)
    if not rows:
        raise ConfigurationError("history has no gradient probes")
    series = []
    r0 = rows[0]
    if "init_mean_sq_grad_norm" in r0:
        series.append(r0["init_mean_sq_grad_norm"])
    series.extend(r["mean_sq_grad_norm"] for r in rows)
    return np.minimum.accumulate(np.asarray(series))


def fit_rate(t_values, y_values) -> tuple:
    """Least-squares fit of y = c / T + floor; returns (c, floor, rel_residual)."""
    t = np.asarray(t_values, dtype=np.float64)
    y = np.asarray(y_values, dtype=np.float64)
    if t.size != y.size or t.size < 2:
        raise ConfigurationError("need matching series of length >= 2")
    design = np.stack([1.0 / t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = design @ coef - y
    rel = float(np.linalg.norm(resid) / (np.linalg.norm(y) + 1e-300))
    return float(coef[0]), float(coef[1]), rel
