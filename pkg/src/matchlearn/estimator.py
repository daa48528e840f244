"""Rotation-calibrated gradient descent on Grassmannians with sample splitting.

The fitting loop partitions the T observation periods into 2m contiguous
batches.  Batch 1 feeds a spectral initializer, batch 2 the first core
refit; each subsequent batch pair (2p+1, 2p+2) drives one calibrated
gradient step on the factor subspaces followed by a fresh least-squares
refit of the r-by-r core.  Every batch is consumed exactly once, which
is what makes the batches' noise independent of the running iterate and
underpins the downstream debiasing theory.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ArgumentError,
    DegenerateInitError,
    InternalConsistencyError,
    RankDeficientDesignError,
    RemainderDroppedWarning,
    SingularCoreError,
)
from .matmodel import RewardMatrix, svd_r
from .samplers import MatchingScheme, Observation, OneToMany, OneToOne, entrywise_probability

NU_CONSISTENCY_RTOL = 1e-9
ORTHONORMALITY_LOOP_TOL = 1e-8


@dataclass(frozen=True)
class EstimatorConfig:
    """Inputs of the fitting loop.

    ``nu`` is the entrywise observation probability of the batch's
    scheme (see :func:`matchlearn.samplers.entrywise_probability`); it
    scales both the spectral initializer and the gradient.
    """

    r: int
    eta: float
    m: int
    nu: float
    record_trace: bool = True
    min_g_singular: float = 1e-10
    debug_checks: bool = False

    def __post_init__(self):
        if self.r < 1:
            raise ArgumentError(f"r must be >= 1, got {self.r}")
        if not (0.0 < self.eta < 1.0):
            raise ArgumentError(f"eta must lie in (0, 1), got {self.eta}")
        if self.m < 1:
            raise ArgumentError(f"m must be >= 1, got {self.m}")
        if not (0.0 < self.nu <= 1.0):
            raise ArgumentError(f"nu must lie in (0, 1], got {self.nu}")
        if not (0.0 < self.min_g_singular < 1.0):
            raise ArgumentError("min_g_singular must lie in (0, 1)")


@dataclass(frozen=True)
class FactorState:
    """One Algorithm iterate: orthonormal factors and the r-by-r core."""

    U: np.ndarray
    G: np.ndarray
    V: np.ndarray
    g_svd: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        r = self.G.shape[0]
        if self.G.shape != (r, r):
            raise ArgumentError("G must be square")
        if self.U.shape[1] != r or self.V.shape[1] != r:
            raise ArgumentError("factor widths must match G")
        for name, q in (("U", self.U), ("V", self.V)):
            dev = np.max(np.abs(q.T @ q - np.eye(r)))
            if dev > ORTHONORMALITY_LOOP_TOL:
                raise ArgumentError(f"{name} not orthonormal (max deviation {dev:.2e})")
        l_g, s_g, r_g = self.g_svd
        recon = np.max(np.abs((l_g * s_g) @ r_g.T - self.G))
        scale = s_g[0] if s_g.size and s_g[0] > 0 else 1.0
        if recon > 1e-8 * scale:
            raise ArgumentError("g_svd inconsistent with G")

    @classmethod
    def create(cls, u: np.ndarray, g: np.ndarray, v: np.ndarray) -> "FactorState":
        return cls(U=u, G=g, V=v, g_svd=svd_r(g, g.shape[0]))

    @property
    def estimate(self) -> np.ndarray:
        """The dense iterate ``U G V^T``."""
        return (self.U @ self.G) @ self.V.T


@dataclass(frozen=True)
class FitTrace:
    """Per-batch diagnostics of one fit; length equals the batch-pair count."""

    batches: np.ndarray
    rel_max_err_sq: np.ndarray
    g_sigma_min: np.ndarray
    g_sigma_max: np.ndarray
    grad_norm: np.ndarray

    def __len__(self) -> int:
        return self.batches.size

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("batch,rel_max_err_sq,g_sigma_min,g_sigma_max,grad_norm\n")
            for k in range(len(self)):
                fh.write(
                    f"{int(self.batches[k])},{float(self.rel_max_err_sq[k])!r},"
                    f"{float(self.g_sigma_min[k])!r},{float(self.g_sigma_max[k])!r},"
                    f"{float(self.grad_norm[k])!r}\n"
                )


def partition_batches(T: int, m: int) -> list[tuple[int, int]]:
    """Split T periods into 2m contiguous equal ranges of size T // (2m).

    Trailing periods beyond ``2m * N0`` are dropped with a warning; the
    theory assumes exact divisibility and nothing downstream may peek at
    the remainder.
    """
    if m < 1:
        raise ArgumentError(f"m must be >= 1, got {m}")
    if T < 2 * m:
        raise ArgumentError(f"need T >= 2m to form batches, got T={T}, m={m}")
    n0 = T // (2 * m)
    dropped = T - 2 * m * n0
    if dropped:
        warnings.warn(
            f"dropping {dropped} trailing observation(s) beyond the last full batch",
            RemainderDroppedWarning,
            stacklevel=2,
        )
    return [(p * n0, (p + 1) * n0) for p in range(2 * m)]


def _pack(records: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = [rec.matching.rows for rec in records]
    cols = [rec.matching.cols for rec in records]
    ys = [rec.y for rec in records]
    if not rows:
        return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, float))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(ys)


def _dims(records: Sequence[Observation]) -> tuple[int, int]:
    m0 = records[0].matching
    return m0.d1, m0.d2


def aggregate_response(records: Sequence[Observation], nu: float) -> np.ndarray:
    """The scaled response aggregate ``(nu N0)^-1 sum_t Y_t o X_t``.

    This is both the spectral-initialization target and the matrix whose
    spectrum drives rank selection.
    """
    if not records:
        raise ArgumentError("need at least one observation")
    if not (0.0 < nu <= 1.0):
        raise ArgumentError(f"nu must lie in (0, 1], got {nu}")
    d1, d2 = _dims(records)
    rows, cols, y = _pack(records)
    flat = np.bincount(rows * d2 + cols, weights=y, minlength=d1 * d2)
    return flat.reshape(d1, d2) / (nu * len(records))


def spectral_init(
    records: Sequence[Observation], nu: float, r: int
) -> tuple[np.ndarray, np.ndarray]:
    """Top-r factor subspaces of the scaled response aggregate."""
    agg = aggregate_response(records, nu)
    if not agg.any():
        raise DegenerateInitError(
            "response aggregate is identically zero; cannot initialize factors"
        )
    u, _, v = svd_r(agg, r)
    return u, v


def solve_G(
    u: np.ndarray,
    v: np.ndarray,
    records: Sequence[Observation],
    r: int,
    min_g_singular: float = 1e-10,
) -> np.ndarray:
    """Least-squares core: argmin_G sum over revealed (t,i,j) of (u_i^T G v_j - y)^2.

    Solved through its r^2 x r^2 normal equations, which stay tiny for
    the ranks this package targets.  The design must be well conditioned:
    smallest eigenvalue >= ``min_g_singular`` times the largest.
    """
    if u.shape[1] != r or v.shape[1] != r:
        raise ArgumentError("factor widths must equal r")
    rows, cols, y = _pack(records)
    if rows.size == 0:
        raise ArgumentError("need at least one revealed entry to fit G")
    feats = (u[rows][:, :, None] * v[cols][:, None, :]).reshape(rows.size, r * r)
    a = feats.T @ feats
    b = feats.T @ y
    eigs = np.linalg.eigvalsh(a)
    if eigs[-1] <= 0.0 or eigs[0] < min_g_singular * eigs[-1]:
        cond = float("inf") if eigs[0] <= 0.0 else float(eigs[-1] / eigs[0])
        raise RankDeficientDesignError(
            f"core design is rank deficient (condition {cond:.3e}); "
            "the batch does not pin down all r^2 core entries",
            condition=cond,
        )
    return np.linalg.solve(a, b).reshape(r, r)


def _check_invertible(state: FactorState, min_g_singular: float) -> None:
    s_g = state.g_svd[1]
    if s_g[0] <= 0.0 or s_g[-1] < min_g_singular * s_g[0]:
        raise SingularCoreError(
            f"core spectrum ({s_g[-1]:.3e} .. {s_g[0]:.3e}) is numerically "
            "singular; SNR too low or rank over-specified"
        )


def _loss_gradient(
    state_estimate: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    y: np.ndarray,
    d1: int,
    d2: int,
) -> np.ndarray:
    """Gradient of the batch loss with respect to the dense matrix.

    Equals ``2 sum_t (X_t o (U G V^T) - Y_t)``; entries unseen in the
    batch are zero.
    """
    resid = state_estimate[rows, cols] - y
    flat = np.bincount(rows * d2 + cols, weights=2.0 * resid, minlength=d1 * d2)
    return flat.reshape(d1, d2)


def batch_loss(m_dense: np.ndarray, records: Sequence[Observation]) -> float:
    """Squared-error loss of a dense candidate over a batch's revealed entries."""
    rows, cols, y = _pack(records)
    resid = m_dense[rows, cols] - y
    return float(resid @ resid)


def batch_loss_gradient(m_dense: np.ndarray, records: Sequence[Observation]) -> np.ndarray:
    """Gradient of :func:`batch_loss` with respect to the dense matrix."""
    d1, d2 = m_dense.shape
    rows, cols, y = _pack(records)
    return _loss_gradient(m_dense, rows, cols, y, d1, d2)


def gradient_step(
    state: FactorState,
    step_records: Sequence[Observation],
    refit_records: Sequence[Observation],
    eta: float,
    nu: float,
    n0: int,
    min_g_singular: float = 1e-10,
) -> tuple[FactorState, float]:
    """One calibrated gradient step plus the follow-up core refit.

    The factor updates are

        U+ = (U - eta/(2 N0 nu) * grad @ V @ G^-1) @ L_G
        V+ = (V - eta/(2 N0 nu) * grad^T @ U @ G^-T) @ R_G

    with ``(L_G, ., R_G)`` the SVD of the current core; both factors are
    then re-orthonormalized by an SVD retraction and the core is refit
    by least squares on ``refit_records`` (the next batch, never the one
    that produced the gradient).

    Returns the new state and the Frobenius norm of the gradient.
    """
    if n0 < 1:
        raise ArgumentError("n0 must be >= 1")
    _check_invertible(state, min_g_singular)
    d1, d2 = state.U.shape[0], state.V.shape[0]
    rows, cols, y = _pack(step_records)
    grad = _loss_gradient(state.estimate, rows, cols, y, d1, d2)
    grad_norm = float(np.linalg.norm(grad))

    l_g, _, r_g = state.g_svd
    coef = eta / (2.0 * n0 * nu)
    # grad @ V @ G^-1 and grad^T @ U @ G^-T via solves against the core.
    gv = grad @ state.V
    gu = grad.T @ state.U
    u_half = (state.U - coef * np.linalg.solve(state.G.T, gv.T).T) @ l_g
    v_half = (state.V - coef * np.linalg.solve(state.G, gu.T).T) @ r_g

    r = state.G.shape[0]
    u_new = svd_r(u_half, r)[0]
    v_new = svd_r(v_half, r)[0]
    g_new = solve_G(u_new, v_new, refit_records, r, min_g_singular)
    return FactorState.create(u_new, g_new, v_new), grad_norm


def _closed_form_nu(scheme: MatchingScheme, d1: int, d2: int) -> float | None:
    if isinstance(scheme, (OneToOne, OneToMany)):
        return entrywise_probability(scheme, d1, d2).nu
    return None


def fit(batch, config: EstimatorConfig, truth: RewardMatrix | None = None):
    """Run the full fitting loop on an observation batch.

    Parameters
    ----------
    batch : ObservationBatch
    config : EstimatorConfig
        ``config.nu`` must match the batch scheme's closed-form value
        when one exists (one-to-one, one-to-many).
    truth : RewardMatrix, optional
        When supplied, the trace records the relative squared max-norm
        error ``||M^(p) - M||_max^2 / lambda_min^2`` after every batch
        pair; otherwise that column is NaN.

    Returns
    -------
    m_init : ndarray, shape (d1, d2)
        The estimator ``U^(m) G^(m) V^(m)T``.
    trace : FitTrace or None
        None when ``config.record_trace`` is false.
    """
    closed = _closed_form_nu(batch.scheme, batch.d1, batch.d2)
    if closed is not None and abs(config.nu - closed) > NU_CONSISTENCY_RTOL * closed:
        raise ArgumentError(
            f"config.nu={config.nu!r} inconsistent with the batch scheme's "
            f"entrywise probability {closed!r}"
        )
    ranges = partition_batches(len(batch), config.m)
    n0 = ranges[0][1] - ranges[0][0]
    records = batch.records
    slices = [records[a:b] for a, b in ranges]

    lam_min_sq = float(truth.singular_values[-1] ** 2) if truth is not None else np.nan
    trace_err, trace_gmin, trace_gmax, trace_gnorm = [], [], [], []

    def log_state(state: FactorState, grad_norm: float) -> None:
        if config.debug_checks:
            for name, q in (("U", state.U), ("V", state.V)):
                dev = np.max(np.abs(q.T @ q - np.eye(q.shape[1])))
                if dev > ORTHONORMALITY_LOOP_TOL:
                    raise InternalConsistencyError(
                        f"{name} lost orthonormality in-loop (deviation {dev:.2e})"
                    )
        if not config.record_trace:
            return
        if truth is not None:
            err = float(np.max(np.abs(state.estimate - truth.values)) ** 2 / lam_min_sq)
        else:
            err = np.nan
        s_g = state.g_svd[1]
        trace_err.append(err)
        trace_gmin.append(float(s_g[-1]))
        trace_gmax.append(float(s_g[0]))
        trace_gnorm.append(grad_norm)

    try:
        u, v = spectral_init(slices[0], config.nu, config.r)
        g = solve_G(u, v, slices[1], config.r, config.min_g_singular)
        state = FactorState.create(u, g, v)
    except ArgumentError:
        raise
    except Exception as exc:
        exc.args = (f"batch pair 1: {exc}",) + exc.args[1:]
        raise
    log_state(state, np.nan)

    for p in range(1, config.m):
        try:
            state, grad_norm = gradient_step(
                state,
                slices[2 * p],
                slices[2 * p + 1],
                config.eta,
                config.nu,
                n0,
                config.min_g_singular,
            )
        except Exception as exc:
            exc.args = (f"batch pair {p + 1}: {exc}",) + exc.args[1:]
            raise
        log_state(state, grad_norm)

    m_init = state.estimate
    trace = None
    if config.record_trace:
        trace = FitTrace(
            batches=np.arange(1, config.m + 1),
            rel_max_err_sq=np.array(trace_err),
            g_sigma_min=np.array(trace_gmin),
            g_sigma_max=np.array(trace_gmax),
            grad_norm=np.array(trace_gnorm),
        )
    return m_init, trace


@dataclass(frozen=True)
class RankSelection:
    """Result of the scree-elbow heuristic."""

    rank: int
    elbow_found: bool


def estimate_rank(singular_values, max_rank: int) -> RankSelection:
    """Scree-elbow rank selection on a nonincreasing spectrum.

    Picks ``argmax_k s_k / s_{k+1}`` over ``k <= max_rank`` provided the
    winning ratio is at least 3; otherwise returns ``max_rank`` with
    ``elbow_found=False``, the "no clear elbow, choose a slightly larger
    rank" policy.
    """
    s = np.asarray(singular_values, dtype=float).reshape(-1)
    if s.size == 0:
        raise ArgumentError("spectrum must be nonempty")
    if np.any(s < 0.0) or np.any(np.diff(s) > 1e-12 * max(s[0], 1.0)):
        raise ArgumentError("spectrum must be nonnegative and nonincreasing")
    if max_rank < 1:
        raise ArgumentError("max_rank must be >= 1")
    k_max = min(max_rank, s.size - 1)
    if k_max < 1:
        return RankSelection(rank=min(max_rank, s.size), elbow_found=False)
    heads = s[:k_max]
    tails = s[1 : k_max + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(tails > 0.0, heads / tails,
                          np.where(heads > 0.0, np.inf, 1.0))
    best = int(np.argmax(ratios))
    if ratios[best] >= 3.0:
        return RankSelection(rank=best + 1, elbow_found=True)
    return RankSelection(rank=max_rank, elbow_found=False)
