"""Reservoir sampling, varmix sizing and diagonal GMM estimation by splitting + EM."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_VARIANCE_FLOOR, LOG_2PI, DiagGmm

SPLIT_OFFSET = 0.2
DEFAULT_EM_ITERATIONS = 5
# final phase: iterate until the per-frame gain drops below this, within a cap
CONVERGENCE_TOL = 1e-6
MAX_FINAL_ITERATIONS = 100
MIN_COMPONENT_MASS = 2.0


class SmallSampleWarning(UserWarning):
    """Fewer frames than requested mixture components."""


class Reservoir:
    """Uniform fixed-size sample of a frame stream (Algorithm R).

    The first ``capacity`` frames are kept verbatim. Frame number ``i``
    (0-based) after that draws ``r`` uniformly from ``[0, i]`` and replaces
    slot ``r`` when ``r < capacity``.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("reservoir capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.seen = 0
        self._buf = np.empty((min(capacity, 64), dim), dtype=np.float32)
        self._size = 0

    def __len__(self):
        return self._size

    @property
    def samples(self) -> np.ndarray:
        return self._buf[: self._size]

    def _reserve(self, n: int) -> None:
        if n <= self._buf.shape[0]:
            return
        new = min(self.capacity, max(n, 2 * self._buf.shape[0]))
        buf = np.empty((new, self.dim), dtype=np.float32)
        buf[: self._size] = self._buf[: self._size]
        self._buf = buf

    def extend(self, frames: np.ndarray, rng: np.random.Generator) -> None:
        frames = np.asarray(frames, dtype=np.float32).reshape(-1, self.dim)
        n = frames.shape[0]
        if n == 0:
            return
        take = min(n, self.capacity - self._size)
        if take > 0:
            self._reserve(self._size + take)
            self._buf[self._size : self._size + take] = frames[:take]
            self._size += take
        rest = frames[take:]
        if rest.shape[0]:
            idx = np.arange(self.seen + take, self.seen + n, dtype=np.int64)
            r = rng.integers(0, idx + 1)
            for j in np.flatnonzero(r < self.capacity):
                self._buf[r[j]] = rest[j]
        self.seen += n

    def offer(self, x: np.ndarray, rng: np.random.Generator) -> None:
        self.extend(np.asarray(x)[None, :], rng)


@dataclass(frozen=True)
class VarmixParams:
    alpha: float
    beta: float
    min_components: int = 1
    max_components: int | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("varmix alpha and beta must be positive")
        if self.min_components < 1:
            raise ValueError("min_components must be at least 1")


def varmix_size(n: int, params: VarmixParams) -> int:
    """Component count ``round(beta * n**alpha)``, clamped to the configured range."""
    if n < 1:
        raise ValueError("frame count must be at least 1")
    q = int(math.floor(params.beta * n**params.alpha + 0.5))
    q = max(q, params.min_components)
    if params.max_components is not None:
        q = min(q, params.max_components)
    return q


def floor_variances(gmm: DiagGmm, floor: float) -> DiagGmm:
    if floor <= 0:
        raise ValueError("variance floor must be positive")
    return gmm.floored(floor)


def _estep(x, x2, w, mu, var):
    inv = 1.0 / var
    lp = (
        np.log(w)[None, :]
        - 0.5 * (x.shape[1] * LOG_2PI + np.log(var).sum(axis=1))[None, :]
        - 0.5 * (x2 @ inv.T - 2.0 * x @ (mu * inv).T + (mu * mu * inv).sum(axis=1)[None, :])
    )
    top = lp.max(axis=1, keepdims=True)
    norm = top[:, 0] + np.log(np.exp(lp - top).sum(axis=1))
    return float(norm.sum()), np.exp(lp - norm[:, None])


def _mstep(x, x2, resp, floor):
    mass = resp.sum(axis=0)
    safe = np.maximum(mass, 1e-300)[:, None]
    mu = (resp.T @ x) / safe
    var = np.maximum((resp.T @ x2) / safe - mu * mu, floor)
    return mass, mass / mass.sum(), mu, var


def _split_signs(x, w, mu, var):
    """Per-component +/-1 pattern of the leading principal axis of its (standardized) frames.

    Moving every mean coordinate by the same-signed 0.2 sigma can land
    orthogonal to the direction that separates the data, a saddle EM does
    not leave; taking the signs from the principal axis avoids that.
    """
    _, resp = _estep(x, x * x, w, mu, var)
    label = resp.argmax(axis=1)
    signs = np.ones_like(mu)
    for k in range(len(w)):
        z = (x[label == k] - mu[k]) / np.sqrt(var[k])
        if z.shape[0] < 2:
            continue
        _, vecs = np.linalg.eigh(z.T @ z)
        lead = vecs[:, -1]
        lead = lead if lead[np.argmax(np.abs(lead))] > 0 else -lead
        signs[k] = np.where(lead < 0, -1.0, 1.0)
    return signs


def _split(w, mu, var, which, signs):
    d = SPLIT_OFFSET * np.sqrt(var[which]) * signs[which]
    w = w.copy()
    w[which] /= 2.0
    up = mu.copy()
    up[which] = mu[which] + d
    return (
        np.concatenate([w, w[which]]),
        np.concatenate([up, mu[which] - d]),
        np.concatenate([var, var[which]]),
    )


def _em(x, x2, w, mu, var, iterations, floor, history, tol=None):
    n = x.shape[0]
    prev = None
    for _ in range(iterations):
        ll, resp = _estep(x, x2, w, mu, var)
        history.append(("em", len(w), ll))
        if tol is not None and prev is not None and ll - prev < tol * n:
            break
        prev = ll
        mass, w, mu, var = _mstep(x, x2, resp, floor)
        dead = np.flatnonzero(mass < min(MIN_COMPONENT_MASS, 0.5 * n / len(w)))
        if dead.size:
            w, mu, var = _reseed(w, mu, var, dead)
            history.append(("reseed", len(w), math.nan))
            prev = None
    return w, mu, var


def _reseed(w, mu, var, dead):
    w, mu, var = w.copy(), mu.copy(), var.copy()
    for k in dead:
        heavy = int(np.argmax(w))
        d = SPLIT_OFFSET * np.sqrt(var[heavy])
        half = w[heavy] / 2.0
        mu[k], var[k], w[k] = mu[heavy] - d, var[heavy], half + w[k]
        mu[heavy] = mu[heavy] + d
        w[heavy] = half
    return w / w.sum(), mu, var


def estimate_gmm(
    frames,
    target_q: int,
    em_iterations: int = DEFAULT_EM_ITERATIONS,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    history: list | None = None,
    max_final_iterations: int = MAX_FINAL_ITERATIONS,
    tol: float = CONVERGENCE_TOL,
) -> DiagGmm:
    """Estimate a diagonal GMM with the standard splitting algorithm.

    Starts from the maximum-likelihood single Gaussian and doubles the
    component count (means moved by +/-0.2 standard deviations, signed
    along each component's principal axis) with
    ``em_iterations`` EM passes after every split, until at least
    ``target_q`` components exist. Surplus lowest-weight components are
    then pruned, and EM continues until the gain per frame falls below
    ``tol`` or ``max_final_iterations`` passes have run.

    Parameters
    ----------
    frames : array-like, shape (N, D)
    target_q : int
        Requested number of components; reduced to N (with a
        ``SmallSampleWarning``) when there are fewer frames.
    history : list, optional
        If given, receives ``(event, num_components, loglik)`` tuples:
        ``"em"`` entries carry the training log-likelihood before each
        M-step and after the last one of a phase; ``"init"``, ``"split"``,
        ``"reseed"`` and ``"prune"`` mark structural changes between which
        the "em" log-likelihoods are non-decreasing.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("estimate_gmm needs a non-empty (N, D) frame array")
    if target_q < 1:
        raise ValueError("target component count must be at least 1")
    n = x.shape[0]
    if n < target_q:
        warnings.warn(
            f"{n} frames cannot support {target_q} components; using {n}", SmallSampleWarning, stacklevel=2
        )
        target_q = n
    if history is None:
        history = []

    # centering keeps E[x^2] - mu^2 well conditioned
    shift = x.mean(axis=0)
    xc = x - shift
    x2 = xc * xc
    w = np.ones(1)
    mu = np.zeros((1, x.shape[1]))
    var = np.maximum(x2.mean(axis=0), variance_floor)[None, :]
    history.append(("init", 1, _estep(xc, x2, w, mu, var)[0]))

    while len(w) < target_q:
        w, mu, var = _split(w, mu, var, np.arange(len(w)), _split_signs(xc, w, mu, var))
        history.append(("split", len(w), math.nan))
        w, mu, var = _em(xc, x2, w, mu, var, em_iterations, variance_floor, history)
        history.append(("em", len(w), _estep(xc, x2, w, mu, var)[0]))

    if len(w) > target_q:
        keep = np.sort(np.argsort(-w, kind="stable")[:target_q])
        w, mu, var = w[keep] / w[keep].sum(), mu[keep], var[keep]
        history.append(("prune", len(w), math.nan))
    if len(w) > 1 and max_final_iterations > 0:
        w, mu, var = _em(xc, x2, w, mu, var, max_final_iterations, variance_floor, history, tol)
        history.append(("em", len(w), _estep(xc, x2, w, mu, var)[0]))

    return DiagGmm(w / w.sum(), mu + shift, var)


def data_loglik(gmm: DiagGmm, frames) -> float:
    return float(gmm.loglik(np.asarray(frames, dtype=np.float64)).sum())
