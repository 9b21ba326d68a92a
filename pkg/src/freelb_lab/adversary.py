"""Per-sample embedding perturbations under a Frobenius-norm budget.

Every function treats axis 0 as the sample axis: norms, normalisation and
projection are computed independently for each sample.  ``token_mask`` is
the (batch, seq) attention mask; PAD positions carry no perturbation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import RngState, ShapeError

GRAD_TINY = 1e-12


def _per_sample(eps, n: int) -> np.ndarray:
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,)).copy()
    if np.any(eps < 0):
        raise ValueError("epsilon must be non-negative")
    return eps


def frobenius_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x.reshape(x.shape[0], -1) ** 2).sum(axis=1))


@dataclass
class Perturbation:
    values: np.ndarray
    eps: np.ndarray
    n_delta: np.ndarray

    @property
    def norms(self) -> np.ndarray:
        return frobenius_norms(self.values)


def num_perturbed(token_mask: np.ndarray, dim: int) -> np.ndarray:
    return token_mask.reshape(token_mask.shape[0], -1).sum(axis=1).astype(np.int64) * dim


def init_delta(token_mask: np.ndarray, dim: int, eps, rng) -> Perturbation:
    """Uniform start: each perturbed entry drawn from U(-eps, eps) / sqrt(N_delta).

    ``rng`` is one :class:`RngState` for the whole batch, or a sequence of
    them (one per sample) so that a sample's draw does not depend on which
    other samples share its batch.
    """
    token_mask = np.asarray(token_mask, dtype=np.float64)
    b, s = token_mask.shape
    eps = _per_sample(eps, b)
    n_delta = num_perturbed(token_mask, dim)
    if isinstance(rng, RngState):
        u = rng.uniform(-1.0, 1.0, (b, s, dim))
    else:
        rngs = list(rng)
        if len(rngs) != b:
            raise ValueError(f"got {len(rngs)} random streams for {b} samples")
        u = np.stack([r.uniform(-1.0, 1.0, (s, dim)) for r in rngs]) if b else np.zeros((0, s, dim))
    scale = np.where(n_delta > 0, eps / np.sqrt(np.maximum(n_delta, 1)), 0.0)
    values = u * scale[:, None, None] * token_mask[:, :, None]
    return Perturbation(values, eps, n_delta)


def project_frobenius(delta: np.ndarray, eps) -> np.ndarray:
    """Project each sample onto its ball ``||delta_b||_F <= eps_b``.

    Samples already inside are returned unchanged (same values, bit for bit).
    """
    delta = np.asarray(delta, dtype=np.float64)
    eps = _per_sample(eps, delta.shape[0])
    norms = frobenius_norms(delta)
    outside = norms > eps
    if not outside.any():
        return delta.copy()
    expand = (-1,) + (1,) * (delta.ndim - 1)
    out = delta.copy()
    out[outside] = delta[outside] * (eps[outside] / norms[outside]).reshape(expand)
    # rounding can leave the norm an ulp above eps; shrink until it is inside,
    # so a second projection is the identity
    idx = np.flatnonzero(outside)
    shrink = np.nextafter(1.0, 0.0)
    for _ in range(8):
        over = idx[frobenius_norms(out[idx]) > eps[idx]]
        if not over.size:
            break
        out[over] *= shrink
    return out


def ascent_step(delta: Perturbation, g_adv: np.ndarray, alpha: float, project: bool = True) -> Perturbation:
    """Normalised gradient ascent followed by projection, per sample.

    A sample whose gradient norm is below ``GRAD_TINY`` keeps its delta.
    """
    g_adv = np.asarray(g_adv, dtype=np.float64)
    if g_adv.shape != delta.values.shape:
        raise ShapeError(f"gradient shape {g_adv.shape} != perturbation shape {delta.values.shape}")
    if alpha < 0:
        raise ValueError("step size must be non-negative")
    gn = frobenius_norms(g_adv)
    live = gn >= GRAD_TINY
    values = delta.values.copy()
    if live.any():
        expand = (-1,) + (1,) * (values.ndim - 1)
        step = g_adv[live] * (alpha / gn[live]).reshape(expand)
        values[live] = values[live] + step
        if project:
            values[live] = project_frobenius(values[live], delta.eps[live])
    return Perturbation(values, delta.eps, delta.n_delta)
