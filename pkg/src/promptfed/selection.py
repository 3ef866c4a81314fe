"""Key-based group routing.

Plain routing picks ``argmax_g cos(f, k_g)``. Training-time routing is
calibrated by the accumulated selection probabilities ``q``: it picks
``argmax_g (cos(f, k_g) - 1) * q_g``. That score is never positive, so a
heavily used group loses unless the feature sits almost on its key, and a
group with ``q_g == 0`` scores a flat 0 and wins outright. Ties always go to
the lowest group index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, DegenerateInputError, DimensionError, as_tensor


def _unit_rows(x):
    x = np.atleast_2d(as_tensor(x))
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateInputError("zero-norm vector in routing")
    return x / n


def cosine_matrix(features, keys) -> np.ndarray:
    """(B, d) features x (G, d) keys -> (B, G) cosines."""
    return _unit_rows(features) @ _unit_rows(keys).T


def select(feature, keys) -> int:
    return int(select_batch(np.atleast_2d(feature), keys)[0])


def select_batch(features, keys) -> np.ndarray:
    # np.argmax returns the first maximum: lowest-index tie-break
    return cosine_matrix(features, keys).argmax(axis=1)


def calibrated_scores(cos, q) -> np.ndarray:
    return (cos - 1.0) * np.asarray(q, dtype=DTYPE)


def select_calibrated(feature, keys, q) -> int:
    return int(select_calibrated_batch(np.atleast_2d(feature), keys, q)[0])


def select_calibrated_batch(features, keys, q) -> np.ndarray:
    return calibrated_scores(cosine_matrix(features, keys), q).argmax(axis=1)


def key_loss(feature, keys, q, calibrated=True):
    """Loss ``-cos(f, k_g)`` for the routed group and its gradient on ``k_g``.

    Returns ``(loss, grad, g)``; the feature is a constant.
    """
    keys = as_tensor(keys)
    f = as_tensor(feature)
    g = select_calibrated(f, keys, q) if calibrated else select(f, keys)
    loss, grad = key_loss_grad(f[None], keys[g][None])
    return float(loss[0]), grad[0], g


def key_loss_grad(features, routed_keys):
    """Per-row ``-cos(f_i, k_i)`` and its gradient w.r.t. ``k_i``."""
    f = as_tensor(features)
    k = as_tensor(routed_keys)
    nf = np.sqrt((f * f).sum(axis=1, keepdims=True))
    nk = np.sqrt((k * k).sum(axis=1, keepdims=True))
    if np.any(nf == 0.0) or np.any(nk == 0.0):
        raise DegenerateInputError("zero-norm vector in key loss")
    c = (f * k).sum(axis=1, keepdims=True) / (nf * nk)
    grad = -(f / (nf * nk) - c * k / (nk * nk))
    return -c[:, 0], grad


def update_q(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if np.any(v < 0):
        raise ValueError("selection counts must be non-negative")
    total = v.sum()
    if total == 0:
        return np.full(v.shape, 1.0 / len(v))
    return v / total


def momentum_merge(shadow, fresh, alpha: float):
    """``alpha * shadow + (1 - alpha) * fresh``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"momentum rate {alpha} outside [0, 1]")
    shadow, fresh = as_tensor(shadow), as_tensor(fresh)
    if shadow.shape != fresh.shape:
        raise DimensionError(f"momentum shapes differ: {shadow.shape} vs {fresh.shape}")
    if alpha == 0.0:
        return fresh.copy()
    if alpha == 1.0:
        return shadow.copy()
    return alpha * shadow + (1.0 - alpha) * fresh


def init_keys(n_groups: int, dim: int, seed: int) -> np.ndarray:
    """Unit-norm random directions, one per group."""
    k = np.random.default_rng(seed).normal(size=(n_groups, dim))
    return k / np.linalg.norm(k, axis=1, keepdims=True)


@dataclass
class KeyBank:
    keys: np.ndarray  # (G, d_feat); the broadcast (momentum) keys
    v: np.ndarray  # (G,) accumulated selection counts

    @classmethod
    def init(cls, n_groups: int, dim: int, seed: int) -> "KeyBank":
        return cls(init_keys(n_groups, dim, seed), np.zeros(n_groups, dtype=np.int64))

    @property
    def q(self) -> np.ndarray:
        return update_q(self.v)

    @property
    def n_groups(self):
        return self.keys.shape[0]

    def copy(self) -> "KeyBank":
        return KeyBank(self.keys.copy(), self.v.copy())
