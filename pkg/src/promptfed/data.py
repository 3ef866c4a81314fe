"""Synthetic mixture data and federated partitioners.

Every sample belongs to one of G latent groups and one of C classes; a client's
data is a mixture over groups with mixing vector ``pi`` where
``pi[g] == N_g / N`` for that client's shard.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE


class ConfigError(ValueError):
    pass


@dataclass
class MixtureSpec:
    means: np.ndarray  # (G, C, d_raw)
    sigma: float
    counts: np.ndarray  # (G, C) samples per cell

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=DTYPE)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.means.ndim != 3 or self.counts.shape != self.means.shape[:2]:
            raise ConfigError("means must be (G, C, d) and counts (G, C)")
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0")
        if np.any(self.counts < 0):
            raise ConfigError("negative cell count")

    @property
    def n_groups(self):
        return self.means.shape[0]

    @property
    def n_classes(self):
        return self.means.shape[1]

    @property
    def d_raw(self):
        return self.means.shape[2]

    def group_means(self):
        w = self.counts[..., None].astype(DTYPE)
        return (self.means * w).sum(axis=1) / np.maximum(w.sum(axis=1), 1.0)

    def separation(self):
        """Smallest pairwise distance between group means, in units of sigma."""
        gm = self.group_means()
        G = len(gm)
        if G < 2:
            return np.inf
        d = [np.linalg.norm(gm[a] - gm[b]) for a in range(G) for b in range(a + 1, G)]
        return min(d) / self.sigma


def make_mixture_spec(n_groups, n_classes, d_raw, separation=6.0, sigma=1.0, n_per_cell=20,
                      class_offset=3.0, nested=False, seed=0) -> MixtureSpec:
    """Group centres with exact minimum separation ``separation * sigma``.

    Class means sit ``class_offset * sigma`` from their group centre. With
    ``nested=True`` each class lives in exactly one group (class c belongs to
    group ``c * G // C``); otherwise every group carries every class.
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_groups, d_raw))
    if n_groups > 1:
        d = min(np.linalg.norm(centres[a] - centres[b]) for a in range(n_groups) for b in range(a + 1, n_groups))
        centres *= separation * sigma / d
    off = rng.normal(size=(n_groups, n_classes, d_raw))
    off *= class_offset * sigma / np.linalg.norm(off, axis=-1, keepdims=True)
    counts = np.full((n_groups, n_classes), n_per_cell, dtype=np.int64)
    if nested:
        if n_classes % n_groups:
            raise ConfigError(f"nested mixture needs C={n_classes} divisible by G={n_groups}")
        owner = np.arange(n_classes) * n_groups // n_classes
        counts = np.where(np.arange(n_groups)[:, None] == owner[None, :], n_per_cell, 0)
    for g in range(n_groups):
        # centre each group's own class offsets so the group mean is its centre
        own = counts[g] > 0
        if own.sum() > 1:
            off[g, own] -= off[g, own].mean(axis=0)
    means = centres[:, None, :] + off
    return MixtureSpec(means, sigma, counts)


@dataclass
class Pool:
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def n_classes(self):
        return int(self.y.max()) + 1 if len(self.y) else 0

    def take(self, idx) -> "Pool":
        idx = np.asarray(idx, dtype=np.intp)
        return Pool(self.X[idx], self.y[idx], self.group[idx])


def gen_mixture(spec: MixtureSpec, seed: int) -> Pool:
    rng = np.random.default_rng(seed)
    xs, ys, gs = [], [], []
    for g in range(spec.n_groups):
        for c in range(spec.n_classes):
            n = int(spec.counts[g, c])
            xs.append(spec.means[g, c] + spec.sigma * rng.normal(size=(n, spec.d_raw)))
            ys.append(np.full(n, c, dtype=np.int64))
            gs.append(np.full(n, g, dtype=np.int64))
    return Pool(np.concatenate(xs), np.concatenate(ys), np.concatenate(gs))


def make_pretext(d_raw, n_classes=16, n_samples=8000, scale=2.0, seed=0) -> Pool:
    """Pretext task for backbone pretraining: label = argmax of random linear scores.

    Inputs are isotropic ``N(0, scale^2)``; labels come from ``n_classes``
    random directions, so the classes tile the whole input space and a good
    encoder has to keep every input direction. Labels are unrelated to any
    federation class. ``n_classes`` random linear scores give a linearly
    separable task by construction.
    """
    if n_samples < 1:
        raise ConfigError("empty pretext dataset")
    rng = np.random.default_rng([seed, 0x9E7])
    W = rng.normal(size=(d_raw, n_classes))
    X = scale * rng.normal(size=(n_samples, d_raw))
    y = (X @ W).argmax(axis=1).astype(np.int64)
    return Pool(X, y, np.zeros(n_samples, dtype=np.int64))


def split_pool(pool: Pool, test_fraction: float, seed: int):
    """Stratified (group, class) split into (train, test) pools."""
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for key in np.unique(pool.group * (pool.n_classes + 1) + pool.y):
        idx = np.flatnonzero(pool.group * (pool.n_classes + 1) + pool.y == key)
        idx = rng.permutation(idx)
        k = int(round(test_fraction * len(idx)))
        te.append(idx[:k])
        tr.append(idx[k:])
    return pool.take(np.sort(np.concatenate(tr))), pool.take(np.sort(np.concatenate(te)))


@dataclass
class ClientShard:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    pi: np.ndarray
    indices: np.ndarray  # positions in the source pool
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    def group_counts(self, n_groups=None):
        G = n_groups or len(self.pi)
        return np.bincount(self.group, minlength=G)


def _mixing(group, n_groups):
    c = np.bincount(group, minlength=n_groups).astype(DTYPE)
    return c / c.sum() if c.sum() else np.zeros(n_groups)


def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights``; sums exactly."""
    w = np.asarray(weights, dtype=DTYPE)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    rem = total - base.sum()
    # stable sort: ties resolved by position
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return base


def _shard(pool, idx, cid, G, seed, X=None, group=None):
    idx = np.asarray(idx, dtype=np.intp)
    grp = pool.group[idx] if group is None else group
    return ClientShard(cid, pool.X[idx] if X is None else X, pool.y[idx], grp, _mixing(grp, G), idx, seed)


def pathological_partition(pool: Pool, M: int, s: int, seed: int, n_groups=None, max_tries=1000):
    """Each client gets exactly ``s`` random classes; shares of a class follow U(0.4, 0.6) rates."""
    C = pool.n_classes
    G = n_groups or int(pool.group.max()) + 1
    if s > C:
        raise ConfigError(f"s={s} exceeds the number of classes C={C}")
    if s < 1 or M < 1:
        raise ConfigError("s and M must be >= 1")
    if M * s < C:
        raise ConfigError(f"M*s={M * s} < C={C}: some class would have no holder")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        classes = [np.sort(rng.choice(C, size=s, replace=False)) for _ in range(M)]
        if len(np.unique(np.concatenate(classes))) == C:
            break
    else:
        raise ConfigError("could not cover every class; increase M or s")
    parts = [[] for _ in range(M)]
    for c in range(C):
        holders = [i for i in range(M) if c in classes[i]]
        a = rng.uniform(0.4, 0.6, size=len(holders))
        idx = rng.permutation(np.flatnonzero(pool.y == c))
        sizes = largest_remainder(len(idx), a)
        start = 0
        for i, n in zip(holders, sizes):
            parts[i].append(idx[start:start + n])
            start += n
    shards = []
    for i in range(M):
        idx = np.sort(np.concatenate(parts[i])) if parts[i] else np.zeros(0, dtype=np.intp)
        sh = _shard(pool, idx, i, G, seed)
        sh.meta["classes"] = classes[i].tolist()
        shards.append(sh)
    return shards


def mixture_partition(pool: Pool, M: int, concentration: float, seed: int, samples_per_client=None,
                      n_groups=None):
    """Per-client ``pi ~ Dirichlet(concentration)`` over groups, drawn without replacement."""
    if not concentration > 0:
        raise ConfigError("concentration must be > 0")
    G = n_groups or int(pool.group.max()) + 1
    n = samples_per_client or len(pool) // (2 * M)
    rng = np.random.default_rng(seed)
    free = [list(rng.permutation(np.flatnonzero(pool.group == g))) for g in range(G)]
    shards = []
    for i in range(M):
        pi = rng.dirichlet(np.full(G, float(concentration)))
        if not np.all(np.isfinite(pi)) or pi.sum() == 0:
            pi = np.zeros(G)
            pi[rng.integers(G)] = 1.0
        want = largest_remainder(n, pi)
        idx = []
        for g in range(G):
            if want[g] > len(free[g]):
                raise ConfigError(
                    f"pool too small: client {i} wants {want[g]} samples of group {g}, {len(free[g])} left"
                )
            idx += free[g][: want[g]]
            del free[g][: want[g]]
        sh = _shard(pool, np.sort(np.asarray(idx, dtype=np.intp)), i, G, seed)
        sh.meta["pi_drawn"] = pi.tolist()
        shards.append(sh)
    return shards


@dataclass
class DomainTransform:
    A: np.ndarray  # (d_raw, d_raw)
    shift: np.ndarray  # (d_raw,)

    def __call__(self, X):
        return X @ self.A.T + self.shift

    @classmethod
    def identity(cls, d_raw):
        return cls(np.eye(d_raw), np.zeros(d_raw))


def make_domain_transforms(M, d_raw, shift_scale=3.0, mix=0.3, seed=0, patch_dim=None):
    """Per-client affine maps ``I + mix * R`` plus a channel-wise shift.

    With ``patch_dim`` set, the shift is one value per channel repeated over
    every patch; otherwise it is a free vector of norm ``shift_scale``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(M):
        A = np.eye(d_raw) + mix * rng.normal(size=(d_raw, d_raw)) / np.sqrt(d_raw)
        if patch_dim:
            ch = rng.normal(size=patch_dim)
            shift = np.tile(ch, d_raw // patch_dim)
        else:
            shift = rng.normal(size=d_raw)
        shift *= shift_scale / np.linalg.norm(shift)
        out.append(DomainTransform(A, shift))
    return out


def domain_partition(pool: Pool, M: int, transforms, seed: int):
    """Class-balanced split; client i's samples pass through transform i; group := client id."""
    if len(transforms) != M:
        raise ConfigError(f"need one transform per client: got {len(transforms)} for M={M}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(M)]
    for c in range(pool.n_classes):
        idx = rng.permutation(np.flatnonzero(pool.y == c))
        sizes = largest_remainder(len(idx), np.ones(M))
        start = 0
        for i, k in enumerate(sizes):
            parts[i].append(idx[start:start + k])
            start += k
    shards = []
    for i in range(M):
        idx = np.sort(np.concatenate(parts[i]))
        grp = np.full(len(idx), i, dtype=np.int64)
        shards.append(_shard(pool, idx, i, M, seed, X=transforms[i](pool.X[idx]), group=grp))
    return shards


def train_test_shards(shards, test_fraction, seed):
    """Split every shard into (train, test) keeping per-(group, class) proportions."""
    tr, te = [], []
    for sh in shards:
        pool = Pool(sh.X, sh.y, sh.group)
        if len(pool) == 0:
            raise ConfigError(f"client {sh.client_id} has no data")
        rng_seed = [seed, sh.client_id]
        sub = int(np.random.SeedSequence(rng_seed).generate_state(1)[0])
        a, b = split_pool(pool, test_fraction, sub)
        if len(b) == 0 and len(a) >= 2:
            # tiny cells all rounded to zero test samples; move one over
            j = int(np.random.default_rng(sub).integers(len(a)))
            keep = np.delete(np.arange(len(a)), j)
            a, b = a.take(keep), a.take([j])
        G = len(sh.pi)
        tr.append(ClientShard(sh.client_id, a.X, a.y, a.group, _mixing(a.group, G), sh.indices, sh.seed, sh.meta))
        te.append(ClientShard(sh.client_id, b.X, b.y, b.group, _mixing(b.group, G), sh.indices, sh.seed, sh.meta))
    return tr, te


def label_tv(shards, n_classes, attr="y"):
    """Mean total-variation distance of client histograms from the pooled histogram."""
    hists = np.array([np.bincount(getattr(s, attr), minlength=n_classes) for s in shards], dtype=DTYPE)
    glob = hists.sum(axis=0) / hists.sum()
    tot = hists.sum(axis=1, keepdims=True)
    local = hists / np.maximum(tot, 1)
    return float(0.5 * np.abs(local - glob).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Shard dump format
# ---------------------------------------------------------------------------

SHARD_MAGIC = b"PFSHARD1"


def write_shard(path, shard: ClientShard):
    """Magic, u64 little-endian header length, JSON header, raw little-endian arrays."""
    arrays = {
        "X": np.ascontiguousarray(shard.X, dtype="<f8"),
        "y": np.ascontiguousarray(shard.y, dtype="<i8"),
        "group": np.ascontiguousarray(shard.group, dtype="<i8"),
        "indices": np.ascontiguousarray(shard.indices, dtype="<i8"),
    }
    layout, off = {}, 0
    for k, a in arrays.items():
        layout[k] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": off, "nbytes": a.nbytes}
        off += a.nbytes
    header = {
        "client_id": int(shard.client_id),
        "pi": [float(x) for x in shard.pi],
        "counts": shard.group_counts().tolist(),
        "n_samples": len(shard),
        "seed": int(shard.seed),
        "meta": shard.meta,
        "arrays": layout,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(a.tobytes())


def read_shard(path) -> ClientShard:
    raw = Path(path).read_bytes()
    if raw[:8] != SHARD_MAGIC:
        raise ValueError(f"{path}: not a shard file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    base = 16 + n
    arr = {}
    for k, spec in header["arrays"].items():
        start = base + spec["offset"]
        arr[k] = np.frombuffer(raw[start:start + spec["nbytes"]], dtype=spec["dtype"]).reshape(spec["shape"]).copy()
    return ClientShard(
        header["client_id"],
        arr["X"].astype(DTYPE),
        arr["y"].astype(np.int64),
        arr["group"].astype(np.int64),
        np.asarray(header["pi"], dtype=DTYPE),
        arr["indices"].astype(np.int64),
        header["seed"],
        header.get("meta", {}),
    )
