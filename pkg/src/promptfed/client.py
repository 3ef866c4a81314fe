"""Local training on one client: block coordinate descent over prompt blocks.

Block I trains the shared prompts and the head (cls-token head input, no
group slots). Block II freezes the shared prompts, routes every sample to a
group with the calibrated selector, and trains that group's prompts, the head
and the routed keys on cross-entropy plus the key loss. Routing reads the
broadcast keys and q, which stay fixed for the whole round; the local key
copies are trained and sent back. Plain SGD throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import selection
from .encoder import BackboneWeights, Graph, PromptSet, logits_on_tape, plain_features, pooled_feature
from .numerics import Tape

MODES = ("bcd", "bcd_inv", "joint")
PROMPT_KINDS = ("both", "shared_only", "group_only")


@dataclass(frozen=True)
class LocalHyper:
    epochs: int = 5
    epochs_ii: int | None = None  # Block II epochs; defaults to ``epochs``
    lr: float = 0.05
    batch_size: int = 8
    mode: str = "bcd"
    prompts: str = "both"
    calibrated: bool = True
    cache_features: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.prompts not in PROMPT_KINDS:
            raise ValueError(f"prompts must be one of {PROMPT_KINDS}")
        if self.epochs < 0 or (self.epochs_ii is not None and self.epochs_ii < 0):
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def e2(self):
        return self.epochs if self.epochs_ii is None else self.epochs_ii


@dataclass
class ClientState:
    """What a client receives from the server."""

    prompts: PromptSet
    keys: np.ndarray
    q: np.ndarray

    def copy(self) -> "ClientState":
        return ClientState(self.prompts.copy(), self.keys.copy(), self.q.copy())


@dataclass
class ClientRoundResult:
    prompts: PromptSet
    keys: np.ndarray
    counts: np.ndarray  # selections per group over all Block II samples
    n_samples: int
    losses: dict = field(default_factory=dict)  # block name -> per-epoch mean loss
    call_log: list = field(default_factory=list)


def routing_features(backbone: BackboneWeights, X) -> np.ndarray:
    return plain_features(backbone, X, backbone.config.select_layer)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_block_I(backbone, state: ClientState, X, y, epochs, lr, batch_size, rng, use_shared=True):
    """Shared prompts + head on cross-entropy. Mutates ``state`` in place."""
    if len(X) == 0:
        raise ValueError("empty dataset")
    p = state.prompts
    losses = []
    for _ in range(epochs):
        tot = 0.0
        for idx in _batches(len(X), batch_size, rng):
            t = Tape()
            gph = Graph(t, backbone)
            sh = {u: t.leaf(v, trainable=True) for u, v in p.shared.items()} if use_shared and p.shared else None
            hw, hb = t.leaf(p.head_w, trainable=True), t.leaf(p.head_b, trainable=True)
            seq, _ = gph.run(gph.embed(X[idx]), shared=sh)
            loss = t.cross_entropy(logits_on_tape(t, pooled_feature(t, seq, 0, "cls_only"), hw, hb), y[idx])
            t.backward(loss)
            if sh:
                for u, v in sh.items():
                    p.shared[u] = p.shared[u] - lr * v.grad
            p.head_w = p.head_w - lr * hw.grad
            p.head_b = p.head_b - lr * hb.grad
            tot += float(loss.value) * len(idx)
        losses.append(tot / len(X))
    return losses


def route_local(features, keys, q, calibrated=True) -> np.ndarray:
    if calibrated:
        return selection.select_calibrated_batch(features, keys, q)
    return selection.select_batch(features, keys)


def block_ii_step(backbone, state: ClientState, Xb, yb, fb, lr, gidx=None, calibrated=True,
                  use_shared=True, train_shared=False, pool=None):
    """One SGD step of Block II (or joint training when ``train_shared``).

    ``gidx`` are the routed groups; when omitted they are computed from the
    current keys. Returns (total loss, routed groups). Mutates ``state``.
    """
    p = state.prompts
    cfg = backbone.config
    if gidx is None:
        gidx = route_local(fb, state.keys, state.q, calibrated)
    t = Tape()
    gph = Graph(t, backbone)
    sh = None
    if use_shared and p.shared:
        sh = {u: t.leaf(v, trainable=train_shared) for u, v in p.shared.items()}
    gp = {u: t.leaf(v, trainable=True) for u, v in p.groups.items()}
    grp = {u: t.gather(v, gidx) for u, v in gp.items()} or None
    hw, hb = t.leaf(p.head_w, trainable=True), t.leaf(p.head_b, trainable=True)
    keys = t.leaf(state.keys, trainable=True)
    seq, ng = gph.run(gph.embed(Xb), shared=sh, groups=grp)
    feat = pooled_feature(t, seq, ng, pool or cfg.head_pool)
    ce = t.cross_entropy(logits_on_tape(t, feat, hw, hb), yb)
    lkey = t.scale(t.mean(t.cosine(t.const(fb), t.gather(keys, gidx))), -1.0)
    loss = t.add(ce, lkey)
    t.backward(loss)
    for u, v in gp.items():
        p.groups[u] = p.groups[u] - lr * v.grad
    if sh and train_shared:
        for u, v in sh.items():
            p.shared[u] = p.shared[u] - lr * v.grad
    p.head_w = p.head_w - lr * hw.grad
    p.head_b = p.head_b - lr * hb.grad
    state.keys = state.keys - lr * keys.grad
    return float(loss.value), gidx


def train_block_II(backbone, state: ClientState, X, y, epochs, lr, batch_size, rng, features=None,
                   calibrated=True, use_shared=True, train_shared=False):
    """Group prompts + head + keys with shared prompts frozen.

    Routing uses the keys and q held on entry (the server broadcast); they
    stay fixed for the round. Returns (per-epoch losses, per-group counts).
    """
    if len(X) == 0:
        raise ValueError("empty dataset")
    G = state.keys.shape[0]
    keys0, q0 = state.keys.copy(), state.q.copy()
    counts = np.zeros(G, dtype=np.int64)
    losses = []
    for _ in range(epochs):
        F = features if features is not None else routing_features(backbone, X)
        g_all = route_local(F, keys0, q0, calibrated)
        tot = 0.0
        for idx in _batches(len(X), batch_size, rng):
            loss, gidx = block_ii_step(backbone, state, X[idx], y[idx], F[idx], lr, g_all[idx], calibrated,
                                       use_shared, train_shared)
            counts += np.bincount(gidx, minlength=G)
            tot += loss * len(idx)
        losses.append(tot / len(X))
    return losses, counts


def local_round(backbone: BackboneWeights, received: ClientState, X, y, hyper: LocalHyper, rng,
                features=None) -> ClientRoundResult:
    """Block I then Block II (order swapped for ``bcd_inv``; one fused block for ``joint``)."""
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.intp)
    if len(X) == 0:
        raise ValueError("empty dataset")
    state = received.copy()
    if features is None and hyper.cache_features and hyper.prompts != "shared_only":
        features = routing_features(backbone, X)
    if not hyper.cache_features:
        features = None
    G = state.keys.shape[0]
    counts = np.zeros(G, dtype=np.int64)
    losses, log = {}, []
    use_shared = hyper.prompts != "group_only"

    def block_i():
        log.append("block_I")
        losses["block_I"] = train_block_I(backbone, state, X, y, hyper.epochs, hyper.lr, hyper.batch_size, rng)

    def block_ii():
        nonlocal counts
        log.append("block_II")
        losses["block_II"], c = train_block_II(backbone, state, X, y, hyper.e2, hyper.lr, hyper.batch_size,
                                               rng, features, hyper.calibrated, use_shared)
        counts += c

    if hyper.prompts == "shared_only":
        block_i()
    elif hyper.prompts == "group_only":
        block_ii()
    elif hyper.mode == "joint":
        log.append("joint")
        losses["joint"], c = train_block_II(backbone, state, X, y, hyper.epochs, hyper.lr, hyper.batch_size,
                                            rng, features, hyper.calibrated, True, train_shared=True)
        counts += c
    elif hyper.mode == "bcd":
        block_i()
        block_ii()
    else:
        block_ii()
        block_i()
    return ClientRoundResult(state.prompts, state.keys, counts, len(X), losses, log)
