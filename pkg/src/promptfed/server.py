"""Round orchestration: sampling, aggregation, count accumulation, momentum.

The global state keeps the momentum shadows of the keys and group prompts as
*the* broadcast values; shared prompts and the head are broadcast as plain
sample-weighted averages. Per-round randomness is derived from
``(seed, round, client)`` so a run is reproducible regardless of thread
count and can be resumed from any checkpoint.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, selection
from .client import ClientRoundResult, ClientState, LocalHyper, local_round, routing_features
from .data import ConfigError
from .encoder import BackboneWeights, PromptSet, prompted_features

STATE_FILE = "state.json"


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class ServerConfig:
    rounds: int = 30
    gamma: float = 0.25
    alpha_k: float = 0.5
    alpha_g: float = 0.5
    seed: int = 0
    threads: int = 1
    eval_every: int = 0  # 0: evaluate only after the last round
    debug_checks: bool = False


@dataclass
class GlobalState:
    prompts: PromptSet
    keys: np.ndarray
    v: np.ndarray
    t: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config, n_groups, n_classes, seed, feat_dim=None, echo=None) -> "GlobalState":
        prompts = PromptSet.init(config, n_groups, n_classes, seed=int(np.random.SeedSequence([seed, 11]).generate_state(1)[0]))
        kseed = int(np.random.SeedSequence([seed, 12]).generate_state(1)[0])
        keys = selection.init_keys(n_groups, feat_dim or config.dim, kseed)
        return cls(prompts, keys, np.zeros(n_groups, dtype=np.int64), 0, seed, echo or {})

    @property
    def q(self):
        return selection.update_q(self.v)

    def copy(self) -> "GlobalState":
        return GlobalState(self.prompts.copy(), self.keys.copy(), self.v.copy(), self.t, self.seed, dict(self.config))

    def arrays(self):
        out = dict(self.prompts.to_arrays())
        out["keys"] = self.keys
        return out

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self.arrays().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        h.update(np.ascontiguousarray(self.v).tobytes())
        h.update(str(self.t).encode())
        return h.hexdigest()

    def save(self, path):
        path = Path(path)
        checkpoint.save(path, self.arrays(), config=self.config, seed=self.seed, extra={"t": self.t})
        meta = {"t": self.t, "v": self.v.tolist(), "q": self.q.tolist(), "seed": self.seed}
        (path / STATE_FILE).write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GlobalState":
        path = Path(path)
        tensors, manifest = checkpoint.load(path)
        meta = json.loads((path / STATE_FILE).read_text())
        keys = tensors.pop("keys")
        return cls(PromptSet.from_arrays(tensors), keys, np.asarray(meta["v"], dtype=np.int64), meta["t"],
                   meta["seed"], manifest.get("config", {}))


@dataclass
class RoundReport:
    t: int
    global_acc: float | None = None
    mean_local_acc: float | None = None
    worst_local_acc: float | None = None
    group_counts: list = field(default_factory=list)
    client_counts: dict = field(default_factory=dict)
    congruence: float | None = None
    wall_time: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["client_counts"] = {str(k): v for k, v in self.client_counts.items()}
        return d


def n_participants(M, gamma) -> int:
    if not 0 < gamma <= 1:
        raise ConfigError(f"gamma={gamma} must lie in (0, 1]")
    return max(1, int(np.floor(gamma * M + 0.5)))


def sample_clients(M, gamma, rng) -> np.ndarray:
    """Uniform sample without replacement, returned in ascending client order."""
    m = n_participants(M, gamma)
    return np.sort(rng.choice(M, size=m, replace=False))


def _weights(ns):
    ns = np.asarray(ns, dtype=np.float64)
    if ns.sum() <= 0:
        raise InvariantViolation("aggregation over zero samples")
    return ns / ns.sum()


def aggregate_params(results) -> PromptSet:
    """Sample-weighted mean of shared prompts, group prompts and head."""
    if not results:
        raise ValueError("no client results to aggregate")
    w = _weights([r.n_samples for r in results])
    ref = results[0].prompts.to_arrays()
    out = {}
    for name, arr in ref.items():
        acc = np.zeros_like(arr)
        for wi, r in zip(w, results):
            a = r.prompts.to_arrays()[name]
            if a.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {arr.shape}")
            acc = acc + wi * a
        out[name] = acc
    return PromptSet.from_arrays(out)


def key_weights(results) -> np.ndarray:
    """(n_clients, G) key aggregation weights; all-zero column where nobody chose g."""
    counts = np.array([r.counts for r in results], dtype=np.float64)
    tot = counts.sum(axis=0)
    return np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)


def aggregate_keys(results, previous_keys) -> np.ndarray:
    """Count-weighted mean per group; a group nobody selected keeps ``previous_keys[g]``."""
    if not results:
        raise ValueError("no client results to aggregate")
    W = key_weights(results)
    keys = np.array(previous_keys, dtype=np.float64, copy=True)
    for g in range(keys.shape[0]):
        if W[:, g].sum() == 0:
            continue
        acc = np.zeros_like(keys[g])
        for i, r in enumerate(results):
            acc = acc + W[i, g] * r.keys[g]
        keys[g] = acc
    return keys


def accumulate_counts(v, results):
    v = np.asarray(v, dtype=np.int64).copy()
    for r in results:
        v += np.asarray(r.counts, dtype=np.int64)
    return v, selection.update_q(v)


def apply_momentum(state: GlobalState, fresh_keys, fresh_groups: dict, alpha_k, alpha_g):
    """Merge fresh aggregates into the shadows; returns (keys, groups) to broadcast."""
    keys = selection.momentum_merge(state.keys, fresh_keys, alpha_k)
    groups = {u: selection.momentum_merge(state.prompts.groups[u], fresh_groups[u], alpha_g) for u in fresh_groups}
    return keys, groups


def server_update(state: GlobalState, results, alpha_k, alpha_g, debug_checks=False) -> GlobalState:
    agg = aggregate_params(results)
    fresh_keys = aggregate_keys(results, state.keys)
    v, q = accumulate_counts(state.v, results)
    keys, groups = apply_momentum(state, fresh_keys, agg.groups, alpha_k, alpha_g)
    if debug_checks:
        w = _weights([r.n_samples for r in results])
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvariantViolation("client weights do not sum to 1")
        kw = key_weights(results).sum(axis=0)
        if not np.all((np.abs(kw - 1.0) < 1e-12) | (kw == 0)):
            raise InvariantViolation("key weights do not sum to 1")
        if np.any(v < state.v):
            raise InvariantViolation("selection counts decreased")
        if not np.array_equal(selection.update_q(v), q):
            raise InvariantViolation("q out of sync with v")
    prompts = PromptSet(agg.shared, groups, agg.head_w, agg.head_b)
    return GlobalState(prompts, keys, v, state.t + 1, state.seed, state.config)


def round_rng(seed, t, *tail):
    return np.random.default_rng([seed, t, *tail])


def run_training(backbone: BackboneWeights, shards, state: GlobalState, hyper: LocalHyper, cfg: ServerConfig,
                 evaluate=None, on_round=None):
    """Run rounds ``state.t + 1 .. cfg.rounds``; returns (final state, reports).

    ``evaluate(state) -> (global, mean_local, worst_local)`` is called every
    ``cfg.eval_every`` rounds and after the last one.
    """
    M = len(shards)
    feats = {}
    if hyper.cache_features and hyper.prompts != "shared_only":
        feats = {i: routing_features(backbone, sh.X) for i, sh in enumerate(shards)}
    digest0 = backbone.digest() if cfg.debug_checks else None
    reports = []
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        while state.t < cfg.rounds:
            t = state.t + 1
            t0 = time.perf_counter()
            sel = sample_clients(M, cfg.gamma, round_rng(cfg.seed, t, 0))
            sent = ClientState(state.prompts, state.keys, state.q)

            def work(i, t=t, sent=sent):
                sh = shards[i]
                return local_round(backbone, sent, sh.X, sh.y, hyper, round_rng(cfg.seed, t, 1, int(i)),
                                   features=feats.get(i))

            results = list(pool.map(work, sel)) if pool else [work(i) for i in sel]
            state = server_update(state, results, cfg.alpha_k, cfg.alpha_g, cfg.debug_checks)
            if cfg.debug_checks and backbone.digest() != digest0:
                raise InvariantViolation("backbone weights changed during training")
            rep = RoundReport(
                t,
                group_counts=np.sum([r.counts for r in results], axis=0).tolist(),
                client_counts={int(i): r.counts.tolist() for i, r in zip(sel, results)},
            )
            last = state.t == cfg.rounds
            if evaluate is not None and (last or (cfg.eval_every and t % cfg.eval_every == 0)):
                rep.global_acc, rep.mean_local_acc, rep.worst_local_acc = evaluate(state)
            rep.wall_time = time.perf_counter() - t0
            reports.append(rep)
            if on_round is not None:
                on_round(state, rep)
    finally:
        if pool:
            pool.shutdown()
    return state, reports


def route(state: GlobalState, backbone: BackboneWeights, X) -> np.ndarray:
    """Inference-time grouping: plain cosine argmax, no q calibration."""
    return selection.select_batch(routing_features(backbone, X), state.keys)


def infer(state: GlobalState, backbone: BackboneWeights, X, prompts="both", batch=256) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 or (backbone.config.image_patch and X.ndim == 2):
        X = X[None]
    out = []
    for s in range(0, len(X), batch):
        xb = X[s:s + batch]
        use_group = prompts != "shared_only" and bool(state.prompts.groups)
        g = route(state, backbone, xb) if use_group else np.zeros(len(xb), dtype=np.intp)
        pool = backbone.config.head_pool if use_group else "cls_only"
        f = prompted_features(backbone, state.prompts, g, xb, use_shared=prompts != "group_only",
                              use_group=use_group, pool=pool)
        out.append((f @ state.prompts.head_w + state.prompts.head_b).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)
