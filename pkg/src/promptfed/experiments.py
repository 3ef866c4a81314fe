"""Glue from a RunConfig to data, a frozen backbone and a finished run."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _backend, checkpoint, data, metrics, selection, server
from .config import RunConfig
from .data import ConfigError
from .encoder import pretrain_backbone

CACHE_ENV = "PROMPTFED_CACHE"


@dataclass
class Federation:
    train: list
    test: list
    global_test: data.Pool
    pool: data.Pool  # union of the training shards
    spec: data.MixtureSpec | None = None


@dataclass
class RunResult:
    config: RunConfig
    state: server.GlobalState
    reports: list
    accuracy: tuple  # (global, mean local, worst local)
    initial_digest: str = ""
    final_backbone_digest: str = ""
    extra: dict = field(default_factory=dict)

    def summary_row(self):
        g, m, w = self.accuracy
        return {"name": self.config.name, "seed": self.config.seed, "global_acc": g, "mean_local_acc": m,
                "worst_local_acc": w, "v": " ".join(str(int(x)) for x in self.state.v),
                "state_sha256": self.state.digest()}


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------


def _cache_dir():
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else Path.home() / ".cache" / "promptfed"


def backbone_key(cfg: RunConfig) -> str:
    """Cache key: encoder and pretrain settings plus the active kernels (rounding differs across backends)."""
    blob = json.dumps({"encoder": cfg.encoder.to_dict(), "pretrain": asdict(cfg.pretrain),
                       "kernels": [_backend.NAME, _backend.KERNEL_VERSION]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def get_backbone(cfg: RunConfig, cache=True, log=None):
    """Pretrain on the pretext task, or load the cached result for the same settings."""
    path = _cache_dir() / f"backbone-{backbone_key(cfg)}"
    if cache and (path / checkpoint.MANIFEST).exists():
        return checkpoint.load_backbone(path)[0]
    pt = cfg.pretrain
    pre = data.make_pretext(cfg.encoder.d_raw, pt.n_classes, pt.n_samples, pt.scale, pt.seed)
    stats = {}
    bb = pretrain_backbone(cfg.encoder, pre.X, pre.y, pt.steps, pt.lr, pt.seed, pt.batch_size, log=log, stats=stats)
    if cache:
        checkpoint.save_backbone(path, bb, seed=pt.seed, extra={"pretrain": asdict(pt), **stats})
    return bb


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def _concat(shards):
    return data.Pool(np.concatenate([s.X for s in shards]), np.concatenate([s.y for s in shards]),
                     np.concatenate([s.group for s in shards]))


def build_federation(cfg: RunConfig) -> Federation:
    dc, pc = cfg.data, cfg.partition
    seed = cfg.data_seed
    G = cfg.groups
    n_groups_data = 1 if pc.kind == "domain" else G
    spec = data.make_mixture_spec(n_groups_data, dc.n_classes, cfg.d_raw, dc.separation, dc.sigma, dc.n_per_cell,
                                  dc.class_offset, dc.nested, seed=seed)
    pool = data.gen_mixture(spec, seed + 1)
    if pc.kind == "pathological":
        shards = data.pathological_partition(pool, cfg.clients, pc.s, seed + 2, n_groups=G)
    elif pc.kind == "mixture":
        shards = data.mixture_partition(pool, cfg.clients, pc.concentration, seed + 2, pc.samples_per_client)
    else:
        tf = data.make_domain_transforms(cfg.clients, cfg.d_raw, pc.shift_scale, pc.mix, seed + 3,
                                         patch_dim=cfg.encoder.patch_dim)
        shards = data.domain_partition(pool, cfg.clients, tf, seed + 2)
    train, test = data.train_test_shards(shards, dc.test_fraction, seed + 4)
    return Federation(train, test, _concat(test), _concat(train), spec)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def initial_state(cfg: RunConfig) -> server.GlobalState:
    st = server.GlobalState.init(cfg.encoder, cfg.groups, cfg.data.n_classes, cfg.seed, echo=cfg.echo())
    if cfg.ablation.key_init == "equal":
        st.keys[:] = st.keys[0]
    return st


def run(cfg: RunConfig, backbone=None, fed: Federation | None = None, state=None, on_round=None,
        evaluate_rounds=False) -> RunResult:
    backbone = backbone if backbone is not None else get_backbone(cfg)
    if backbone.config != cfg.encoder:
        raise ConfigError("backbone was built for a different encoder config than this run")
    fed = fed or build_federation(cfg)
    state = state if state is not None else initial_state(cfg)
    prompts = cfg.ablation.prompts
    d0 = backbone.digest()

    def evaluate(st):
        return metrics.accuracies(st, backbone, fed.test, fed.global_test, prompts)

    scfg = cfg.server_config()
    if not evaluate_rounds:
        scfg = server.ServerConfig(**{**asdict(scfg), "eval_every": 0})
    state, reports = server.run_training(backbone, fed.train, state, cfg.local_hyper(), scfg,
                                         evaluate=evaluate, on_round=on_round)
    acc = evaluate(state)
    return RunResult(cfg, state, reports, acc, d0, backbone.digest())


def routed_fractions(state: server.GlobalState, backbone, X) -> np.ndarray:
    g = server.route(state, backbone, X)
    return np.bincount(g, minlength=state.keys.shape[0]) / len(g)


def congruence_vs_oracle(state, backbone, pool: data.Pool, class_labels=None, seed=0, weighting="mass"):
    """Congruence of inference-time routing against centralised k-means on the same features."""
    from .client import routing_features

    F = routing_features(backbone, pool.X)
    oracle = metrics.kmeans_oracle(F, state.keys.shape[0], seed=seed)
    sel = selection.select_batch(F, state.keys)
    cls = pool.group if class_labels is None else class_labels
    return metrics.congruence(sel, oracle, cls, weighting)


def selection_std_last(reports, last=10) -> float:
    """Summed per-group std of round selection counts over the last ``last`` rounds."""
    H = np.array([r.group_counts for r in reports[-last:]], dtype=np.float64)
    return float(metrics.selection_stability(H)[1].sum())
