"""Finite-difference check of every trainable gradient in local training.

Two losses are checked on a small encoder: the Block I loss (cls head input,
shared prompts and head) and the fused loss used by joint training (shared and
group prompts, head and keys, with group routing held fixed). The reported
figure per parameter block is the block-scaled maximum relative error.
"""

from __future__ import annotations

import numpy as np

from . import selection
from .encoder import BackboneWeights, EncoderConfig, Graph, PromptSet, logits_on_tape, pooled_feature
from .numerics import Tape, numeric_grad, rel_error

BLOCKS = ("shared", "group", "head", "keys")


def small_config(prompt_len=1, **kw) -> EncoderConfig:
    base = dict(layers=2, dim=8, heads=2, n_tokens=3, patch_dim=2, shared_layers=(1,), group_layers=(2,),
                prompt_len=prompt_len)
    base.update(kw)
    return EncoderConfig(**base)


def _loss(backbone, params, X, y, F, gidx, kind, pool):
    """(loss value, {param name: grad}) for ``kind`` in {"block_I", "fused"}."""
    t = Tape()
    gph = Graph(t, backbone)
    leaves = {k: t.leaf(v, trainable=True, name=k) for k, v in params.items()}
    shared = {int(k.split(".")[1]): v for k, v in leaves.items() if k.startswith("shared.")}
    if kind == "block_I":
        seq, _ = gph.run(gph.embed(X), shared=shared or None)
        feat = pooled_feature(t, seq, 0, "cls_only")
        loss = t.cross_entropy(logits_on_tape(t, feat, leaves["head.w"], leaves["head.b"]), y)
    else:
        groups = {int(k.split(".")[1]): t.gather(v, gidx) for k, v in leaves.items() if k.startswith("group.")}
        seq, ng = gph.run(gph.embed(X), shared=shared or None, groups=groups or None)
        feat = pooled_feature(t, seq, ng, pool)
        ce = t.cross_entropy(logits_on_tape(t, feat, leaves["head.w"], leaves["head.b"]), y)
        lkey = t.scale(t.mean(t.cosine(t.const(F), t.gather(leaves["keys"], gidx))), -1.0)
        loss = t.add(ce, lkey)
    t.backward(loss)
    return float(loss.value), {k: v.grad for k, v in leaves.items()}


def _block_of(name):
    if name.startswith("shared."):
        return "shared"
    if name.startswith("group."):
        return "group"
    if name.startswith("head."):
        return "head"
    return "keys"


def run_gradcheck(config: EncoderConfig | None = None, n_groups=3, n_classes=3, batch=4, seed=0, h=1e-5):
    """Returns {block: max relative error} over both losses."""
    config = config or small_config()
    rng = np.random.default_rng(seed)
    backbone = BackboneWeights.init(config, seed)
    prompts = PromptSet.init(config, n_groups, n_classes, seed + 1)
    prompts.head_w = rng.normal(0.0, 0.5, size=prompts.head_w.shape)
    prompts.head_b = rng.normal(0.0, 0.5, size=prompts.head_b.shape)
    params = {k: np.array(v, dtype=np.float64) for k, v in prompts.to_arrays().items()}
    params["keys"] = selection.init_keys(n_groups, config.dim, seed + 2)
    X = rng.normal(size=(batch, config.d_raw))
    y = rng.integers(n_classes, size=batch)
    F = rng.normal(size=(batch, config.dim))
    gidx = np.arange(batch) % n_groups
    worst = {b: 0.0 for b in BLOCKS}
    for kind in ("block_I", "fused"):
        names = [k for k in params if kind == "fused" or k.startswith(("shared.", "head."))]
        sub = {k: params[k] for k in names}
        _, grads = _loss(backbone, sub, X, y, F, gidx, kind, config.head_pool)
        for k in names:
            num = numeric_grad(lambda: _loss(backbone, sub, X, y, F, gidx, kind, config.head_pool)[0], sub[k], h)
            b = _block_of(k)
            worst[b] = max(worst[b], rel_error(grads[k], num))
    return worst


def cmd_gradcheck(config: EncoderConfig | None = None, tol=1e-4, out=print) -> int:
    """Print one line per block; 0 when every block is under ``tol``, else 1."""
    config = config or small_config()
    errs = run_gradcheck(config)
    ok = True
    for b in BLOCKS:
        good = errs[b] < tol
        ok &= good
        out(f"{b:<7} max rel err {errs[b]:.3e}  {'ok' if good else 'FAIL'}")
    out(f"gradcheck {'passed' if ok else 'FAILED'} (tol {tol:g}, U={config.layers}, d={config.dim}, "
        f"prompt_len={config.prompt_len})")
    return 0 if ok else 1
