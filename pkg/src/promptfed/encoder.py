"""Frozen pre-LN transformer encoder with shared and group prompt slots.

Sequence layout inside the encoder is ``[cls, group slots, shared slots,
patches]``. At a shared-insertion layer the shared slots are rebuilt from that
layer's fresh prompt tokens (the previous layer's slot outputs are dropped);
at a group-insertion layer the same happens for the group slots while the
propagated shared outputs are kept. Between insertion layers, slot outputs
flow through like ordinary tokens. With ``final_norm`` the output of the last
layer passes through one more LayerNorm, as in a standard ViT.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import DTYPE, DimensionError, Tape, Var, as_tensor

HEAD_POOLS = ("cls_only", "cls_plus_group_avg")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    dim: int = 16
    heads: int = 2
    n_tokens: int = 4
    patch_dim: int = 4
    mlp_ratio: int = 4
    shared_layers: tuple = (1, 2)
    group_layers: tuple = (3, 4)
    prompt_len: int = 1
    select_layer: int | None = None
    head_pool: str = "cls_plus_group_avg"
    eps: float = 1e-5
    image_patch: int | None = None  # set for (H, W) image input
    final_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "shared_layers", tuple(sorted(int(u) for u in self.shared_layers)))
        object.__setattr__(self, "group_layers", tuple(sorted(int(u) for u in self.group_layers)))
        if self.select_layer is None:
            object.__setattr__(self, "select_layer", self.layers)
        self.validate()

    def validate(self):
        if self.layers < 1 or self.dim < 1 or self.n_tokens < 1 or self.patch_dim < 1:
            raise ValueError("layers, dim, n_tokens and patch_dim must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        for u in self.shared_layers + self.group_layers:
            if not 1 <= u <= self.layers:
                raise ValueError(f"prompt layer {u} outside 1..{self.layers}")
        if set(self.shared_layers) & set(self.group_layers):
            raise ValueError("shared_layers and group_layers overlap")
        if self.shared_layers and self.group_layers and max(self.shared_layers) >= min(self.group_layers):
            raise ValueError("every shared layer must precede every group layer")
        if not 1 <= self.select_layer <= self.layers:
            raise ValueError(f"select_layer={self.select_layer} outside 1..{self.layers}")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if self.head_pool not in HEAD_POOLS:
            raise ValueError(f"head_pool must be one of {HEAD_POOLS}")

    @property
    def d_raw(self):
        return self.n_tokens * self.patch_dim

    def to_dict(self):
        d = asdict(self)
        d["shared_layers"] = list(self.shared_layers)
        d["group_layers"] = list(self.group_layers)
        return d


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _layer_names(u):
    p = f"L{u}."
    return [p + n for n in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                             "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]


@dataclass
class BackboneWeights:
    config: EncoderConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "BackboneWeights":
        rng = np.random.default_rng(seed)
        d, h = config.dim, config.dim * config.mlp_ratio

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        p = {
            "patch_w": dense(config.patch_dim, d),
            "embed_bias": rng.normal(0.0, 0.5, size=(config.n_tokens, d)),
            "cls": rng.normal(0.0, 0.1, size=d),
        }
        for u in range(1, config.layers + 1):
            pre = f"L{u}."
            p[pre + "ln1_g"], p[pre + "ln1_b"] = np.ones(d), np.zeros(d)
            for w in "qkvo":
                p[pre + f"w{w}"] = dense(d, d)
                p[pre + f"b{w}"] = np.zeros(d)
            p[pre + "ln2_g"], p[pre + "ln2_b"] = np.ones(d), np.zeros(d)
            p[pre + "w1"], p[pre + "b1"] = dense(d, h), np.zeros(h)
            p[pre + "w2"], p[pre + "b2"] = dense(h, d) * 0.5, np.zeros(d)
        if config.final_norm:
            p["norm_g"], p["norm_b"] = np.ones(d), np.zeros(d)
        return cls(config, {k: as_tensor(v) for k, v in p.items()})

    def names(self):
        out = ["patch_w", "embed_bias", "cls"]
        for u in range(1, self.config.layers + 1):
            out += _layer_names(u)
        if self.config.final_norm:
            out += ["norm_g", "norm_b"]
        return out

    def freeze(self) -> "BackboneWeights":
        for v in self.params.values():
            v.flags.writeable = False
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()


@dataclass
class PromptSet:
    """Trainable prompts plus the classifier head.

    ``shared[u]`` is ``(prompt_len, d)``; ``groups[u]`` stacks all G group
    prompts for layer ``u`` as ``(G, prompt_len, d)``.
    """

    shared: dict
    groups: dict
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def init(cls, config: EncoderConfig, n_groups: int, n_classes: int, seed: int, std=0.5) -> "PromptSet":
        rng = np.random.default_rng(seed)
        P, d = config.prompt_len, config.dim
        shared = {u: rng.normal(0.0, std, size=(P, d)) for u in config.shared_layers}
        groups = {u: rng.normal(0.0, std, size=(n_groups, P, d)) for u in config.group_layers}
        return cls(shared, groups, np.zeros((d, n_classes)), np.zeros(n_classes))

    @property
    def n_groups(self):
        for v in self.groups.values():
            return v.shape[0]
        return 0

    def group_prompt(self, g, u):
        return self.groups[u][g]

    def copy(self) -> "PromptSet":
        return PromptSet(
            {u: v.copy() for u, v in self.shared.items()},
            {u: v.copy() for u, v in self.groups.items()},
            self.head_w.copy(),
            self.head_b.copy(),
        )

    def to_arrays(self) -> dict:
        out = {f"shared.{u}": v for u, v in sorted(self.shared.items())}
        out.update({f"group.{u}": v for u, v in sorted(self.groups.items())})
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "PromptSet":
        shared, groups = {}, {}
        for k, v in arrays.items():
            kind, _, u = k.partition(".")
            if kind == "shared":
                shared[int(u)] = as_tensor(v)
            elif kind == "group":
                groups[int(u)] = as_tensor(v)
        return cls(shared, groups, as_tensor(arrays["head.w"]), as_tensor(arrays["head.b"]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.to_arrays().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Forward pass on a tape
# ---------------------------------------------------------------------------


def _patches(config: EncoderConfig, x: np.ndarray) -> np.ndarray:
    """(B, d_raw) vectors or (B, H, W) images -> (B, n_tokens, patch_dim)."""
    x = np.asarray(x, dtype=DTYPE)
    if config.image_patch and x.ndim == 3:
        B, H, W = x.shape
        p = config.image_patch
        if H % p or W % p or (H // p) * (W // p) != config.n_tokens or p * p != config.patch_dim:
            raise DimensionError(f"image {H}x{W} with patch {p} does not match the encoder config")
        x = x.reshape(B, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4).reshape(B, -1, p * p)
        return np.ascontiguousarray(x)
    if x.ndim != 2 or x.shape[1] != config.d_raw:
        raise DimensionError(f"sample dim {x.shape[1:]} != {config.d_raw}")
    return np.ascontiguousarray(x.reshape(x.shape[0], config.n_tokens, config.patch_dim))


class Graph:
    """Backbone parameters bound to a tape (frozen unless asked otherwise)."""

    def __init__(self, tape: Tape, weights: BackboneWeights, trainable=False):
        self.tape = tape
        self.config = weights.config
        self.w = {k: tape.leaf(v, trainable=trainable, name=k) for k, v in weights.params.items()}

    def embed(self, x) -> Var:
        t, w, cfg = self.tape, self.w, self.config
        patches = t.const(_patches(cfg, x))
        B = patches.shape[0]
        tok = t.add(t.matmul(patches, w["patch_w"]), w["embed_bias"])
        cls = t.broadcast_to(t.reshape(w["cls"], (1, 1, cfg.dim)), (B, 1, cfg.dim))
        return t.concat([cls, tok], axis=1)

    def block(self, x: Var, u: int) -> Var:
        t, cfg = self.tape, self.config
        w = {k.split(".", 1)[1]: v for k, v in self.w.items() if k.startswith(f"L{u}.")}
        B, L, d = x.shape
        H = cfg.heads
        dh = d // H
        h = t.layer_norm(x, w["ln1_g"], w["ln1_b"], cfg.eps)

        def heads(name):
            y = t.add(t.matmul(h, w["w" + name]), w["b" + name])
            y = t.transpose(t.reshape(y, (B, L, H, dh)), (0, 2, 1, 3))
            return t.reshape(y, (B * H, L, dh))

        a = t.attention(heads("q"), heads("k"), heads("v"))
        a = t.reshape(t.transpose(t.reshape(a, (B, H, L, dh)), (0, 2, 1, 3)), (B, L, d))
        x = t.add(x, t.add(t.matmul(a, w["wo"]), w["bo"]))
        h2 = t.layer_norm(x, w["ln2_g"], w["ln2_b"], cfg.eps)
        m = t.gelu(t.add(t.matmul(h2, w["w1"]), w["b1"]))
        return t.add(x, t.add(t.matmul(m, w["w2"]), w["b2"]))

    def run(self, x: Var, upto=None, shared=None, groups=None, trace=None):
        """Run layers 1..upto.

        ``shared`` maps layer -> Var(P, d); ``groups`` maps layer -> Var(B, P, d)
        (already gathered per sample); entries for layers outside the configured
        prompt layers are ignored. Returns (sequence, n_group_slot_tokens).
        ``trace`` collects the sequence length fed to each layer.
        """
        t, cfg = self.tape, self.config
        upto = cfg.layers if upto is None else upto
        if not 1 <= upto <= cfg.layers:
            raise IndexError(f"layer {upto} outside 1..{cfg.layers}")
        B = x.shape[0]
        ng = ns = 0
        for u in range(1, upto + 1):
            if shared is not None and u in cfg.shared_layers and u in shared:
                p = shared[u]
                body = t.slice(x, np.s_[:, 1 + ng + ns:])
                parts = [t.slice(x, np.s_[:, :1])]
                if ng:
                    parts.append(t.slice(x, np.s_[:, 1:1 + ng]))
                parts += [t.broadcast_to(t.reshape(p, (1,) + p.shape), (B,) + p.shape), body]
                x = t.concat(parts, axis=1)
                ns = p.shape[0]
            if groups is not None and u in cfg.group_layers and u in groups:
                p = groups[u]
                rest = t.slice(x, np.s_[:, 1 + ng:])
                x = t.concat([t.slice(x, np.s_[:, :1]), p, rest], axis=1)
                ng = p.shape[1]
            if trace is not None:
                trace.append(x.shape[1])
            x = self.block(x, u)
        if upto == cfg.layers and cfg.final_norm:
            x = t.layer_norm(x, self.w["norm_g"], self.w["norm_b"], cfg.eps)
        return x, ng


def pooled_feature(tape: Tape, seq: Var, n_group: int, pool: str) -> Var:
    if pool == "cls_only" or n_group == 0:
        return tape.reshape(tape.slice(seq, np.s_[:, :1]), (seq.shape[0], seq.shape[2]))
    return tape.mean(tape.slice(seq, np.s_[:, : 1 + n_group]), axis=1)


def logits_on_tape(tape: Tape, feature: Var, head_w: Var, head_b: Var) -> Var:
    return tape.add(tape.matmul(feature, head_w), head_b)


# ---------------------------------------------------------------------------
# Array-level entry points
# ---------------------------------------------------------------------------


def embed(weights: BackboneWeights, sample) -> np.ndarray:
    """One sample -> (n_tokens + 1, d) with the cls row first."""
    x = np.asarray(sample, dtype=DTYPE)[None]
    return Graph(Tape(), weights).embed(x).value[0]


def plain_features(weights: BackboneWeights, X, upto_layer=None) -> np.ndarray:
    """Batch of frozen-backbone cls features, no prompts inserted."""
    g = Graph(Tape(), weights)
    seq, _ = g.run(g.embed(X), upto=upto_layer)
    return seq.value[:, 0, :].copy()


def forward_plain(weights: BackboneWeights, sample, upto_layer=None) -> np.ndarray:
    return plain_features(weights, np.asarray(sample, dtype=DTYPE)[None], upto_layer)[0]


def prompted_features(weights, prompts: PromptSet, groups_idx, X, use_shared=True, use_group=True,
                      pool=None, trace=None) -> np.ndarray:
    """Head-input features for a batch; ``groups_idx`` gives one group per sample."""
    t = Tape()
    gph = Graph(t, weights)
    x = gph.embed(X)
    B = x.shape[0]
    shared = {u: t.const(v) for u, v in prompts.shared.items()} if use_shared and prompts.shared else None
    groups = None
    if use_group and prompts.groups:
        idx = np.broadcast_to(np.asarray(groups_idx, dtype=np.intp), (B,))
        G = prompts.n_groups
        if np.any(idx < 0) or np.any(idx >= G):
            raise IndexError(f"group index outside 0..{G - 1}")
        groups = {u: t.const(v[idx]) for u, v in prompts.groups.items()}
    seq, ng = gph.run(x, shared=shared, groups=groups, trace=trace)
    return pooled_feature(t, seq, ng, pool or weights.config.head_pool).value


def forward_prompted(weights, prompts: PromptSet, g: int, sample, pool=None, trace=None) -> np.ndarray:
    G = prompts.n_groups
    if prompts.groups and not 0 <= g < G:
        raise IndexError(f"group {g} outside 0..{G - 1}")
    X = np.asarray(sample, dtype=DTYPE)[None]
    return prompted_features(weights, prompts, [g], X, pool=pool, trace=trace)[0]


def classify(prompts: PromptSet, feature) -> np.ndarray:
    feature = as_tensor(feature)
    if feature.shape[-1] != prompts.head_w.shape[0]:
        raise DimensionError(f"feature dim {feature.shape[-1]} != head input {prompts.head_w.shape[0]}")
    return feature @ prompts.head_w + prompts.head_b


def expected_lengths(config: EncoderConfig, use_shared=True, use_group=True):
    """Sequence length entering each layer, from the slot bookkeeping alone."""
    out = []
    s_on = g_on = False
    for u in range(1, config.layers + 1):
        s_on = s_on or (use_shared and u in config.shared_layers)
        g_on = g_on or (use_group and u in config.group_layers)
        out.append(config.n_tokens + 1 + config.prompt_len * (s_on + g_on))
    return out


# ---------------------------------------------------------------------------
# Pretext pretraining (stand-in for a large pretrained backbone)
# ---------------------------------------------------------------------------


def pretrain_backbone(config: EncoderConfig, X, y, steps: int, lr: float, seed: int,
                      batch_size: int = 32, log=None, stats=None) -> BackboneWeights:
    """Train encoder + throwaway linear head on a pretext task, return frozen weights.

    Adam on the cls feature of the last layer. ``steps=0`` returns the seeded
    initialization unchanged. If ``stats`` is a dict it receives the final
    pretext accuracy of the (discarded) head.
    """
    X = np.asarray(X, dtype=DTYPE)
    y = np.asarray(y, dtype=np.intp)
    if len(X) == 0:
        raise ValueError("empty pretext dataset")
    weights = BackboneWeights.init(config, seed)
    if steps == 0:
        return weights.freeze()
    rng = np.random.default_rng([seed, 1])
    n_cls = int(y.max()) + 1
    params = dict(weights.params)
    params["_head_w"] = np.zeros((config.dim, n_cls))
    params["_head_b"] = np.zeros(n_cls)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2 = 0.9, 0.999
    for step in range(1, steps + 1):
        idx = rng.choice(len(X), size=min(batch_size, len(X)), replace=False)
        t = Tape()
        gph = Graph(t, BackboneWeights(config, {k: v for k, v in params.items() if not k.startswith("_")}),
                    trainable=True)
        hw = t.leaf(params["_head_w"], trainable=True, name="_head_w")
        hb = t.leaf(params["_head_b"], trainable=True, name="_head_b")
        seq, _ = gph.run(gph.embed(X[idx]))
        feat = pooled_feature(t, seq, 0, "cls_only")
        loss = t.cross_entropy(logits_on_tape(t, feat, hw, hb), y[idx])
        t.backward(loss)
        grads = {k: v.grad for k, v in gph.w.items()}
        grads["_head_w"], grads["_head_b"] = hw.grad, hb.grad
        for k in params:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            s[k] = b2 * s[k] + (1 - b2) * grads[k] ** 2
            mh = m[k] / (1 - b1 ** step)
            sh = s[k] / (1 - b2 ** step)
            params[k] = params[k] - lr * mh / (np.sqrt(sh) + 1e-8)
        if log is not None and (step % 200 == 0 or step == steps):
            log(step, float(loss.value))
    out = {k: as_tensor(v) for k, v in params.items() if not k.startswith("_")}
    weights = BackboneWeights(config, out).freeze()
    if stats is not None:
        logits = plain_features(weights, X) @ params["_head_w"] + params["_head_b"]
        stats["pretext_accuracy"] = float((logits.argmax(axis=1) == y).mean())
    return weights


def pretext_accuracy(weights: BackboneWeights, X, y, steps=300, lr=0.05, seed=0):
    """Linear-probe accuracy of frozen features (used to sanity-check pretraining)."""
    F = plain_features(weights, X)
    y = np.asarray(y)
    C = int(y.max()) + 1
    W = np.zeros((F.shape[1], C))
    b = np.zeros(C)
    for _ in range(steps):
        z = F @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(y)), y] -= 1.0
        W -= lr * F.T @ p / len(y)
        b -= lr * p.mean(axis=0)
    return float(((F @ W + b).argmax(axis=1) == y).mean())
