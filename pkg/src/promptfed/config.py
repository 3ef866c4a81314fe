"""Run configuration: YAML in, validated dataclasses out, echo back to YAML.

Every section is a flat mapping of known keys. Unknown keys are errors and
are reported with their line number, so a typo never silently falls back to
a default. ``RunConfig.echo()`` is a plain dict that parses back to an equal
config, and is embedded in every artifact a run writes.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .client import MODES, PROMPT_KINDS, LocalHyper
from .data import ConfigError
from .encoder import EncoderConfig
from .server import ServerConfig

PARTITIONS = ("mixture", "pathological", "domain")
KEY_INITS = ("random", "equal")


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 4
    d_raw: int | None = None  # defaults to the encoder's n_tokens * patch_dim
    separation: float = 6.0
    sigma: float = 1.0
    n_per_cell: int = 60
    class_offset: float = 2.0
    nested: bool = False
    test_fraction: float = 0.25
    seed: int | None = None  # defaults to the master seed


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "mixture"
    s: int = 2
    concentration: float = 0.5
    samples_per_client: int | None = None
    shift_scale: float = 3.0
    mix: float = 0.3


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-2
    batch_size: int = 32
    n_classes: int = 64
    n_samples: int = 8000
    scale: float = 2.0
    seed: int = 0


@dataclass(frozen=True)
class AblationConfig:
    disable_q_calibration: bool = False
    disable_momentum: bool = False
    bcd_mode: str = "bcd"
    prompts: str = "both"
    key_init: str = "random"


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    groups: int = 4
    clients: int = 20
    gamma: float = 0.25
    rounds: int = 30
    epochs: int = 5
    lr: float = 0.2
    batch_size: int = 8
    alpha_k: float = 0.5
    alpha_g: float = 0.5
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    threads: int = 1
    eval_every: int = 0
    debug_checks: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        validate(self)

    # -- derived views -------------------------------------------------

    @property
    def d_raw(self):
        return self.data.d_raw or self.encoder.d_raw

    @property
    def data_seed(self):
        return self.seed if self.data.seed is None else self.data.seed

    def local_hyper(self) -> LocalHyper:
        return LocalHyper(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, mode=self.ablation.bcd_mode,
                          prompts=self.ablation.prompts, calibrated=not self.ablation.disable_q_calibration)

    def server_config(self) -> ServerConfig:
        ak, ag = (0.0, 0.0) if self.ablation.disable_momentum else (self.alpha_k, self.alpha_g)
        return ServerConfig(rounds=self.rounds, gamma=self.gamma, alpha_k=ak, alpha_g=ag, seed=self.seed,
                            threads=self.threads, eval_every=self.eval_every, debug_checks=self.debug_checks)

    def echo(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return from_dict(_merge(self.echo(), overrides))


SECTIONS = {"encoder": EncoderConfig, "data": DataConfig, "partition": PartitionConfig,
            "pretrain": PretrainConfig, "ablation": AblationConfig}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _known(cls):
    return {f.name for f in fields(cls)}


def _check_keys(d, cls, where, lines):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(d).__name__}")
    for k in d:
        if k not in _known(cls):
            path = f"{where}.{k}" if where else k
            line = lines.get(path)
            at = f" (line {line})" if line else ""
            raise ConfigError(f"unknown key '{path}'{at}")


def from_dict(d: dict, lines=None) -> RunConfig:
    """Build a validated RunConfig from nested plain data."""
    lines = lines or {}
    d = dict(d or {})
    _check_keys(d, RunConfig, "", lines)
    kw = {}
    for k, v in d.items():
        if k in SECTIONS:
            _check_keys(v or {}, SECTIONS[k], k, lines)
            try:
                kw[k] = SECTIONS[k](**(v or {}))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{k}: {e}") from None
        else:
            kw[k] = v
    try:
        return RunConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _line_map(text):
    """Dotted key path -> 1-based line, from the YAML node tree."""
    out = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for kn, vn in node.value:
                path = f"{prefix}.{kn.value}" if prefix else str(kn.value)
                out[path] = kn.start_mark.line + 1
                walk(vn, path)

    if root is not None:
        walk(root, "")
    return out


def parse_text(text: str) -> RunConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        at = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse config{at}: {getattr(e, 'problem', e)}") from None
    return from_dict(d or {}, _line_map(text))


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_text(p.read_text())


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.echo(), sort_keys=True)


def validate(cfg: RunConfig):
    enc = cfg.encoder
    if not isinstance(enc, EncoderConfig):
        raise ConfigError("encoder must be an EncoderConfig")
    if not 0 < cfg.gamma <= 1:
        raise ConfigError(f"gamma={cfg.gamma} must lie in (0, 1]")
    for name in ("groups", "clients", "batch_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name}={getattr(cfg, name)} must be >= 1")
    for name in ("rounds", "epochs"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name}={getattr(cfg, name)} must be >= 0")
    if cfg.lr < 0:
        raise ConfigError(f"lr={cfg.lr} must be >= 0")
    for name in ("alpha_k", "alpha_g"):
        if not 0 <= getattr(cfg, name) <= 1:
            raise ConfigError(f"{name}={getattr(cfg, name)} must lie in [0, 1]")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    ab = cfg.ablation
    if ab.bcd_mode not in MODES:
        raise ConfigError(f"ablation.bcd_mode={ab.bcd_mode!r} not in {MODES}")
    if ab.prompts not in PROMPT_KINDS:
        raise ConfigError(f"ablation.prompts={ab.prompts!r} not in {PROMPT_KINDS}")
    if ab.key_init not in KEY_INITS:
        raise ConfigError(f"ablation.key_init={ab.key_init!r} not in {KEY_INITS}")
    if ab.prompts == "group_only" and not enc.group_layers:
        raise ConfigError("prompts=group_only needs at least one group layer, but encoder.group_layers is empty")
    if ab.prompts == "shared_only" and not enc.shared_layers:
        raise ConfigError("prompts=shared_only needs at least one shared layer, but encoder.shared_layers is empty")
    if ab.prompts == "both" and not (enc.shared_layers or enc.group_layers):
        raise ConfigError("prompts=both with no shared or group layers")
    dc, pc = cfg.data, cfg.partition
    if dc.sigma <= 0:
        raise ConfigError(f"data.sigma={dc.sigma} must be > 0")
    if dc.n_classes < 1 or dc.n_per_cell < 1:
        raise ConfigError("data.n_classes and data.n_per_cell must be >= 1")
    if not 0 < dc.test_fraction < 1:
        raise ConfigError(f"data.test_fraction={dc.test_fraction} must lie in (0, 1)")
    if dc.d_raw is not None and dc.d_raw != enc.d_raw and not enc.image_patch:
        raise ConfigError(f"data.d_raw={dc.d_raw} does not match encoder n_tokens*patch_dim={enc.d_raw}")
    if dc.nested and dc.n_classes % cfg.groups:
        raise ConfigError(f"data.nested needs n_classes={dc.n_classes} divisible by groups={cfg.groups}")
    if pc.kind not in PARTITIONS:
        raise ConfigError(f"partition.kind={pc.kind!r} not in {PARTITIONS}")
    if pc.kind == "pathological":
        if pc.s > dc.n_classes:
            raise ConfigError(f"partition.s={pc.s} exceeds data.n_classes={dc.n_classes}")
        if pc.s < 1:
            raise ConfigError("partition.s must be >= 1")
    if pc.kind == "mixture" and not pc.concentration > 0:
        raise ConfigError(f"partition.concentration={pc.concentration} must be > 0")
    if pc.kind == "domain" and cfg.groups != cfg.clients:
        raise ConfigError(f"domain partition uses one group per client: groups={cfg.groups} != clients={cfg.clients}")
    pt = cfg.pretrain
    if pt.steps < 0 or pt.n_samples < 1 or pt.n_classes < 2:
        raise ConfigError("pretrain needs steps >= 0, n_samples >= 1 and n_classes >= 2")


# ---------------------------------------------------------------------------
# Presets: named grids of overrides on top of a base config
# ---------------------------------------------------------------------------

_HETERO = {
    "groups": 4,
    "data": {"n_classes": 8, "nested": True, "n_per_cell": 150},
    "partition": {"kind": "pathological", "s": 2},
}

PRESETS = {
    # prompt-type and optimisation-order ablation
    "table3_toy": [
        ("shared_only", _merge(_HETERO, {"ablation": {"prompts": "shared_only"}})),
        ("group_only", _merge(_HETERO, {"ablation": {"prompts": "group_only"}})),
        ("both_joint", _merge(_HETERO, {"ablation": {"bcd_mode": "joint"}})),
        ("both_bcd_inv", _merge(_HETERO, {"ablation": {"bcd_mode": "bcd_inv"}})),
        ("both_bcd", _merge(_HETERO, {"ablation": {"bcd_mode": "bcd"}})),
    ],
    # per-round selection counts with and without key momentum
    "fig2_toy": [
        ("alpha_k_0.5", {"alpha_k": 0.5}),
        ("alpha_k_0", {"alpha_k": 0.0}),
    ],
    # calibrated routing against plain routing from equal keys
    "anticollapse_toy": [
        ("calibrated", {}),
        ("plain_equal_keys", {"ablation": {"disable_q_calibration": True, "key_init": "equal"}}),
    ],
    # momentum sweep
    "momentum_toy": [(f"alpha_{a}", {"alpha_k": a, "alpha_g": a}) for a in (0.0, 0.25, 0.5, 0.75, 0.9)],
}


def preset(name: str, base: RunConfig | None = None):
    """[(label, RunConfig)] for a named preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = base or RunConfig()
    out = []
    for label, over in PRESETS[name]:
        cfg = base.with_overrides(over)
        out.append((label, replace(cfg, name=f"{name}/{label}")))
    return out
