"""Command line entry point: ``promptfed <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 an invariant
violation detected while running (with ``--debug-checks``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint, data, experiments, metrics, server
from .config import PRESETS, RunConfig, dump, parse_config, preset
from .data import ConfigError
from .gradcheck import cmd_gradcheck, small_config
from .server import InvariantViolation

OUT_ENV = "PROMPTFED_OUT"
log = logging.getLogger("promptfed")

SUMMARY_FIELDS = ["name", "seed", "global_acc", "mean_local_acc", "worst_local_acc", "v", "state_sha256"]


def out_root(cfg: RunConfig | None = None, override=None) -> Path:
    if override:
        return Path(override)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, "runs"))


def _apply_sets(cfg: RunConfig, sets) -> RunConfig:
    over = {}
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = over
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg.with_overrides(over) if over else cfg


def load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = _apply_sets(cfg, getattr(args, "set", None))
    if getattr(args, "threads", None):
        cfg = replace(cfg, threads=args.threads)
    if getattr(args, "debug_checks", False):
        cfg = replace(cfg, debug_checks=True)
    return cfg


def _slug(name):
    return name.replace("/", "__")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    bb = experiments.get_backbone(cfg, log=lambda s, l: log.info("pretrain step %d loss %.4f", s, l))
    dest = out_root(cfg, args.out) / _slug(cfg.name) / "backbone"
    checkpoint.save_backbone(dest, bb, seed=cfg.pretrain.seed, extra={"config": cfg.echo()})
    print(f"backbone {bb.digest()[:16]} written to {dest}")
    return 0


def cmd_partition(args) -> int:
    cfg = load_config(args)
    fed = experiments.build_federation(cfg)
    dest = out_root(cfg, args.out) / _slug(cfg.name) / "shards"
    dest.mkdir(parents=True, exist_ok=True)
    for split, shards in (("train", fed.train), ("test", fed.test)):
        for sh in shards:
            data.write_shard(dest / f"{split}_{sh.client_id:03d}.shard", sh)
    (dest / "config.yaml").write_text(dump(cfg))
    print(f"{len(fed.train)} clients, {len(fed.pool)} training samples, label TV "
          f"{data.label_tv(fed.train, cfg.data.n_classes):.3f}; shards in {dest}")
    return 0


def _write_run(result, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    result.state.save(run_dir / "checkpoint")
    log_path = run_dir / "rounds.jsonl"
    if log_path.exists():
        log_path.unlink()
    for rep in result.reports:
        metrics.append_round_log(log_path, rep)
    (run_dir / "config.yaml").write_text(dump(result.config))
    (run_dir / "summary.csv").write_text(metrics.summary_csv([result.summary_row()], SUMMARY_FIELDS))


def run_configs(named, root: Path, backbone_cache=True):
    """Train every (label, config); returns summary rows in input order."""
    rows = []
    for label, cfg in named:
        bb = experiments.get_backbone(cfg, cache=backbone_cache)
        res = experiments.run(cfg, backbone=bb)
        if res.final_backbone_digest != res.initial_digest:
            raise InvariantViolation("backbone weights changed during training")
        _write_run(res, root / _slug(cfg.name) / f"seed{cfg.seed}")
        g, m, w = res.accuracy
        print(f"{cfg.name} seed={cfg.seed}: global={g:.4f} mean_local={m:.4f} worst_local={w:.4f}")
        rows.append(res.summary_row())
    return rows


def cmd_train(args) -> int:
    cfg = load_config(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    if args.preset:
        named = [(label, replace(c, seed=s)) for s in seeds for label, c in preset(args.preset, cfg)]
        tag = args.preset
    else:
        named = [(cfg.name, replace(cfg, seed=s)) for s in seeds]
        tag = cfg.name
    root = out_root(cfg, args.out)
    rows = run_configs(named, root)
    dest = root / _slug(tag)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "summary.csv").write_text(metrics.summary_csv(rows, SUMMARY_FIELDS))
    print(f"summary written to {dest / 'summary.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    state = server.GlobalState.load(args.checkpoint)
    if state.config:
        cfg = RunConfig().with_overrides(state.config)
    bb = experiments.get_backbone(cfg)
    fed = experiments.build_federation(cfg)
    g, m, w = metrics.accuracies(state, bb, fed.test, fed.global_test, cfg.ablation.prompts)
    out = {"global_acc": g, "mean_local_acc": m, "worst_local_acc": w, "t": state.t,
           "routed_fractions": experiments.routed_fractions(state, bb, fed.pool.X).tolist()}
    print(json.dumps(out, indent=2))
    return 0


def cmd_gradcheck_cli(args) -> int:
    cfg = small_config(prompt_len=args.prompt_len, layers=args.layers, dim=args.dim,
                       shared_layers=(1,), group_layers=(args.layers,) if args.layers > 1 else ())
    return cmd_gradcheck(cfg, tol=args.tol)


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    log_path = run_dir / "rounds.jsonl"
    if not log_path.exists():
        raise ConfigError(f"{log_path} not found")
    rows = metrics.read_round_log(log_path)
    H = np.array([r["group_counts"] for r in rows], dtype=np.float64)
    lines = ["round," + ",".join(f"g{g}" for g in range(H.shape[1]))]
    lines += [f"{r['t']}," + ",".join(str(int(c)) for c in r["group_counts"]) for r in rows]
    (run_dir / "selection_counts.csv").write_text("\n".join(lines) + "\n")
    last = rows[-1]
    print(f"rounds: {len(rows)}")
    if len(rows) >= 2:
        mean, std = metrics.selection_stability(H[-min(10, len(rows)):])
        print("selection mean (last 10): " + " ".join(f"{x:.1f}" for x in mean))
        print("selection std  (last 10): " + " ".join(f"{x:.2f}" for x in std))
    if last.get("global_acc") is not None:
        print(f"final: global={last['global_acc']:.4f} mean_local={last['mean_local_acc']:.4f} "
              f"worst_local={last['worst_local_acc']:.4f}")
    print(f"per-round counts written to {run_dir / 'selection_counts.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptfed", description="Federated shared/group prompt tuning on a frozen toy encoder")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")

    sp = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    common(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("partition", help="generate data and write client shards")
    common(sp)
    sp.set_defaults(fn=cmd_partition)

    sp = sub.add_parser("train", help="run federated training (single config or preset)")
    common(sp)
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    sp.add_argument("--threads", type=int, help="client worker threads")
    sp.add_argument("--debug-checks", action="store_true", help="assert invariants every round")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of trainable gradients")
    sp.add_argument("--prompt-len", type=int, default=1)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck_cli)

    sp = sub.add_parser("report", help="selection statistics from a run directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
