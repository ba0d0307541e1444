"""Command-line entry point: ``aptune {train,ablate,probe,fewshot,sweep,params}``.

Every command writes its outputs plus ``manifest.json`` under ``--out``.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt_io
from .data import SEQUENCE, SYNTHETIC_KINDS, Dataset, gen_synthetic, kshot_sample, load_conll_splits
from .gating import ABLATION_ARMS, ARM_LABELS, trainable_param_count
from .probe import (
    NoGatesError,
    VariablePrefixPlan,
    build_pt2star_config,
    collect_gates,
    derive_variable_lengths,
    export_heatmap,
)
from .training import (
    SEEDS,
    ExperimentReport,
    PrefixModel,
    TrainConfig,
    evaluate,
    fit,
    pretrain_backbone,
    run_experiment,
)
from .transformer import GATE_MODES, Backbone, ModelConfig

log = logging.getLogger("aptune")

DEFAULTS = {
    "task": "seq_keyword",
    "data": None,
    "n": 512,
    "data_seed": 0,
    "mode": "apt",
    "prefix_len": 4,
    "layers": 2,
    "heads": 2,
    "dim": 32,
    "ffn_dim": 64,
    "max_seq_len": 32,
    "lr": 1e-3,
    "lr_grid": None,
    "epochs": 20,
    "batch": 16,
    "max_steps": None,
    "seed": 42,
    "seeds": None,
    "precision": "f32",
    "backbone_seed": 0,
    "pretrain_steps": 1000,
    "backbone": None,
    "plan": None,
    "checkpoint": None,
    "tau": 0.5,
    "min_len": 1,
    "split": "dev",
    "k": "16,32",
    "arms": None,
    "lengths": "2,4,8,16",
}


class UsageError(Exception):
    pass


def _floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    # defaults are None so a config file can fill gaps before built-in defaults
    p.add_argument("--config", help="JSON file of flag defaults (or a manifest.json to replay)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=(*SYNTHETIC_KINDS, "conll"))
    p.add_argument("--data", help="directory with train.txt/dev.txt[/test.txt] for --task conll")
    p.add_argument("--n", type=int, help="synthetic dataset size")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--mode", choices=GATE_MODES)
    p.add_argument("--prefix-len", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-grid", help="comma-separated learning rates to grid-search on dev")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--backbone-seed", type=int)
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--backbone", help="take the frozen backbone from this checkpoint")
    p.add_argument("--plan", help="variable prefix plan (JSON) for --mode pt2_star")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aptune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aptune {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _add_common(p)

    p = sub.add_parser("ablate", help="APT vs. its three ablations")
    _add_common(p)

    p = sub.add_parser("probe", help="collect gates, export heatmap, derive a variable-length plan")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--min-len", type=int)
    p.add_argument("--split", choices=("train", "dev", "test"))

    p = sub.add_parser("fewshot", help="k-shot runs over the fixed seed list")
    _add_common(p)
    p.add_argument("--k", help="comma-separated shots per class (default 16,32)")
    p.add_argument("--arms", help="comma-separated modes (default pt2,apt)")

    p = sub.add_parser("sweep", help="metric vs. prefix length for APT and PT-2")
    _add_common(p)
    p.add_argument("--lengths", help="comma-separated prefix lengths")
    p.add_argument("--arms", help="comma-separated modes (default apt,pt2)")

    p = sub.add_parser("params", help="trainable parameter counts per mode")
    _add_common(p)
    return parser


def resolve_flags(args: argparse.Namespace, command_defaults: dict | None = None) -> tuple[dict, set]:
    """Merge built-in defaults < command defaults < config file < explicit flags.

    Returns the resolved flags and the set of keys given explicitly (file or CLI).
    """
    flags = dict(DEFAULTS)
    flags.update(command_defaults or {})
    explicit = set()
    if args.config:
        try:
            obj = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        obj = obj.get("flags", obj)
        for key, value in obj.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            flags[key] = value
            explicit.add(key)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = value
            explicit.add(key)
    return flags, explicit


# ---------------------------------------------------------------------------
# helpers shared by commands


def load_dataset(flags: dict) -> Dataset:
    task = flags["task"]
    if task == "conll":
        if not flags["data"]:
            raise UsageError("--task conll needs --data DIR")
        root = Path(flags["data"])
        try:
            train = (root / "train.txt").read_text(encoding="utf-8")
            dev = (root / "dev.txt").read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read CoNLL data: {exc}") from None
        test_path = root / "test.txt"
        test = test_path.read_text(encoding="utf-8") if test_path.exists() else ""
        ds = load_conll_splits(train, dev, test)
        ds.name = f"conll:{root.name}"
        return ds
    return gen_synthetic(task, int(flags["data_seed"]), int(flags["n"]))


def model_config(flags: dict, dataset: Dataset, mode: str | None = None) -> ModelConfig:
    mode = mode or flags["mode"]
    plan = None
    if mode == "pt2_star":
        if not flags["plan"]:
            raise UsageError("--mode pt2_star requires --plan")
        try:
            plan = VariablePrefixPlan.from_json(Path(flags["plan"]).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read plan {flags['plan']}: {exc}") from None
    longest = max((len(ex.tokens) for ex in dataset.examples), default=0) + 1
    try:
        cfg = ModelConfig(
            num_layers=int(flags["layers"]),
            num_heads=int(flags["heads"]),
            model_dim=int(flags["dim"]),
            ffn_dim=int(flags["ffn_dim"]),
            vocab_size=len(dataset.vocab),
            max_seq_len=max(int(flags["max_seq_len"]), longest),
            prefix_len=int(flags["prefix_len"]),
            mode="pt2" if plan else mode,
        )
        if plan is not None:
            cfg = build_pt2star_config(plan, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def get_backbone(flags: dict, cfg: ModelConfig) -> Backbone:
    if flags["backbone"]:
        bb = ckpt_io.load_backbone(flags["backbone"])
        if bb.tok_emb.shape != (cfg.vocab_size, cfg.model_dim) or len(bb.layers) != cfg.num_layers:
            raise UsageError("backbone checkpoint does not match the requested architecture/vocabulary")
        return bb
    return pretrain_backbone(cfg, int(flags["backbone_seed"]), int(flags["pretrain_steps"]))


def train_config(flags: dict, mode: str | None = None) -> TrainConfig:
    grid = tuple(_floats(flags["lr_grid"])) if flags["lr_grid"] else None
    return TrainConfig(
        learning_rate=float(flags["lr"]),
        epochs=int(flags["epochs"]),
        batch_size=int(flags["batch"]),
        seed=int(flags["seed"]),
        mode=mode or flags["mode"],
        precision=flags["precision"],
        lr_grid=grid,
        max_steps=None if flags["max_steps"] is None else int(flags["max_steps"]),
    )


def seed_list(flags: dict, default) -> list[int]:
    if flags["seeds"]:
        return _ints(flags["seeds"]) if isinstance(flags["seeds"], str) else [int(s) for s in flags["seeds"]]
    return list(default)


def workers() -> int:
    try:
        return max(1, int(os.environ.get("APT_THREADS", "1")))
    except ValueError:
        return 1


def write_manifest(out: Path, command: str, flags: dict, seeds, mode, fingerprint: str, outputs) -> None:
    manifest = {
        "tool": "aptune",
        "version": __version__,
        "command": command,
        "flags": flags,
        "seeds": list(seeds),
        "mode": mode,
        "dataset_fingerprint": fingerprint,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def report_table(report: ExperimentReport, title: str) -> str:
    lines = [title, f"{'arm':<24} {report.metric_name} (mean_std over {len(report.runs) // max(1, len(report.arms()))} seeds)"]
    for arm in report.arms():
        lines.append(f"{ARM_LABELS.get(arm, arm):<24} {report.mean_std(arm)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, out: Path) -> int:
    flags, _ = resolve_flags(args)
    ds = load_dataset(flags)
    cfg = model_config(flags, ds)
    tc = train_config(flags)
    backbone = get_backbone(flags, cfg)
    model = PrefixModel.build(cfg, backbone, ds.task_kind, ds.num_labels, tc.seed, tc.dtype)
    log_lines = ["step,loss,lr,mode"]

    def record(step, loss, lr, mode):
        log_lines.append(f"{step},{loss:.9g},{lr:g},{mode}")

    fit(model, ds.train, tc, record)
    (out / "train_log.csv").write_text("\n".join(log_lines) + "\n")
    metrics = {split: evaluate(model, ds, split).main for split in ("dev", "test") if ds.splits.get(split)}
    meta = {"task": flags["task"], "n": flags["n"], "data_seed": flags["data_seed"], "data": flags["data"],
            "dataset_fingerprint": ds.fingerprint(), "label_names": ds.label_names}
    ckpt_io.save(out / "checkpoint.aptc", ckpt_io.from_model(model, meta))
    (out / "metrics.json").write_text(json.dumps(
        {"metrics": metrics, "trainable_params": trainable_param_count(cfg),
         "head_params": model.head.weight.size + model.head.bias.size}, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", flags, [tc.seed], cfg.mode, ds.fingerprint(),
                   ["checkpoint.aptc", "train_log.csv", "metrics.json"])
    print(f"{cfg.mode}: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


def _experiment(args, seeds_default=None, command_defaults=None):
    flags, _ = resolve_flags(args, command_defaults)
    ds = load_dataset(flags)
    cfg = model_config(flags, ds, mode="pt2")
    backbone = get_backbone(flags, cfg)
    seeds = seed_list(flags, seeds_default or [int(flags["seed"])])
    return flags, ds, cfg, backbone, seeds


def cmd_ablate(args, out: Path) -> int:
    flags, ds, cfg, backbone, seeds = _experiment(args)
    report = run_experiment(train_config(flags), ds, ABLATION_ARMS, cfg, backbone, seeds, "dev", workers())
    (out / "ablation.csv").write_text(report.to_csv())
    table = report_table(report, f"ablation on {ds.name}")
    (out / "ablation.txt").write_text(table)
    write_manifest(out, "ablate", flags, seeds, "ablation", ds.fingerprint(), ["ablation.csv", "ablation.txt"])
    print(table, end="")
    return 0


def cmd_fewshot(args, out: Path) -> int:
    flags, ds, cfg, backbone, seeds = _experiment(args, SEEDS, {"batch": 2})
    if ds.task_kind != SEQUENCE:
        raise UsageError("fewshot needs a sequence classification task")
    arms = flags["arms"].split(",") if flags["arms"] else ["pt2", "apt"]
    bad = [a for a in arms if a not in GATE_MODES or a == "pt2_star"]
    if bad:
        raise UsageError(f"unsupported fewshot arms: {bad}")
    tc = train_config(flags)
    outputs, tables, splits = [], [], {}
    for k in _ints(flags["k"]):
        runs = []
        for seed in seeds:
            try:
                sampled = kshot_sample(ds, k, seed)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            splits[f"k{k}_seed{seed}"] = sampled.fingerprint()
            rep = run_experiment(replace(tc, seed=seed), sampled, arms, cfg, backbone, [seed], "test", workers())
            runs.extend(rep.runs)
        runs.sort(key=lambda r: arms.index(r.arm))
        report = ExperimentReport(rep.metric_name, runs)
        name = f"fewshot_k{k}.csv"
        (out / name).write_text(report.to_csv())
        outputs.append(name)
        tables.append(report_table(report, f"{k}-shot on {ds.name}"))
    (out / "splits.json").write_text(json.dumps(splits, indent=2, sort_keys=True) + "\n")
    (out / "fewshot.txt").write_text("\n".join(tables))
    write_manifest(out, "fewshot", flags, seeds, ",".join(arms), ds.fingerprint(),
                   outputs + ["splits.json", "fewshot.txt"])
    print("\n".join(tables), end="")
    return 0


def cmd_sweep(args, out: Path) -> int:
    flags, ds, cfg, backbone, seeds = _experiment(args)
    arms = flags["arms"].split(",") if flags["arms"] else ["apt", "pt2"]
    lines = ["mode,prefix_len,seed,metric"]
    for arm in arms:
        for length in _ints(flags["lengths"]):
            rep = run_experiment(train_config(flags), ds, [arm], replace(cfg, prefix_len=length), backbone,
                                 seeds, "dev", workers())
            for r in rep.runs:
                lines.append(f"{arm},{length},{r.seed},{r.metric:.17g}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out, "sweep", flags, seeds, ",".join(arms), ds.fingerprint(), ["sweep.csv"])
    print("\n".join(lines))
    return 0


def cmd_probe(args, out: Path) -> int:
    flags, explicit = resolve_flags(args)
    model_ckpt = ckpt_io.load(flags["checkpoint"])
    # rebuild the training data unless the caller points elsewhere
    for key in ("task", "n", "data_seed", "data"):
        if key not in explicit and key in model_ckpt.meta:
            flags[key] = model_ckpt.meta[key]
    ds = load_dataset(flags)
    model = ckpt_io.to_model(model_ckpt)
    if len(ds.vocab) != model.config.vocab_size:
        raise UsageError("dataset vocabulary does not match the checkpoint")
    try:
        report = collect_gates(model, ds.splits[flags["split"]], dataset_id=f"{ds.name}:{flags['split']}",
                               checkpoint_id=Path(flags["checkpoint"]).name)
    except NoGatesError as exc:
        raise UsageError(str(exc)) from None
    written = export_heatmap(report, out / "heatmap.csv")
    plan = derive_variable_lengths(report, float(flags["tau"]), int(flags["min_len"]))
    (out / "plan.json").write_text(plan.to_json())
    star = build_pt2star_config(plan, replace(model.config, mode="pt2", prefix_lengths=None))
    counts = {"pt2": trainable_param_count(replace(model.config, mode="pt2", prefix_lengths=None)),
              "pt2_star": trainable_param_count(star)}
    write_manifest(out, "probe", flags, [], model.mode, ds.fingerprint(),
                   [p.name for p in written] + ["plan.json"])
    print(f"lengths={plan.lengths} tau={plan.tau} params pt2={counts['pt2']} pt2_star={counts['pt2_star']}")
    return 0


def cmd_params(args, out: Path) -> int:
    flags, _ = resolve_flags(args)
    ds = load_dataset(flags)
    cfg = model_config(flags, ds, mode="pt2")
    lines = ["mode,prefix_len_per_layer,trainable_params"]
    for mode in GATE_MODES:
        if mode == "pt2_star" and not flags["plan"]:
            continue
        mcfg = model_config(flags, ds, mode=mode) if mode == "pt2_star" else replace(cfg, mode=mode)
        lengths = "|".join(str(n) for n in mcfg.layer_prefix_lengths())
        lines.append(f"{mode},{lengths},{trainable_param_count(mcfg)}")
    (out / "params.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out, "params", flags, [], "all", ds.fingerprint(), ["params.csv"])
    print("\n".join(lines))
    return 0


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "sweep": cmd_sweep,
    "params": cmd_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"aptune {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"aptune {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
