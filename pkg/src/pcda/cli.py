"""Command-line entry point: synth | project | mix | train | pseudo-label | eval | ablate.

Every command accepts --config pointing at a key=value text file; unknown
keys are an error so typos never pass silently. All outputs are written
with fixed numeric formats, so any command re-run with identical config,
inputs, and seed produces byte-identical files. Exit codes: 0 success,
1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import dataio, metrics, mixup
from .alignment import DegenerateNorm
from .encoder import (
    NoValidLabels,
    TrainConfig,
    forward,
    load_checkpoint,
    pseudo_labels,
    save_checkpoint,
    train,
)
from .mixup import MixConfig, MixRecipe, hybrid_mix, instance_mix, laser_mix, polar_mix, range_mix
from .projection import OutOfBounds, project_to_views
from .synth import DomainParams, default_source_params, default_target_params, gen_domain_pair

DATA_ERRORS = (
    dataio.DataIOError,
    OutOfBounds,
    mixup.NoMasksAvailable,
    DegenerateNorm,
    NoValidLabels,
    OSError,
    ValueError,
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

_DOMAIN_FIELDS = (
    ("beam_count", int),
    ("azimuth_steps", int),
    ("pitch_lo", float),
    ("pitch_hi", float),
    ("object_lo", int),
    ("object_hi", int),
    ("object_scale", float),
    ("coord_noise", float),
    ("feature_noise", float),
    ("class_embed_seed", int),
    ("domain_seed", int),
)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _config_schema() -> dict:
    schema = {
        # paths
        "source_manifest": (str, None),
        "target_manifest": (str, None),
        "eval_manifest": (str, None),
        "pseudo_manifest": (str, None),
        # training
        "batch_size": (int, 8),
        "learning_rate": (float, 0.01),
        "lam": (float, 1.0),
        "epochs": (int, 8),
        "mixed_proportion": (float, 0.5),
        "tau": (float, 0.9),
        "seed": (int, 0),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "weight_decay": (float, 0.01),
        "hidden_width": (int, 32),
        # mixing
        "weight_polar": (float, 1.0),
        "weight_range": (float, 1.0),
        "weight_laser": (float, 1.0),
        "weight_instance": (float, 1.0),
        "instance_lo": (int, 20),
        "instance_hi": (int, 30),
        # synthesis and experiments
        "scenes": (int, 40),
        "num_classes": (int, 6),
        "seeds": (int, 5),
        "pseudo_epochs": (int, 3),
        "pseudo_restart": (_parse_bool, False),
    }
    src = default_source_params()
    tgt = default_target_params()
    for name, typ in _DOMAIN_FIELDS:
        schema[f"source_{name}"] = (typ, getattr(src, name))
        schema[f"target_{name}"] = (typ, getattr(tgt, name))
    return schema


class RunConfig:
    """key=value config file over documented keys; unknown keys are an error."""

    def __init__(self, values: dict):
        self.values = values

    @staticmethod
    def load(path: str | None) -> "RunConfig":
        schema = _config_schema()
        values = {key: default for key, (_, default) in schema.items()}
        if path is not None:
            with open(path) as fh:
                for line_no, raw in enumerate(fh, start=1):
                    line = raw.strip()
                    if not line or line.startswith("#"):
                        continue
                    if "=" not in line:
                        raise UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
                    key, _, val = line.partition("=")
                    key = key.strip()
                    val = val.strip()
                    if key not in schema:
                        raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
                    try:
                        values[key] = schema[key][0](val)
                    except ValueError as exc:
                        raise UsageError(f"{path}:{line_no}: bad value for {key}: {exc}") from None
        return RunConfig(values)

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self, seed: int | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["batch_size"],
            learning_rate=v["learning_rate"],
            lam=v["lam"],
            epochs=v["epochs"],
            mixed_proportion=v["mixed_proportion"],
            tau=v["tau"],
            seed=v["seed"] if seed is None else seed,
            beta1=v["beta1"],
            beta2=v["beta2"],
            eps=v["eps"],
            weight_decay=v["weight_decay"],
            hidden_width=v["hidden_width"],
        )

    def mix_config(self, seed: int | None = None, weights=None) -> MixConfig:
        v = self.values
        if weights is None:
            weights = (v["weight_polar"], v["weight_range"], v["weight_laser"], v["weight_instance"])
        return MixConfig(
            weights=np.asarray(weights, dtype=np.float64),
            instance_lo=v["instance_lo"],
            instance_hi=v["instance_hi"],
            seed=v["seed"] if seed is None else seed,
        )

    def domain_params(self, prefix: str) -> DomainParams:
        kwargs = {name: self.values[f"{prefix}_{name}"] for name, _ in _DOMAIN_FIELDS}
        return DomainParams(num_classes=self.values["num_classes"], **kwargs)


def _require(cfg: RunConfig, key: str) -> str:
    val = cfg[key]
    if val is None:
        raise UsageError(f"config key {key!r} is required for this command")
    return val


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    seed = cfg["seed"] if args.seed is None else args.seed
    gen_domain_pair(
        cfg.domain_params("source"),
        cfg.domain_params("target"),
        scenes_per_domain=cfg["scenes"],
        seed=seed,
        out_dir=args.out,
    )
    return 0


def cmd_project(cfg: RunConfig, args) -> int:
    samples = dataio.load_samples(args.infile)
    lines = []
    for s in samples:
        proj = project_to_views(s.cloud, s.views) if s.views else None
        for i in range(s.cloud.n):
            if proj is not None and proj.visible[i]:
                lines.append(
                    f"{s.sample_id} {i} {proj.view_index[i]} "
                    f"{proj.uv[i, 0]:.6f} {proj.uv[i, 1]:.6f} {proj.depth[i]:.6f} 1"
                )
            else:
                lines.append(f"{s.sample_id} {i} -1 - - - 0")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return 0


def cmd_mix(cfg: RunConfig, args) -> int:
    samples = {s.sample_id: s for s in dataio.load_samples(args.infile)}
    for sid in (args.a, args.b):
        if sid not in samples:
            raise UsageError(f"sample id {sid} not present in {args.infile}")
    a, b = samples[args.a], samples[args.b]
    seed = cfg["seed"] if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    mix_cfg = cfg.mix_config(seed=seed)
    if args.strategy == "polar":
        mixed = polar_mix(a, b, args.theta0, seed=seed)
    elif args.strategy == "range":
        if args.r0 is None:
            raise UsageError("--r0 is required for the range strategy")
        mixed = range_mix(a, b, args.r0, seed=seed)
    elif args.strategy == "laser":
        mixed = laser_mix(a, b, args.phi0, seed=seed)
    elif args.strategy == "instance":
        mixed = instance_mix(a, b, mix_cfg, rng)
    else:
        mixed = hybrid_mix(a, b, mix_cfg, rng)
    dataio.write_point_cloud(args.out + ".pcda", mixed.cloud)
    with open(args.out + ".recipe.txt", "w") as fh:
        fh.write(mixed.recipe.to_line() + "\n")
    with open(args.out + ".provenance.txt", "w") as fh:
        fh.write("\n".join(f"{sid} {idx}" for sid, idx in mixed.provenance) + "\n")
    return 0


def _load_train_data(cfg: RunConfig):
    source = dataio.load_samples(_require(cfg, "source_manifest"))
    target_manifest = _require(cfg, "target_manifest")
    pseudo_manifest = cfg["pseudo_manifest"]
    if pseudo_manifest is not None:
        target = dataio.load_samples(pseudo_manifest)
        use_target_labels = True
    else:
        target = dataio.load_samples(target_manifest)
        use_target_labels = False
    eval_manifest = cfg["eval_manifest"] or target_manifest
    eval_samples = dataio.load_samples(eval_manifest)
    return source, target, use_target_labels, eval_samples


def cmd_train(cfg: RunConfig, args) -> int:
    source, target, use_target_labels, eval_samples = _load_train_data(cfg)
    seed = cfg["seed"] if args.seed is None else args.seed
    init = load_checkpoint(args.model) if args.model else None
    result = train(
        source,
        target,
        cfg.mix_config(seed=seed),
        cfg.train_config(seed=seed),
        num_classes=cfg["num_classes"],
        eval_samples=eval_samples,
        init=init,
        use_target_labels=use_target_labels,
    )
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "checkpoint.padm"), result.encoder, result.head)
    with open(os.path.join(args.out, "loss_log.txt"), "w") as fh:
        fh.write("\n".join(result.log_lines) + "\n")
    return 0


def cmd_pseudo_label(cfg: RunConfig, args) -> int:
    enc, head = load_checkpoint(args.model)
    entries = dataio.read_manifest(args.infile)
    samples = [e.load() for e in entries]
    relabeled, fraction = pseudo_labels(enc, head, samples, cfg["tau"])
    os.makedirs(args.out, exist_ok=True)
    new_entries = []
    for entry, sample in zip(entries, relabeled):
        cloud_path = os.path.join(args.out, f"pseudo_{sample.sample_id}.pcda")
        dataio.write_point_cloud(cloud_path, sample.cloud)
        new_entries.append(
            dataio.ManifestEntry(
                sample_id=entry.sample_id, domain=entry.domain, cloud_path=cloud_path, views=entry.views
            )
        )
    manifest_path = os.path.join(args.out, "pseudo_manifest.txt")
    dataio.write_manifest(manifest_path, new_entries)
    with open(os.path.join(args.out, "pseudo_stats.txt"), "w") as fh:
        fh.write(f"kept_fraction {fraction:.6f}\n")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    enc, head = load_checkpoint(args.model)
    samples = dataio.load_samples(args.infile)
    cm = metrics.ConfusionMatrix(head.num_classes)
    for s in samples:
        if s.cloud.labels is None or s.cloud.n == 0:
            continue
        _, logits = forward(enc, head, s.cloud)
        metrics.accumulate(cm, s.cloud.labels, np.argmax(logits, axis=1))
    with open(args.out, "w") as fh:
        fh.write(metrics.report(cm))
    return 0


# Ablation settings: (name, alignment on, mix weights or None, pseudo stage)
ABLATION_SETTINGS = (
    ("source-only", False, None, False),
    ("align", True, None, False),
    ("align+scene", True, (1.0, 1.0, 1.0, 0.0), False),
    ("align+instance", True, (0.0, 0.0, 0.0, 1.0), False),
    ("align+hybrid", True, (1.0, 1.0, 1.0, 1.0), False),
    ("hybrid+pseudo", True, (1.0, 1.0, 1.0, 1.0), True),
)


def run_ablation(cfg: RunConfig, source, target, eval_samples, seeds: int) -> dict:
    """Run every ablation setting over `seeds` seeds.

    Returns {setting name: [final target mIoU per seed]}. The pseudo-label
    setting reuses the matching hybrid run's model per seed: it relabels the
    target set with it and fine-tunes.
    """
    num_classes = cfg["num_classes"]
    results = {name: [] for name, *_ in ABLATION_SETTINGS}
    hybrid_models = {}
    for seed_idx in range(seeds):
        seed = cfg["seed"] + seed_idx
        for name, use_align, weights, pseudo in ABLATION_SETTINGS:
            if pseudo:
                enc, head = hybrid_models[seed_idx]
                relabeled, _ = pseudo_labels(enc, head, target, cfg["tau"])
                ft_cfg = replace(cfg.train_config(seed=seed), epochs=cfg["pseudo_epochs"], seed=seed + 500)
                init = None if cfg["pseudo_restart"] else (enc, head)
                result = train(
                    source,
                    relabeled,
                    cfg.mix_config(seed=seed, weights=weights),
                    ft_cfg,
                    num_classes=num_classes,
                    eval_samples=eval_samples,
                    init=init,
                    use_target_labels=True,
                )
            else:
                tcfg = cfg.train_config(seed=seed)
                if not use_align:
                    tcfg = replace(tcfg, lam=0.0)
                if weights is None:
                    tcfg = replace(tcfg, mixed_proportion=0.0)
                result = train(
                    source,
                    target if use_align else [],
                    cfg.mix_config(seed=seed, weights=weights) if weights is not None else None,
                    tcfg,
                    num_classes=num_classes,
                    eval_samples=eval_samples,
                )
                if name == "align+hybrid":
                    hybrid_models[seed_idx] = (result.encoder, result.head)
            results[name].append(result.target_mious[-1])
    return results


def format_ablation_table(results: dict, seeds: int) -> str:
    header = "setting " + " ".join(f"seed{i}" for i in range(seeds)) + " median"
    lines = [header]
    for name, _, _, _ in ABLATION_SETTINGS:
        vals = results[name]
        med = float(np.median(vals))
        lines.append(name + " " + " ".join(f"{v:.6f}" for v in vals) + f" {med:.6f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig, args) -> int:
    source = dataio.load_samples(_require(cfg, "source_manifest"))
    target = dataio.load_samples(_require(cfg, "target_manifest"))
    eval_manifest = cfg["eval_manifest"] or cfg["target_manifest"]
    eval_samples = dataio.load_samples(eval_manifest)
    seeds = cfg["seeds"] if args.seeds is None else args.seeds
    results = run_ablation(cfg, source, target, eval_samples, seeds)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
        fh.write(format_ablation_table(results, seeds))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcda", description="Cross-domain point cloud adaptation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, helptext, **flags):
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", default=None, help="key=value config file (defaults documented in README)")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        return p

    add(
        "synth",
        "Generate a synthetic source/target domain pair.",
        **{
            "--out": dict(required=True, help="output directory"),
            "--seed": dict(type=int, default=None, help="override config seed"),
        },
    )
    add(
        "project",
        "Dump per-point uv/depth/visibility for every sample of a manifest.",
        **{
            "--in": dict(required=True, dest="infile", help="input manifest"),
            "--out": dict(required=True, help="output text file"),
        },
    )
    add(
        "mix",
        "Mix two samples of a manifest and write cloud, recipe, and provenance.",
        **{
            "--in": dict(required=True, dest="infile", help="input manifest"),
            "--a": dict(type=int, required=True, help="first sample id (donor for instance mixing)"),
            "--b": dict(type=int, required=True, help="second sample id (recipient for instance mixing)"),
            "--strategy": dict(
                choices=["polar", "range", "laser", "instance", "hybrid"], default="hybrid", help="mix strategy"
            ),
            "--theta0": dict(type=float, default=0.0, help="polar split angle in radians"),
            "--r0": dict(type=float, default=None, help="range split radius in meters"),
            "--phi0": dict(type=float, default=0.0, help="laser split pitch in radians"),
            "--seed": dict(type=int, default=None, help="override config seed"),
            "--out": dict(required=True, help="output path prefix"),
        },
    )
    add(
        "train",
        "Train the point encoder on the configured source/target manifests.",
        **{
            "--out": dict(required=True, help="output directory for checkpoint.padm and loss_log.txt"),
            "--model": dict(default=None, help="optional checkpoint to fine-tune from"),
            "--seed": dict(type=int, default=None, help="override config seed"),
        },
    )
    add(
        "pseudo-label",
        "Relabel a target manifest with confident model predictions.",
        **{
            "--model": dict(required=True, help="trained checkpoint"),
            "--in": dict(required=True, dest="infile", help="target manifest"),
            "--out": dict(required=True, help="output directory"),
        },
    )
    add(
        "eval",
        "Evaluate a checkpoint on a labeled manifest and write the IoU report.",
        **{
            "--model": dict(required=True, help="trained checkpoint"),
            "--in": dict(required=True, dest="infile", help="labeled manifest"),
            "--out": dict(required=True, help="output report file"),
        },
    )
    add(
        "ablate",
        "Run the ablation settings over several seeds and write the comparison table.",
        **{
            "--out": dict(required=True, help="output directory"),
            "--seeds": dict(type=int, default=None, help="number of seeds (default from config)"),
        },
    )
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "mix": cmd_mix,
    "train": cmd_train,
    "pseudo-label": cmd_pseudo_label,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = RunConfig.load(args.config)
        return _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
