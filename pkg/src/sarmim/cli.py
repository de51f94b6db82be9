"""Command-line entry point.

Subcommands: ``gen``, ``features``, ``pretrain``, ``probe``, ``attn``,
``sweep``. Each run takes a JSON config whose keys mirror the config
dataclasses, applies flag overrides (flags > file > defaults), writes its
outputs plus rendered figures under ``--out``, and drops a
``run_manifest.json`` recording the resolved config, a content hash of the
inputs, the seed, and the artifact paths.

Exit codes: 0 success, 1 validation error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime, timezone
from itertools import product
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import dataio, plots
from .errors import DivergenceError, SarMimError, ValidationError
from .evaluation import ProbeConfig, attention_distance, evaluate_few_shot
from .features import (FEATURE_KINDS, RoaKernelBank, compute_target, target_dim)
from .imagery import AugConfig, SceneSpec, SHAPE_CLASSES, generate_scene
from .masking import PatchGrid
from .model import ModelConfig, load_checkpoint
from .trainer import PretrainConfig, pretrain
from .util import derive_seed, hash_paths, read_json, write_json

MODEL_SIZES = {
    "tiny": dict(embed_dim=64, encoder_depth=2, predictor_depth=1, heads=4),
    "small": dict(embed_dim=96, encoder_depth=3, predictor_depth=2, heads=4),
    "base": dict(embed_dim=128, encoder_depth=4, predictor_depth=2, heads=4),
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors through ValidationError."""

    def error(self, message):
        raise ValidationError(f"{message}\n{self.format_usage()}")


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(out: Path, command: str, config: dict, inputs: list,
                    seed: int, artifacts: list[str], started: str) -> None:
    write_json(out / "run_manifest.json", {
        "command": command,
        "config": config,
        "input_hash": hash_paths(inputs),
        "seed": seed,
        "artifacts": sorted(artifacts),
        "started_at": started,
        "finished_at": _utcnow(),
    })


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {path}")
    cfg = read_json(p)
    if not isinstance(cfg, dict):
        raise ValidationError(f"config file must hold a JSON object: {path}")
    return cfg


def _override(cfg: dict, **flags) -> dict:
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


# ---------------------------------------------------------------------------
# gen


def _cmd_gen(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    _override(cfg, seed=args.seed)
    cfg.setdefault("image_size", 64)
    cfg.setdefault("num_images", 200)
    cfg.setdefault("looks", 1)
    cfg.setdefault("target_reflectivity", 2.5)
    cfg.setdefault("clutter_reflectivity", 1.0)
    cfg.setdefault("labeled", False)
    cfg.setdefault("split", "train")
    cfg.setdefault("format", "f32")
    cfg.setdefault("seed", 0)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = SceneSpec(
        image_size=cfg["image_size"],
        target_reflectivity=cfg["target_reflectivity"],
        clutter_reflectivity=cfg["clutter_reflectivity"],
        looks=cfg["looks"],
    )
    if "size_range" in cfg:
        base = replace(base, size_range=tuple(cfg["size_range"]))
    if "orientation_range" in cfg:
        base = replace(base, orientation_range=tuple(cfg["orientation_range"]))

    images, labels = [], []
    for i in range(cfg["num_images"]):
        spec = replace(base, class_id=i % len(SHAPE_CLASSES))
        img, label = generate_scene(spec, derive_seed(cfg["seed"], "gen", i))
        images.append(img)
        labels.append(label)
    class_names = (list(SHAPE_CLASSES) if cfg["labeled"]
                   else [dataio.UNLABELED_CLASS])
    if not cfg["labeled"]:
        labels = [0] * len(labels)
    split_dir = dataio.save_dataset(out, cfg["split"], images, labels,
                                    class_names, fmt=cfg["format"])
    _write_manifest(out, "gen", cfg, [args.config] if args.config else [],
                    cfg["seed"], [str(split_dir)], started)
    print(f"wrote {len(images)} images under {split_dir}")
    return 0


# ---------------------------------------------------------------------------
# features


def _cmd_features(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    _override(cfg, feature=args.feature, epsilon=args.epsilon, input=args.input,
              seed=args.seed)
    if args.scales is not None:
        cfg["scales"] = _csv_ints(args.scales)
    cfg.setdefault("feature", "grlin")
    cfg.setdefault("scales", [5, 9, 13, 17])
    cfg.setdefault("epsilon", 1e-2)
    cfg.setdefault("patch_side", 8)
    cfg.setdefault("seed", 0)
    if cfg["feature"] not in FEATURE_KINDS:
        raise ValidationError(
            f"feature must be one of {FEATURE_KINDS}, got {cfg['feature']!r}")
    if "input" not in cfg:
        raise ValidationError("features needs --input pointing at an image file")

    img = dataio.read_image(cfg["input"])
    kernel_kind = {"grgau": "gaussian"}.get(cfg["feature"], "linear")
    bank = RoaKernelBank(scales=tuple(cfg["scales"]), kernel_kind=kernel_kind,
                         epsilon=cfg["epsilon"])
    tf = compute_target(img, cfg["feature"], bank, cfg["patch_side"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(cfg["input"]).stem
    raw_path = out / f"{stem}_{cfg['feature']}.f32"
    raw_path.write_bytes(tf.astype("<f4").tobytes())
    write_json(out / f"{stem}_{cfg['feature']}.json", {
        "channels": int(tf.shape[0]),
        "height": int(tf.shape[1]),
        "width": int(tf.shape[2]),
        "scales": list(cfg["scales"]),
        "kernel_kind": kernel_kind,
        "epsilon": cfg["epsilon"],
    })
    panel = out / f"{stem}_{cfg['feature']}.png"
    plots.feature_panel(img, tf, panel)
    _write_manifest(out, "features", cfg,
                    [p for p in (args.config, cfg["input"]) if p],
                    cfg["seed"], [str(raw_path), str(panel)], started)
    print(f"wrote {tf.shape[0]}-channel feature to {raw_path}")
    return 0


# ---------------------------------------------------------------------------
# pretrain


def _pretrain_configs(cfg: dict) -> tuple[PretrainConfig, ModelConfig]:
    try:
        aug = AugConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in cfg.get("aug", {}).items()})
    except TypeError as exc:
        raise ValidationError(f"bad aug config: {exc}") from exc
    fields = dict(
        base_lr=cfg.get("base_lr", 1e-3),
        weight_decay=cfg.get("weight_decay", 0.05),
        betas=tuple(cfg.get("betas", (0.9, 0.95))),
        batch_size=cfg.get("batch_size", 32),
        epochs=cfg.get("epochs", 50),
        warmup_epochs=cfg.get("warmup_epochs", 5),
        windows_per_image=cfg.get("windows_per_image", 4),
        window_side=cfg.get("window_side", 4),
        mask_mode=cfg.get("mask_mode", "local"),
        mask_ratio=cfg.get("mask_ratio", 0.75),
        target_kind=cfg.get("target_kind", "grlin"),
        scales=tuple(cfg.get("scales", (5, 9, 13, 17))),
        epsilon=cfg.get("epsilon", 1e-2),
        seed=cfg.get("seed", 0),
        checkpoint_every=cfg.get("checkpoint_every", 0),
        aug=aug,
    )
    if cfg.get("paper_faithful"):
        fields.update(epochs=200, warmup_epochs=20, batch_size=300)
    pcfg = PretrainConfig(**fields)

    model_fields = dict(cfg.get("model", {}))
    model_fields.setdefault("patch_side", 8)
    model_fields.setdefault("window_side", 8)
    if cfg.get("paper_faithful"):
        model_fields["paper_faithful"] = True
    model_fields["target_dim"] = target_dim(
        pcfg.target_kind, model_fields["patch_side"], pcfg.bank())
    try:
        return pcfg, ModelConfig(**model_fields)
    except TypeError as exc:
        raise ValidationError(f"bad model config: {exc}") from exc


def _cmd_pretrain(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    _override(cfg, seed=args.seed, mask_mode=args.mask, mask_ratio=args.mask_ratio,
              target_kind=args.feature, epsilon=args.epsilon)
    if args.scales is not None:
        cfg["scales"] = _csv_ints(args.scales)
    if args.paper_faithful:
        cfg["paper_faithful"] = True
    if "data_dir" not in cfg:
        raise ValidationError("pretrain config needs data_dir")
    pcfg, mcfg = _pretrain_configs(cfg)
    pcfg.validate()

    images, _, _ = dataio.load_dataset(cfg["data_dir"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, log = pretrain(images, pcfg, mcfg, out_dir=out)
    plots.loss_curve(log.records, out / "loss_curve.png")
    resolved = dict(cfg)
    resolved.update(asdict(pcfg))
    resolved["model"] = asdict(mcfg)
    _write_manifest(out, "pretrain", resolved,
                    [p for p in (args.config, cfg["data_dir"]) if p],
                    pcfg.seed,
                    [str(out / "runlog.csv"), str(out / "final"),
                     str(out / "loss_curve.png")], started)
    final = log.records[-1]
    print(f"pretrained {pcfg.epochs} epochs; final loss {final.loss:.4f}, "
          f"checkpoint at {out / 'final'}")
    return 0


# ---------------------------------------------------------------------------
# probe


def _cmd_probe(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    _override(cfg, seed=args.seed, mode=args.mode, repeats=args.repeats)
    if args.shots is not None:
        cfg["shots"] = _csv_ints(args.shots)
    cfg.setdefault("shots", [10])
    cfg.setdefault("repeats", 10)
    cfg.setdefault("mode", "linear")
    cfg.setdefault("seed", 0)
    for key in ("checkpoint", "data_dir"):
        if key not in cfg:
            raise ValidationError(f"probe config needs {key}")

    model, _ = load_checkpoint(cfg["checkpoint"])
    images, labels, _ = dataio.load_dataset(cfg["data_dir"])
    probe_cfg = ProbeConfig(
        mode=cfg["mode"],
        lr=cfg.get("lr", 1e-3),
        weight_decay=cfg.get("weight_decay", 5e-4),
        betas=tuple(cfg.get("betas", (0.9, 0.999))),
        batch_size=cfg.get("batch_size", 50),
        epochs=cfg.get("epochs", 40),
        warmup_epochs=cfg.get("warmup_epochs", 2),
        warmup_lr=cfg.get("warmup_lr", 1e-5),
    )
    rows, summary = evaluate_few_shot(model, images, labels, cfg["shots"],
                                      repeats=cfg["repeats"], cfg=probe_cfg,
                                      base_seed=cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv",
               ["shots", "repeat", "seed", "mode", "accuracy"], rows)
    plots.probe_accuracy(rows, out / "accuracy_vs_shots.png")
    _write_manifest(out, "probe", cfg,
                    [p for p in (args.config, cfg["checkpoint"], cfg["data_dir"]) if p],
                    cfg["seed"],
                    [str(out / "metrics.csv"), str(out / "accuracy_vs_shots.png")],
                    started)
    for n, (mean, std) in summary.items():
        print(f"{n}-shot {cfg['mode']}: {mean:.4f} +/- {std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# attn


def _cmd_attn(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    _override(cfg, seed=args.seed)
    cfg.setdefault("num_images", 16)
    cfg.setdefault("seed", 0)
    for key in ("checkpoint", "data_dir"):
        if key not in cfg:
            raise ValidationError(f"attn config needs {key}")

    model, _ = load_checkpoint(cfg["checkpoint"])
    images, _, _ = dataio.load_dataset(cfg["data_dir"])
    rng = np.random.default_rng(derive_seed(cfg["seed"], "attn"))
    count = min(cfg["num_images"], len(images))
    chosen = rng.choice(len(images), size=count, replace=False)
    dist = attention_distance(model, [images[i] for i in chosen])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"layer": layer + 1, "head": head,
             "mean_distance_px": float(dist[layer, head])}
            for layer in range(dist.shape[0]) for head in range(dist.shape[1])]
    _write_csv(out / "attn.csv", ["layer", "head", "mean_distance_px"], rows)
    plots.attention_distances(dist, out / "attn_distance.png")
    _write_manifest(out, "attn", cfg,
                    [p for p in (args.config, cfg["checkpoint"], cfg["data_dir"]) if p],
                    cfg["seed"],
                    [str(out / "attn.csv"), str(out / "attn_distance.png")], started)
    print(f"attention distances for {dist.shape[0]} layers x {dist.shape[1]} heads "
          f"written to {out / 'attn.csv'}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _run_sweep_point(payload: dict) -> dict:
    """One sweep grid point: pretrain + probe. Module-level for pickling."""
    point = payload["point"]
    row = {"point": payload["index"], **point, "status": "ok", "error": ""}
    try:
        base = dict(payload["pretrain_cfg"])
        base["seed"] = payload["seed"]
        if "epochs" in point:
            base["epochs"] = point["epochs"]
        model_overrides = dict(base.get("model", {}))
        if "model_size" in point:
            if point["model_size"] not in MODEL_SIZES:
                raise ValidationError(
                    f"unknown model_size {point['model_size']!r}; "
                    f"expected one of {sorted(MODEL_SIZES)}")
            model_overrides.update(MODEL_SIZES[point["model_size"]])
        base["model"] = model_overrides
        pcfg, mcfg = _pretrain_configs(base)
        pcfg.validate()

        images, _, _ = dataio.load_dataset(payload["data_dir"])
        if "dataset_fraction" in point:
            keep = max(1, int(round(point["dataset_fraction"] * len(images))))
            images = images[:keep]
        model, _ = pretrain(images, pcfg, mcfg)

        probe_images, probe_labels, _ = dataio.load_dataset(payload["probe_data_dir"])
        probe_cfg = ProbeConfig(mode=payload["probe_mode"])
        _, summary = evaluate_few_shot(
            model, probe_images, probe_labels, [payload["shots"]],
            repeats=payload["repeats"], cfg=probe_cfg, base_seed=payload["seed"])
        mean, std = summary[payload["shots"]]
        row.update(n_images=len(images), epochs=pcfg.epochs,
                   mean_accuracy=mean, std_accuracy=std)
    except SarMimError as exc:
        row.update(status="error", error=str(exc), n_images=0, epochs=0,
                   mean_accuracy=float("nan"), std_accuracy=float("nan"))
    return row


def _cmd_sweep(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    _override(cfg, seed=args.seed)
    cfg.setdefault("seed", 0)
    cfg.setdefault("shots", 10)
    cfg.setdefault("repeats", 3)
    cfg.setdefault("probe_mode", "linear")
    axes = cfg.get("axes", {})
    allowed = {"dataset_fraction", "model_size", "epochs"}
    if not axes:
        raise ValidationError("sweep config needs a non-empty axes object")
    unknown = set(axes) - allowed
    if unknown:
        raise ValidationError(f"unknown sweep axes {sorted(unknown)}; "
                              f"allowed: {sorted(allowed)}")
    for key in ("data_dir", "probe_data_dir"):
        if key not in cfg:
            raise ValidationError(f"sweep config needs {key}")

    names = list(axes)
    points = [dict(zip(names, combo)) for combo in product(*(axes[n] for n in names))]
    payloads = [{
        "index": i,
        "point": point,
        "pretrain_cfg": cfg.get("pretrain", {}),
        "data_dir": cfg["data_dir"],
        "probe_data_dir": cfg["probe_data_dir"],
        "seed": cfg["seed"],
        "shots": cfg["shots"],
        "repeats": cfg["repeats"],
        "probe_mode": cfg["probe_mode"],
    } for i, point in enumerate(points)]

    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs,
                                 mp_context=get_context("spawn")) as pool:
            rows = list(pool.map(_run_sweep_point, payloads))
    else:
        rows = [_run_sweep_point(p) for p in payloads]
    rows.sort(key=lambda r: r["point"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = (["point"] + names +
               ["n_images", "epochs", "mean_accuracy", "std_accuracy",
                "status", "error"])
    _write_csv(out / "sweep.csv", columns, rows)
    artifacts = [str(out / "sweep.csv")]
    for axis in names:
        fig_path = out / f"scaling_{axis}.png"
        plots.sweep_curve(rows, axis, fig_path)
        artifacts.append(str(fig_path))
    _write_manifest(out, "sweep", cfg,
                    [p for p in (args.config, cfg["data_dir"],
                                 cfg["probe_data_dir"]) if p],
                    cfg["seed"], artifacts, started)
    failures = sum(1 for r in rows if r["status"] != "ok")
    print(f"swept {len(rows)} points ({failures} failed); results in "
          f"{out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="sarmim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed")

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p_gen)
    p_gen.set_defaults(func=_cmd_gen)

    p_feat = sub.add_parser("features", help="extract target features from one image")
    common(p_feat)
    p_feat.add_argument("--input", help="input image (.f32 or .png)")
    p_feat.add_argument("--feature", choices=FEATURE_KINDS)
    p_feat.add_argument("--scales", help="comma-separated half-sizes, e.g. 5,9,13,17")
    p_feat.add_argument("--epsilon", type=float)
    p_feat.set_defaults(func=_cmd_features)

    p_pre = sub.add_parser("pretrain", help="run masked pretraining")
    common(p_pre)
    p_pre.add_argument("--feature", choices=FEATURE_KINDS, help="target feature kind")
    p_pre.add_argument("--scales", help="comma-separated half-sizes")
    p_pre.add_argument("--epsilon", type=float)
    p_pre.add_argument("--mask", choices=("local", "global"))
    p_pre.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p_pre.add_argument("--paper-faithful", action="store_true", dest="paper_faithful")
    p_pre.set_defaults(func=_cmd_pretrain)

    p_probe = sub.add_parser("probe", help="few-shot probe a checkpoint")
    common(p_probe)
    p_probe.add_argument("--shots", help="comma-separated shot counts")
    p_probe.add_argument("--repeats", type=int)
    p_probe.add_argument("--mode", choices=("linear", "finetune"))
    p_probe.set_defaults(func=_cmd_probe)

    p_attn = sub.add_parser("attn", help="attention-distance analysis")
    common(p_attn)
    p_attn.set_defaults(func=_cmd_attn)

    p_sweep = sub.add_parser("sweep", help="pretrain+probe over a config grid")
    common(p_sweep)
    p_sweep.add_argument("--jobs", type=int, default=1,
                         help="parallel workers (results identical to sequential)")
    p_sweep.set_defaults(func=_cmd_sweep)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
