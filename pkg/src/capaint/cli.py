"""Pipeline orchestration CLI.

    capaint <generate|decipher|train-diffusion|augment|train-predict|report|
             scarcity|equal-volume> --config <path> [--seed N] [--mode M]

Stage outputs are content-addressed by config hash under the output root;
re-running an unchanged stage is a no-op. Exit codes: 0 success, 2 config
or usage error, 3 numeric/training failure, 4 data-integrity error.
"""

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .augment import SampleParams, SequenceRepository, baseline_augment, build_repository
from .config import ExperimentConfig, TRAIN_MODES, load_config
from .dataset import Dataset, load_dataset
from .decipher import (
    PartitionStore,
    decipher_dataset,
    load_reconstructor,
    save_reconstructor,
    train_reconstructor,
)
from .diffusion import (
    inpaint_call_count,
    linear_schedule,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)
from .errors import (
    CaPaintError,
    ConfigurationError,
    DataError,
    DataIntegrityError,
    DimensionError,
    NumericError,
    TrainingError,
    UsageError,
)
from .metrics import EvalReport, delta_percent, sequence_metrics
from .patches import PatchPartitionGeometry, mask_from_partition, save_mask
from .predictor import BackboneConfig, save_forecaster, train_backbone
from .seeding import derive_seed
from .synthetic import generate_reaction_diffusion

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INTEGRITY = 4


def _stage_ready(stage_dir: Path) -> bool:
    return (stage_dir / ".done").is_file()


def _finish_stage(stage_dir: Path, payload: dict) -> None:
    (stage_dir / "config.json").write_text(json.dumps(payload, indent=2, default=str))
    (stage_dir / ".done").write_text("ok\n")


def _dataset_dir(config: ExperimentConfig) -> Path:
    if config.dataset.kind == "existing":
        return Path(config.dataset.path)
    return config.stage_dir("dataset", config.dataset_key)


def cmd_generate(config: ExperimentConfig) -> Path:
    out = _dataset_dir(config)
    if config.dataset.kind == "existing":
        dataset = load_dataset(out)
        print(f"using existing dataset at {out} ({dataset.manifest.num_sequences} sequences)")
        return out
    if _stage_ready(out):
        print(f"dataset stage up to date: {out}")
        return out
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_reaction_diffusion(
        config.dataset.rd_config,
        config.dataset.num_sequences,
        out,
        name=config.dataset.name,
        split=config.dataset.split,
        split_seed=config.dataset.split_seed,
    )
    dataset = load_dataset(out)
    splits = {name: len(dataset.split_ids(name)) for name in ("train", "val", "test")}
    _finish_stage(out, {"dataset": config.raw["dataset"], "splits": splits})
    print(
        f"generated {manifest.num_sequences} sequences of shape {manifest.shape} "
        f"(raw range {manifest.normalization[0]:.4g}..{manifest.normalization[1]:.4g})"
    )
    print(f"splits: {splits}")
    return out


def _ensure_dataset(config: ExperimentConfig) -> Dataset:
    return load_dataset(cmd_generate(config))


def cmd_decipher(config: ExperimentConfig) -> Path:
    dataset = _ensure_dataset(config)
    stage = config.stage_dir("decipher", config.decipher_key)
    if _stage_ready(stage):
        print(f"decipher stage up to date: {stage}")
        return stage
    stage.mkdir(parents=True, exist_ok=True)
    train_ids = dataset.split_ids("train")
    frames = np.concatenate([dataset.load(sid).frames for sid in train_ids], axis=0)
    print(f"training reconstructor on {frames.shape[0]} frames")
    model, history = train_reconstructor(frames, config.reconstructor)
    save_reconstructor(model, stage / "reconstructor.ckpt")
    store = decipher_dataset(
        model, dataset, config.causal_fraction, stage / "partitions", source_ids=train_ids
    )
    preview_dir = stage / "mask_previews"
    preview_dir.mkdir(exist_ok=True)
    geometry = model.geometry
    for sid in train_ids[:1]:
        for part in store.load(sid)[:3]:
            mask = mask_from_partition(part.environmental, geometry)
            save_mask(mask, preview_dir / f"mask_{sid}_{part.frame_index}.u8")
    (stage / "history.json").write_text(json.dumps(history, indent=2))
    _finish_stage(
        stage,
        {
            "decipher": config.raw["decipher"],
            "dataset_key": config.dataset_key,
            "final_probe_loss": history["probe_loss"][-1],
        },
    )
    print(
        f"reconstruction probe loss {history['probe_loss'][0]:.6f} -> "
        f"{history['probe_loss'][-1]:.6f}; partitions for {len(train_ids)} sequences"
    )
    return stage


def cmd_train_diffusion(config: ExperimentConfig) -> Path:
    dataset = _ensure_dataset(config)
    stage = config.stage_dir("diffusion", config.diffusion_key)
    if _stage_ready(stage):
        print(f"diffusion stage up to date: {stage}")
        return stage
    stage.mkdir(parents=True, exist_ok=True)
    train_ids = dataset.split_ids("train")
    frames = np.concatenate([dataset.load(sid).frames for sid in train_ids], axis=0)
    schedule = linear_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    print(f"training denoiser on {frames.shape[0]} frames, {schedule.num_steps} steps")
    model, history = train_denoiser(frames, schedule, config.denoiser)
    save_denoiser(model, stage / "denoiser.ckpt")
    (stage / "history.json").write_text(json.dumps(history, indent=2))
    _finish_stage(
        stage,
        {
            "diffusion": config.raw["diffusion"],
            "dataset_key": config.dataset_key,
            "final_probe_loss": history["probe_loss"][-1],
        },
    )
    print(
        f"denoising probe loss {history['probe_loss'][0]:.6f} -> "
        f"{history['probe_loss'][-1]:.6f}"
    )
    return stage


def cmd_augment(config: ExperimentConfig) -> Path:
    dataset = _ensure_dataset(config)
    decipher_stage = cmd_decipher(config)
    diffusion_stage = cmd_train_diffusion(config)
    stage = config.stage_dir("repo", config.repo_key)
    if _stage_ready(stage):
        print(f"augment stage up to date: {stage}")
        return stage
    model = load_denoiser(diffusion_stage / "denoiser.ckpt")
    store = PartitionStore(decipher_stage / "partitions")
    before = inpaint_call_count()
    repo = build_repository(
        dataset,
        store,
        model,
        config.num_copies,
        stage,
        base_seed=config.augment_seed,
        resample_count=config.resample_count,
        workers=config.augment_workers,
    )
    calls = inpaint_call_count() - before
    _finish_stage(
        stage,
        {
            "augment": config.raw["augment"],
            "repo_key": config.repo_key,
            "inpaint_calls": calls,
        },
    )
    entries = len(repo.sources) * (repo.num_copies + 1)
    print(
        f"repository: {len(repo.sources)} sources x {repo.num_copies + 1} copies = "
        f"{entries} entries ({calls} frame inpaint calls)"
    )
    return stage


def _train_split_prefix(dataset: Dataset, fraction: float) -> list[str]:
    train_ids = dataset.split_ids("train")
    count = max(1, math.ceil(fraction * len(train_ids)))
    return train_ids[:count]


def _evaluate_on_test(config: ExperimentConfig, dataset: Dataset, model) -> dict:
    lo, hi = dataset.manifest.normalization
    data_range = hi - lo
    task = config.task
    per_metric = {"mae": [], "mse": [], "ssim": [], "psnr": []}
    for sid in dataset.split_ids("test"):
        seq = dataset.load(sid)
        context = seq.frames[: task.context_len]
        target = seq.frames[task.context_len : task.context_len + task.forecast_len]
        pred = model.forecast(context)
        pred_raw = (np.asarray(pred, dtype=np.float64) + 1.0) * (data_range / 2.0) + lo
        target_raw = (target[..., : task.channels_out].astype(np.float64) + 1.0) * (
            data_range / 2.0
        ) + lo
        values = sequence_metrics(pred_raw, target_raw, data_range)
        for name in per_metric:
            per_metric[name].append(values[name])
    out = {}
    for name, values in per_metric.items():
        finite = [v for v in values if math.isfinite(v)]
        out[name] = float(np.mean(finite)) if finite else math.inf
        if name == "psnr" and len(finite) < len(values):
            out["psnr_infinite_sequences"] = len(values) - len(finite)
    return out


def _train_eval_run(config: ExperimentConfig, mode: str, seed: int, fraction: float = 1.0) -> dict:
    if mode not in TRAIN_MODES:
        raise UsageError(f"unknown mode {mode!r}, expected one of {TRAIN_MODES}")
    key = config.run_key(mode, seed, fraction)
    run_dir = config.stage_dir("runs", f"{mode}-f{fraction:g}-s{seed}-{key}")
    metrics_path = run_dir / "metrics.json"
    if _stage_ready(run_dir):
        print(f"run up to date: {run_dir.name}")
        return json.loads(metrics_path.read_text())

    dataset = _ensure_dataset(config)
    subset = _train_split_prefix(dataset, fraction)
    val_sequences = [dataset.load(sid) for sid in dataset.split_ids("val")]
    backbone = BackboneConfig(
        hidden_dim=config.backbone.hidden_dim,
        translator_dim=config.backbone.translator_dim,
        translator_depth=config.backbone.translator_depth,
        learning_rate=config.backbone.learning_rate,
        batch_size=config.backbone.batch_size,
        epochs=config.backbone.epochs,
        seed=derive_seed(seed, "backbone"),
    )

    sample_params = None
    if mode == "capaint":
        repo_stage = cmd_augment(config)
        train_source = SequenceRepository(repo_stage)
        sample_params = SampleParams(
            sample_prob=config.sample_prob,
            num_copies=config.num_copies,
            seed=derive_seed(config.augment_seed, "sample", seed),
        )
        source_ids = subset
    elif mode == "baseline":
        train_source = [dataset.load(sid) for sid in subset]
        source_ids = None
    else:  # flip / rotate / crop
        originals = [dataset.load(sid) for sid in subset]
        train_source = list(originals)
        for seq in originals:
            train_source.append(baseline_augment(seq, mode, seed=derive_seed(seed, mode, seq.source_id)))
        source_ids = None

    print(f"training {mode} arm: fraction {fraction:g}, seed {seed}, {len(subset)} sequences")
    model, history = train_backbone(
        train_source,
        config.task,
        backbone,
        sample_params=sample_params,
        val_sequences=val_sequences,
        source_ids=source_ids,
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    with (run_dir / "log.jsonl").open("w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")
    save_forecaster(model, run_dir / "forecaster.ckpt")

    metrics = _evaluate_on_test(config, dataset, model)
    metrics.update({"mode": mode, "seed": seed, "fraction": fraction})
    if math.isinf(metrics["psnr"]):
        metrics["psnr"] = None
        metrics["psnr_infinite"] = True
    metrics_path.write_text(json.dumps(metrics, indent=2))
    _finish_stage(
        run_dir,
        {
            "run": {"mode": mode, "seed": seed, "fraction": fraction},
            "backbone_seed": backbone.seed,
            "sample_seed": sample_params.seed if sample_params else None,
            "config": config.raw,
        },
    )
    shown = {k: metrics[k] for k in ("mae", "mse", "ssim") if metrics.get(k) is not None}
    print("  test metrics: " + ", ".join(f"{k}={v:.5f}" for k, v in shown.items()))
    return metrics


def cmd_train_predict(config: ExperimentConfig, mode: str, seed: int | None = None) -> list[dict]:
    seeds = [seed] if seed is not None else config.seeds
    return [_train_eval_run(config, mode, s, fraction=1.0) for s in seeds]


def _load_run_metrics(run_dirs) -> list[dict]:
    runs = []
    for run_dir in run_dirs:
        metrics_path = Path(run_dir) / "metrics.json"
        if not metrics_path.is_file():
            continue
        record = json.loads(metrics_path.read_text())
        if record.get("psnr") is None:
            record["psnr"] = math.inf
        runs.append(record)
    return runs


def cmd_report(config: ExperimentConfig, run_dirs=None) -> Path:
    if run_dirs is None:
        runs_root = config.out_root / "runs"
        run_dirs = sorted(runs_root.iterdir()) if runs_root.is_dir() else []
    runs = _load_run_metrics(run_dirs)
    if not runs:
        raise UsageError("no completed runs found to report on")

    report_dir = config.out_root / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)

    by_mode = {}
    for record in runs:
        if record.get("fraction", 1.0) == 1.0:
            by_mode.setdefault(record["mode"], []).append(record)

    baseline = by_mode.get("baseline", [])
    capaint = by_mode.get("capaint", [])
    if baseline and capaint:
        report = EvalReport(baseline_runs=baseline, capaint_runs=capaint)
        (report_dir / "report.json").write_text(report.to_json())
        (report_dir / "report.csv").write_text(report.to_csv())
        print(f"baseline vs +CaPaint report written to {report_dir}")

    with (report_dir / "augmenter_comparison.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "runs", "mae_mean", "mae_std", "mse_mean", "mse_std",
                         "ssim_mean", "ssim_std"])
        for mode in sorted(by_mode):
            records = by_mode[mode]
            row = [mode, len(records)]
            for name in ("mae", "mse", "ssim"):
                values = [r[name] for r in records if math.isfinite(r[name])]
                row += [f"{np.mean(values):.6f}", f"{np.std(values):.6f}"]
            writer.writerow(row)

    fractions = sorted({r.get("fraction", 1.0) for r in runs})
    if len(fractions) > 1:
        with (report_dir / "scarcity_curve.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fraction", "mode", "seed", "mae", "mse", "ssim"])
            for record in sorted(runs, key=lambda r: (r.get("fraction", 1.0), r["mode"], r["seed"])):
                writer.writerow(
                    [record.get("fraction", 1.0), record["mode"], record["seed"],
                     record["mae"], record["mse"], record["ssim"]]
                )
    _maybe_plot(report_dir, by_mode)
    return report_dir


def _maybe_plot(report_dir: Path, by_mode: dict) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    if not by_mode:
        return
    modes = sorted(by_mode)
    means = [float(np.mean([r["mae"] for r in by_mode[m]])) for m in modes]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(modes, means)
    ax.set_ylabel("test MAE")
    fig.tight_layout()
    fig.savefig(report_dir / "mae_by_mode.png", dpi=120)
    plt.close(fig)


def cmd_scarcity(config: ExperimentConfig, fractions=None) -> Path:
    fractions = list(fractions) if fractions else config.scarcity_fractions
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigurationError(f"fractions must lie in (0, 1], got {fractions}")
    out_dir = config.out_root / "scarcity"
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for fraction in fractions:
        for seed in config.seeds:
            for mode in ("baseline", "capaint"):
                metrics = _train_eval_run(config, mode, seed, fraction=fraction)
                rows.append(metrics)

    with (out_dir / "scarcity_results.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "seed", "arm", "mae", "mse", "ssim", "psnr"])
        for record in rows:
            writer.writerow(
                [record["fraction"], record["seed"], record["mode"], record["mae"],
                 record["mse"], record["ssim"], record.get("psnr")]
            )

    improvements = []
    for fraction in fractions:
        for seed in config.seeds:
            base = next(r for r in rows if r["fraction"] == fraction and r["seed"] == seed
                        and r["mode"] == "baseline")
            cap = next(r for r in rows if r["fraction"] == fraction and r["seed"] == seed
                       and r["mode"] == "capaint")
            improvements.append(
                {
                    "fraction": fraction,
                    "seed": seed,
                    "ssim_improvement_percent": delta_percent(base["ssim"], cap["ssim"], False),
                    "mae_improvement_percent": delta_percent(base["mae"], cap["mae"], True),
                }
            )
    with (out_dir / "scarcity_improvement.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "seed", "ssim_improvement_percent", "mae_improvement_percent"])
        for record in improvements:
            writer.writerow([record["fraction"], record["seed"],
                             record["ssim_improvement_percent"], record["mae_improvement_percent"]])
    print(f"scarcity sweep complete: {len(rows)} runs, results under {out_dir}")
    return out_dir


def cmd_equal_volume(config: ExperimentConfig) -> Path:
    dataset = _ensure_dataset(config)
    repo_stage = cmd_augment(config)
    repo = SequenceRepository(repo_stage)
    train_ids = dataset.split_ids("train")
    quarter = max(1, len(train_ids) // 4)
    if 2 * quarter > len(train_ids):
        raise ConfigurationError("not enough training sequences for the equal-volume split")
    mixed_ids = train_ids[:quarter]
    original_ids = train_ids[: 2 * quarter]
    val_sequences = [dataset.load(sid) for sid in dataset.split_ids("val")]

    out_dir = config.out_root / "equal_volume"
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in config.seeds:
        arms = {
            "mixed_25_25": [dataset.load(sid) for sid in mixed_ids]
            + [repo.entry(sid, 1) for sid in mixed_ids],
            "original_50": [dataset.load(sid) for sid in original_ids],
        }
        for arm, sequences in arms.items():
            arm_seed = derive_seed(seed, "equal-volume", arm)
            backbone = BackboneConfig(
                hidden_dim=config.backbone.hidden_dim,
                translator_dim=config.backbone.translator_dim,
                translator_depth=config.backbone.translator_depth,
                learning_rate=config.backbone.learning_rate,
                batch_size=config.backbone.batch_size,
                epochs=config.backbone.epochs,
                seed=arm_seed,
            )
            print(f"equal-volume arm {arm}: seed {seed}, {len(sequences)} sequences")
            model, _ = train_backbone(sequences, config.task, backbone,
                                      val_sequences=val_sequences)
            metrics = _evaluate_on_test(config, dataset, model)
            metrics.update({"arm": arm, "seed": seed, "arm_seed": arm_seed,
                            "num_sequences": len(sequences)})
            results.append(metrics)

    payload = {
        "mixed_ids": mixed_ids,
        "original_ids": original_ids,
        "results": [
            {**r, "psnr": (None if math.isinf(r["psnr"]) else r["psnr"])} for r in results
        ],
    }
    (out_dir / "equal_volume.json").write_text(json.dumps(payload, indent=2))
    with (out_dir / "equal_volume.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "seed", "arm_seed", "num_sequences", "mae", "mse", "ssim"])
        for record in results:
            writer.writerow([record["arm"], record["seed"], record["arm_seed"],
                             record["num_sequences"], record["mae"], record["mse"],
                             record["ssim"]])
    print(f"equal-volume comparison written to {out_dir}")
    return out_dir


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capaint", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "decipher", "train-diffusion", "augment", "report",
                 "equal-volume"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        if name == "report":
            p.add_argument("--runs", nargs="*", default=None)
    p = sub.add_parser("train-predict")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", default="baseline", choices=TRAIN_MODES)
    p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("scarcity")
    p.add_argument("--config", required=True)
    p.add_argument("--fractions", default=None,
                   help="comma-separated fractions, e.g. 0.1,0.5,1.0")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "decipher":
            cmd_decipher(config)
        elif args.command == "train-diffusion":
            cmd_train_diffusion(config)
        elif args.command == "augment":
            cmd_augment(config)
        elif args.command == "train-predict":
            cmd_train_predict(config, args.mode, args.seed)
        elif args.command == "report":
            cmd_report(config, args.runs)
        elif args.command == "scarcity":
            fractions = None
            if args.fractions:
                fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
            cmd_scarcity(config, fractions)
        elif args.command == "equal-volume":
            cmd_equal_volume(config)
    except (ConfigurationError, UsageError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataIntegrityError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except CaPaintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
