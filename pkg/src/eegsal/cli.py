"""Command-line workflow: prepare, train, evaluate, crossvalidate, report.

Exit codes: 0 success, 1 runtime fault, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .data_io import (
    CheckpointIntegrityError,
    CheckpointMismatch,
    DatasetError,
    PreparedData,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    prepare_trials,
)
from .imaging import ConfigurationError, fit_norm_stats
from .metrics import MetricsReport, evaluate
from .models import Discriminator, assemble_generator, eeg_vae, generate_maps, saliency_vae
from .pipeline import (
    LAYOUT_VERSION,
    PrerequisiteError,
    RunDirectory,
    _write_json,
    holdout_split,
    load_generator,
    load_vae,
    norm_stats_of,
    read_metrics_log,
    save_model,
    split_indices,
)
from .training import MetricsLog, NonFiniteLossError, TrainConfig, crossvalidate, train_gan, train_vae

log = logging.getLogger("eegsal")

PHASE_NAMES = {"vae-saliency": "saliency_vae", "vae-eeg": "eeg_vae", "gan": "gan"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config resolution


def resolve_config(args, **flag_overrides) -> TrainConfig:
    """Preset defaults, then the config file, then explicit flags."""
    base = TrainConfig.desk() if getattr(args, "preset", "full") == "desk" else TrainConfig()
    values = base.to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(from_file) - set(values)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update(from_file)
    if args.seed is not None:
        values["seed"] = args.seed
    values.update({k: v for k, v in flag_overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _load_prepared(path) -> PreparedData:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise UsageError(f"prepared data not found in {path} (run `prepare` first)")
    return PreparedData.load(path)


# --------------------------------------------------------------------------
# prepare


def _source_fingerprint(args) -> dict:
    params = {"error_radius_px": args.error_radius, "sigma_px": args.sigma}
    if args.synthetic is not None:
        spec = SyntheticSpec.parse(args.synthetic)
        if args.seed is not None and "seed" not in args.synthetic:
            spec = replace(spec, seed=args.seed)
        src = {"synthetic": asdict(spec)}
    else:
        root = Path(args.dataset)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root not found: {root}")
        src = {"dataset": str(root.resolve()), "files": [
            [str(p.relative_to(root)), p.stat().st_size, p.stat().st_mtime_ns]
            for p in sorted(root.rglob("*")) if p.is_file()]}
    blob = json.dumps({"source": src, "params": params}, sort_keys=True).encode()
    return {"source": src, "params": params, "fingerprint": hashlib.sha256(blob).hexdigest()}


def cmd_prepare(args) -> int:
    out = _require_out(args)
    if (args.synthetic is None) == (args.dataset is None):
        raise UsageError("give exactly one of DATASET_ROOT or --synthetic SPEC")
    try:
        fp = _source_fingerprint(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest_path = out / "manifest.json"
    if manifest_path.is_file():
        old = json.loads(manifest_path.read_text())
        files_ok = all((out / f).is_file() for f in (*PreparedData.FILES, "norm_stats.json"))
        if old.get("source_fingerprint") == fp["fingerprint"] and files_ok:
            print(f"{out}: up to date")
            return 0
    if args.synthetic is not None:
        trials = generate_synthetic(SyntheticSpec(**fp["source"]["synthetic"]))
        errors = []
    else:
        manifest, trials = load_dataset(args.dataset)
        errors = manifest.errors
    for e in errors:
        print(f"data error: {e}", file=sys.stderr)
    if errors and not args.allow_partial:
        return 2
    if not trials:
        print("no usable trials", file=sys.stderr)
        return 2
    data = prepare_trials(trials, error_radius_px=args.error_radius, sigma_px=args.sigma)
    stats = fit_norm_stats(data.eeg_images, data.zero_mask)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "norm_stats.json", stats.to_dict())
    data.save(out, {"source_fingerprint": fp["fingerprint"], "source": fp["source"],
                    "params": fp["params"], "data_errors": errors})
    print(f"{out}: wrote {len(data)} trials "
          f"(EEG images {data.eeg_images.shape[1:]}, maps {data.saliency.shape[1:]})")
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    run = RunDirectory(_require_out(args))
    phase = PHASE_NAMES[args.phase]
    config = resolve_config(args, **{f"epochs_{phase}": args.epochs})
    if args.no_adversarial:
        config = replace(config, adversarial=False)
    config = replace(config, phase=phase)
    if phase == "gan":
        missing = [n for n in ("saliency_vae", "eeg_vae") if not run.has(n)]
        if missing:
            raise PrerequisiteError(f"missing {', '.join(missing)} checkpoint(s) in {run.path}: "
                                    "train VAEs first (train vae-saliency, train vae-eeg)")
    if args.data is None:
        if not (run.path / "run.json").is_file():
            raise UsageError("--data is required for a new run directory")
        data_dir = run.meta()["data_dir"]
    else:
        data_dir = args.data
    data = _load_prepared(data_dir)
    meta_split = (json.loads((run.path / "run.json").read_text())["split"]
                  if (run.path / "run.json").is_file() else holdout_split(data.participant_ids))
    run.init(data_dir, meta_split)
    run.save_config(config)
    train_idx = split_indices(data, meta_split, "train")
    logger = MetricsLog(run.metrics_path, config.record_wall_time)
    mask = data.zero_mask
    torch.manual_seed(config.seed)

    if phase == "saliency_vae":
        model, hist = train_vae(config, np.asarray(data.saliency[train_idx]), saliency_vae(config.arch),
                                log_to=logger)
        path = save_model(run, phase, model, config, epoch=hist.best_epoch)
    elif phase == "eeg_vae":
        stats = fit_norm_stats(np.asarray(data.eeg_images[train_idx]), mask)
        images = stats.apply(data.eeg_images[train_idx], mask)
        model, hist = train_vae(config, images, eeg_vae(config.arch, mask), log_to=logger, zero_mask=mask)
        path = save_model(run, phase, model, config, stats, hist.best_epoch)
    else:
        sal, _ = load_vae(run, "saliency_vae")
        eeg, eeg_ckpt = load_vae(run, "eeg_vae", mask)
        stats = norm_stats_of(eeg_ckpt)
        gen = assemble_generator(eeg, sal, freeze=True)
        disc = Discriminator(config.arch) if config.adversarial else None
        images = stats.apply(data.eeg_images[train_idx], mask)
        gen, disc, hist = train_gan(config, images, np.asarray(data.saliency[train_idx]), gen, disc,
                                    log_to=logger)
        name = "generator" if config.adversarial else "generator_noadv"
        path = save_model(run, name, gen, config, stats, hist.best_epoch)
        if disc is not None:
            save_model(run, "discriminator", disc, config, epoch=hist.best_epoch)
        for event in hist.events:
            log.warning(event)
    last = hist.train[-1] if hist.train else float("nan")
    print(f"{args.phase}: {len(hist.train)} epochs, final training loss {last:.5f}, checkpoint {path}")
    return 0


# --------------------------------------------------------------------------
# evaluate / report


def _render_figures(run: RunDirectory, report: MetricsReport) -> list[Path]:
    from . import plotting

    paths = [plotting.comparison_chart(report.means, report.references, run.figures / "comparison.png",
                                       label=f"this run ({report.label})")]
    records = read_metrics_log(run.metrics_path)
    if records:
        paths.append(plotting.loss_curves(records, run.figures / "loss_curves.png"))
    return paths


def cmd_evaluate(args) -> int:
    from . import plotting

    run = RunDirectory(_require_out(args))
    meta = run.meta()
    data = _load_prepared(meta["data_dir"])
    idx = split_indices(data, meta["split"], args.split)
    if len(idx) == 0:
        raise UsageError(f"split {args.split!r} is empty (no held-out participants); use --split all")
    test = data.subset(idx)
    names = [n for n in ("generator", "generator_noadv") if run.has(n)]
    if not names:
        raise PrerequisiteError(f"no generator checkpoint in {run.path}: train the GAN first")
    seed = args.seed if args.seed is not None else TrainConfig().eval_seed
    preds, report = {}, None
    for name in names:
        gen, ckpt = load_generator(run, name, data.zero_mask)
        stats = norm_stats_of(ckpt)
        label = "generator+discriminator" if name == "generator" else "generator only"
        rep = evaluate(gen, test, stats, seed=seed, label=label,
                       config_fingerprint=TrainConfig.from_dict(ckpt.config).fingerprint())
        k = min(args.trials, len(test))
        preds[name] = generate_maps(gen, stats.apply(test.eeg_images[:k], data.zero_mask),
                                    test.trial_ids[:k], seed)
        if report is None:
            report = rep
        else:
            (run.path / "report_noadv.json").write_text(rep.to_json())
            (run.path / "report_noadv.txt").write_text(rep.table() + "\n")
    (run.path / "report.json").write_text(report.to_json())
    (run.path / "report.txt").write_text(report.table() + "\n")
    k = min(args.trials, len(test))
    panel, shape = plotting.panel_figure(
        test.saliency[:k], preds[names[0]], run.figures / "panels.png", test.trial_ids[:k],
        predicted_noadv=preds.get("generator_noadv") if len(names) == 2 else None)
    figs = [panel, *_render_figures(run, report)]
    print(report.table())
    print("figures: " + ", ".join(str(p) for p in figs))
    return 0


def cmd_crossvalidate(args) -> int:
    out = _require_out(args)
    if args.data is None:
        raise UsageError("--data is required")
    data = _load_prepared(args.data)
    config = resolve_config(args, epochs_saliency_vae=args.epochs, epochs_eeg_vae=args.epochs,
                            epochs_gan=args.epochs)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    try:
        reports, agg = crossvalidate(data, config, n_folds=args.folds, out_dir=out)
    except ValueError as exc:
        if "participants" in str(exc):
            raise UsageError(str(exc)) from None
        raise
    for fold_dir, rep in zip(sorted(out.glob("fold_*")), reports):
        (fold_dir / "run.json").write_text(json.dumps(
            {"layout_version": LAYOUT_VERSION, "data_dir": str(Path(args.data).resolve()),
             "split": _fold_split(fold_dir, data)}, indent=2, sort_keys=True) + "\n")
        (fold_dir / "report.txt").write_text(rep.table() + "\n")
    _write_aggregate_outputs(out, agg)
    return 0


def _fold_split(fold_dir: Path, data) -> dict:
    split = json.loads((fold_dir / "split.json").read_text())
    pid = dict(zip(data.trial_ids, data.participant_ids))
    return {"train": sorted({pid[t] for t in split["train"]}), "test": sorted({pid[t] for t in split["test"]})}


def _aggregate_text(agg: dict) -> str:
    lines = [f"{'metric':<6} {'mean':>8} {'std':>8}"]
    for m in ("auc", "nss", "cc", "bce"):
        lines.append(f"{m:<6} {agg[m]['mean']:>8.4f} {agg[m]['std']:>8.4f}")
    lines.append("reference rows:")
    for r in agg["references"]:
        lines.append(f"  {r['approach']:<16} AUC {r['auc']:<7} NSS {r['nss']:<7} CC {r['cc']}")
    return "\n".join(lines)


def _write_aggregate_outputs(out: Path, agg: dict) -> None:
    from . import plotting

    (out / "aggregate.txt").write_text(_aggregate_text(agg) + "\n")
    plotting.comparison_chart({m: agg[m]["mean"] for m in ("auc", "nss", "cc")}, agg["references"],
                              out / "figures" / "comparison.png",
                              spread={m: agg[m]["std"] for m in ("auc", "nss", "cc")},
                              label="this run (CV mean)")
    print(_aggregate_text(agg))


def cmd_report(args) -> int:
    out = _require_out(args)
    if (out / "aggregate.json").is_file():
        _write_aggregate_outputs(out, json.loads((out / "aggregate.json").read_text()))
        return 0
    run = RunDirectory(out)
    if not (run.path / "report.json").is_file():
        raise PrerequisiteError(f"no report.json in {out}: run `evaluate` first")
    report = MetricsReport.from_dict(json.loads((run.path / "report.json").read_text()))
    (run.path / "report.txt").write_text(report.table() + "\n")
    figs = _render_figures(run, report)
    print(report.table())
    print("figures: " + ", ".join(str(p) for p in figs))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="random seed (overrides config)")
    parser.add_argument("--config", default=default, help="JSON file with TrainConfig fields")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegsal", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="build EEG images and saliency maps")
    p.add_argument("dataset", nargs="?", help="dataset root in the canonical layout")
    p.add_argument("--synthetic", metavar="SPEC", help="e.g. n=5,trials=20,seed=7")
    p.add_argument("--error-radius", type=float, default=2.0, help="fixation disk radius (px)")
    p.add_argument("--sigma", type=float, default=3.0, help="Gaussian blur sigma (px)")
    p.add_argument("--allow-partial", action="store_true", help="keep going past per-file data errors")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="run one training phase")
    p.add_argument("phase", choices=list(PHASE_NAMES))
    p.add_argument("--data", help="prepared data directory (required for a new run)")
    p.add_argument("--epochs", type=int, help="override the epoch count of this phase")
    p.add_argument("--preset", choices=["full", "desk"], default="full")
    p.add_argument("--no-adversarial", action="store_true", help="GAN phase without the discriminator")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score the trained generator")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--trials", type=int, default=4, help="rows in the panel figure")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossvalidate", parents=[common], help="participant-grouped k-fold evaluation")
    p.add_argument("--data", help="prepared data directory")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, help="override every phase's epoch count")
    p.add_argument("--preset", choices=["full", "desk"], default="full")
    p.set_defaults(func=cmd_crossvalidate)

    p = sub.add_parser("report", parents=[common], help="re-render report text and figures")
    p.set_defaults(func=cmd_report)
    return parser


INPUT_ERRORS = (UsageError, FileNotFoundError, DatasetError, PrerequisiteError, CheckpointMismatch,
                CheckpointIntegrityError, ConfigurationError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
