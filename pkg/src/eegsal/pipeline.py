"""Run-directory layout and checkpoint plumbing shared by the CLI and cross-validation.

Layout (version 1)::

    run.json                 layout version, data directory, split
    config.json              snapshot of the last TrainConfig used
    metrics.jsonl            append-only epoch log, all phases
    checkpoints/<name>.ckpt  saliency_vae, eeg_vae, generator, discriminator,
                             generator_noadv
    report.json, report.txt  latest evaluation
    figures/*.png
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import PreparedData, _atomic_write, load_checkpoint, model_checkpoint, restore_model, save_checkpoint
from .imaging import NormStats
from .models import ArchConfig, Discriminator, assemble_generator, eeg_vae, saliency_vae

LAYOUT_VERSION = 1


class PrerequisiteError(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    blob = (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()
    _atomic_write(path, lambda fh: fh.write(blob))


@dataclass
class RunDirectory:
    path: Path

    def __post_init__(self):
        self.path = Path(self.path)

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.jsonl"

    @property
    def figures(self) -> Path:
        return self.path / "figures"

    def checkpoint(self, name: str) -> Path:
        return self.path / "checkpoints" / f"{name}.ckpt"

    def has(self, name: str) -> bool:
        return self.checkpoint(name).exists()

    def init(self, data_dir, split: dict) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "checkpoints").mkdir(exist_ok=True)
        meta = {"layout_version": LAYOUT_VERSION, "data_dir": str(Path(data_dir).resolve()), "split": split}
        run_json = self.path / "run.json"
        if run_json.exists():
            old = json.loads(run_json.read_text())
            if old.get("data_dir") != meta["data_dir"] or old.get("split") != split:
                raise PrerequisiteError(f"{self.path} belongs to a different dataset or split")
            return
        _write_json(run_json, meta)

    def meta(self) -> dict:
        run_json = self.path / "run.json"
        if not run_json.exists():
            raise PrerequisiteError(f"{self.path} is not a run directory (no run.json)")
        meta = json.loads(run_json.read_text())
        if meta.get("layout_version") != LAYOUT_VERSION:
            raise PrerequisiteError(f"unsupported run layout version {meta.get('layout_version')}")
        return meta

    def save_config(self, config) -> None:
        _write_json(self.path / "config.json", config.to_dict())


def holdout_split(participant_ids, n_test: int = 1) -> dict:
    """Hold out the last ``n_test`` participants (sorted) for testing."""
    groups = sorted(set(participant_ids))
    if len(groups) <= n_test:
        return {"train": groups, "test": []}
    return {"train": groups[:-n_test], "test": groups[-n_test:]}


def split_indices(data: PreparedData, split: dict, which: str) -> np.ndarray:
    if which == "all":
        return np.arange(len(data))
    keep = set(split[which])
    return np.array([i for i, p in enumerate(data.participant_ids) if p in keep], dtype=int)


def save_model(run: RunDirectory, name: str, model, config, norm_stats: NormStats | None = None,
               epoch: int = 0, extra=None) -> Path:
    ckpt = model_checkpoint(model, config.arch, name, epoch,
                            norm_stats.to_dict() if norm_stats is not None else None,
                            config.to_dict(), extra)
    return save_checkpoint(ckpt, run.checkpoint(name))


def _arch_of(ckpt) -> ArchConfig:
    return ArchConfig(**ckpt.arch)


def load_vae(run: RunDirectory, name: str, zero_mask=None):
    path = run.checkpoint(name)
    if not path.exists():
        raise PrerequisiteError(f"missing checkpoint {path}")
    ckpt = load_checkpoint(path)
    arch = _arch_of(ckpt)
    model = saliency_vae(arch) if name == "saliency_vae" else eeg_vae(arch, zero_mask)
    restore_model(model, ckpt, arch)
    return model, ckpt


def load_generator(run: RunDirectory, name: str = "generator", zero_mask=None):
    path = run.checkpoint(name)
    if not path.exists():
        raise PrerequisiteError(f"missing checkpoint {path}: train the GAN first")
    ckpt = load_checkpoint(path)
    arch = _arch_of(ckpt)
    gen = assemble_generator(eeg_vae(arch, zero_mask), saliency_vae(arch), freeze=True)
    restore_model(gen, ckpt, arch)
    return gen, ckpt


def load_discriminator(run: RunDirectory):
    ckpt = load_checkpoint(run.checkpoint("discriminator"))
    arch = _arch_of(ckpt)
    disc = Discriminator(arch)
    restore_model(disc, ckpt, arch)
    return disc, ckpt


def norm_stats_of(ckpt) -> NormStats:
    if not ckpt.norm_stats:
        raise PrerequisiteError("checkpoint carries no normalization statistics")
    return NormStats(float(ckpt.norm_stats["mean"]), float(ckpt.norm_stats["std"]))


def save_run_models(run_dir, models, config) -> None:
    """Write every phase of a fitted pipeline into ``run_dir``."""
    run = RunDirectory(run_dir)
    (run.path / "checkpoints").mkdir(parents=True, exist_ok=True)
    run.save_config(config)
    h = models.histories
    save_model(run, "saliency_vae", models.saliency_vae, config, epoch=h["saliency_vae"].best_epoch)
    save_model(run, "eeg_vae", models.eeg_vae, config, models.norm_stats, h["eeg_vae"].best_epoch)
    name = "generator" if config.adversarial else "generator_noadv"
    save_model(run, name, models.generator, config, models.norm_stats, h["gan"].best_epoch)
    if models.discriminator is not None:
        save_model(run, "discriminator", models.discriminator, config, epoch=h["gan"].best_epoch)


def read_metrics_log(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
