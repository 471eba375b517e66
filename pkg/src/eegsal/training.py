"""Two-phase training (VAEs, then the frozen-backbone GAN) and cross-validation."""

from __future__ import annotations

import copy
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import gaze as gz
from .imaging import NormStats, fit_norm_stats
from .losses import discriminator_loss, eeg_vae_loss, generator_loss, saliency_vae_loss
from .models import (
    ArchConfig,
    Discriminator,
    Generator,
    assemble_generator,
    eeg_vae,
    generate_maps,
    saliency_vae,
)

log = logging.getLogger(__name__)

PHASES = ("saliency_vae", "eeg_vae", "gan")
LOG_KEYS = ("phase", "epoch", "loss_total", "loss_content", "loss_kld", "loss_adv", "lr", "wall_ms")


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss; ``snapshot`` holds the model state."""

    def __init__(self, phase, epoch, batch, snapshot=None):
        super().__init__(f"non-finite loss in {phase} at epoch {epoch}, batch {batch}")
        self.phase, self.epoch, self.batch = phase, epoch, batch
        self.snapshot = snapshot


class DiscriminatorSaturation(UserWarning):
    pass


@dataclass
class TrainConfig:
    """Every tunable of the three training phases.

    Defaults are the published settings. The optimizer "momentum" values are
    applied as Adam weight decay.
    """

    phase: str = "saliency_vae"
    epochs_saliency_vae: int = 2000
    epochs_eeg_vae: int = 3000
    epochs_gan: int = 1500
    lr_vae: float = 1e-5
    lr_generator: float = 1e-7
    lr_discriminator: float = 1e-5
    decay_vae: float = 0.0
    decay_generator: float = 1e-5
    decay_discriminator: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    kld_weight: float = 0.5
    early_stop: bool = False
    patience: int = 100
    min_delta: float = 1e-4
    eeg_noise_std: float = 0.25
    augment: bool = True
    adversarial: bool = True
    width: float = 1.0
    upsample_mode: str = "nearest"
    error_radius_px: float = gz.ERROR_RADIUS_PX
    sigma_px: float = gz.SIGMA_PX
    eval_seed: int = 1234
    record_wall_time: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name in ("lr_vae", "lr_generator", "lr_discriminator"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("epochs_saliency_vae", "epochs_eeg_vae", "epochs_gan"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def epochs(self) -> int:
        return getattr(self, f"epochs_{self.phase}")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(width=self.width, upsample_mode=self.upsample_mode)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Small-width, higher-rate preset for CPU-scale experiments.

        The KL weight is lowered as well: with pixel-mean BCE against a summed
        64-dim KL, weight 0.5 lets the saliency VAE ignore its latent entirely
        on small synthetic sets.
        """
        base = dict(width=0.125, lr_vae=1e-3, lr_generator=1e-3, lr_discriminator=1e-4,
                    decay_generator=0.0, decay_discriminator=0.0, batch_size=8, kld_weight=1e-3,
                    epochs_saliency_vae=200, epochs_eeg_vae=200, epochs_gan=300)
        base.update(overrides)
        return cls(**base)

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class MetricsLog:
    """Append-only JSON-lines epoch log with a fixed key set."""

    def __init__(self, path=None, record_wall_time: bool = False):
        self.path = Path(path) if path else None
        self.record_wall_time = record_wall_time
        self.records: list[dict] = []

    def write(self, **values) -> dict:
        rec = {k: values.get(k) for k in LOG_KEYS}
        if not self.record_wall_time:
            rec["wall_ms"] = None
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec


@dataclass
class History:
    phase: str
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = -1
    events: list = field(default_factory=list)
    stopped_early: bool = False


def _seed_all(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed), torch.Generator().manual_seed(seed)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value, phase, epoch, batch, model):
    if not torch.isfinite(value):
        snap = {k: v.detach().clone() for k, v in model.state_dict().items()}
        raise NonFiniteLossError(phase, epoch, batch, snap)


def _to_tensor(a):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)


def _saliency_batch(maps, idx, rng, augment):
    out = np.asarray(maps[idx], dtype=np.float32)
    if augment:
        out = np.stack([gz.augment_saliency(m, rng) for m in out])
    return _to_tensor(out[:, None])


def _eeg_batch(images, idx, zero_mask, rng, noise_std):
    clean = np.asarray(images[idx], dtype=np.float32)
    noisy = clean
    if noise_std > 0:
        noisy = clean + rng.normal(0.0, noise_std, clean.shape).astype(np.float32)
        noisy[..., zero_mask] = 0.0
    return _to_tensor(noisy), _to_tensor(clean)


def train_vae(config: TrainConfig, data, model, val_data=None, log_to: MetricsLog | None = None,
              zero_mask=None):
    """Fit a saliency or EEG VAE.

    ``data`` is ``[n, 81, 81]`` maps for ``saliency_vae`` or normalized
    ``[n, 401, 32, 32]`` images for ``eeg_vae`` (then ``zero_mask`` is
    required). Returns ``(best_model, history)``; the best model is chosen by
    validation loss when ``val_data`` is given, else the last epoch.
    """
    phase = config.phase
    if phase not in ("saliency_vae", "eeg_vae"):
        raise ValueError(f"train_vae cannot run phase {phase!r}")
    rng, tgen = _seed_all(config.seed)
    history = History(phase)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_vae, weight_decay=config.decay_vae)
    loss_fn = saliency_vae_loss if phase == "saliency_vae" else eeg_vae_loss
    if phase == "eeg_vae" and zero_mask is None:
        raise ValueError("eeg_vae training needs the zero mask")
    best_state, best_val = None, np.inf
    n = len(data)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.train()
        sums = np.zeros(3)
        for b, idx in enumerate(_batches(n, config.batch_size, rng)):
            if phase == "saliency_vae":
                x = _saliency_batch(data, idx, rng, config.augment)
                target = x
            else:
                x, target = _eeg_batch(data, idx, zero_mask, rng, config.eeg_noise_std)
            y, mean, logvar = model(x, generator=tgen)
            losses = loss_fn(target, y, mean, logvar, config.kld_weight)
            _check_finite(losses["total"], phase, epoch, b, model)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            sums += len(idx) * np.array([losses[k].item() for k in ("total", "content", "kld")])
        sums /= n
        history.train.append(float(sums[0]))
        if val_data is not None:
            v = vae_validation_loss(model, val_data, phase, config, zero_mask)
            history.val.append(v)
            if v < best_val:
                best_val, history.best_epoch = v, epoch
                best_state = copy.deepcopy(model.state_dict())
        if log_to is not None:
            log_to.write(phase=phase, epoch=epoch, loss_total=float(sums[0]),
                         loss_content=float(sums[1]), loss_kld=float(sums[2]), loss_adv=None,
                         lr=config.lr_vae, wall_ms=round(1000 * (time.perf_counter() - t0), 3))
    if best_state is not None:
        model.load_state_dict(best_state)
    elif config.epochs:
        history.best_epoch = config.epochs - 1
    return model, history


def vae_validation_loss(model, data, phase, config, zero_mask=None) -> float:
    """Loss at the posterior mean, no augmentation."""
    model.eval()
    loss_fn = saliency_vae_loss if phase == "saliency_vae" else eeg_vae_loss
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), 32):
            chunk = np.asarray(data[start:start + 32], dtype=np.float32)
            x = _to_tensor(chunk[:, None] if phase == "saliency_vae" else chunk)
            mean, logvar = model.encode(x)
            y = model.decode(mean)
            total += len(chunk) * loss_fn(x, y, mean, logvar, config.kld_weight)["total"].item()
    return total / len(data)


def assemble_and_freeze(eeg_model, saliency_model) -> Generator:
    return assemble_generator(eeg_model, saliency_model, freeze=True)


def _score_pair(disc, real, fake):
    # one joint batch, so batch-norm statistics cannot tell real from fake
    out = disc(torch.cat([real, fake]))
    return out[:len(real)], out[len(real):]


def train_gan(config: TrainConfig, images, maps, gen: Generator, disc: Discriminator | None = None,
              val=None, log_to: MetricsLog | None = None):
    """Alternate discriminator and generator updates.

    ``images`` are normalized EEG images, ``maps`` the matching padded
    ground-truth maps. With ``config.adversarial`` false the discriminator
    is ignored and the generator minimizes content + KL only. ``val`` is an
    optional ``(images, maps, trial_ids)`` triple for early stopping on
    validation BCE.
    """
    rng, tgen = _seed_all(config.seed)
    history = History("gan")
    adversarial = config.adversarial and disc is not None
    trainable = [p for p in gen.parameters() if p.requires_grad]
    opt_g = torch.optim.Adam(trainable, lr=config.lr_generator, weight_decay=config.decay_generator)
    opt_d = None
    if adversarial:
        opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_discriminator,
                                 weight_decay=config.decay_discriminator)
    n = len(images)
    best_val, best_state, stale = np.inf, None, 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        gen.train()
        if adversarial:
            disc.train()
        sums = np.zeros(4)
        d_fake_max = 0.0
        for b, idx in enumerate(_batches(n, config.batch_size, rng)):
            x = _to_tensor(images[idx])
            y_t = _to_tensor(np.asarray(maps[idx])[:, None])
            d_real = None
            if adversarial:
                with torch.no_grad():
                    fake, _, _ = gen(x, generator=tgen)
                d_real, d_fake = _score_pair(disc, y_t, fake)
                d_loss = discriminator_loss(d_real, d_fake)
                _check_finite(d_loss, "gan", epoch, b, disc)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            y_p, mean, logvar = gen(x, generator=tgen)
            if adversarial:
                d_real, d_fake = _score_pair(disc, y_t, y_p)
                d_real = d_real.detach()
                d_fake_max = max(d_fake_max, float(d_fake.detach().max()))
            else:
                d_fake = torch.zeros(len(idx))
            losses = generator_loss(y_t, y_p, mean, logvar, d_fake, d_real,
                                    kld_weight=config.kld_weight, adversarial=adversarial)
            _check_finite(losses["total"], "gan", epoch, b, gen)
            opt_g.zero_grad()
            if adversarial:
                opt_d.zero_grad()
            losses["total"].backward()
            opt_g.step()
            adv = losses["adv"].item() if adversarial else 0.0
            sums += len(idx) * np.array([losses["total"].item(), losses["content"].item(),
                                         losses["kld"].item(), adv])
        sums /= n
        history.train.append(float(sums[1]))
        if adversarial and d_fake_max < 1e-6:
            msg = f"discriminator saturated at epoch {epoch}: max D(fake) {d_fake_max:.2e}"
            warnings.warn(msg, DiscriminatorSaturation, stacklevel=2)
            history.events.append(msg)
        if log_to is not None:
            log_to.write(phase="gan", epoch=epoch, loss_total=float(sums[0]),
                         loss_content=float(sums[1]), loss_kld=float(sums[2]),
                         loss_adv=float(sums[3]) if adversarial else None,
                         lr=config.lr_generator, wall_ms=round(1000 * (time.perf_counter() - t0), 3))
        if val is not None:
            v = content_bce(gen, *val, seed=config.eval_seed)
            history.val.append(v)
            if v < best_val - config.min_delta:
                best_val, stale, history.best_epoch = v, 0, epoch
                best_state = copy.deepcopy(gen.state_dict())
            else:
                stale += 1
            if config.early_stop and stale >= config.patience:
                history.stopped_early = True
                history.events.append(f"early stop at epoch {epoch}")
                break
    if best_state is not None and config.early_stop:
        gen.load_state_dict(best_state)
    elif config.epochs:
        history.best_epoch = len(history.train) - 1
    return gen, disc, history


def content_bce(gen, images, maps, trial_ids, seed=0) -> float:
    pred = generate_maps(gen, images, list(trial_ids), seed)
    p = np.clip(pred, 1e-7, 1 - 1e-7)
    t = np.asarray(maps, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple
    test_ids: tuple


def make_folds(trial_ids, participant_ids, n_folds: int = 5) -> list[FoldSplit]:
    """Participant-grouped folds; every participant's trials share one test fold."""
    groups = sorted(set(participant_ids))
    if len(groups) < n_folds:
        raise ValueError(f"need at least {n_folds} participants for {n_folds}-fold CV, got {len(groups)}")
    assignment = {g: k for k, chunk in enumerate(np.array_split(np.arange(len(groups)), n_folds))
                  for g in (groups[i] for i in chunk)}
    folds = []
    for k in range(n_folds):
        test = tuple(t for t, p in zip(trial_ids, participant_ids) if assignment[p] == k)
        train = tuple(t for t, p in zip(trial_ids, participant_ids) if assignment[p] != k)
        folds.append(FoldSplit(k, train, test))
    return folds


@dataclass
class TrainedModels:
    saliency_vae: object
    eeg_vae: object
    generator: Generator
    discriminator: Discriminator | None
    norm_stats: NormStats
    histories: dict


def fit_pipeline(config: TrainConfig, data, train_idx=None, logger: MetricsLog | None = None,
                 val_idx=None) -> TrainedModels:
    """Normalize on the training split, fit both VAEs, then the GAN."""
    train_idx = np.arange(len(data)) if train_idx is None else np.asarray(train_idx)
    mask = data.zero_mask
    stats = fit_norm_stats(np.asarray(data.eeg_images[train_idx]), mask)
    images = stats.apply(data.eeg_images[train_idx], mask)
    maps = np.asarray(data.saliency[train_idx])
    arch = config.arch

    torch.manual_seed(config.seed)
    sal = saliency_vae(arch)
    sal, h_sal = train_vae(replace(config, phase="saliency_vae"), maps, sal, log_to=logger)
    torch.manual_seed(config.seed + 1)
    eeg = eeg_vae(arch, mask)
    eeg, h_eeg = train_vae(replace(config, phase="eeg_vae"), images, eeg, log_to=logger, zero_mask=mask)

    torch.manual_seed(config.seed + 2)
    gen = assemble_and_freeze(eeg, sal)
    disc = Discriminator(arch) if config.adversarial else None
    val = None
    if val_idx is not None and len(val_idx):
        val_idx = np.asarray(val_idx)
        val = (stats.apply(data.eeg_images[val_idx], mask), np.asarray(data.saliency[val_idx]),
               [data.trial_ids[i] for i in val_idx])
    gen, disc, h_gan = train_gan(replace(config, phase="gan"), images, maps, gen, disc, val=val,
                                 log_to=logger)
    return TrainedModels(sal, eeg, gen, disc, stats,
                         {"saliency_vae": h_sal, "eeg_vae": h_eeg, "gan": h_gan})


def crossvalidate(data, config: TrainConfig, n_folds: int = 5, out_dir=None):
    """Participant-grouped k-fold evaluation.

    Returns ``(fold_reports, aggregate)``. With ``out_dir`` each fold gets
    its own run directory holding checkpoints, the epoch log and the report.
    """
    from .metrics import aggregate, evaluate

    folds = make_folds(data.trial_ids, data.participant_ids, n_folds)
    index = {t: i for i, t in enumerate(data.trial_ids)}
    reports = []
    for fold in folds:
        fold_dir = None
        logger = MetricsLog(record_wall_time=config.record_wall_time)
        if out_dir is not None:
            fold_dir = Path(out_dir) / f"fold_{fold.fold_index}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            log_path = fold_dir / "metrics.jsonl"
            log_path.unlink(missing_ok=True)
            logger = MetricsLog(log_path, config.record_wall_time)
        train_idx = [index[t] for t in fold.train_ids]
        test_idx = [index[t] for t in fold.test_ids]
        log.info("fold %d: %d train / %d test trials", fold.fold_index, len(train_idx), len(test_idx))
        models = fit_pipeline(config, data, train_idx, logger)
        test = data.subset(test_idx)
        report = evaluate(models.generator, test, models.norm_stats, seed=config.eval_seed,
                          fold=fold.fold_index, config_fingerprint=config.fingerprint())
        reports.append(report)
        if fold_dir is not None:
            from .pipeline import save_run_models

            save_run_models(fold_dir, models, config)
            (fold_dir / "report.json").write_text(report.to_json())
            (fold_dir / "split.json").write_text(json.dumps(
                {"fold": fold.fold_index, "train": list(fold.train_ids), "test": list(fold.test_ids)},
                indent=2))
    agg = aggregate(reports)
    if out_dir is not None:
        (Path(out_dir) / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    return reports, agg
