import json
import warnings

import numpy as np
import pytest
import torch

from eegsal.imaging import fit_norm_stats
from eegsal.metrics import MetricsReport, aggregate
from eegsal.models import Discriminator, eeg_vae, saliency_vae
from eegsal.training import (
    DiscriminatorSaturation,
    MetricsLog,
    NonFiniteLossError,
    TrainConfig,
    assemble_and_freeze,
    content_bce,
    make_folds,
    train_gan,
    train_vae,
)


def tiny_config(**kw):
    base = dict(batch_size=4, epochs_saliency_vae=3, epochs_eeg_vae=3, epochs_gan=3)
    base.update(kw)
    return TrainConfig.desk(**base)


@pytest.fixture(scope="module")
def normalized(tiny_data):
    stats = fit_norm_stats(tiny_data.eeg_images, tiny_data.zero_mask)
    return stats.apply(tiny_data.eeg_images, tiny_data.zero_mask)


def fresh_generator(cfg, mask, seed=0):
    torch.manual_seed(seed)
    return assemble_and_freeze(eeg_vae(cfg.arch, mask), saliency_vae(cfg.arch))


# ---------------------------------------------------------------- config


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = tiny_config(seed=5)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_file(path) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1})


@pytest.mark.parametrize("bad", [dict(phase="vae"), dict(lr_vae=-1.0), dict(batch_size=0),
                                 dict(epochs_gan=-2)])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_published_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs_saliency_vae, cfg.epochs_eeg_vae, cfg.epochs_gan) == (2000, 3000, 1500)
    assert (cfg.lr_vae, cfg.lr_generator, cfg.lr_discriminator) == (1e-5, 1e-7, 1e-5)
    assert (cfg.decay_generator, cfg.decay_discriminator) == (1e-5, 1e-8)
    assert cfg.batch_size == 32 and cfg.kld_weight == 0.5


# ---------------------------------------------------------------- VAE phase


def test_zero_epochs_returns_empty_curve(tiny_data):
    cfg = tiny_config(phase="saliency_vae", epochs_saliency_vae=0)
    model = saliency_vae(cfg.arch)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    model, hist = train_vae(cfg, tiny_data.saliency, model)
    assert hist.train == [] and hist.best_epoch == -1
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_zero_learning_rate_leaves_weights(tiny_data):
    cfg = tiny_config(phase="saliency_vae", lr_vae=0.0, epochs_saliency_vae=2)
    model = saliency_vae(cfg.arch)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    model, _ = train_vae(cfg, tiny_data.saliency, model)
    for n, p in model.named_parameters():
        assert torch.equal(before[n], p), n


def test_seeded_runs_give_identical_curves(tiny_data):
    curves = []
    for _ in range(2):
        torch.manual_seed(11)
        cfg = tiny_config(phase="saliency_vae", seed=4)
        _, hist = train_vae(cfg, tiny_data.saliency, saliency_vae(cfg.arch))
        curves.append(hist.train)
    assert curves[0] == curves[1]


def test_metrics_log_fixed_keys(tiny_data, tmp_path):
    cfg = tiny_config(phase="saliency_vae")
    log = MetricsLog(tmp_path / "m.jsonl")
    train_vae(cfg, tiny_data.saliency, saliency_vae(cfg.arch), log_to=log)
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert all(set(r) == {"phase", "epoch", "loss_total", "loss_content", "loss_kld", "loss_adv",
                          "lr", "wall_ms"} for r in rows)
    assert all(r["wall_ms"] is None and r["loss_adv"] is None for r in rows)


def test_validation_selects_best_epoch(tiny_data):
    cfg = tiny_config(phase="saliency_vae", epochs_saliency_vae=4)
    _, hist = train_vae(cfg, tiny_data.saliency[:6], saliency_vae(cfg.arch), val_data=tiny_data.saliency[6:])
    assert len(hist.val) == 4
    assert hist.best_epoch == int(np.argmin(hist.val))


def test_eeg_vae_needs_mask(normalized):
    cfg = tiny_config(phase="eeg_vae")
    with pytest.raises(ValueError, match="zero mask"):
        train_vae(cfg, normalized, eeg_vae(cfg.arch))


@pytest.mark.slow
def test_eeg_vae_halves_reconstruction_error():
    from eegsal.data_io import SyntheticSpec, generate_synthetic, prepare_trials
    from eegsal.training import vae_validation_loss

    data = prepare_trials(generate_synthetic(SyntheticSpec(n_participants=2, trials_per_participant=8, seed=1)))
    mask = data.zero_mask
    images = fit_norm_stats(data.eeg_images, mask).apply(data.eeg_images, mask)
    cfg = tiny_config(phase="eeg_vae", epochs_eeg_vae=60, batch_size=8, eeg_noise_std=0.0, kld_weight=0.0)
    model = eeg_vae(cfg.arch, mask)

    def mse():
        return vae_validation_loss(model, images, "eeg_vae", cfg, mask)

    before = mse()
    model, _ = train_vae(cfg, images, model, zero_mask=mask)
    assert mse() <= 0.5 * before


def test_non_finite_loss_raises_with_snapshot(tiny_data):
    cfg = tiny_config(phase="saliency_vae")
    model = saliency_vae(cfg.arch)
    with torch.no_grad():
        model.decoder.fc.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train_vae(cfg, tiny_data.saliency, model)
    err = info.value
    assert (err.phase, err.epoch, err.batch) == ("saliency_vae", 0, 0)
    assert "decoder.fc.weight" in err.snapshot


# ---------------------------------------------------------------- GAN phase


def test_gan_step_respects_freezing(tiny_data, normalized):
    cfg = tiny_config(phase="gan", epochs_gan=1, batch_size=8)
    gen = fresh_generator(cfg, tiny_data.zero_mask)
    frozen = gen.frozen_mask()
    before = {n: p.detach().clone() for n, p in gen.named_parameters()}
    gen, disc, hist = train_gan(cfg, normalized, tiny_data.saliency, gen, Discriminator(cfg.arch))
    for n, p in gen.named_parameters():
        if frozen[n]:
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, n
            assert torch.equal(before[n], p), n
    changed = [n for n, p in gen.named_parameters() if not frozen[n] and not torch.equal(before[n], p)]
    assert set(gen.boundary_parameters()) <= set(changed)
    assert any(n.startswith("mapper.") for n in changed)
    assert len(hist.train) == 1


def test_gan_without_adversary(tiny_data, normalized, tmp_path):
    cfg = tiny_config(phase="gan", adversarial=False, epochs_gan=2)
    gen = fresh_generator(cfg, tiny_data.zero_mask)
    log = MetricsLog(tmp_path / "m.jsonl")
    _, disc, hist = train_gan(cfg, normalized, tiny_data.saliency, gen, None, log_to=log)
    assert disc is None and len(hist.train) == 2
    assert all(r["loss_adv"] is None for r in log.records)


def test_saturated_discriminator_warns(tiny_data, normalized):
    cfg = tiny_config(phase="gan", epochs_gan=1, lr_discriminator=0.0)
    gen = fresh_generator(cfg, tiny_data.zero_mask)
    disc = Discriminator(cfg.arch)
    with torch.no_grad():
        disc.out.weight.zero_()
        disc.out.bias.fill_(-40.0)
    with pytest.warns(DiscriminatorSaturation):
        _, _, hist = train_gan(cfg, normalized, tiny_data.saliency, gen, disc)
    assert hist.events and "saturated" in hist.events[0]


def test_early_stop_on_flat_validation(tiny_data, normalized):
    cfg = tiny_config(phase="gan", epochs_gan=10, lr_generator=0.0, lr_discriminator=0.0,
                      early_stop=True, patience=2)
    gen = fresh_generator(cfg, tiny_data.zero_mask)
    val = (normalized[:2], tiny_data.saliency[:2], tiny_data.trial_ids[:2])
    _, _, hist = train_gan(cfg, normalized, tiny_data.saliency, gen, Discriminator(cfg.arch), val=val)
    assert hist.stopped_early
    assert len(hist.train) == 3 and hist.best_epoch == 0


@pytest.mark.slow
def test_discriminator_separates_after_training(tiny_data, normalized):
    cfg = tiny_config(phase="gan", epochs_gan=15, lr_generator=0.0, lr_discriminator=1e-3)
    gen = fresh_generator(cfg, tiny_data.zero_mask)
    train, held = slice(0, 6), slice(6, 8)
    gen, disc, _ = train_gan(cfg, normalized[train], tiny_data.saliency[train], gen, Discriminator(cfg.arch))
    from eegsal.models import generate_maps

    fake = generate_maps(gen, normalized[held], list(tiny_data.trial_ids[held]))
    disc.eval()
    with torch.no_grad():
        d_real = disc(torch.as_tensor(tiny_data.saliency[held, None], dtype=torch.float32)).mean()
        d_fake = disc(torch.as_tensor(fake[:, None], dtype=torch.float32)).mean()
    assert d_real > d_fake


def test_content_bce_matches_direct_formula(tiny_data, normalized):
    cfg = tiny_config()
    gen = fresh_generator(cfg, tiny_data.zero_mask)
    from eegsal.models import generate_maps

    ids = list(tiny_data.trial_ids)
    p = generate_maps(gen, normalized, ids, seed=3)
    t = tiny_data.saliency
    direct = np.mean([-(ti * np.log(pi) + (1 - ti) * np.log(1 - pi)) for ti, pi in zip(t.ravel(), p.ravel())])
    assert content_bce(gen, normalized, t, ids, seed=3) == pytest.approx(direct, rel=1e-9)


# ---------------------------------------------------------------- folds


def test_five_participants_give_disjoint_grouped_folds():
    pids = [f"p{i}" for i in range(5) for _ in range(4)]
    tids = [f"{p}_t{j}" for j, p in enumerate(pids)]
    folds = make_folds(tids, pids, 5)
    assert len(folds) == 5
    tested = [t for f in folds for t in f.test_ids]
    assert sorted(tested) == sorted(tids)
    owner = dict(zip(tids, pids))
    for f in folds:
        assert not set(f.test_ids) & set(f.train_ids)
        assert not {owner[t] for t in f.test_ids} & {owner[t] for t in f.train_ids}


def test_uneven_participants_still_grouped():
    pids = [f"p{i}" for i in range(7) for _ in range(2)]
    tids = [f"t{i}" for i in range(len(pids))]
    folds = make_folds(tids, pids, 5)
    assert sorted(len(f.test_ids) for f in folds) == [2, 2, 2, 4, 4]


def test_four_participants_rejected():
    pids = [f"p{i}" for i in range(4) for _ in range(3)]
    with pytest.raises(ValueError, match="at least 5 participants"):
        make_folds([f"t{i}" for i in range(12)], pids, 5)


def test_aggregate_is_mean_of_fold_means():
    reports = []
    for k in range(5):
        rows = [dict(auc=0.5 + 0.01 * k + 0.001 * j, nss=float(k), cc=0.1 * j, bce=0.2) for j in range(3)]
        reports.append(MetricsReport.from_rows(rows, fold=k))
    agg = aggregate(reports)
    fold_auc = [np.mean([0.5 + 0.01 * k + 0.001 * j for j in range(3)]) for k in range(5)]
    assert agg["auc"]["mean"] == pytest.approx(np.mean(fold_auc), abs=1e-12)
    assert agg["nss"]["std"] == pytest.approx(np.std([0, 1, 2, 3, 4]), abs=1e-12)
    assert agg["folds"] == [0, 1, 2, 3, 4]


def test_crossvalidate_writes_fold_dirs(tmp_path):
    from eegsal.data_io import SyntheticSpec, generate_synthetic, prepare_trials
    from eegsal.training import crossvalidate

    data = prepare_trials(generate_synthetic(SyntheticSpec(n_participants=5, trials_per_participant=2, seed=2)))
    cfg = tiny_config(epochs_saliency_vae=1, epochs_eeg_vae=1, epochs_gan=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiscriminatorSaturation)
        reports, agg = crossvalidate(data, cfg, 5, tmp_path)
    assert [r.fold for r in reports] == list(range(5))
    assert all(r.n_trials == 2 for r in reports)
    for k in range(5):
        fold = tmp_path / f"fold_{k}"
        assert (fold / "report.json").exists() and (fold / "checkpoints" / "generator.ckpt").exists()
        assert len((fold / "metrics.jsonl").read_text().splitlines()) == 3
    assert json.loads((tmp_path / "aggregate.json").read_text())["folds"] == list(range(5))


@pytest.mark.slow
def test_saliency_vae_curve_on_64_maps():
    from eegsal.data_io import SyntheticSpec, generate_synthetic, prepare_trials

    data = prepare_trials(generate_synthetic(SyntheticSpec(n_participants=4, trials_per_participant=16, seed=0)))
    # no schedule, so the first 100 epochs of a 200-epoch run are these 100
    cfg = tiny_config(phase="saliency_vae", epochs_saliency_vae=100, lr_vae=1e-4, batch_size=16)
    torch.manual_seed(0)
    _, hist = train_vae(cfg, data.saliency, saliency_vae(cfg.arch))
    smooth = np.convolve(hist.train, np.ones(10) / 10, "valid")
    assert np.all(np.diff(smooth) < 0)
