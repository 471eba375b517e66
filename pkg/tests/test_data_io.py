import json

import numpy as np
import pytest
import torch

from eegsal.data_io import (
    CheckpointIntegrityError,
    CheckpointMismatch,
    PreparedData,
    SyntheticSpec,
    _left_weight,
    checkpoint_bytes,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    model_checkpoint,
    restore_model,
    save_checkpoint,
    synthetic_recordings,
    write_recording,
)
from eegsal.imaging import fit_norm_stats
from eegsal.metrics import evaluate
from eegsal.models import ArchConfig, assemble_generator, eeg_vae, saliency_vae
from eegsal.signal_prep import preprocess_trial

SMALL = ArchConfig(width=0.125)


def _fixture_root(tmp_path, n=2):
    recs = synthetic_recordings(SyntheticSpec(n_participants=n, trials_per_participant=3, seed=1))
    for rec in recs:
        write_recording(tmp_path, rec)
    return recs


class TestLoadDataset:
    def test_well_formed(self, tmp_path):
        _fixture_root(tmp_path)
        manifest, trials = load_dataset(tmp_path)
        assert manifest.errors == []
        assert manifest.participants == ["p00", "p01"]
        assert len(trials) == 6
        assert all(t.eeg.shape == (2000, 32) for t in trials)
        assert [t.trial_id for t in trials] == sorted(t.trial_id for t in trials)

    def test_round_trip_values(self, tmp_path):
        recs = _fixture_root(tmp_path, 1)
        _, trials = load_dataset(tmp_path)
        start = int(round(recs[0].stimulus_onsets[0] * 500)) - 500
        np.testing.assert_allclose(trials[0].eeg, recs[0].samples[start:start + 2000].astype(np.float32))

    def test_empty_directory(self, tmp_path):
        manifest, trials = load_dataset(tmp_path)
        assert trials == [] and manifest.participants == []
        assert any("no participants" in e for e in manifest.errors)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_corrupt_gaze_is_isolated(self, tmp_path):
        _fixture_root(tmp_path)
        (tmp_path / "p01" / "gaze.csv").write_text("t,x\n0.1,0.2\n")
        manifest, trials = load_dataset(tmp_path)
        assert manifest.participants == ["p00"]
        assert len(trials) == 3
        assert any("p01" in e and "gaze.csv" in e for e in manifest.errors)

    def test_wrong_sampling_rate(self, tmp_path):
        _fixture_root(tmp_path)
        header = tmp_path / "p00" / "eeg.json"
        h = json.loads(header.read_text())
        h["sampling_rate"] = 250
        header.write_text(json.dumps(h))
        manifest, _ = load_dataset(tmp_path)
        assert any("p00" in e and "sampling rate" in e for e in manifest.errors)

    def test_truncated_eeg(self, tmp_path):
        _fixture_root(tmp_path)
        raw = tmp_path / "p00" / "eeg.bin"
        raw.write_bytes(raw.read_bytes()[:-8])
        manifest, trials = load_dataset(tmp_path)
        assert any("eeg.bin" in e for e in manifest.errors)
        assert len(trials) == 3


class TestSynthetic:
    def test_seeded(self):
        spec = SyntheticSpec(n_participants=1, trials_per_participant=3, seed=4)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.eeg, y.eeg)
            np.testing.assert_array_equal(x.gaze, y.gaze)

    def test_counts(self):
        trials = generate_synthetic(SyntheticSpec(5, 20, seed=0))
        assert len(trials) == 100
        assert len({t.participant_id for t in trials}) == 5

    def test_parse(self):
        spec = SyntheticSpec.parse("n=5,trials=20,seed=7")
        assert (spec.n_participants, spec.trials_per_participant, spec.seed) == (5, 20, 7)
        with pytest.raises(ValueError):
            SyntheticSpec.parse("bogus=1")

    def test_lateralization_effect_size(self, geometry):
        trials = generate_synthetic(SyntheticSpec(5, 20, seed=0))
        left_ch = _left_weight(geometry) > 0.9
        amp, side = [], []
        for t in trials:
            x = preprocess_trial(t.eeg, t.sampling_rate)
            amp.append(x[100:, left_ch].mean())  # post-onset frames
            side.append(t.gaze[:, 0].mean() < 0.5)
        amp, side = np.array(amp), np.array(side)
        a, b = amp[side], amp[~side]
        pooled = np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2)
        assert abs(a.mean() - b.mean()) / pooled > 1


class TestPrepared:
    def test_shapes(self, tiny_data):
        assert tiny_data.eeg_images.shape == (8, 401, 32, 32)
        assert tiny_data.saliency.shape == (8, 81, 81)
        assert tiny_data.fixations.dtype == bool
        assert np.all(tiny_data.eeg_images[:, :, tiny_data.zero_mask] == 0)

    def test_save_load(self, tiny_data, tmp_path):
        tiny_data.save(tmp_path)
        back = PreparedData.load(tmp_path)
        np.testing.assert_array_equal(back.eeg_images, tiny_data.eeg_images)
        assert back.trial_ids == tiny_data.trial_ids

    def test_subset(self, tiny_data):
        sub = tiny_data.subset([1, 3])
        assert sub.trial_ids == [tiny_data.trial_ids[1], tiny_data.trial_ids[3]]


class TestCheckpoint:
    def test_byte_round_trip(self, tmp_path):
        model = saliency_vae(SMALL)
        ckpt = model_checkpoint(model, SMALL, "saliency_vae", 3, {"mean": 1.0, "std": 2.0}, {"seed": 1})
        path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
        again = load_checkpoint(path)
        assert checkpoint_bytes(again) == path.read_bytes()
        assert again.epoch == 3 and again.norm_stats == {"mean": 1.0, "std": 2.0}

    def test_mismatched_architecture(self, tmp_path):
        ckpt = model_checkpoint(saliency_vae(SMALL), SMALL, "saliency_vae")
        other_arch = ArchConfig(width=0.25)
        with pytest.raises(CheckpointMismatch, match=ckpt.fingerprint):
            restore_model(saliency_vae(other_arch), ckpt, other_arch)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(tmp_path / "a.ckpt", expected_fingerprint="0" * 16)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(model_checkpoint(saliency_vae(SMALL), SMALL, "x"), tmp_path / "a.ckpt")
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello")
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_reloaded_evaluation_is_identical(self, tiny_data, tmp_path):
        torch.manual_seed(0)
        gen = assemble_generator(eeg_vae(SMALL, tiny_data.zero_mask), saliency_vae(SMALL))
        stats = fit_norm_stats(tiny_data.eeg_images, tiny_data.zero_mask)
        ckpt = model_checkpoint(gen, SMALL, "gan", norm_stats=stats.to_dict())
        path = save_checkpoint(ckpt, tmp_path / "g.ckpt")
        back = load_checkpoint(path)
        gen2 = assemble_generator(eeg_vae(SMALL, tiny_data.zero_mask), saliency_vae(SMALL))
        restore_model(gen2, back, SMALL)
        from eegsal.imaging import NormStats

        stats2 = NormStats(back.norm_stats["mean"], back.norm_stats["std"])
        a = evaluate(gen, tiny_data, stats, seed=3)
        b = evaluate(gen2, tiny_data, stats2, seed=3)
        assert a.per_trial == b.per_trial
