"""Dataset ingestion, synthetic data, prepared tensors and checkpoints.

Canonical on-disk layout, one directory per participant::

    <root>/<participant>/eeg.bin      float samples, row-major [n_samples, n_channels]
    <root>/<participant>/eeg.json     {"sampling_rate", "channels", "dtype", "n_samples"}
    <root>/<participant>/gaze.csv     columns t,x,y (seconds; normalized screen coords)
    <root>/<participant>/events.csv   column onset (seconds)

Other archive formats plug in through a reader object exposing
``participants(root)`` and ``read(root, participant_id)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import gaze as gz
from .imaging import MontageGeometry, build_eeg_image
from .signal_prep import (
    RawRecording,
    SegmentationIssue,
    Trial,
    preprocess_trial,
    segment_trials,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPECTED_RATE = 500.0
EXPECTED_CHANNELS = 32


class DatasetError(RuntimeError):
    pass


class CheckpointMismatch(RuntimeError):
    pass


class CheckpointIntegrityError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# raw dataset


@dataclass
class DatasetManifest:
    root: str
    participants: list = field(default_factory=list)
    files: dict = field(default_factory=dict)
    sampling_rates: dict = field(default_factory=dict)
    n_trials: int = 0
    schema_version: int = SCHEMA_VERSION
    errors: list = field(default_factory=list)


class CanonicalReader:
    """Reader for the documented per-participant directory layout."""

    def participants(self, root: Path) -> list[str]:
        return sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "eeg.json").exists())

    def files(self, root: Path, pid: str) -> dict:
        d = root / pid
        return {k: str(d / f) for k, f in
                (("eeg", "eeg.bin"), ("header", "eeg.json"), ("gaze", "gaze.csv"), ("events", "events.csv"))}

    def read(self, root: Path, pid: str) -> RawRecording:
        files = self.files(root, pid)
        with open(files["header"]) as fh:
            header = json.load(fh)
        for key in ("sampling_rate", "channels", "dtype", "n_samples"):
            if key not in header:
                raise DatasetError(f"{files['header']}: missing field {key!r}")
        n_ch = len(header["channels"])
        raw = np.fromfile(files["eeg"], dtype=np.dtype(header["dtype"]).newbyteorder("<"))
        if raw.size != header["n_samples"] * n_ch:
            raise DatasetError(
                f"{files['eeg']}: expected {header['n_samples']}x{n_ch} values, found {raw.size}"
            )
        samples = raw.reshape(header["n_samples"], n_ch).astype(np.float64)
        gaze = _read_csv_columns(files["gaze"], ("t", "x", "y"))
        onsets = _read_csv_columns(files["events"], ("onset",))[:, 0]
        if gaze.size and (np.any(gaze[:, 1:] < 0) or np.any(gaze[:, 1:] > 1)):
            raise DatasetError(f"{files['gaze']}: gaze coordinates outside [0, 1]")
        return RawRecording(samples, float(header["sampling_rate"]), list(header["channels"]),
                            list(onsets), participant_id=pid, gaze=gaze)


def _read_csv_columns(path, columns) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {missing}")
        try:
            rows = [[float(row[c]) for c in columns] for row in reader]
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: unparsable value ({exc})") from None
    return np.asarray(rows, dtype=float).reshape(-1, len(columns))


def load_dataset(root, reader=None, expected_rate: float = EXPECTED_RATE,
                 expected_channels: int = EXPECTED_CHANNELS, pre_s: float = 1.0,
                 post_s: float = 3.0) -> tuple[DatasetManifest, list[Trial]]:
    """Read every participant under ``root`` and segment it into trials.

    Problems are collected in ``manifest.errors`` per file; one bad
    participant does not stop the others from loading.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    reader = reader or CanonicalReader()
    manifest = DatasetManifest(root=str(root))
    trials: list[Trial] = []
    pids = reader.participants(root)
    if not pids:
        manifest.errors.append(f"{root}: no participants found")
        return manifest, trials
    for pid in pids:
        try:
            rec = reader.read(root, pid)
        except (DatasetError, OSError, ValueError) as exc:
            manifest.errors.append(f"{pid}: {exc}")
            continue
        if rec.sampling_rate != expected_rate:
            manifest.errors.append(f"{pid}: sampling rate {rec.sampling_rate} Hz, expected {expected_rate}")
            continue
        if len(rec.electrode_names) != expected_channels:
            manifest.errors.append(
                f"{pid}: {len(rec.electrode_names)} channels, expected {expected_channels}")
            continue
        issues: list[SegmentationIssue] = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = segment_trials(rec, pre_s, post_s, issues=issues)
        manifest.errors += [f"{i.participant_id}: {i.reason}" for i in issues]
        for t in got:
            t.meta["channels"] = list(rec.electrode_names)
        trials += got
        manifest.participants.append(pid)
        if hasattr(reader, "files"):
            manifest.files[pid] = reader.files(root, pid)
        manifest.sampling_rates[pid] = rec.sampling_rate
    manifest.n_trials = len(trials)
    return manifest, trials


def write_recording(root, rec: RawRecording, dtype="float32") -> Path:
    """Write one recording in the canonical layout."""
    d = Path(root) / rec.participant_id
    d.mkdir(parents=True, exist_ok=True)
    rec.samples.astype(np.dtype(dtype).newbyteorder("<")).tofile(d / "eeg.bin")
    header = {"sampling_rate": rec.sampling_rate, "channels": list(rec.electrode_names),
              "dtype": dtype, "n_samples": int(rec.samples.shape[0])}
    (d / "eeg.json").write_text(json.dumps(header, indent=2))
    with open(d / "gaze.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y"])
        for t, x, y in (rec.gaze if rec.gaze is not None else []):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
    with open(d / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset"])
        for onset in rec.stimulus_onsets:
            w.writerow([repr(float(onset))])
    return d


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_participants: int = 5
    trials_per_participant: int = 20
    seed: int = 0
    sampling_rate: float = 500.0
    spacing_s: float = 5.0
    lateral_uv: float = 20.0
    erp_uv: float = 15.0
    noise_uv: float = 4.0
    gaze_rate_hz: float = 20.0

    @classmethod
    def parse(cls, text: str) -> SyntheticSpec:
        """Parse ``n=5,trials=20,seed=7``-style strings."""
        keys = {"n": "n_participants", "participants": "n_participants",
                "trials": "trials_per_participant", "seed": "seed"}
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            k, _, v = part.partition("=")
            if k.strip() not in keys:
                raise ValueError(f"unknown synthetic key {k!r}")
            kw[keys[k.strip()]] = int(v)
        return cls(**kw)


def _left_weight(geometry: MontageGeometry) -> np.ndarray:
    # smooth hemisphere weight in [0, 1]: 1 far left, 0 far right
    x = geometry.positions_3d[:, 0]
    return 1.0 / (1.0 + np.exp(x / 0.15))


def synthetic_recordings(spec: SyntheticSpec, geometry: MontageGeometry | None = None) -> list[RawRecording]:
    """Continuous recordings whose lateralized EEG follows the attended screen side.

    Each trial fixates a cluster on the left or right half of the screen. After
    stimulus onset the hemisphere on the attended side carries a sustained
    deflection plus 10 Hz activity, on top of a stimulus-locked evoked
    response shared by all trials and band-limited background noise.
    """
    if spec.n_participants < 1 or spec.trials_per_participant < 1:
        raise ValueError("participant and trial counts must be positive")
    geometry = geometry or MontageGeometry.standard()
    rng = np.random.default_rng(spec.seed)
    fs = spec.sampling_rate
    left_w = _left_weight(geometry)
    y3 = geometry.positions_3d[:, 1]
    erp_pattern = np.exp(-((y3 + 0.3) ** 2) / 0.3)  # centro-parietal
    recs = []
    for p in range(spec.n_participants):
        pid = f"p{p:02d}"
        gain = rng.uniform(0.8, 1.2)
        n_trials = spec.trials_per_participant
        onsets = 1.5 + spec.spacing_s * np.arange(n_trials)
        total = int(round((onsets[-1] + 3.5) * fs))
        t = np.arange(total) / fs
        eeg = _background(rng, total, len(left_w), fs, spec.noise_uv)
        gaze_rows = []
        for onset in onsets:
            side = rng.integers(2)  # 0: left, 1: right
            cx = rng.uniform(0.12, 0.38) + 0.5 * side
            cy = rng.uniform(0.3, 0.7)
            tau = t - onset
            active = (tau >= 0) & (tau < 3.0)
            ramp = np.where(active, 1.0 - np.exp(-np.clip(tau, 0, None) / 0.15), 0.0)
            weight = left_w if side == 0 else 1.0 - left_w
            lateral = ramp * (1.0 + 0.3 * np.sin(2 * np.pi * 10 * tau))
            eeg += gain * spec.lateral_uv * np.outer(lateral, weight)
            erp = np.where(active, np.exp(-((tau - 0.3) ** 2) / 0.01) - 0.5 * np.exp(-((tau - 0.6) ** 2) / 0.02), 0)
            eeg += gain * spec.erp_uv * np.outer(erp, erp_pattern)
            n_gaze = int(3.0 * spec.gaze_rate_hz)
            gt = onset + np.sort(rng.uniform(0, 3.0, n_gaze))
            gx = np.clip(cx + rng.normal(0, 0.03, n_gaze), 0, 1)
            gy = np.clip(cy + rng.normal(0, 0.04, n_gaze), 0, 1)
            gaze_rows.append(np.column_stack([gt, gx, gy]))
        recs.append(RawRecording(eeg, fs, list(geometry.electrode_names), list(onsets),
                                 participant_id=pid, gaze=np.concatenate(gaze_rows)))
    return recs


def _background(rng, n, n_ch, fs, amp):
    white = rng.normal(0.0, 1.0, (n, n_ch))
    # crude 1/f-like colouring: sum of leaky integrators
    out = np.zeros_like(white)
    for a in (0.5, 0.9, 0.98):
        out += lfilter([1 - a], [1, -a], white, axis=0) / np.sqrt((1 - a) / (1 + a))
    return amp * out / 3.0


def generate_synthetic(spec: SyntheticSpec | dict | None = None, geometry=None) -> list[Trial]:
    """Seeded synthetic trials (2000 samples x 32 channels at 500 Hz)."""
    if spec is None:
        spec = SyntheticSpec()
    elif isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    trials = []
    for rec in synthetic_recordings(spec, geometry):
        got = segment_trials(rec)
        for t in got:
            t.meta["channels"] = list(rec.electrode_names)
        trials += got
    return trials


# --------------------------------------------------------------------------
# prepared tensors


@dataclass
class PreparedData:
    """Model-ready arrays; EEG images are stored before z-normalization."""

    eeg_images: np.ndarray  # [n, 401, 32, 32] float32
    zero_mask: np.ndarray  # [32, 32] bool
    saliency: np.ndarray  # [n, 81, 81] float32
    fixations: np.ndarray  # [n, 81, 81] bool
    trial_ids: list
    participant_ids: list

    def __len__(self):
        return len(self.trial_ids)

    def subset(self, idx) -> PreparedData:
        idx = np.asarray(idx, dtype=int)
        return PreparedData(self.eeg_images[idx], self.zero_mask, self.saliency[idx],
                            self.fixations[idx], [self.trial_ids[i] for i in idx],
                            [self.participant_ids[i] for i in idx])

    FILES = ("eeg_images.npy", "zero_mask.npy", "saliency.npy", "fixations.npy")

    def save(self, out_dir, extra_manifest: dict | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, arr in zip(self.FILES, (self.eeg_images, self.zero_mask, self.saliency, self.fixations)):
            _atomic_write(out / name, lambda fh, arr=arr: np.save(fh, arr))
        manifest = {"schema_version": SCHEMA_VERSION, "trial_ids": self.trial_ids,
                    "participant_ids": self.participant_ids, "n_trials": len(self),
                    "eeg_shape": list(self.eeg_images.shape[1:]),
                    "saliency_shape": list(self.saliency.shape[1:])}
        manifest.update(extra_manifest or {})
        _atomic_write(out / "manifest.json",
                      lambda fh: fh.write(json.dumps(manifest, indent=2, sort_keys=True).encode()))

    @classmethod
    def load(cls, out_dir, mmap: bool = True) -> PreparedData:
        out = Path(out_dir)
        manifest = json.loads((out / "manifest.json").read_text())
        mode = "r" if mmap else None
        arrays = [np.load(out / name, mmap_mode=mode) for name in cls.FILES]
        return cls(arrays[0], np.asarray(arrays[1]), arrays[2], arrays[3],
                   manifest["trial_ids"], manifest["participant_ids"])


def prepare_trials(trials: list[Trial], geometry: MontageGeometry | None = None,
                   error_radius_px: float = gz.ERROR_RADIUS_PX,
                   sigma_px: float = gz.SIGMA_PX) -> PreparedData:
    """Preprocess, image and rasterize every trial."""
    geometry = geometry or MontageGeometry.standard()
    n = len(trials)
    images = np.zeros((n, 401, *geometry.grid_size), dtype=np.float32)
    maps = np.zeros((n, gz.SQUARE, gz.SQUARE), dtype=np.float32)
    fix = np.zeros((n, gz.SQUARE, gz.SQUARE), dtype=bool)
    for i, tr in enumerate(trials):
        eeg = tr.eeg
        channels = tr.meta.get("channels")
        if channels is not None and list(channels) != list(geometry.electrode_names):
            eeg = eeg[:, [channels.index(c) for c in geometry.electrode_names]]
        x = preprocess_trial(eeg, tr.sampling_rate)
        if x.shape[0] != images.shape[1]:
            raise ValueError(f"{tr.trial_id}: {x.shape[0]} frames after decimation, expected 401")
        images[i] = build_eeg_image(x, geometry, tr.trial_id).frames
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", gz.EmptyGazeWarning)
            maps[i] = gz.saliency_from_gaze(tr.gaze[:, :2], error_radius_px, sigma_px)
        fix[i] = gz.fixation_set(tr.gaze[:, :2])
    return PreparedData(images, geometry.zero_mask.copy(), maps, fix,
                        [t.trial_id for t in trials], [t.participant_id for t in trials])


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"EEGSAL-CKPT\n"


@dataclass
class Checkpoint:
    tensors: dict  # name -> np.ndarray
    fingerprint: str
    phase: str = ""
    epoch: int = 0
    norm_stats: dict | None = None
    config: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _atomic_write(path: Path, write) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": 1, "fingerprint": ckpt.fingerprint, "phase": ckpt.phase, "epoch": ckpt.epoch,
        "norm_stats": ckpt.norm_stats, "config": ckpt.config, "arch": ckpt.arch, "extra": ckpt.extra,
        "tensors": entries, "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + head + b"\n" + payload


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = checkpoint_bytes(ckpt)
    _atomic_write(path, lambda fh: fh.write(blob))
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"{path}: corrupt header ({exc})") from None
    payload = blob[end + 1:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise CheckpointMismatch(
            f"{path}: architecture fingerprint {header['fingerprint']} does not match "
            f"model fingerprint {expected_fingerprint}")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(tensors, header["fingerprint"], header["phase"], header["epoch"],
                      header["norm_stats"], header["config"], header["arch"], header["extra"])


def model_checkpoint(model, arch, phase: str, epoch: int = 0, norm_stats=None, config=None,
                     extra=None) -> Checkpoint:
    from .models import architecture_fingerprint

    tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint(tensors, architecture_fingerprint(model, arch), phase, epoch,
                      norm_stats, dict(config or {}), arch.to_dict(), dict(extra or {}))


def restore_model(model, ckpt: Checkpoint, arch=None) -> None:
    """Copy checkpoint tensors into ``model`` after verifying the fingerprint."""
    import torch

    from .models import architecture_fingerprint

    fp = architecture_fingerprint(model, arch)
    if fp != ckpt.fingerprint:
        raise CheckpointMismatch(
            f"checkpoint fingerprint {ckpt.fingerprint} does not match model fingerprint {fp}")
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.tensors.items()}
    model.load_state_dict(state)
