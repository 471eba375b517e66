"""Trial segmentation, low-pass filtering, artifact cleanup and decimation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt

log = logging.getLogger(__name__)

PRE_S = 1.0
POST_S = 3.0
CUTOFF_HZ = 35.0
DECIMATION = 5
CLIP_UV = 100.0


class ConfigurationError(ValueError):
    """Raised for parameter combinations that cannot be honoured."""


class SegmentationWarning(UserWarning):
    pass


@dataclass
class RawRecording:
    samples: np.ndarray  # [n_samples, n_electrodes], microvolts
    sampling_rate: float
    electrode_names: list[str]
    stimulus_onsets: list[float]
    participant_id: str = "p00"
    gaze: np.ndarray | None = None  # [n, 3] columns t, x, y

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {self.samples.shape}")
        if self.sampling_rate <= 0:
            raise ConfigurationError("sampling_rate must be positive")
        if self.samples.shape[1] != len(self.electrode_names):
            raise ValueError(
                f"{self.samples.shape[1]} columns but {len(self.electrode_names)} electrode names"
            )
        onsets = np.asarray(self.stimulus_onsets, dtype=float)
        if onsets.size > 1 and np.any(np.diff(onsets) <= 0):
            raise ValueError("stimulus onsets must be strictly increasing")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sampling_rate


@dataclass
class Trial:
    eeg: np.ndarray  # [n_trial_samples, n_electrodes]
    gaze: np.ndarray  # [n, 3] columns x, y, t (t relative to onset)
    trial_id: str
    participant_id: str
    sampling_rate: float = 500.0
    onset: float = 0.0
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SegmentationIssue:
    participant_id: str
    onset: float
    reason: str


def segment_trials(rec: RawRecording, pre_s: float = PRE_S, post_s: float = POST_S,
                   issues: list | None = None) -> list[Trial]:
    """Cut one trial per stimulus onset, ``pre_s`` before to ``post_s`` after.

    Onsets without enough signal on either side are skipped; a
    :class:`SegmentationWarning` is emitted and, if ``issues`` is given, a
    :class:`SegmentationIssue` is appended to it.
    """
    fs = rec.sampling_rate
    n_pre = int(round(pre_s * fs))
    n_len = int(round((pre_s + post_s) * fs))
    total = rec.samples.shape[0]
    trials = []
    for k, onset in enumerate(rec.stimulus_onsets):
        start = int(round(onset * fs)) - n_pre
        stop = start + n_len
        if start < 0 or stop > total:
            reason = (f"onset {onset:.3f}s needs [{onset - pre_s:.3f}, {onset + post_s:.3f}]s "
                      f"but recording spans [0, {rec.duration:.3f}]s")
            warnings.warn(f"{rec.participant_id}: skipping {reason}", SegmentationWarning,
                          stacklevel=2)
            if issues is not None:
                issues.append(SegmentationIssue(rec.participant_id, float(onset), reason))
            continue
        gaze = _gaze_window(rec.gaze, onset - pre_s, onset + post_s, onset)
        trials.append(Trial(
            eeg=rec.samples[start:stop].copy(),
            gaze=gaze,
            trial_id=f"{rec.participant_id}-t{k:04d}",
            participant_id=rec.participant_id,
            sampling_rate=fs,
            onset=float(onset),
        ))
    return trials


def _gaze_window(gaze, t0, t1, onset):
    if gaze is None or len(gaze) == 0:
        return np.zeros((0, 3))
    gaze = np.asarray(gaze, dtype=float)
    keep = (gaze[:, 0] >= t0) & (gaze[:, 0] < t1)
    sel = gaze[keep]
    # stored as (x, y, t relative to onset)
    return np.column_stack([sel[:, 1], sel[:, 2], sel[:, 0] - onset])


def lowpass_filter(eeg: np.ndarray, sampling_rate: float, cutoff: float = CUTOFF_HZ,
                   order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth low-pass along the time axis (axis 0)."""
    nyq = sampling_rate / 2.0
    if not 0 < cutoff < nyq:
        raise ConfigurationError(f"cutoff {cutoff} Hz must lie in (0, {nyq}) Hz")
    sos = butter(order, cutoff / nyq, btype="low", output="sos")
    return sosfiltfilt(sos, np.asarray(eeg, dtype=np.float64), axis=0)


def remove_artifacts(eeg: np.ndarray, clip_uv: float = CLIP_UV) -> np.ndarray:
    """Per-channel median subtraction followed by amplitude clipping."""
    eeg = np.asarray(eeg, dtype=np.float64)
    centered = eeg - np.median(eeg, axis=0, keepdims=True)
    return np.clip(centered, -clip_uv, clip_uv)


def downsample_indices(n: int, ratio: int) -> np.ndarray:
    if ratio < 1:
        raise ConfigurationError(f"decimation ratio must be >= 1, got {ratio}")
    idx = np.arange(0, n, ratio)
    if n and idx[-1] != n - 1:
        idx = np.append(idx, n - 1)
    return idx


def downsample(eeg: np.ndarray, ratio: int = DECIMATION) -> np.ndarray:
    """Keep every ``ratio``-th sample plus the final one.

    2000 samples at ratio 5 give the 401 frames the EEG encoder expects.
    """
    eeg = np.asarray(eeg)
    return eeg[downsample_indices(eeg.shape[0], ratio)]


def preprocess_trial(eeg: np.ndarray, sampling_rate: float, cutoff: float = CUTOFF_HZ,
                     ratio: int = DECIMATION, clip_uv: float = CLIP_UV) -> np.ndarray:
    filtered = lowpass_filter(eeg, sampling_rate, cutoff)
    return downsample(remove_artifacts(filtered, clip_uv), ratio)
