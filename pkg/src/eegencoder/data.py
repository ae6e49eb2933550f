"""Trial ingestion, normalization, the EEGTRIAL1 interchange format, and
synthetic class-conditional test data."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError

TRAIN_SESSION = 0
EVAL_SESSION = 1
_SESSION_NAMES = {TRAIN_SESSION: "train", EVAL_SESSION: "eval"}
_SESSION_CODES = {"train": TRAIN_SESSION, "eval": EVAL_SESSION}

# class -> dominant oscillation frequency (Hz) for synthetic trials
_SYNTH_FREQS = (8.0, 12.0, 20.0, 26.0)
_SAMPLE_RATE = 250.0


class TrialFormatError(ValueError):
    """Base class for interchange-file problems."""


class BadMagicError(TrialFormatError):
    """File does not start with the EEGTRIAL1 magic/version string."""


class TruncatedFileError(TrialFormatError):
    """File ended before the declared payload was read."""


class ShapeMismatchError(TrialFormatError):
    """Trial dimensions disagree with the file header or the expected shape."""


class LabelRangeError(TrialFormatError):
    """A trial label falls outside {0, 1, 2, 3}."""


@dataclass
class Trial:
    """One recording: a channels-by-time signal with its class label."""

    signal: np.ndarray  # (channels, samples) float64
    label: int
    subject_id: int = 0
    session_id: int = TRAIN_SESSION

    def __post_init__(self):
        self.signal = np.ascontiguousarray(self.signal, dtype=np.float64)
        if self.signal.ndim != 2:
            raise ShapeMismatchError(f"trial signal must be (channels, samples), got {self.signal.shape}")
        if not np.all(np.isfinite(self.signal)):
            raise ContractError("trial signal contains non-finite values")
        if not 0 <= int(self.label) <= 3:
            raise LabelRangeError(f"label must lie in 0..3, got {self.label}")
        self.label = int(self.label)


@dataclass
class Scaler:
    """Per-channel (or global) mean/std statistics fitted on training data."""

    mean: np.ndarray
    std: np.ndarray
    mode: str = "per_channel"


@dataclass
class TrialSet:
    trials: list[Trial] = field(default_factory=list)
    scaler: Scaler | None = None

    def __post_init__(self):
        shapes = {t.signal.shape for t in self.trials}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"trials disagree on shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def channels(self) -> int:
        return self.trials[0].signal.shape[0]

    @property
    def samples(self) -> int:
        return self.trials[0].signal.shape[1]

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def signals(self) -> np.ndarray:
        """Stacked (n, channels, samples) array."""
        return np.stack([t.signal for t in self.trials])

    def subset(self, indices) -> "TrialSet":
        return TrialSet([self.trials[i] for i in indices], scaler=self.scaler)

    def filter(self, subject_id: int | None = None, session_id: int | None = None) -> "TrialSet":
        kept = [
            t
            for t in self.trials
            if (subject_id is None or t.subject_id == subject_id)
            and (session_id is None or t.session_id == session_id)
        ]
        return TrialSet(kept, scaler=self.scaler)

    def subjects(self) -> list[int]:
        return sorted({t.subject_id for t in self.trials})


def fit_scaler(train: TrialSet, mode: str = "per_channel") -> Scaler:
    """Mean/std over all training trials' time samples pooled; std floored at 1e-8."""
    if len(train) == 0:
        raise ContractError("cannot fit a scaler on an empty trial set")
    if mode not in ("per_channel", "global"):
        raise ContractError(f"scaler mode must be 'per_channel' or 'global', got {mode!r}")
    stacked = train.signals()  # (n, C, T)
    if mode == "per_channel":
        mean = stacked.mean(axis=(0, 2))
        std = stacked.std(axis=(0, 2))
    else:
        mean = np.full(stacked.shape[1], stacked.mean())
        std = np.full(stacked.shape[1], stacked.std())
    return Scaler(mean=mean, std=np.maximum(std, 1e-8), mode=mode)


def apply_scaler(trial_set: TrialSet, scaler: Scaler) -> TrialSet:
    """(x - mean) / std per channel; the scaler must come from training data."""
    if len(trial_set) and trial_set.channels != scaler.mean.shape[0]:
        raise ShapeMismatchError(
            f"scaler has {scaler.mean.shape[0]} channels, data has {trial_set.channels}"
        )
    mean = scaler.mean[:, None]
    std = scaler.std[:, None]
    scaled = [
        Trial((t.signal - mean) / std, t.label, t.subject_id, t.session_id) for t in trial_set.trials
    ]
    return TrialSet(scaled, scaler=scaler)


# -- EEGTRIAL1 binary interchange format --------------------------------------
#
# magic "EEGTRIAL1" (9 bytes), then little-endian:
#   int32 n_trials, int32 channels, int32 samples
#   per trial: int32 label, int32 subject, int32 session,
#              float32[channels*samples] row-major signal

_TRIAL_MAGIC = b"EEGTRIAL1"


def save_trialset(path, trial_set: TrialSet) -> None:
    if len(trial_set) == 0:
        raise ContractError("refusing to write an empty trial set")
    c, s = trial_set.channels, trial_set.samples
    with open(path, "wb") as f:
        f.write(_TRIAL_MAGIC)
        f.write(struct.pack("<iii", len(trial_set), c, s))
        for t in trial_set.trials:
            if t.signal.shape != (c, s):
                raise ShapeMismatchError(f"trial shape {t.signal.shape} differs from set shape ({c},{s})")
            f.write(struct.pack("<iii", t.label, t.subject_id, t.session_id))
            f.write(t.signal.astype("<f4").tobytes())


def load_trialset(path, expect_channels: int | None = None, expect_samples: int | None = None) -> TrialSet:
    """Read an EEGTRIAL1 file; format violations raise distinct errors."""
    with open(path, "rb") as f:
        magic = f.read(len(_TRIAL_MAGIC))
        if magic != _TRIAL_MAGIC:
            raise BadMagicError(f"not an EEGTRIAL1 file (magic {magic!r})")
        header = f.read(12)
        if len(header) != 12:
            raise TruncatedFileError("file ended inside the header")
        n, c, s = struct.unpack("<iii", header)
        if n <= 0 or c <= 0 or s <= 0:
            raise ShapeMismatchError(f"invalid header counts: n={n}, channels={c}, samples={s}")
        if expect_channels is not None and c != expect_channels:
            raise ShapeMismatchError(f"expected {expect_channels} channels, file has {c}")
        if expect_samples is not None and s != expect_samples:
            raise ShapeMismatchError(f"expected {expect_samples} samples, file has {s}")
        trials = []
        signal_bytes = c * s * 4
        for i in range(n):
            meta = f.read(12)
            if len(meta) != 12:
                raise TruncatedFileError(f"file ended at trial {i} of {n}")
            label, subject, session = struct.unpack("<iii", meta)
            if not 0 <= label <= 3:
                raise LabelRangeError(f"trial {i} label {label} outside 0..3")
            raw = f.read(signal_bytes)
            if len(raw) != signal_bytes:
                raise TruncatedFileError(f"file ended inside trial {i}'s signal")
            signal = np.frombuffer(raw, dtype="<f4").reshape(c, s).astype(np.float64)
            trials.append(Trial(signal, label, subject, session))
    return TrialSet(trials)


# -- CSV + JSON manifest import ------------------------------------------------


def convert_csv_manifest(manifest_path, out_path) -> int:
    """Convert one-CSV-per-trial data (described by a JSON manifest) to EEGTRIAL1.

    The manifest maps {"trials": [{"file", "label", "subject", "session"}]},
    with CSV rows as channels and columns as time samples. Returns the number
    of converted trials.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    entries = manifest.get("trials")
    if not entries:
        raise ContractError(f"manifest {manifest_path} lists no trials")
    trials = []
    for entry in entries:
        csv_path = manifest_path.parent / entry["file"]
        with open(csv_path, newline="") as f:
            rows = [[float(v) for v in row] for row in csv.reader(f) if row]
        session = entry.get("session", "train")
        if session not in _SESSION_CODES:
            raise ContractError(f"manifest session must be 'train' or 'eval', got {session!r}")
        trials.append(
            Trial(
                np.array(rows),
                int(entry["label"]),
                int(entry.get("subject", 0)),
                _SESSION_CODES[session],
            )
        )
    shapes = {t.signal.shape for t in trials}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"trials disagree on shape: {sorted(shapes)}")
    save_trialset(out_path, TrialSet(trials))
    return len(trials)


# -- synthetic class-conditional data -------------------------------------------


def _class_channels(label: int, channels: int) -> np.ndarray:
    """Disjoint channel subsets: every 4th channel starting at the label."""
    return np.arange(label, channels, 4)[:5]


def synth_trials(
    n: int,
    seed: int,
    difficulty: float = 0.0,
    channels: int = 22,
    samples: int = 1125,
    subject_id: int = 0,
    session_id: int = TRAIN_SESSION,
) -> TrialSet:
    """Balanced labeled trials with class-specific sinusoid banks plus noise.

    Each class drives its own channel subset at its own frequency from
    {8, 12, 20, 26} Hz (250 Hz sampling); ``difficulty`` scales additive
    Gaussian noise, with 0 giving band-power-separable classes.
    """
    if n < 4:
        raise ContractError(f"need at least 4 trials for balanced labels, got {n}")
    rng = np.random.default_rng(seed)
    t = np.arange(samples) / _SAMPLE_RATE
    trials = []
    for i in range(n):
        label = i % 4
        signal = difficulty * rng.standard_normal((channels, samples))
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * _SYNTH_FREQS[label] * t + phase)
        signal[_class_channels(label, channels)] += wave
        trials.append(Trial(signal, label, subject_id, session_id))
    return TrialSet(trials)


def band_power_classify(trial_set: TrialSet) -> np.ndarray:
    """Independent oracle: pick the class whose frequency/channel bank is loudest."""
    preds = []
    for trial in trial_set:
        spectrum = np.abs(np.fft.rfft(trial.signal, axis=1)) ** 2
        freqs = np.fft.rfftfreq(trial.signal.shape[1], d=1.0 / _SAMPLE_RATE)
        scores = []
        for label, f0 in enumerate(_SYNTH_FREQS):
            bin_idx = np.argmin(np.abs(freqs - f0))
            scores.append(spectrum[_class_channels(label, trial.signal.shape[0]), bin_idx].sum())
        preds.append(int(np.argmax(scores)))
    return np.array(preds, dtype=np.int64)


def session_name(code: int) -> str:
    return _SESSION_NAMES.get(code, str(code))
