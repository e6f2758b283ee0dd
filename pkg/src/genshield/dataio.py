"""Sensor data ingestion, synthesis, normalization, windowing and splits.

Canonical dataset layout (one directory per dataset):
    descriptor.txt              key=value: m, sample_rate_hz, channels
    subjects.csv                subject_id,gender,age,weight,height  (gender F/M)
    sub<ID>_<activity>_trial<K>.csv
                                header t,ch0,...,ch{m-1}; one row per sample

Activities are the four used throughout: downstairs, upstairs, walking,
jogging.  Gender is encoded Female=0, Male=1.
"""

from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, LabeledDataError, ParseError, SchemaError

ACTIVITIES = ("downstairs", "upstairs", "walking", "jogging")
ACTIVITY_INDEX = {a: i for i, a in enumerate(ACTIVITIES)}
N_ACTIVITIES = len(ACTIVITIES)

FEMALE, MALE = 0, 1

_TRIAL_FILE_RE = re.compile(r"^sub(\d+)_([a-zA-Z]+)_trial(\d+)\.csv$")


@dataclass
class SensorRecording:
    """One subject/trial/activity multichannel time-series."""

    subject_id: int
    trial_id: int
    activity: str
    samples: np.ndarray  # (m, T)
    sample_rate_hz: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[1] < 1:
            raise ArgumentError("samples must be a (m, T) matrix with T >= 1")
        if self.activity not in ACTIVITY_INDEX:
            raise LabeledDataError(f"unknown activity {self.activity!r}")
        if self.sample_rate_hz <= 0:
            raise ArgumentError("sample_rate_hz must be positive")

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]


@dataclass
class SubjectProfile:
    subject_id: int
    gender: int  # FEMALE=0, MALE=1
    age: float
    weight: float
    height: float

    def __post_init__(self):
        if self.gender not in (FEMALE, MALE):
            raise ArgumentError("gender must be 0 (female) or 1 (male)")
        if self.age <= 0 or self.weight <= 0 or self.height <= 0:
            raise ArgumentError("age, weight and height must be positive")


@dataclass
class Window:
    """An (m, d) slice of a recording plus its labels; the unit of training."""

    data: np.ndarray  # (m, d)
    activity_onehot: np.ndarray  # (4,)
    gender_label: int
    subject_id: int
    trial_id: int
    start_index: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.activity_onehot = np.asarray(self.activity_onehot)
        if self.activity_onehot.shape != (N_ACTIVITIES,):
            raise ArgumentError(f"activity one-hot must have length {N_ACTIVITIES}")
        if self.activity_onehot.sum() != 1:
            raise ArgumentError("activity one-hot must sum to exactly 1")

    @property
    def activity_index(self):
        return int(self.activity_onehot.argmax())


@dataclass
class NormalizationStats:
    """Per-channel min/max fitted on the training partition only."""

    channel_min: np.ndarray
    channel_max: np.ndarray

    def __post_init__(self):
        self.channel_min = np.asarray(self.channel_min, dtype=np.float64)
        self.channel_max = np.asarray(self.channel_max, dtype=np.float64)
        if self.channel_min.shape != self.channel_max.shape:
            raise ArgumentError("min and max must have the same length")
        if np.any(self.channel_max < self.channel_min):
            raise ArgumentError("channel max must be >= channel min")

    @property
    def n_channels(self):
        return self.channel_min.shape[0]

    def span(self):
        s = self.channel_max - self.channel_min
        # degenerate (constant) channels get span 1 to avoid division by zero
        return np.where(s == 0, 1.0, s)


@dataclass
class DatasetDescriptor:
    n_channels: int
    sample_rate_hz: float
    channel_names: tuple = ()

    def __post_init__(self):
        if not self.channel_names:
            self.channel_names = tuple(f"ch{i}" for i in range(self.n_channels))


@dataclass
class SplitPlan:
    """Train/test partition; keys are (subject, trial) in Trial mode and
    subject ids in Subject mode."""

    mode: str  # "trial" or "subject"
    train_keys: set = field(default_factory=set)
    test_keys: set = field(default_factory=set)
    fold_index: int = 0

    def side(self, recording):
        key = (
            (recording.subject_id, recording.trial_id)
            if self.mode == "trial"
            else recording.subject_id
        )
        if key in self.train_keys:
            return "train"
        if key in self.test_keys:
            return "test"
        return None


# ---------------------------------------------------------------------------
# Loading / writing the canonical CSV layout
# ---------------------------------------------------------------------------


def read_descriptor(path):
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"descriptor file not found: {path}")
    values = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SchemaError(f"descriptor line without '=': {line!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    for key in ("m", "sample_rate_hz"):
        if key not in values:
            raise SchemaError(f"descriptor missing key {key!r}")
    channels = tuple(
        c.strip() for c in values.get("channels", "").split(",") if c.strip()
    )
    return DatasetDescriptor(
        n_channels=int(values["m"]),
        sample_rate_hz=float(values["sample_rate_hz"]),
        channel_names=channels,
    )


def _load_profiles(path):
    profiles = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "gender", "age", "weight", "height"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(
                f"subjects.csv missing column(s): {', '.join(sorted(missing))}"
            )
        for lineno, row in enumerate(reader, start=2):
            gender = row["gender"].strip().upper()
            if gender not in ("F", "M"):
                raise LabeledDataError(
                    f"{path}:{lineno}: gender must be F or M, got {row['gender']!r}"
                )
            try:
                profiles.append(
                    SubjectProfile(
                        subject_id=int(row["subject_id"]),
                        gender=FEMALE if gender == "F" else MALE,
                        age=float(row["age"]),
                        weight=float(row["weight"]),
                        height=float(row["height"]),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return profiles


def _load_trial_file(path, descriptor, subject_id, activity, trial_id):
    m = descriptor.n_channels
    expected = ["t"] + [f"ch{i}" for i in range(m)]
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            missing = set(expected) - set(h.strip() for h in (header or ()))
            raise SchemaError(
                f"{path}: bad header, missing column(s): "
                f"{', '.join(sorted(missing)) or 'none (extra/misordered columns)'}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise SchemaError(f"{path}:{lineno}: expected {len(expected)} columns")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
    if not rows:
        raise SchemaError(f"{path}: trial file has no data rows")
    samples = np.asarray(rows, dtype=np.float64).T  # (m, T)
    return SensorRecording(
        subject_id=subject_id,
        trial_id=trial_id,
        activity=activity,
        samples=samples,
        sample_rate_hz=descriptor.sample_rate_hz,
    )


def load_recordings(path, descriptor=None):
    """Load a canonical dataset directory -> (recordings, profiles).

    An empty directory yields empty lists.  The descriptor is read from
    descriptor.txt unless given explicitly.
    """
    root = Path(path)
    if not root.is_dir():
        raise ArgumentError(f"not a directory: {root}")
    trial_files = sorted(p for p in root.iterdir() if _TRIAL_FILE_RE.match(p.name))
    subjects_file = root / "subjects.csv"
    if not trial_files and not subjects_file.exists():
        return [], []
    if descriptor is None:
        descriptor = read_descriptor(root / "descriptor.txt")
    profiles = _load_profiles(subjects_file) if subjects_file.exists() else []
    recordings = []
    for p in trial_files:
        match = _TRIAL_FILE_RE.match(p.name)
        subject_id, activity, trial_id = (
            int(match.group(1)),
            match.group(2).lower(),
            int(match.group(3)),
        )
        if activity not in ACTIVITY_INDEX:
            raise LabeledDataError(f"{p}: unknown activity {activity!r}")
        recordings.append(
            _load_trial_file(p, descriptor, subject_id, activity, trial_id)
        )
    return recordings, profiles


def write_recordings(path, recordings, profiles, sample_rate_hz=None, sidecar=None):
    """Write recordings + profiles in the canonical layout; returns file list."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not recordings:
        raise ArgumentError("nothing to write")
    m = recordings[0].n_channels
    rate = sample_rate_hz or recordings[0].sample_rate_hz
    written = []

    desc = root / "descriptor.txt"
    desc.write_text(
        f"m={m}\nsample_rate_hz={rate}\n"
        f"channels={','.join(f'ch{i}' for i in range(m))}\n"
    )
    written.append(desc)

    subj = root / "subjects.csv"
    with open(subj, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "gender", "age", "weight", "height"])
        for p in sorted(profiles, key=lambda p: p.subject_id):
            writer.writerow(
                [
                    p.subject_id,
                    "M" if p.gender == MALE else "F",
                    f"{p.age:.2f}",
                    f"{p.weight:.2f}",
                    f"{p.height:.2f}",
                ]
            )
    written.append(subj)

    for rec in recordings:
        fname = root / f"sub{rec.subject_id}_{rec.activity}_trial{rec.trial_id}.csv"
        with open(fname, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"ch{i}" for i in range(rec.n_channels)])
            for t in range(rec.n_samples):
                writer.writerow([t] + [repr(float(v)) for v in rec.samples[:, t]])
        written.append(fname)

    if sidecar:
        import json

        meta = root / "meta.json"
        meta.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        written.append(meta)
    return written


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# per-activity fundamental frequency (Hz); distinct on purpose
_ACTIVITY_FREQ = {"downstairs": 1.3, "upstairs": 0.9, "walking": 1.8, "jogging": 2.7}


def generate_synthetic(
    n_subjects=8,
    trials_per_activity=3,
    seed=0,
    fingerprint_strength=1.0,
    n_channels=12,
    sample_rate_hz=50.0,
    trial_seconds=20.0,
):
    """Desk-scale synthetic stand-in for the motion datasets.

    Each activity has a distinct fundamental frequency and per-channel
    amplitude pattern.  Gender modulates the overall amplitude and adds a
    second-harmonic component, both scaled by fingerprint_strength; at
    strength 0 the two genders generate identically distributed signals.
    Height/weight/age are sampled correlated with gender.  Deterministic
    given the seed.
    """
    if n_subjects < 4:
        raise ArgumentError("n_subjects must be >= 4 (both genders, k-NN audit)")
    if not 0.0 <= fingerprint_strength <= 1.0:
        raise ArgumentError("fingerprint_strength must be in [0, 1]")
    rng = np.random.default_rng(seed)
    fp = fingerprint_strength

    # fixed per-activity channel structure
    amp = {}
    phase = {}
    for act in ACTIVITIES:
        amp[act] = rng.uniform(0.5, 1.5, size=n_channels)
        phase[act] = rng.uniform(0, 2 * np.pi, size=n_channels)

    profiles = []
    recordings = []
    t_axis = np.arange(int(trial_seconds * sample_rate_hz)) / sample_rate_hz
    for sid in range(1, n_subjects + 1):
        gender = MALE if sid % 2 == 0 else FEMALE  # alternating -> both present
        sign = 1.0 if gender == MALE else -1.0
        profiles.append(
            SubjectProfile(
                subject_id=sid,
                gender=gender,
                age=float(np.clip(rng.normal(35.0 + 2.0 * gender, 8.0), 18.0, 70.0)),
                weight=float(np.clip(rng.normal(62.0 + 16.0 * gender, 6.0), 40, 120)),
                height=float(np.clip(rng.normal(163.0 + 14.0 * gender, 4.0), 145, 205)),
            )
        )
        personal_gain = 1.0 + 0.06 * rng.standard_normal(n_channels)
        personal_freq = 1.0 + 0.02 * rng.standard_normal()
        gender_gain = 1.0 + 0.30 * fp * sign
        for act in ACTIVITIES:
            f0 = _ACTIVITY_FREQ[act] * personal_freq
            for trial in range(1, trials_per_activity + 1):
                trial_phase = rng.uniform(0, 2 * np.pi)
                base = np.sin(
                    2 * np.pi * f0 * t_axis[None, :]
                    + phase[act][:, None]
                    + trial_phase
                )
                harmonic = np.sin(
                    2 * np.pi * 2 * f0 * t_axis[None, :] + 2 * phase[act][:, None]
                )
                channel_amp = (amp[act] * personal_gain * gender_gain)[:, None]
                harm_amp = 0.35 * fp * (1.0 if gender == MALE else 0.0)
                noise = 0.08 * rng.standard_normal((n_channels, t_axis.size))
                samples = channel_amp * (base + harm_amp * harmonic) + noise
                recordings.append(
                    SensorRecording(
                        subject_id=sid,
                        trial_id=trial,
                        activity=act,
                        samples=samples,
                        sample_rate_hz=sample_rate_hz,
                    )
                )
    return recordings, profiles


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def fit_normalizer(recordings):
    """Per-channel min/max over all samples of the given (training) recordings."""
    if not recordings:
        raise ArgumentError("fit_normalizer needs at least one recording")
    m = recordings[0].n_channels
    cmin = np.full(m, np.inf)
    cmax = np.full(m, -np.inf)
    for rec in recordings:
        if rec.n_channels != m:
            raise ArgumentError("recordings have inconsistent channel counts")
        cmin = np.minimum(cmin, rec.samples.min(axis=1))
        cmax = np.maximum(cmax, rec.samples.max(axis=1))
    return NormalizationStats(channel_min=cmin, channel_max=cmax)


def normalize_array(samples, stats):
    samples = np.asarray(samples)
    if samples.shape[0] != stats.n_channels:
        raise ArgumentError(
            f"channel count {samples.shape[0]} != stats {stats.n_channels}"
        )
    x = (samples - stats.channel_min[:, None]) / stats.span()[:, None]
    return np.clip(x, 0.0, 1.0)


def denormalize_array(samples, stats):
    samples = np.asarray(samples)
    if samples.shape[0] != stats.n_channels:
        raise ArgumentError(
            f"channel count {samples.shape[0]} != stats {stats.n_channels}"
        )
    return samples * stats.span()[:, None] + stats.channel_min[:, None]


def normalize(recording, stats):
    """Copy of the recording with samples min-max scaled (and clamped) to [0,1]."""
    return SensorRecording(
        subject_id=recording.subject_id,
        trial_id=recording.trial_id,
        activity=recording.activity,
        samples=normalize_array(recording.samples, stats),
        sample_rate_hz=recording.sample_rate_hz,
    )


def denormalize(recording, stats):
    return SensorRecording(
        subject_id=recording.subject_id,
        trial_id=recording.trial_id,
        activity=recording.activity,
        samples=denormalize_array(recording.samples, stats),
        sample_rate_hz=recording.sample_rate_hz,
    )


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def make_windows(recordings, d=128, stride=64):
    """Slice recordings into overlapping (m, d) windows.

    Count per recording is floor((T-d)/stride)+1 when T >= d, else 0.
    """
    if d < 2:
        raise ArgumentError("window length d must be >= 2")
    if not 1 <= stride <= d:
        raise ArgumentError("stride must satisfy 1 <= stride <= d")
    windows = []
    for rec in recordings:
        t = rec.n_samples
        if t < d:
            continue
        onehot = np.zeros(N_ACTIVITIES)
        onehot[ACTIVITY_INDEX[rec.activity]] = 1.0
        gender = getattr(rec, "gender_label", None)
        for start in range(0, t - d + 1, stride):
            windows.append(
                Window(
                    data=rec.samples[:, start : start + d].copy(),
                    activity_onehot=onehot.copy(),
                    gender_label=gender,
                    subject_id=rec.subject_id,
                    trial_id=rec.trial_id,
                    start_index=start,
                )
            )
    return windows


def attach_gender(windows, profiles):
    """Fill each window's gender label from the subject profiles."""
    by_id = {p.subject_id: p.gender for p in profiles}
    for w in windows:
        if w.subject_id not in by_id:
            raise LabeledDataError(f"no profile for subject {w.subject_id}")
        w.gender_label = by_id[w.subject_id]
    return windows


def window_count(t, d, stride):
    return 0 if t < d else (t - d) // stride + 1


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def make_split(recordings, mode="trial", fold_index=0):
    """Train/test partition.

    trial:   per (subject, activity), trials sorted by id; the first
             ceil(2/3 * k) go to train, the rest to test.
    subject: subjects sorted by id, partitioned into 4 contiguous folds;
             fold fold_index is the test fold.
    """
    mode = mode.lower()
    if mode == "trial":
        groups = {}
        for rec in recordings:
            groups.setdefault((rec.subject_id, rec.activity), set()).add(rec.trial_id)
        train_keys, test_keys = set(), set()
        for (sid, _act), trials in sorted(groups.items()):
            ordered = sorted(trials)
            if len(ordered) == 1:
                warnings.warn(
                    f"subject {sid}: single trial, assigned entirely to train"
                )
                train_keys.add((sid, ordered[0]))
                continue
            n_train = math.ceil(2.0 / 3.0 * len(ordered))
            for tid in ordered[:n_train]:
                train_keys.add((sid, tid))
            for tid in ordered[n_train:]:
                test_keys.add((sid, tid))
        return SplitPlan(mode="trial", train_keys=train_keys, test_keys=test_keys)
    if mode == "subject":
        if fold_index not in (0, 1, 2, 3):
            raise ArgumentError("subject mode requires fold_index in {0,1,2,3}")
        subjects = sorted({rec.subject_id for rec in recordings})
        folds = [list(f) for f in np.array_split(subjects, 4)]
        test = set(folds[fold_index])
        train = set(subjects) - test
        return SplitPlan(
            mode="subject", train_keys=train, test_keys=test, fold_index=fold_index
        )
    raise ArgumentError(f"unknown split mode {mode!r}")


def apply_split(recordings, plan):
    """-> (train_recordings, test_recordings) per the plan."""
    train = [r for r in recordings if plan.side(r) == "train"]
    test = [r for r in recordings if plan.side(r) == "test"]
    return train, test
