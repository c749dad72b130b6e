"""Synthetic soft-sensor walking data with exact gait-phase, mode and incline labels.

Joint angles are low-order Fourier series over the gait cycle whose
coefficients depend on locomotion mode and incline. Four channels (left hip,
left knee, right hip, right knee) map those angles to capacitance-like values
through a subject-specific affine gain/offset, a per-channel phase lag, a
velocity-dependent loading/unloading asymmetry, slow sinusoidal drift and
white noise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .tasks import (MODES, PHASES, STAIR_MODES, STAIR_INCLINE, TaskDescriptor,
                    WindowPool, WindowSet, mode_index)

FORMAT_VERSION = 1
SAMPLE_RATE = 100
CHANNEL_JOINT = ("hip", "knee", "hip", "knee")
CHANNEL_SIDE = (0.0, 0.0, 0.5, 0.5)   # right leg runs half a cycle behind the left
ANGLE_UNIT = 10.0                     # degrees per sensor unit at unit gain
HYST_VELOCITY = 150.0                 # deg/s at which the asymmetry saturates
N_HARMONICS = 5                       # 2 hip + 3 knee
STYLE_AMP = (0.75, 1.25)              # per-subject harmonic amplitude factor
STYLE_PHASE = 0.4                     # per-subject harmonic phase shift bound, rad
EVENT_SHIFT = 0.05                    # bound of the per-subject event timing offset

TREADMILL_SPEEDS = {"LW": (0.9, 1.1, 1.3), "RA": (0.7, 0.9, 1.1), "RD": (0.7, 0.9, 1.1)}
TREADMILL_INCLINES = {"LW": (0.0,), "RA": (5.0, 10.0), "RD": (-5.0, -10.0)}
TREADMILL_TRIALS, TREADMILL_TRIAL_S = 2, 120.0
STAIR_TRIALS, STAIR_TRIAL_S, STAIR_SPEED = 5, 10.0, 0.9


@dataclass(frozen=True)
class SubjectProfile:
    subject: int
    gain: tuple[float, ...]
    offset: tuple[float, ...]
    lag_ms: tuple[float, ...]
    hysteresis: tuple[float, ...]
    noise_std: float
    drift_amp: float
    drift_period_s: float
    cadence_scale: float
    excursion_scale: float
    double_support: float
    # per-harmonic gait style: hip harmonics first, then knee
    style_amp: tuple[float, ...] = (1.0,) * N_HARMONICS
    style_phase: tuple[float, ...] = (0.0,) * N_HARMONICS
    event_shift: float = 0.0      # kinematics lead over contact events, cycle fraction

    def __post_init__(self):
        if any(g <= 0 for g in self.gain):
            raise ValueError("channel gains must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 < self.double_support < 0.25:
            raise ValueError("double_support fraction must lie in (0, 0.25)")
        if len(self.style_amp) != N_HARMONICS or len(self.style_phase) != N_HARMONICS:
            raise ValueError(f"style vectors need {N_HARMONICS} entries")


@dataclass(frozen=True)
class GaitCycleModel:
    """Phase fractions of G1..G4 and the cycle duration law."""

    fractions: tuple[float, float, float, float] = (0.12, 0.38, 0.12, 0.38)

    def __post_init__(self):
        f = self.fractions
        if len(f) != 4 or min(f) <= 0 or abs(math.fsum(f) - 1.0) > 1e-12:
            raise ValueError(f"phase fractions must be 4 positive values summing to 1, got {f}")
        if max(f[0], f[2]) >= min(f[1], f[3]):
            raise ValueError("double-support phases must be shorter than single-support phases")

    @classmethod
    def for_subject(cls, profile: SubjectProfile) -> "GaitCycleModel":
        d = profile.double_support
        return cls((d, 0.5 - d, d, 0.5 - d))

    @property
    def boundaries(self) -> np.ndarray:
        return np.cumsum(self.fractions)[:-1]

    def phase_of(self, u: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.boundaries, np.asarray(u), side="right")

    @staticmethod
    def cycle_duration(speed: float, cadence_scale: float = 1.0) -> float:
        """Stride time in seconds; 1.0 s at 1.0 m/s for a unit-cadence subject."""
        return cadence_scale * math.sqrt(1.0 / speed)


def joint_coefficients(mode: str, incline: float) -> dict[str, tuple[float, list[tuple[float, float]]]]:
    """Mean angle and (amplitude deg, phase rad) harmonics for hip and knee."""
    a = abs(incline)
    if mode == "LW":
        hip = (10.0, [(22.0, 0.0), (3.0, 1.2)])
        knee = (22.0, [(20.0, 2.6), (12.0, 0.6), (4.0, -1.0)])
    elif mode == "RA":
        hip = (10.0 + 0.9 * a, [(22.0 + 0.5 * a, 0.0), (3.0 + 0.2 * a, 1.2)])
        knee = (22.0 + 0.8 * a, [(20.0 + 0.3 * a, 2.6), (12.0 - 0.4 * a, 0.6 + 0.03 * a), (4.0, -1.0)])
    elif mode == "RD":
        hip = (10.0 - 0.5 * a, [(22.0 - 0.6 * a, 0.0), (3.0 + 0.15 * a, 1.2 + 0.05 * a)])
        knee = (22.0 + 1.0 * a, [(20.0 + 0.5 * a, 2.6 - 0.04 * a), (12.0 + 0.3 * a, 0.6), (4.0 + 0.2 * a, -1.0)])
    elif mode == "SA":
        hip = (35.0, [(28.0, 0.3), (6.0, 1.8)])
        knee = (50.0, [(35.0, 2.2), (10.0, 1.4), (5.0, -0.2)])
    elif mode == "SD":
        hip = (12.0, [(16.0, -0.3), (4.0, 0.9)])
        knee = (45.0, [(30.0, 3.0), (14.0, -0.4), (6.0, 0.5)])
    else:
        raise ValueError(f"unknown locomotion mode {mode!r}")
    return {"hip": hip, "knee": knee}


def styled_coefficients(coefs, profile: SubjectProfile):
    """Apply the subject's harmonic amplitude factors and phase shifts."""
    out, i = {}, 0
    for joint in ("hip", "knee"):
        mean, harmonics = coefs[joint]
        styled = []
        for amp, ph in harmonics:
            styled.append((amp * profile.style_amp[i], ph + profile.style_phase[i]))
            i += 1
        out[joint] = (mean, styled)
    return out


def joint_angle(coef, u: np.ndarray, excursion: float) -> tuple[np.ndarray, np.ndarray]:
    """Angle (deg) and its derivative w.r.t. cycle fraction at fractions ``u``."""
    mean, harmonics = coef
    angle = np.full(np.shape(u), mean, dtype=np.float64)
    slope = np.zeros(np.shape(u))
    for n, (amp, ph) in enumerate(harmonics, start=1):
        arg = 2 * np.pi * n * u + ph
        angle = angle + excursion * amp * np.cos(arg)
        slope = slope - excursion * amp * 2 * np.pi * n * np.sin(arg)
    return angle, slope


def make_cohort(cohort_seed: int, n_subjects: int) -> list[SubjectProfile]:
    if n_subjects < 1:
        raise ValueError("n_subjects must be at least 1")
    return [make_profile(cohort_seed, s) for s in range(1, n_subjects + 1)]


def make_profile(cohort_seed: int, subject: int) -> SubjectProfile:
    rng = np.random.default_rng([cohort_seed, subject, 0x5EB])
    return SubjectProfile(
        subject=subject,
        gain=tuple(rng.uniform(0.7, 1.3, 4)),
        offset=tuple(rng.uniform(-1.0, 1.0, 4)),
        lag_ms=tuple(rng.uniform(0.0, 40.0, 4)),
        hysteresis=tuple(rng.uniform(0.05, 0.3, 4)),
        noise_std=float(rng.uniform(0.02, 0.06)),
        drift_amp=float(rng.uniform(0.05, 0.2)),
        drift_period_s=float(rng.uniform(30.0, 60.0)),
        cadence_scale=float(rng.uniform(0.9, 1.1)),
        excursion_scale=float(rng.uniform(0.85, 1.15)),
        double_support=float(rng.uniform(0.09, 0.15)),
        style_amp=tuple(rng.uniform(*STYLE_AMP, N_HARMONICS)),
        style_phase=tuple(rng.uniform(-STYLE_PHASE, STYLE_PHASE, N_HARMONICS)),
        event_shift=float(rng.uniform(-EVENT_SHIFT, EVENT_SHIFT)),
    )


@dataclass
class SessionRecording:
    task: TaskDescriptor
    trial: int
    sample_rate: int
    channels: np.ndarray      # [T, 4]
    phase: np.ndarray         # [T] int in 0..3
    mode: np.ndarray          # [T] int in 0..4
    incline: np.ndarray       # [T] degrees

    def __post_init__(self):
        n = len(self.channels)
        if not (len(self.phase) == len(self.mode) == len(self.incline) == n):
            raise ValueError("all series of a recording must have equal length")

    def __len__(self) -> int:
        return len(self.channels)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) / self.sample_rate


def session_seed(cohort_seed: int, task: TaskDescriptor, trial: int) -> list[int]:
    return [cohort_seed, task.subject, mode_index(task.mode), int(round(task.incline * 10)) + 1000,
            int(round(task.speed * 100)), trial]


def generate_session(profile: SubjectProfile, task: TaskDescriptor, duration_s: float,
                     seed, sample_rate: int = SAMPLE_RATE, trial: int = 0) -> SessionRecording:
    """Simulate one trial; deterministic in (profile, task, duration, seed)."""
    if task.subject != profile.subject:
        raise ValueError(f"task subject {task.subject} does not match profile {profile.subject}")
    cycle = GaitCycleModel.for_subject(profile)
    period = cycle.cycle_duration(task.speed, profile.cadence_scale)
    if duration_s < period:
        raise ValueError(f"duration {duration_s} s is shorter than one gait cycle ({period:.3f} s)")
    rng = np.random.default_rng(seed)
    u0 = float(rng.uniform())
    drift_phase = rng.uniform(0.0, 2 * np.pi, 4)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    coefs = styled_coefficients(joint_coefficients(task.mode, task.incline), profile)
    channels = np.empty((n, 4))
    for c in range(4):
        u = np.mod(u0 + profile.event_shift + (t - profile.lag_ms[c] / 1000.0) / period
                   + CHANNEL_SIDE[c], 1.0)
        angle, slope = joint_angle(coefs[CHANNEL_JOINT[c]], u, profile.excursion_scale)
        velocity = slope / period
        level = angle / ANGLE_UNIT + profile.hysteresis[c] * np.tanh(velocity / HYST_VELOCITY)
        drift = profile.drift_amp * np.sin(2 * np.pi * t / profile.drift_period_s + drift_phase[c])
        channels[:, c] = profile.offset[c] + profile.gain[c] * level + drift
    if profile.noise_std > 0:
        channels += rng.normal(0.0, profile.noise_std, channels.shape)
    phase = cycle.phase_of(np.mod(u0 + t / period, 1.0))
    return SessionRecording(task, trial, sample_rate, channels, phase.astype(np.int64),
                            np.full(n, mode_index(task.mode), dtype=np.int64),
                            np.full(n, float(task.incline)))


def window_ends(n_frames: int, k: int, stride: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """End frames of length-``k`` windows lying inside frames [start, stop)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    stop = n_frames if stop is None else min(stop, n_frames)
    return np.arange(start + k - 1, stop, stride, dtype=np.int64)


def window_dataset(recording: SessionRecording, k: int = 100, stride: int = 10,
                   uid_base: int = 0) -> WindowSet:
    """Sliding windows [4, k] labelled with the labels of their last frame."""
    if len(recording) < k:
        raise ValueError(f"recording has {len(recording)} frames, shorter than window length {k}")
    ends = window_ends(len(recording), k, stride)
    x = np.stack([recording.channels[e - k + 1:e + 1].T for e in ends])
    return WindowSet(x, recording.mode[ends], recording.phase[ends], recording.incline[ends],
                     np.full(len(ends), recording.task.subject, dtype=np.int64), uid_base + ends)


# ---------------------------------------------------------------------------
# benchmark protocol

def protocol_sessions(subject: int) -> list[tuple[TaskDescriptor, int, float]]:
    """(task, trial, duration) for every trial one subject performs."""
    out = []
    for mode in ("LW", "RA", "RD"):
        for incline in TREADMILL_INCLINES[mode]:
            for speed in TREADMILL_SPEEDS[mode]:
                task = TaskDescriptor(subject, mode, incline, speed)
                out += [(task, trial, TREADMILL_TRIAL_S) for trial in range(TREADMILL_TRIALS)]
    for mode in STAIR_MODES:
        incline = STAIR_INCLINE if mode == "SA" else -STAIR_INCLINE
        task = TaskDescriptor(subject, mode, incline, STAIR_SPEED)
        out += [(task, trial, STAIR_TRIAL_S) for trial in range(STAIR_TRIALS)]
    return out


def generate_cohort_sessions(cohort_seed: int, n_subjects: int = 9,
                             trial_scale: float = 1.0) -> tuple[list[SubjectProfile], list[SessionRecording]]:
    """All protocol sessions in memory. ``trial_scale`` shortens treadmill trials."""
    profiles = make_cohort(cohort_seed, n_subjects)
    sessions = []
    for p in profiles:
        for task, trial, dur in protocol_sessions(p.subject):
            if task.mode not in STAIR_MODES:
                dur = dur * trial_scale
            sessions.append(generate_session(p, task, dur, session_seed(cohort_seed, task, trial),
                                             trial=trial))
    return profiles, sessions


@dataclass
class SessionEntry:
    file: str
    subject: int
    mode: str
    incline: float
    speed: float
    trial: int
    duration_s: float
    n_frames: int

    @property
    def task(self) -> TaskDescriptor:
        return TaskDescriptor(self.subject, self.mode, self.incline, self.speed)


@dataclass
class DatasetManifest:
    cohort_seed: int
    subjects: list[dict]
    sessions: list[SessionEntry]
    sample_rate: int = SAMPLE_RATE
    format_version: int = FORMAT_VERSION
    root: Path | None = field(default=None, compare=False)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("root")
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {d.get('format_version')}")
        sessions = [SessionEntry(**s) for s in d.pop("sessions")]
        return cls(sessions=sessions, root=path.parent, **d)

    def verify(self) -> None:
        """Check that every referenced file exists and has its declared length."""
        for s in self.sessions:
            p = self.root / s.file
            if not p.exists():
                raise FileNotFoundError(f"manifest references missing file {p}")
            with open(p) as fh:
                rows = sum(1 for _ in fh) - 1
            if rows != s.n_frames:
                raise ValueError(f"{p}: {rows} frames on disk, manifest declares {s.n_frames}")


def write_session_csv(rec: SessionRecording, path: Path) -> None:
    df = pd.DataFrame({
        "t": rec.t,
        "ch0": rec.channels[:, 0], "ch1": rec.channels[:, 1],
        "ch2": rec.channels[:, 2], "ch3": rec.channels[:, 3],
        "mode": np.asarray(MODES)[rec.mode],
        "phase": np.asarray(PHASES)[rec.phase],
        "incline": rec.incline,
    })
    df.to_csv(path, index=False, float_format="%.6f")


def read_session_csv(path: Path, entry: SessionEntry, sample_rate: int = SAMPLE_RATE) -> SessionRecording:
    df = pd.read_csv(path)
    expected = ["t", "ch0", "ch1", "ch2", "ch3", "mode", "phase", "incline"]
    if list(df.columns) != expected:
        raise ValueError(f"{path}: header {list(df.columns)} != {expected}")
    mode = df["mode"].map({m: i for i, m in enumerate(MODES)}).to_numpy()
    phase = df["phase"].map({p: i for i, p in enumerate(PHASES)}).to_numpy()
    if np.isnan(mode.astype(float)).any() or np.isnan(phase.astype(float)).any():
        raise ValueError(f"{path}: unknown mode or phase label")
    return SessionRecording(entry.task, entry.trial, sample_rate,
                            df[["ch0", "ch1", "ch2", "ch3"]].to_numpy(dtype=np.float64),
                            phase.astype(np.int64), mode.astype(np.int64),
                            df["incline"].to_numpy(dtype=np.float64))


def build_benchmark(cohort_seed: int, out_dir: str | os.PathLike, n_subjects: int = 9,
                    trial_scale: float = 1.0) -> DatasetManifest:
    """Generate the full protocol and write session CSVs plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        (out / "sessions").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create benchmark directory {out}: {e}") from e
    profiles, sessions = generate_cohort_sessions(cohort_seed, n_subjects, trial_scale)
    entries = []
    for rec in sessions:
        name = f"sessions/{rec.task.key}_T{rec.trial}.csv"
        try:
            write_session_csv(rec, out / name)
        except OSError as e:
            raise OSError(f"cannot write session file {out / name}: {e}") from e
        entries.append(SessionEntry(name, rec.task.subject, rec.task.mode, float(rec.task.incline),
                                    float(rec.task.speed), rec.trial, len(rec) / rec.sample_rate,
                                    len(rec)))
    manifest = DatasetManifest(cohort_seed, [dataclasses.asdict(p) for p in profiles], entries,
                               root=out)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def manifest_checksum(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_sessions(manifest: DatasetManifest, verify: bool = True) -> list[SessionRecording]:
    if verify:
        manifest.verify()
    return [read_session_csv(manifest.root / s.file, s, manifest.sample_rate)
            for s in manifest.sessions]


# ---------------------------------------------------------------------------
# windowed views used by the experiments

class Benchmark:
    """Sessions indexed by subject and task, with lazy windowing."""

    def __init__(self, sessions: list[SessionRecording], k: int = 100):
        self.sessions = sessions
        self.k = k
        self.sample_rate = sessions[0].sample_rate if sessions else SAMPLE_RATE

    @property
    def subjects(self) -> list[int]:
        return sorted({s.task.subject for s in self.sessions})

    def tasks(self, subject: int | None = None) -> list[TaskDescriptor]:
        return sorted({s.task for s in self.sessions if subject is None or s.task.subject == subject})

    def _uid(self, i: int) -> int:
        return i * 1_000_000

    def pool(self, select, stride: int, frame_range=None) -> WindowPool:
        """Windows of the sessions for which ``select(index, session)`` is true.

        ``frame_range(session)`` may restrict windows to frames [start, stop).
        """
        chans, recs, ends = [], [], []
        meta = {f: [] for f in ("mode", "phase", "incline", "subject", "uid")}
        for i, s in enumerate(self.sessions):
            if not select(i, s):
                continue
            start, stop = frame_range(s) if frame_range else (0, None)
            e = window_ends(len(s), self.k, stride, start, stop)
            if len(e) == 0:
                continue
            recs.append(np.full(len(e), len(chans)))
            chans.append(s.channels)
            ends.append(e)
            meta["mode"].append(s.mode[e])
            meta["phase"].append(s.phase[e])
            meta["incline"].append(s.incline[e])
            meta["subject"].append(np.full(len(e), s.task.subject))
            meta["uid"].append(self._uid(i) + e)
        if not chans:
            empty = np.zeros(0, dtype=np.int64)
            return WindowPool([], empty, empty, empty, empty, empty.astype(float), empty, empty, self.k)
        cat = np.concatenate
        return WindowPool(chans, cat(recs), cat(ends), cat(meta["mode"]), cat(meta["phase"]),
                          cat(meta["incline"]), cat(meta["subject"]), cat(meta["uid"]), self.k)

    def task_pools(self, subjects, stride: int) -> dict[TaskDescriptor, WindowPool]:
        subjects = set(subjects)
        return {t: self.pool(lambda i, s, t=t: s.task == t, stride)
                for t in self.tasks() if t.subject in subjects}
