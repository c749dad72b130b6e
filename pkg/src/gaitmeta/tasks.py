"""Label vocabularies, task descriptors and windowed sample containers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("LW", "RA", "RD", "SA", "SD")
PHASES = ("G1", "G2", "G3", "G4")
STAIR_MODES = ("SA", "SD")
TREADMILL_MODES = ("LW", "RA", "RD")

STAIR_RISE_CM = 18.0
STAIR_RUN_CM = 28.0
# slope-equivalent stair incline, rounded as in the protocol description
STAIR_INCLINE = 33.0

ALLOWED_INCLINES = {
    "LW": (0.0,),
    "RA": (5.0, 10.0),
    "RD": (-5.0, -10.0),
    "SA": (STAIR_INCLINE,),
    "SD": (-STAIR_INCLINE,),
}


def mode_index(mode: str) -> int:
    return MODES.index(mode)


def phase_index(phase: str) -> int:
    return PHASES.index(phase)


@dataclass(frozen=True, order=True)
class TaskDescriptor:
    """One walking condition of one subject: the unit of meta-training."""

    subject: int
    mode: str
    incline: float
    speed: float
    split: str = "train"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown locomotion mode {self.mode!r}")
        if float(self.incline) not in ALLOWED_INCLINES[self.mode]:
            raise ValueError(
                f"incline {self.incline} deg is not valid for mode {self.mode} "
                f"(allowed: {ALLOWED_INCLINES[self.mode]})")
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    @property
    def condition(self) -> tuple[str, float, float]:
        return self.mode, float(self.incline), float(self.speed)

    @property
    def key(self) -> str:
        return f"S{self.subject:02d}_{self.mode}_{self.incline:+g}_{self.speed:g}"


@dataclass(frozen=True)
class WindowSet:
    """A batch of sensor windows with their labels.

    ``uid`` identifies each window globally (session, end frame) so that
    disjointness of two sets can be audited.
    """

    x: np.ndarray          # [N, 4, k]
    mode: np.ndarray       # [N] int
    phase: np.ndarray      # [N] int
    incline: np.ndarray    # [N] float, degrees
    subject: np.ndarray    # [N] int
    uid: np.ndarray        # [N] int

    def __post_init__(self):
        n = len(self.x)
        for name in ("mode", "phase", "incline", "subject", "uid"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"WindowSet field {name!r} has length "
                                 f"{len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.x[idx], self.mode[idx], self.phase[idx],
                         self.incline[idx], self.subject[idx], self.uid[idx])

    @staticmethod
    def concat(sets: list["WindowSet"]) -> "WindowSet":
        if not sets:
            raise ValueError("cannot concatenate an empty list of window sets")
        return WindowSet(*(np.concatenate([getattr(s, f) for s in sets])
                           for f in ("x", "mode", "phase", "incline", "subject", "uid")))


class WindowPool:
    """Lazily materialised windows over a set of recordings.

    Holds only the raw channel arrays plus (recording, end frame) indices, so a
    large pooled dataset costs no more memory than the recordings themselves.
    """

    def __init__(self, channels: list[np.ndarray], rec: np.ndarray, end: np.ndarray,
                 mode: np.ndarray, phase: np.ndarray, incline: np.ndarray,
                 subject: np.ndarray, uid: np.ndarray, k: int):
        self.channels = channels
        self.rec = np.asarray(rec, dtype=np.int64)
        self.end = np.asarray(end, dtype=np.int64)
        self.mode = np.asarray(mode, dtype=np.int64)
        self.phase = np.asarray(phase, dtype=np.int64)
        self.incline = np.asarray(incline, dtype=np.float64)
        self.subject = np.asarray(subject, dtype=np.int64)
        self.uid = np.asarray(uid, dtype=np.int64)
        self.k = k

    def __len__(self) -> int:
        return len(self.end)

    def subset(self, idx) -> "WindowPool":
        idx = np.asarray(idx)
        return WindowPool(self.channels, self.rec[idx], self.end[idx], self.mode[idx],
                          self.phase[idx], self.incline[idx], self.subject[idx],
                          self.uid[idx], self.k)

    def take(self, idx) -> WindowSet:
        idx = np.asarray(idx, dtype=np.int64)
        x = np.empty((len(idx), 4, self.k))
        for row, i in enumerate(idx):
            e = self.end[i]
            x[row] = self.channels[self.rec[i]][e - self.k + 1:e + 1].T
        return WindowSet(x, self.mode[idx], self.phase[idx], self.incline[idx],
                         self.subject[idx], self.uid[idx])

    def materialize(self) -> WindowSet:
        return self.take(np.arange(len(self)))

    @staticmethod
    def concat(pools: list["WindowPool"]) -> "WindowPool":
        if not pools:
            raise ValueError("cannot concatenate an empty list of pools")
        channels: list[np.ndarray] = []
        offsets = {}
        for p in pools:
            for j, arr in enumerate(p.channels):
                key = id(arr)
                if key not in offsets:
                    offsets[key] = len(channels)
                    channels.append(arr)
        recs = [np.array([offsets[id(p.channels[r])] for r in range(len(p.channels))],
                         dtype=np.int64)[p.rec] if len(p) else p.rec for p in pools]
        cat = lambda f: np.concatenate([getattr(p, f) for p in pools])  # noqa: E731
        return WindowPool(channels, np.concatenate(recs), cat("end"), cat("mode"),
                          cat("phase"), cat("incline"), cat("subject"), cat("uid"),
                          pools[0].k)
