"""Multi-head 1D-CNN: shared conv/bn feature extractor, mode head feeding phase and incline heads."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tasks import MODES, PHASES

N_MODES = len(MODES)
N_PHASES = len(PHASES)
MAGIC = b"MGAIT1"
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ModelConfig:
    window_len: int = 100
    in_channels: int = 4
    conv_out_channels: int = 16
    conv_kernel: int = 9
    pool: int = 4
    encoder_width: int = 64
    head_width: int = 32
    n_modes: int = N_MODES
    n_phases: int = N_PHASES

    def __post_init__(self):
        if not self.window_len >= self.conv_kernel >= 1:
            raise ValueError("need window_len >= conv_kernel >= 1")
        if min(self.conv_out_channels, self.encoder_width, self.head_width, self.pool) < 1:
            raise ValueError("layer widths and pool size must be >= 1")
        if self.window_len % self.pool:
            raise ValueError(f"pool {self.pool} must divide window_len {self.window_len}")
        if self.n_modes != N_MODES or self.n_phases != N_PHASES:
            raise ValueError("the problem fixes 5 locomotion modes and 4 gait phases")
        if self.in_channels != 4:
            raise ValueError("the sensor layout fixes 4 input channels")

    @property
    def feature_len(self) -> int:
        return self.conv_out_channels * (self.window_len // self.pool)


HEADS = ("head_loc", "head_gait", "head_inc")
# frozen-layer grouping used by transfer learning
FEATURE_EXTRACTOR = ("conv.weight", "conv.bias", "bn.gamma", "bn.beta")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, h = cfg.encoder_width, cfg.head_width
    shapes = {
        "conv.weight": (cfg.conv_out_channels, cfg.in_channels, cfg.conv_kernel),
        "conv.bias": (cfg.conv_out_channels,),
        "bn.gamma": (cfg.conv_out_channels,),
        "bn.beta": (cfg.conv_out_channels,),
        "encoder.weight": (cfg.feature_len, e),
        "encoder.bias": (e,),
    }
    for head, fan_in, out in (("head_loc", e, cfg.n_modes),
                              ("head_gait", e + cfg.n_modes, cfg.n_phases),
                              ("head_inc", e + cfg.n_modes, 1)):
        shapes[f"{head}.fc1.weight"] = (fan_in, h)
        shapes[f"{head}.fc1.bias"] = (h,)
        shapes[f"{head}.fc2.weight"] = (h, out)
        shapes[f"{head}.fc2.bias"] = (out,)
    return shapes


@dataclass
class ParameterSet:
    """Named trainable tensors plus non-trainable buffers (bn running stats).

    ``config`` is None for ad-hoc parameter sets (e.g. toy models in tests).
    """

    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    config: ModelConfig | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    @property
    def names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.weights.items()},
                            {k: v.copy() for k, v in self.buffers.items()}, self.config)

    def replace(self, weights: Mapping[str, np.ndarray] | None = None,
                buffers: Mapping[str, np.ndarray] | None = None) -> "ParameterSet":
        """New set with some tensors swapped out; untouched ones are copied."""
        out = self.copy()
        for k, v in (weights or {}).items():
            if k not in out.weights:
                raise KeyError(f"unknown parameter {k!r}")
            out.weights[k] = np.array(v, dtype=np.float64)
        for k, v in (buffers or {}).items():
            out.buffers[k] = np.array(v, dtype=np.float64)
        return out

    def num_params(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    def identical(self, other: "ParameterSet") -> bool:
        """Bit-for-bit equality of every weight and buffer."""
        return (self.weights.keys() == other.weights.keys()
                and self.buffers.keys() == other.buffers.keys()
                and all(np.array_equal(v, other.weights[k]) for k, v in self.weights.items())
                and all(np.array_equal(v, other.buffers[k]) for k, v in self.buffers.items()))


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero biases, unit bn scale."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(config).items():
        if name == "bn.gamma":
            weights[name] = np.ones(shape)
        elif name.endswith("bias") or name == "bn.beta":
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name == "conv.weight" else shape[0]
            bound = np.sqrt(1.0 / fan_in)
            weights[name] = rng.uniform(-bound, bound, shape)
    c = config.conv_out_channels
    buffers = {"bn.running_mean": np.zeros(c), "bn.running_var": np.ones(c)}
    return ParameterSet(weights, buffers, config)


@dataclass
class MultiHeadOutput:
    loc_logits: Tensor      # [B, 5]
    gait_logits: Tensor     # [B, 4]
    incline: Tensor         # [B, 1] degrees
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None


def _check_input(cfg: ModelConfig, x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.window_len:
        raise ad.ShapeError(f"forward: expected input [B, {cfg.in_channels}, {cfg.window_len}], "
                            f"got {tuple(x.shape)}")


def _linear(h, w, b):
    return ad.add(ad.matmul(h, w), b)


def _head(h, weights, name):
    hidden = ad.relu(_linear(h, weights[f"{name}.fc1.weight"], weights[f"{name}.fc1.bias"]))
    return _linear(hidden, weights[f"{name}.fc2.weight"], weights[f"{name}.fc2.bias"])


def forward(params: ParameterSet, x, mode: str = "train",
            weights: Mapping[str, Tensor] | None = None) -> MultiHeadOutput:
    """Run the network on windows ``x`` [B, 4, k].

    ``weights`` overrides ``params.weights`` (e.g. traced leaves or adapted
    tensors). Train mode normalises with batch statistics, eval mode with the
    running statistics in ``params.buffers``.
    """
    cfg = params.config
    x = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_input(cfg, x)
    w = weights if weights is not None else params.weights
    bsz = x.shape[0]
    o = cfg.conv_out_channels

    h = ad.add(ad.conv1d(x, w["conv.weight"], padding="same"), ad.reshape(w["conv.bias"], (1, o, 1)))
    batch_mean = batch_var = None
    if mode == "train":
        hv = h.value
        batch_mean, batch_var = hv.mean(axis=(0, 2)), hv.var(axis=(0, 2))
        h = ad.batch_norm(h, w["bn.gamma"], w["bn.beta"])
    elif mode == "eval":
        rm = params.buffers["bn.running_mean"].reshape(1, o, 1)
        rs = np.sqrt(params.buffers["bn.running_var"] + ad.BN_EPS).reshape(1, o, 1)
        h = ad.add(ad.mul(ad.div(ad.sub(h, rm), rs), ad.reshape(w["bn.gamma"], (1, o, 1))),
                   ad.reshape(w["bn.beta"], (1, o, 1)))
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if cfg.pool > 1:
        h = ad.mean(ad.reshape(h, (bsz, o, cfg.window_len // cfg.pool, cfg.pool)), axis=3)
    feats = ad.reshape(h, (bsz, cfg.feature_len))
    z = ad.relu(_linear(feats, w["encoder.weight"], w["encoder.bias"]))

    loc = _head(z, w, "head_loc")
    zc = ad.concat([z, ad.softmax(loc, axis=1)], axis=1)
    gait = _head(zc, w, "head_gait")
    inc = _head(zc, w, "head_inc")
    return MultiHeadOutput(loc, gait, inc, batch_mean, batch_var)


def predict(output: MultiHeadOutput) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mode index, phase index, incline deg) per sample; ties go to the lowest index."""
    return (np.argmax(output.loc_logits.value, axis=1),
            np.argmax(output.gait_logits.value, axis=1),
            output.incline.value.reshape(-1).copy())


def predict_windows(params: ParameterSet, x: np.ndarray, chunk: int = 2048):
    """Eval-mode predictions over a large array of windows."""
    parts = [predict(forward(params, x[i:i + chunk], mode="eval")) for i in range(0, len(x), chunk)]
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    return tuple(np.concatenate(p) for p in zip(*parts))


def conv_statistics(params: ParameterSet, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel batch mean/variance of the conv output (what bn normalises)."""
    w = params.weights
    h = ad.conv1d(x, w["conv.weight"]).value + w["conv.bias"].reshape(1, -1, 1)
    return h.mean(axis=(0, 2)), h.var(axis=(0, 2))


def update_running_stats(params: ParameterSet, batch_mean: np.ndarray, batch_var: np.ndarray,
                         momentum: float = BN_MOMENTUM) -> ParameterSet:
    rm = (1 - momentum) * params.buffers["bn.running_mean"] + momentum * batch_mean
    rv = (1 - momentum) * params.buffers["bn.running_var"] + momentum * batch_var
    return params.replace(buffers={"bn.running_mean": rm, "bn.running_var": rv})


# ---------------------------------------------------------------------------
# serialisation: magic, u64 header length, JSON header, raw little-endian f64 data

def save_params(params: ParameterSet, path: str | os.PathLike) -> None:
    entries, blobs, offset = [], [], 0
    for kind, group in (("weight", params.weights), ("buffer", params.buffers)):
        for name, arr in group.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            blobs.append(data)
            offset += len(data)
    header = json.dumps({
        "version": 1,
        "config": asdict(params.config) if params.config else None,
        "tensors": entries,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_params(path: str | os.PathLike) -> ParameterSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a parameter container (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    data = raw[pos + hlen:]
    weights, buffers = {}, {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).copy()
        (weights if t["kind"] == "weight" else buffers)[t["name"]] = arr.astype(np.float64)
    cfg = ModelConfig(**header["config"]) if header["config"] else None
    return ParameterSet(weights, buffers, cfg)
