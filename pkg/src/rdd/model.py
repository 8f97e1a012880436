"""Small classifiers: a ReLU MLP for vector data and a two-layer ConvNet.

Parameters live in an immutable :class:`ModelState`; training steps return a
new state rather than mutating the old one.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import numkernel as nk

CHECKPOINT_MAGIC = b"RDDM"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple
    num_classes: int
    hidden: tuple = (64, 64)
    channels: tuple = (8, 16)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        object.__setattr__(self, "channels", tuple(int(d) for d in self.channels))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise SpecError("num_classes must be at least 2")
        if self.kind == "mlp":
            if len(self.input_shape) != 1:
                raise SpecError(f"mlp input must be a vector, got shape {self.input_shape}")
            if any(h < 1 for h in self.hidden):
                raise SpecError("hidden widths must be positive")
        elif self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise SpecError(f"convnet input must be (H, W, C), got {self.input_shape}")
            if not self.channels or any(c < 1 for c in self.channels):
                raise SpecError("channel counts must be positive")
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise SpecError("kernel size must be odd")
        else:
            raise SpecError(f"unknown architecture kind {self.kind!r}")
        if any(d < 1 for d in self.input_shape):
            raise SpecError("input dimensions must be positive")

    def param_shapes(self) -> list[tuple[str, tuple]]:
        self.validate()
        shapes = []
        if self.kind == "mlp":
            widths = [self.input_shape[0], *self.hidden, self.num_classes]
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                shapes.append((f"fc{i}.weight", (fan_in, fan_out)))
                shapes.append((f"fc{i}.bias", (fan_out,)))
        else:
            h, w, c = self.input_shape
            in_ch = c
            for i, out_ch in enumerate(self.channels):
                shapes.append((f"conv{i}.weight", (out_ch, in_ch, self.kernel, self.kernel)))
                shapes.append((f"conv{i}.bias", (out_ch,)))
                in_ch = out_ch
            shapes.append(("head.weight", (in_ch * h * w, self.num_classes)))
            shapes.append(("head.bias", (self.num_classes,)))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True)
class ModelState:
    spec: ModelSpec
    params: dict
    velocity: dict | None = field(default=None, compare=False)

    def num_params(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def leaves(self) -> dict:
        """Fresh gradient-tracking copies of the parameters."""
        return {k: v.detach().clone().requires_grad_(True) for k, v in self.params.items()}


def init(spec: ModelSpec, seed: int) -> ModelState:
    """He-scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            params[name] = torch.zeros(shape, dtype=nk.DTYPE)
            continue
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in = shape[0]
        bound = math.sqrt(6.0 / fan_in)
        params[name] = nk.tensor(rng.uniform(-bound, bound, size=shape))
    return ModelState(spec, params)


def _as_input(spec: ModelSpec, x) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        x = nk.tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise nk.DimensionError(
            f"input sample shape {tuple(x.shape[1:])} does not match model input {spec.input_shape}"
        )
    return x


def embed(state: ModelState, x, params: dict | None = None) -> torch.Tensor:
    """Penultimate-layer features (input to the final linear layer)."""
    spec = state.spec
    p = state.params if params is None else params
    h = _as_input(spec, x)
    if spec.kind == "mlp":
        for i in range(len(spec.hidden)):
            h = nk.relu(nk.add(nk.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"]))
        return h
    h = h.permute(0, 3, 1, 2)
    for i in range(len(spec.channels)):
        h = nk.relu(nk.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"]))
    return h.reshape(h.shape[0], -1)


def forward(state: ModelState, x, params: dict | None = None) -> torch.Tensor:
    """Logits of shape ``(batch, num_classes)``.

    ``params`` overrides ``state.params``, which is how callers run the
    model on gradient-tracking leaves.
    """
    p = state.params if params is None else params
    h = embed(state, x, p)
    if state.spec.kind == "mlp":
        last = len(state.spec.hidden)
        return nk.add(nk.matmul(h, p[f"fc{last}.weight"]), p[f"fc{last}.bias"])
    return nk.add(nk.matmul(h, p["head.weight"]), p["head.bias"])


def per_sample_loss(state: ModelState, x, y, params: dict | None = None) -> torch.Tensor:
    return nk.softmax_cross_entropy(forward(state, x, params), y)


def predict(state: ModelState, x) -> np.ndarray:
    with torch.no_grad():
        logits = nk.to_numpy(forward(state, x))
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(logits, axis=1)


def sgd_step(state: ModelState, grads: dict, lr: float, momentum: float = 0.0) -> ModelState:
    """One momentum-SGD step: ``v <- momentum * v + g``, ``theta <- theta - lr * v``."""
    if set(grads) != set(state.params):
        raise nk.DimensionError("gradient names do not match parameters")
    velocity = state.velocity or {}
    new_params, new_velocity = {}, {}
    for name, p in state.params.items():
        g = grads[name].detach()
        if g.shape != p.shape:
            raise nk.DimensionError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        v = g.clone() if name not in velocity else velocity[name] * momentum + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return replace(state, params=new_params, velocity=new_velocity)


def loss_and_grads(state: ModelState, x, y) -> tuple[float, dict]:
    """Mean cross-entropy on ``(x, y)`` and its parameter gradients."""
    leaves = state.leaves()
    loss = per_sample_loss(state, x, y, leaves).mean()
    return float(loss.detach()), nk.backward(loss, leaves)


def save_checkpoint(state: ModelState, path) -> None:
    spec_bytes = json.dumps(state.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec_bytes)))
        fh.write(spec_bytes)
        for name, _ in state.spec.param_shapes():
            fh.write(nk.to_numpy(state.params[name]).astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, spec_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    spec = ModelSpec.from_dict(json.loads(raw[offset:offset + spec_len].decode("utf-8")))
    offset += spec_len
    params = {}
    for name, shape in spec.param_shapes():
        count = int(np.prod(shape))
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated while reading {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = nk.tensor(arr)
        offset += nbytes
    return ModelState(spec, params)
