"""Robust dataset distillation loops.

Each first-order iteration:

1. draws a class-balanced subsample of the real set,
2. clusters it by nearest synthetic point (within each class),
3. trains the network for a few steps on the cluster-wise CVaR objective,
4. updates the synthetic features on a matching loss evaluated at the
   freshly trained parameters.

The zero-order loop replaces step 4 by a Gaussian-smoothing gradient
estimate of the matching loss and a diminishing step size.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import numkernel as nk
from .data import Dataset, DataError, subsample
from .model import ModelSpec, ModelState, embed, init, per_sample_loss, sgd_step
from .partition import assign_to_nearest, kmeans, select_centers
from .risk import RiskConfig, group_objective

log = logging.getLogger(__name__)

SYNTHETIC_MAGIC = b"RDDS"
SYNTHETIC_VERSION = 1

MATCHING = ("gradient", "distribution")
DISTANCES = ("layerwise-cosine", "l2")
PARTITIONS = ("nearest-synthetic", "none")
INITS = ("random-real", "class-kmeans")


class DistillError(RuntimeError):
    pass


class ZeroOrderError(FloatingPointError):
    pass


@dataclass
class SyntheticSet:
    """Class-major synthetic points: rows ``c*ipc ... (c+1)*ipc - 1`` belong to class ``c``."""

    features: np.ndarray
    ipc: int
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape[0] != self.ipc * self.num_classes:
            raise DistillError(
                f"expected {self.ipc * self.num_classes} synthetic points, got {self.features.shape[0]}"
            )

    @property
    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_classes, dtype=np.int64), self.ipc)

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def of_class(self, c: int) -> np.ndarray:
        return self.features[c * self.ipc:(c + 1) * self.ipc]

    def as_dataset(self) -> Dataset:
        return Dataset(self.features.copy(), self.labels, name="synthetic", num_classes=self.num_classes)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.features, dtype="<f8").tobytes()).hexdigest()

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(self.features.copy(), self.ipc, self.num_classes)


@dataclass
class DistillConfig:
    ipc: int = 10
    iterations: int = 200
    matching: str = "gradient"
    distance: str = "layerwise-cosine"
    init: str = "random-real"
    inner_steps: int = 5
    inner_lr: float = 0.01
    inner_momentum: float = 0.9
    syn_steps: int = 1
    syn_lr: float = 0.1
    syn_momentum: float = 0.5
    batch_per_class: int = 256
    max_clusters: int = 10
    partition: str = "nearest-synthetic"
    restart_every: int = 1
    risk_matching: bool = False
    zo_probes: int = 20
    zo_sigma: float = 0.01
    zo_step_scale: float = 0.1
    seed: int = 0
    risk: RiskConfig | None = field(default_factory=RiskConfig)

    def __post_init__(self):
        for name in ("ipc", "batch_per_class", "max_clusters", "restart_every", "zo_probes"):
            if getattr(self, name) < 1:
                raise DistillError(f"{name} must be >= 1")
        for name in ("iterations", "inner_steps", "syn_steps"):
            if getattr(self, name) < 0:
                raise DistillError(f"{name} must be >= 0")
        if self.zo_sigma <= 0:
            raise DistillError("zo_sigma must be > 0")
        for name, allowed in (("matching", MATCHING), ("distance", DISTANCES),
                              ("partition", PARTITIONS), ("init", INITS)):
            if getattr(self, name) not in allowed:
                raise DistillError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["risk"] = None if self.risk is None else asdict(self.risk)
        return d


# ---------------------------------------------------------------- init

def init_synthetic(real: Dataset, ipc: int, mode: str = "random-real", seed=0) -> SyntheticSet:
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(real.num_classes):
        idx = np.flatnonzero(real.labels == c)
        if idx.size < ipc:
            raise DataError(f"class {c} has {idx.size} samples, ipc={ipc} requested")
        if mode == "random-real":
            rows.append(real.features[rng.choice(idx, size=ipc, replace=False)])
        elif mode == "class-kmeans":
            result = kmeans(real.features[idx], ipc, seed=int(rng.integers(2**31)))
            rows.append(result.centers.reshape((ipc,) + real.feature_shape))
        else:
            raise DistillError(f"unknown init mode {mode!r}")
    return SyntheticSet(np.concatenate(rows), ipc, real.num_classes)


# ---------------------------------------------------------------- matching losses

def _layer_distance(gs: torch.Tensor, gr: torch.Tensor, distance: str, diagnostics, name: str):
    a, b = gs.reshape(-1), gr.reshape(-1)
    if distance == "layerwise-cosine":
        na, nb = a.norm(), b.norm()
        if float(na.detach()) > 0 and float(nb.detach()) > 0:
            return 1.0 - (a * b).sum() / (na * nb)
        if diagnostics is not None:
            diagnostics.setdefault("cosine_fallback", []).append(name)
    diff = a - b
    return (diff * diff).sum()


def class_gradients(state: ModelState, x, y, create_graph: bool = False) -> dict:
    leaves = state.leaves()
    loss = per_sample_loss(state, x, y, leaves).mean()
    return nk.backward(loss, leaves, create_graph=create_graph)


def gradient_distance(g_syn: dict, g_real: dict, distance: str = "layerwise-cosine",
                      diagnostics: dict | None = None) -> torch.Tensor:
    total = None
    for name in g_syn:
        d = _layer_distance(g_syn[name], g_real[name].detach(), distance, diagnostics, name)
        total = d if total is None else total + d
    return total


def gradient_match_loss(state: ModelState, syn_x, syn_y, real_x, real_y,
                        distance: str = "layerwise-cosine", diagnostics: dict | None = None) -> torch.Tensor:
    """Summed per-class distance between synthetic and real training gradients.

    Differentiable with respect to ``syn_x`` when it requires grad (the
    synthetic gradient is recorded with ``create_graph=True``).
    """
    syn_y = np.asarray(syn_y)
    real_y = np.asarray(real_y)
    total = None
    for c in np.unique(syn_y):
        rmask = real_y == c
        if not rmask.any():
            continue
        smask = torch.as_tensor(syn_y == c)
        g_real = class_gradients(state, real_x[rmask], real_y[rmask])
        g_syn = class_gradients(state, syn_x[smask], syn_y[syn_y == c], create_graph=True)
        d = gradient_distance(g_syn, g_real, distance, diagnostics)
        total = d if total is None else total + d
    if total is None:
        raise DistillError("no class present in both synthetic and real batches")
    return total


def distribution_match_loss(state: ModelState, syn_x, syn_y, real_x, real_y) -> torch.Tensor:
    """Per-class squared distance between mean penultimate embeddings, summed."""
    syn_y = np.asarray(syn_y)
    real_y = np.asarray(real_y)
    total = None
    for c in np.unique(syn_y):
        rmask = real_y == c
        if not rmask.any():
            continue
        with torch.no_grad():
            e_real = embed(state, real_x[rmask]).mean(dim=0)
        e_syn = embed(state, syn_x[torch.as_tensor(syn_y == c)]).mean(dim=0)
        diff = e_syn - e_real
        d = (diff * diff).sum()
        total = d if total is None else total + d
    if total is None:
        raise DistillError("no class present in both synthetic and real batches")
    return total


def cluster_match_loss(state: ModelState, syn_x, syn_idx, real_x, real_y, members,
                       risk: RiskConfig, matching: str, distance: str) -> torch.Tensor:
    """Matching loss per cluster (synthetic center vs. its real members),
    combined with the group weights of ``risk``."""
    values = []
    for center, idx in zip(syn_idx, members):
        if len(idx) == 0:
            continue
        label = np.asarray(real_y[idx[:1]])
        sx = syn_x[int(center):int(center) + 1]
        if matching == "gradient":
            values.append(gradient_match_loss(state, sx, label, real_x[idx], real_y[idx], distance))
        else:
            values.append(distribution_match_loss(state, sx, label, real_x[idx], real_y[idx]))
    if not values:
        raise DistillError("every cluster is empty")
    stacked = torch.stack(values)
    total = risk.weight_avg * stacked.mean()
    if risk.weight_max > 0:
        floats = [float(v.detach()) for v in values]
        total = total + risk.weight_max * values[floats.index(max(floats))]
    return total


# ---------------------------------------------------------------- inner DRO

def cluster_members(sub: Dataset, synthetic: SyntheticSet, partition: str,
                    max_clusters: int, seed) -> tuple[list, np.ndarray]:
    """Member index lists and the synthetic row index of each cluster's center."""
    if partition == "none":
        return [np.arange(len(sub))], np.array([-1])
    centers, center_labels, center_idx = select_centers(
        synthetic.features, synthetic.labels, max_clusters, seed
    )
    clusters = assign_to_nearest(sub.features, centers, sub.labels, center_labels)
    return clusters.members, center_idx


def inner_dro_update(state: ModelState, sub: Dataset, members: list, risk: RiskConfig | None,
                     steps: int, lr: float, momentum: float = 0.9,
                     trace: list | None = None) -> ModelState:
    """Momentum-SGD on the group objective over fixed clusters of ``sub``.

    ``risk=None`` trains on the plain mean loss (the non-robust baseline).
    ``trace`` receives ``(objective, per_cluster_cvars)`` for every step.
    """
    if len(sub) == 0:
        raise DistillError("empty subsample")
    x = nk.tensor(sub.features)
    y = sub.labels
    single = len(members) == 1 and len(members[0]) == len(sub)
    index = [torch.as_tensor(m, dtype=torch.long) for m in members]
    for _ in range(steps):
        leaves = state.leaves()
        losses = per_sample_loss(state, x, y, leaves)
        if risk is None:
            objective, cvars = losses.mean(), []
        else:
            per_cluster = [losses] if single else [losses[i] for i in index]
            objective, cvars = group_objective(per_cluster, risk)
        if trace is not None:
            trace.append((float(objective.detach()), cvars))
        grads = nk.backward(objective, leaves)
        state = sgd_step(state, grads, lr, momentum)
    return state


# ---------------------------------------------------------------- first-order loop

def default_model_spec(real: Dataset) -> ModelSpec:
    kind = "mlp" if len(real.feature_shape) == 1 else "convnet"
    return ModelSpec(kind, real.feature_shape, real.num_classes)


def _batch_per_class(real: Dataset, requested: int) -> int:
    smallest = int(np.bincount(real.labels, minlength=real.num_classes).min())
    if smallest == 0:
        raise DataError("every class needs at least one real sample")
    return min(requested, smallest)


def _matching_loss(config: DistillConfig, state, syn_x, synthetic, sub, members, center_idx,
                   diagnostics=None):
    real_x = nk.tensor(sub.features)
    if config.risk_matching and config.risk is not None and center_idx[0] >= 0:
        return cluster_match_loss(state, syn_x, center_idx, real_x, sub.labels, members,
                                  config.risk, config.matching, config.distance)
    if config.matching == "gradient":
        return gradient_match_loss(state, syn_x, synthetic.labels, real_x, sub.labels,
                                   config.distance, diagnostics)
    return distribution_match_loss(state, syn_x, synthetic.labels, real_x, sub.labels)


def distill_first_order(real: Dataset, config: DistillConfig, model_spec: ModelSpec | None = None,
                        synthetic: SyntheticSet | None = None,
                        on_iteration: Callable[[dict], None] | None = None):
    """Run the matching-based robust distillation loop.

    Returns ``(synthetic_set, log_records)``.
    """
    spec = model_spec or default_model_spec(real)
    if synthetic is None:
        synthetic = init_synthetic(real, config.ipc, config.init, [config.seed, 0])
    synthetic = synthetic.copy()
    per_class = _batch_per_class(real, config.batch_per_class)
    velocity = np.zeros_like(synthetic.features)
    records = []
    state = None
    for it in range(config.iterations):
        try:
            if it % config.restart_every == 0:
                state = init(spec, [config.seed, 3, it // config.restart_every])
            sub = subsample(real, per_class, [config.seed, 1, it])
            members, center_idx = cluster_members(
                sub, synthetic, "none" if config.risk is None else config.partition,
                config.max_clusters, [config.seed, 2, it],
            )
            trace: list = []
            state = inner_dro_update(state, sub, members, config.risk, config.inner_steps,
                                     config.inner_lr, config.inner_momentum, trace)
            diagnostics: dict = {}
            match_value = float("nan")
            for _ in range(config.syn_steps):
                syn_x = nk.tensor(synthetic.features, requires_grad=True)
                loss = _matching_loss(config, state, syn_x, synthetic, sub, members,
                                      center_idx, diagnostics)
                (grad,) = nk.backward(loss, [syn_x])
                match_value = float(loss.detach())
                velocity = config.syn_momentum * velocity + nk.to_numpy(grad)
                synthetic.features = synthetic.features - config.syn_lr * velocity
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            raise DistillError(f"iteration {it}: {exc}") from exc
        record = {
            "iteration": it,
            "matching_loss": match_value,
            "objective": trace[-1][0] if trace else None,
            "cluster_cvars": trace[-1][1] if trace else [],
            "cluster_sizes": [int(len(m)) for m in members],
            "synthetic_sha256": synthetic.digest(),
        }
        if diagnostics:
            record["diagnostics"] = diagnostics
        records.append(record)
        if on_iteration is not None:
            on_iteration(record)
    return synthetic, records


# ---------------------------------------------------------------- zero-order

def zero_order_grad(objective: Callable[[np.ndarray], float], s: np.ndarray, M: int,
                    sigma: float, seed) -> np.ndarray:
    """Gaussian-smoothing forward-difference gradient estimate.

    ``g = (1/M) * sum_l (L(s + sigma v_l) - L(s)) / sigma * v_l`` with
    ``v_l ~ N(0, I)`` drawn in order from ``seed``; uses exactly ``M + 1``
    objective evaluations.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    s = np.asarray(s, dtype=np.float64)
    base = float(objective(s))
    if not math.isfinite(base):
        raise ZeroOrderError("objective is not finite at the base point")
    rng = np.random.default_rng(seed)
    g = np.zeros_like(s)
    for l in range(M):
        v = rng.standard_normal(s.shape)
        value = float(objective(s + sigma * v))
        if not math.isfinite(value):
            raise ZeroOrderError(f"objective is not finite at probe {l}")
        g += (value - base) / sigma * v
    return g / M


def zo_stepsize(epoch: int, scale: float = 0.1) -> float:
    """Diminishing step ``scale / sqrt(1 + epoch)``."""
    return scale / math.sqrt(1.0 + epoch)


def zero_order_descent(objective_at: Callable[[int], Callable[[np.ndarray], float]],
                       s0: np.ndarray, epochs: int, M: int, sigma: float, seed,
                       scale: float = 0.1):
    """Plain zero-order descent for epochs ``E = 1..epochs``.

    ``objective_at(E)`` returns the objective used in epoch ``E`` (it may
    change between epochs). Returns the final point and per-epoch records.
    """
    s = np.array(s0, dtype=np.float64)
    records = []
    for epoch in range(1, epochs + 1):
        fn = objective_at(epoch)
        g = zero_order_grad(fn, s, M, sigma, [*np.atleast_1d(seed).tolist(), epoch])
        step = zo_stepsize(epoch, scale)
        s = s - step * g
        records.append({"epoch": epoch, "step": step, "grad_norm": float(np.linalg.norm(g))})
    return s, records


def distill_zero_order(real: Dataset, config: DistillConfig, model_spec: ModelSpec | None = None,
                       synthetic: SyntheticSet | None = None,
                       on_iteration: Callable[[dict], None] | None = None):
    """Zero-order variant: the matching loss is only evaluated, never differentiated in S."""
    spec = model_spec or default_model_spec(real)
    if synthetic is None:
        synthetic = init_synthetic(real, config.ipc, config.init, [config.seed, 0])
    synthetic = synthetic.copy()
    per_class = _batch_per_class(real, config.batch_per_class)
    records = []
    state = None
    for epoch in range(1, config.iterations + 1):
        it = epoch - 1
        try:
            if it % config.restart_every == 0:
                state = init(spec, [config.seed, 3, it // config.restart_every])
            sub = subsample(real, per_class, [config.seed, 1, it])
            members, center_idx = cluster_members(
                sub, synthetic, "none" if config.risk is None else config.partition,
                config.max_clusters, [config.seed, 2, it],
            )
            trace: list = []
            state = inner_dro_update(state, sub, members, config.risk, config.inner_steps,
                                     config.inner_lr, config.inner_momentum, trace)
            frozen = state

            def objective(flat, _state=frozen, _sub=sub, _members=members, _idx=center_idx):
                syn_x = nk.tensor(flat.reshape(synthetic.features.shape))
                return float(_matching_loss(config, _state, syn_x, synthetic, _sub, _members, _idx).detach())

            g = zero_order_grad(objective, synthetic.features, config.zo_probes, config.zo_sigma,
                                [config.seed, 4, epoch])
            step = zo_stepsize(epoch, config.zo_step_scale)
            match_value = objective(synthetic.features)
            synthetic.features = synthetic.features - step * g
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            raise DistillError(f"iteration {it}: {exc}") from exc
        record = {
            "iteration": it,
            "epoch": epoch,
            "step": step,
            "matching_loss": match_value,
            "objective": trace[-1][0] if trace else None,
            "cluster_cvars": trace[-1][1] if trace else [],
            "cluster_sizes": [int(len(m)) for m in members],
            "synthetic_sha256": synthetic.digest(),
        }
        records.append(record)
        if on_iteration is not None:
            on_iteration(record)
    return synthetic, records


# ---------------------------------------------------------------- file format

def save_synthetic(synthetic: SyntheticSet, path, manifest: dict | None = None) -> None:
    """Write the binary set and, when ``manifest`` is given, a JSON sidecar
    next to it (same stem, ``.json``)."""
    path = Path(path)
    shape = synthetic.feature_shape
    with path.open("wb") as fh:
        fh.write(SYNTHETIC_MAGIC)
        fh.write(struct.pack("<IIII", SYNTHETIC_VERSION, synthetic.num_classes, synthetic.ipc, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for c in range(synthetic.num_classes):
            fh.write(np.ascontiguousarray(synthetic.of_class(c), dtype="<f8").tobytes())
    if manifest is not None:
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_synthetic(path) -> SyntheticSet:
    raw = Path(path).read_bytes()
    if raw[:4] != SYNTHETIC_MAGIC:
        raise ValueError(f"{path}: not a synthetic set file (bad magic)")
    version, num_classes, ipc, ndim = struct.unpack_from("<IIII", raw, 4)
    if version != SYNTHETIC_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 20
    shape = struct.unpack_from(f"<{ndim}I", raw, offset)
    offset += 4 * ndim
    count = num_classes * ipc * int(np.prod(shape))
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload size does not match header")
    features = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return SyntheticSet(features.reshape((num_classes * ipc,) + tuple(shape)).astype(np.float64), ipc, num_classes)


def load_manifest(path) -> dict | None:
    sidecar = Path(path).with_suffix(".json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())
