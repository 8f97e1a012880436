"""Float64 tensor primitives and reverse-mode gradients.

Tensors are ``torch.Tensor`` objects in double precision. Torch's autograd
graph plays the role of the gradient tape: every primitive below records
itself when any input requires gradients, and :func:`backward` replays the
graph in reverse. Passing ``create_graph=True`` records the backward pass as
well, which is what gradient matching needs to differentiate a gradient
with respect to the synthetic inputs.

The primitive set is deliberately small (matmul, add, mul, relu, conv2d,
sum/mean, softmax cross-entropy); everything else in the package is composed
from these.
"""

from __future__ import annotations

import os
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64

_debug = os.environ.get("RDD_DEBUG", "0") not in ("", "0", "false")


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Turn the NaN/Inf assertion on every primitive output on or off."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


def _checked(out: torch.Tensor, op: str) -> torch.Tensor:
    if _debug and not torch.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return out


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Copy ``data`` into a fresh float64 tensor."""
    if isinstance(data, torch.Tensor):
        t = data.detach().to(DTYPE).clone()
    else:
        t = torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)
    if requires_grad:
        t.requires_grad_(True)
    return t


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64, copy=True)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return _checked(a @ b, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(str(exc)) from None
    return _checked(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(str(exc)) from None
    return _checked(a * b, "mul")


def relu(x: torch.Tensor) -> torch.Tensor:
    return _checked(torch.relu(x), "relu")


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-1, zero-padded ("same") 2-D convolution.

    ``x`` is ``(batch, in_ch, H, W)`` and ``weight`` is
    ``(out_ch, in_ch, k, k)`` with odd ``k``.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"channel mismatch: input {x.shape[1]}, kernel {weight.shape[1]}")
    k = weight.shape[-1]
    if k % 2 == 0 or weight.shape[-2] != k:
        raise DimensionError("conv2d kernels must be square with odd size")
    out = torch.nn.functional.conv2d(x, weight, bias, stride=1, padding=k // 2)
    return _checked(out, "conv2d")


def sum(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:  # noqa: A001
    return _checked(x.sum() if dim is None else x.sum(dim=dim), "sum")


def mean(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    return _checked(x.mean() if dim is None else x.mean(dim=dim), "mean")


def softmax_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample ``-log softmax(logits)[label]``; returns a length-``b`` vector."""
    if logits.dim() != 2:
        raise DimensionError(f"logits must be (batch, classes), got {tuple(logits.shape)}")
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise DimensionError("labels must be a vector with one entry per logit row")
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    picked = logits.gather(1, labels.unsqueeze(1)).squeeze(1)
    return _checked(torch.logsumexp(logits, dim=1) - picked, "softmax_cross_entropy")


def backward(
    loss: torch.Tensor,
    wrt: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    create_graph: bool = False,
) -> dict | list:
    """Gradient of a scalar ``loss`` with respect to each leaf in ``wrt``.

    Returns a dict when ``wrt`` is a mapping, otherwise a list in the same
    order. Leaves that the loss does not depend on get zero gradients.
    """
    if loss.numel() != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise TapeError("loss was not produced by recorded operations")
    if isinstance(wrt, Mapping):
        names = list(wrt)
        leaves: Iterable[torch.Tensor] = [wrt[k] for k in names]
    else:
        names = None
        leaves = list(wrt)
    grads = torch.autograd.grad(
        loss.reshape(()),
        list(leaves),
        create_graph=create_graph,
        allow_unused=True,
    )
    out = [
        torch.zeros_like(leaf) if g is None else _checked(g, "backward")
        for g, leaf in zip(grads, leaves)
    ]
    if names is None:
        return out
    return dict(zip(names, out))
