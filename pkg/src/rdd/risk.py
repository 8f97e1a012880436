"""Empirical value-at-risk, CVaR, and the cluster-wise group objective.

CVaR here is built from the quantile threshold ``f_alpha``, the smallest
loss value whose empirical CDF reaches ``alpha``. In the default
``lower_trimmed`` mode the CVaR is the mean of the smallest ``alpha * n``
losses, with the sample sitting at ``f_alpha`` fractionally weighted so the
total weight is exactly ``alpha * n``. At ``alpha = 1`` it is the plain mean.

``upper_tail`` mode applies the same estimator to negated losses and negates
the result, giving the mean of the largest ``alpha * n`` losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

CVAR_MODES = ("lower_trimmed", "upper_tail")


class EmptyClusterError(ValueError):
    pass


@dataclass(frozen=True)
class RiskConfig:
    alpha: float = 0.8
    cvar_mode: str = "lower_trimmed"
    include_ce: bool = True
    weight_avg: float = 1.0
    weight_max: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.cvar_mode not in CVAR_MODES:
            raise ValueError(f"cvar_mode must be one of {CVAR_MODES}, got {self.cvar_mode!r}")
        if self.weight_avg < 0 or self.weight_max < 0:
            raise ValueError("term weights must be nonnegative")
        if self.weight_avg == 0 and self.weight_max == 0 and not self.include_ce:
            raise ValueError("objective is identically zero: all weights are 0 and include_ce is off")

    @classmethod
    def erm(cls) -> "RiskConfig":
        """The degenerate configuration that reduces to mean cross-entropy."""
        return cls(alpha=1.0, include_ce=False, weight_avg=1.0, weight_max=0.0)


def _as_1d(losses) -> torch.Tensor:
    if isinstance(losses, torch.Tensor):
        t = losses.reshape(-1)
    else:
        t = torch.as_tensor(np.asarray(losses, dtype=np.float64).reshape(-1))
    if t.numel() == 0:
        raise EmptyClusterError("loss vector is empty")
    return t


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")


def _var_index(values: np.ndarray, alpha: float) -> int:
    """Index into ``values`` of the order statistic equal to ``f_alpha``."""
    n = values.shape[0]
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    # count of entries <= sorted_vals[j], accounting for ties
    counts = np.searchsorted(sorted_vals, sorted_vals, side="right")
    for j in range(n):
        if counts[j] / n >= alpha:
            return int(order[j])
    return int(order[-1])


def value_at_risk(losses, alpha: float) -> float:
    """Smallest loss value ``v`` such that the fraction of losses ``<= v`` is ``>= alpha``."""
    _check_alpha(alpha)
    t = _as_1d(losses)
    values = t.detach().cpu().numpy().astype(np.float64)
    return float(values[_var_index(values, alpha)])


def _lower_trimmed(t: torch.Tensor, alpha: float) -> torch.Tensor:
    if alpha == 1.0:
        return t.mean()
    values = t.detach().cpu().numpy().astype(np.float64)
    n = values.shape[0]
    k = _var_index(values, alpha)
    f_alpha = t[k]
    below = torch.as_tensor(values <= values[k])
    count = int(below.sum())
    tail_sum = (t * below.to(t.dtype)).sum()
    return (tail_sum / n + f_alpha * (alpha - count / n)) / alpha


def cvar(losses, config: RiskConfig | None = None, *, alpha: float | None = None,
         mode: str | None = None) -> torch.Tensor:
    """Empirical CVaR of a loss vector as a 0-d tensor.

    Gradients flow back into ``losses`` through the retained samples and the
    boundary order statistic.
    """
    if config is not None:
        alpha = config.alpha if alpha is None else alpha
        mode = config.cvar_mode if mode is None else mode
    alpha = 0.8 if alpha is None else alpha
    mode = "lower_trimmed" if mode is None else mode
    _check_alpha(alpha)
    t = _as_1d(losses)
    if mode == "lower_trimmed":
        return _lower_trimmed(t, alpha)
    if mode == "upper_tail":
        return -_lower_trimmed(-t, alpha)
    raise ValueError(f"unknown cvar mode {mode!r}")


def group_objective(per_cluster_losses, config: RiskConfig) -> tuple[torch.Tensor, list]:
    """Weighted mean-plus-max of per-cluster CVaRs, optionally plus mean CE.

    Empty clusters are skipped. Returns the objective and a list with one
    CVaR value per input cluster (``None`` for skipped ones). The max term
    passes gradient to a single cluster: the first one attaining the max.
    """
    kept = []
    report: list = []
    for losses in per_cluster_losses:
        if losses is None or losses.numel() == 0:
            report.append(None)
            continue
        value = cvar(losses, config)
        kept.append((value, losses))
        report.append(float(value.detach()))
    if not kept:
        raise EmptyClusterError("every cluster is empty")

    values = [v for v, _ in kept]
    terms = []
    if config.weight_avg > 0:
        avg = values[0] if len(values) == 1 else torch.stack(values).mean()
        terms.append(avg if config.weight_avg == 1.0 else config.weight_avg * avg)
    if config.weight_max > 0:
        floats = [float(v.detach()) for v in values]
        worst = values[floats.index(max(floats))]
        terms.append(worst if config.weight_max == 1.0 else config.weight_max * worst)
    if config.include_ce:
        everything = torch.cat([l.reshape(-1) for _, l in kept])
        terms.append(everything.mean())
    objective = terms[0]
    for term in terms[1:]:
        objective = objective + term
    return objective, report
