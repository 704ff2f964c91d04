"""Closed-form adversarial label distributions.

Starting from the per-class label gradient v_k = -log p_k, these routines move
probability mass from the groundtruth class c onto the classes the model finds
confusing, subject to the dominance constraint y'_c >= beta * max_{k!=c} y'_k.
Two closed forms are provided: the floor-regularized "main" solution with its
maximal budget eps_y, and the proportional-share "appendix" solution that is
an exact gradient-ascent step on the labels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import nn

__all__ = [
    "LabelGradient", "LabelAdvConfig", "LabelMethod", "label_gradient",
    "epsilon_y_budget", "adversarial_label_main", "adversarial_label_appendix",
    "make_adversarial_label",
]


class LabelMethod(enum.Enum):
    MAIN = "main"
    APPENDIX = "appendix"


@dataclass(frozen=True)
class LabelGradient:
    """v_k = -log p_k for one example, with the groundtruth index c."""
    v: np.ndarray
    c: int

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        object.__setattr__(self, "v", v)
        if v.ndim != 1 or v.shape[0] < 2:
            raise ValueError("need at least 2 classes to perturb a label")
        if not (0 <= self.c < v.shape[0]):
            raise ValueError(f"class index {self.c} out of range [0, {v.shape[0]})")
        if np.any(v < 0.0) or not np.all(np.isfinite(v)):
            raise ValueError("label gradient entries -log p_k must be finite and >= 0")

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def others(self) -> np.ndarray:
        """Indices k != c."""
        return np.delete(np.arange(self.n), self.c)

    @property
    def v_mc(self) -> float:
        """Most-confusing direction: smallest v (largest p) off the groundtruth."""
        return float(self.v[self.others].min())

    @property
    def v_ll(self) -> float:
        """Least-likely direction: largest v (smallest p) off the groundtruth."""
        return float(self.v[self.others].max())


@dataclass(frozen=True)
class LabelAdvConfig:
    beta: float
    gamma: float = 0.01
    top_m: int | None = None
    method: LabelMethod = LabelMethod.MAIN

    def __post_init__(self):
        if not (self.beta > 0):
            raise ValueError("beta must be > 0")
        if not (self.gamma > 0):
            raise ValueError("gamma must be > 0")
        if self.top_m is not None and self.top_m < 1:
            raise ValueError("top_m must be >= 1")
        if isinstance(self.method, str):
            object.__setattr__(self, "method", LabelMethod(self.method))


def label_gradient(log_probs: np.ndarray, c: int) -> LabelGradient:
    """Build the label-gradient vector from one example's log-probabilities."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 1:
        raise ValueError("log_probs must be a single example's vector")
    if lp.shape[0] < 2:
        raise ValueError("need at least 2 classes to perturb a label")
    if np.any(lp > 1e-12):
        raise ValueError("log_probs has entries > 0; not a log-distribution")
    total = np.exp(lp - lp.max()).sum() * np.exp(lp.max())
    if abs(total - 1.0) > 1e-6:
        raise ValueError("log_probs does not normalize to 1")
    return LabelGradient(np.maximum(-lp, 0.0), int(c))


def _support(g: LabelGradient, cfg: LabelAdvConfig) -> np.ndarray:
    """Candidate classes receiving mass: all k != c, or the top_m largest v_k."""
    others = g.others
    if cfg.top_m is None:
        return others
    if cfg.top_m > others.shape[0]:
        raise ValueError(f"top_m={cfg.top_m} exceeds the {others.shape[0]} non-groundtruth classes")
    order = np.argsort(g.v[others], kind="stable")  # ascending; take the tail
    return others[order[-cfg.top_m:]]


def epsilon_y_budget(g: LabelGradient, cfg: LabelAdvConfig) -> float:
    """Largest budget keeping y'_c >= beta * max_{k in S} y'_k for the main form.

    With m candidate classes:
        eps_y = 1 / (1 + (beta/m) * (v_LL - v_MC + gamma) / (mean_S - v_MC + gamma))
    The gamma floor keeps the ratio defined when all candidate v_k coincide
    (the label-smoothing case, where the bound becomes 1/(1 + beta/m)).
    """
    sup = _support(g, cfg)
    vs = g.v[sup]
    m = vs.shape[0]
    v_mc = vs.min()
    spread = (vs.max() - v_mc + cfg.gamma) / (vs.mean() - v_mc + cfg.gamma)
    return float(1.0 / (1.0 + (cfg.beta / m) * spread))


def adversarial_label_main(g: LabelGradient, eps_y: float, cfg: LabelAdvConfig) -> np.ndarray:
    """Distribute eps_y over the candidate classes by shifted-gradient share.

        y'_k = (eps_y/m) * (v_k - v_MC + gamma) / (mean_S - v_MC + gamma)
        y'_c = 1 - eps_y

    At eps_y = epsilon_y_budget the dominance constraint is tight:
    y'_c = beta * max_k y'_k.
    """
    if not (0.0 <= eps_y < 1.0):
        raise ValueError(f"eps_y must lie in [0, 1), got {eps_y}")
    sup = _support(g, cfg)
    vs = g.v[sup]
    m = vs.shape[0]
    v_mc = vs.min()
    y = np.zeros(g.n)
    y[sup] = (eps_y / m) * (vs - v_mc + cfg.gamma) / (vs.mean() - v_mc + cfg.gamma)
    y[g.c] = 1.0 - eps_y
    return y


def adversarial_label_appendix(g: LabelGradient, beta: float) -> tuple[np.ndarray, float]:
    """Proportional-share solution: y'_k = eps_y * v_k / sum(v), maximal eps_y.

    Equivalent to one exact gradient-ascent step on the label with step size
    alpha = 1 / (sum(v) + beta * v_LL), so y'_k = alpha * v_k for k != c.
    """
    if not (beta > 0):
        raise ValueError("beta must be > 0")
    others = g.others
    total = g.v[others].sum()
    if total <= 0.0:
        raise ValueError("all non-groundtruth v_k are zero; label gradient is degenerate")
    eps_y = float(1.0 / (1.0 + beta * g.v_ll / total))
    y = np.zeros(g.n)
    y[others] = eps_y * g.v[others] / total
    y[g.c] = 1.0 - eps_y
    return y, eps_y


def make_adversarial_label(model: nn.Model, x: np.ndarray, c: np.ndarray,
                           cfg: LabelAdvConfig) -> np.ndarray:
    """Adversarial label distributions (B, n) for a batch, from the clean inputs."""
    log_probs = nn.log_softmax(nn.forward_logits(model, x))
    c = np.asarray(c)
    if c.shape != (log_probs.shape[0],):
        raise ValueError("c must hold one groundtruth index per example")
    out = np.empty_like(log_probs)
    for i in range(log_probs.shape[0]):
        g = label_gradient(log_probs[i], int(c[i]))
        if cfg.method is LabelMethod.APPENDIX:
            if cfg.top_m is not None:
                raise ValueError("top_m is only supported by the main method")
            out[i], _ = adversarial_label_appendix(g, cfg.beta)
        else:
            out[i] = adversarial_label_main(g, epsilon_y_budget(g, cfg), cfg)
    return out
