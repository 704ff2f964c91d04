"""White-box gradient attacks: FGSM and multi-step PGD, targeted or not.

All budgets and step sizes live in the scaled pixel domain [-1, 1]; a budget
quoted in 0-255 pixel units converts via pixels_to_scale (divide by 127.5).
Iterates are always projected onto S_x, the intersection of the linf ball
around the clean image with the [-1, 1] box. Per-example noise streams are
derived from (seed, global example index), so results do not depend on how a
dataset is batched or parallelized.
"""
from __future__ import annotations

import enum
import re
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .rng import example_rng, stable_token

__all__ = [
    "AttackMode", "AttackConfig", "pixels_to_scale", "project_linf",
    "random_start", "select_target", "pgd_attack", "parse_attack_name",
    "attack_suite", "SUITE_DEFAULT",
]

SUITE_DEFAULT = ("FGSM", "CE20", "CW20", "MC1", "LL1")


def pixels_to_scale(px: float) -> float:
    """0-255 pixel units -> [-1, 1] units (255 levels span a range of 2)."""
    return px / 127.5


class AttackMode(enum.Enum):
    NON_TARGETED = "non_targeted"
    TARGETED_MC = "targeted_MC"
    TARGETED_LL = "targeted_LL"
    TARGETED_FIXED = "targeted_fixed"


@dataclass(frozen=True)
class AttackConfig:
    eps_x: float
    steps: int = 1
    step_size: float | None = None  # None: one full-budget step
    loss: nn.LossKind = nn.LossKind.CROSS_ENTROPY_SOFT
    mode: AttackMode = AttackMode.NON_TARGETED
    random_start: bool = False
    seed: int = 0
    target_class: int | None = None  # only for TARGETED_FIXED

    def __post_init__(self):
        if self.eps_x < 0:
            raise ValueError("eps_x must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.eps_x)
        if self.step_size < 0 or (self.step_size == 0 and self.eps_x > 0):
            raise ValueError("step_size must be > 0 for a nonzero budget")
        if self.eps_x > 0 and self.step_size > self.eps_x and self.steps > 1:
            warnings.warn(
                f"step_size {self.step_size:.5g} exceeds the budget "
                f"{self.eps_x:.5g}; extra steps only bounce off the ball",
                stacklevel=2)
        if (self.target_class is not None) != (self.mode is AttackMode.TARGETED_FIXED):
            raise ValueError("target_class is required by, and only by, targeted_fixed mode")


def project_linf(x_adv: np.ndarray, x_orig: np.ndarray, eps_x: float) -> np.ndarray:
    """Clamp into the eps ball around x_orig, then into the [-1, 1] box."""
    if x_adv.shape != x_orig.shape:
        raise ValueError(f"shape mismatch: {x_adv.shape} vs {x_orig.shape}")
    out = np.clip(x_adv, x_orig - eps_x, x_orig + eps_x)
    return np.clip(out, -1.0, 1.0)


def random_start(x: np.ndarray, eps_x: float, seed: int,
                 example_indices: np.ndarray | None = None) -> np.ndarray:
    """Uniform draw in the eps ball, projected into S_x.

    Each example's noise comes from its own (seed, index) stream, so the same
    example gets the same start no matter how the batch is sliced.
    """
    if eps_x < 0:
        raise ValueError("eps_x must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if eps_x == 0.0:
        return x.copy()
    if example_indices is None:
        example_indices = np.arange(x.shape[0])
    out = np.empty_like(x)
    for i, idx in enumerate(example_indices):
        u = example_rng((seed, stable_token("random-start")), int(idx)).uniform(
            -eps_x, eps_x, x.shape[1:])
        out[i] = x[i] + u
    return project_linf(out, x, eps_x)


def select_target(logits: np.ndarray, c: np.ndarray, mode: AttackMode) -> np.ndarray:
    """Per-example MC (highest-probability non-groundtruth) or LL (lowest) class.

    Ties break toward the lowest class index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("logits must be (B, n) with n >= 2")
    c = np.asarray(c)
    rows = np.arange(logits.shape[0])
    masked = logits.copy()
    if mode is AttackMode.TARGETED_MC:
        masked[rows, c] = -np.inf
        return np.argmax(masked, axis=1)
    if mode is AttackMode.TARGETED_LL:
        masked[rows, c] = np.inf
        return np.argmin(masked, axis=1)
    raise ValueError(f"select_target needs a MC or LL mode, got {mode}")


def pgd_attack(model: nn.Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               example_indices: np.ndarray | None = None,
               attack_label: np.ndarray | None = None) -> np.ndarray:
    """Signed-gradient attack with projection after every step.

    Non-targeted mode ascends the loss at the groundtruth label; targeted
    modes descend the loss at the target label. The target is selected once
    from the clean image's logits, before any random start. attack_label
    substitutes a soft distribution for the groundtruth in non-targeted mode
    (used when training against adversarial labels).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise ValueError("y must hold one groundtruth index per example")
    if attack_label is not None and cfg.mode is not AttackMode.NON_TARGETED:
        raise ValueError("attack_label only applies to non-targeted attacks")
    if cfg.mode is AttackMode.NON_TARGETED:
        label, sign = (y if attack_label is None else attack_label), 1.0
    else:
        if cfg.mode is AttackMode.TARGETED_FIXED:
            target = np.full(x.shape[0], cfg.target_class)
            if np.any(target == y):
                raise ValueError("fixed target equals the groundtruth class for some example")
        else:
            target = select_target(nn.forward_logits(model, x), y, cfg.mode)
        label, sign = target, -1.0

    adv = random_start(x, cfg.eps_x, cfg.seed, example_indices) if cfg.random_start else x.copy()
    for _ in range(cfg.steps):
        g = nn.input_gradient(model, adv, label, cfg.loss)
        adv = project_linf(adv + sign * cfg.step_size * np.sign(g), x, cfg.eps_x)
    return adv


_NAME_RE = re.compile(r"^(FGSM|CE(\d+)|CW(\d+)|MC(\d+)|LL(\d+))$")


def parse_attack_name(name: str, eps_x: float, seed: int = 0,
                      multi_step_px: float = 2.0) -> AttackConfig:
    """Suite-convention config for one attack name.

    One-step attacks take a single full-budget step with no random start;
    multi-step attacks take multi_step_px-pixel steps from a random start.
    """
    m = _NAME_RE.match(name)
    if not m:
        raise ValueError(f"unknown attack name {name!r}")
    if name == "FGSM":
        steps, loss, mode = 1, nn.LossKind.CROSS_ENTROPY_SOFT, AttackMode.NON_TARGETED
    elif name.startswith("CE"):
        steps, loss, mode = int(m.group(2)), nn.LossKind.CROSS_ENTROPY_SOFT, AttackMode.NON_TARGETED
    elif name.startswith("CW"):
        steps, loss, mode = int(m.group(3)), nn.LossKind.MARGIN_CW, AttackMode.NON_TARGETED
    elif name.startswith("MC"):
        steps, loss, mode = int(m.group(4)), nn.LossKind.CROSS_ENTROPY_SOFT, AttackMode.TARGETED_MC
    else:
        steps, loss, mode = int(m.group(5)), nn.LossKind.CROSS_ENTROPY_SOFT, AttackMode.TARGETED_LL
    if steps < 1:
        raise ValueError(f"attack {name!r} needs at least one step")
    if steps == 1:
        step_size, rs = eps_x, False
    else:
        step_size, rs = pixels_to_scale(multi_step_px), True
    return AttackConfig(eps_x=eps_x, steps=steps, step_size=step_size, loss=loss,
                        mode=mode, random_start=rs, seed=seed)


def _as_xy(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "x") and hasattr(dataset, "y"):
        return np.asarray(dataset.x), np.asarray(dataset.y)
    x, y = dataset
    return np.asarray(x), np.asarray(y)


def attack_suite(model: nn.Model, dataset, suite_spec=SUITE_DEFAULT, *,
                 eps_x: float, seed: int = 0, multi_step_px: float = 2.0,
                 batch_size: int = 128) -> dict[str, float]:
    """Adversarial accuracy for each named attack, in spec order.

    Each attack gets its own seed stream derived from (seed, attack name), so
    adding or reordering attacks never changes another attack's outcome.
    """
    x, y = _as_xy(dataset)
    out: dict[str, float] = {}
    for name in suite_spec:
        token = stable_token(name)
        attack_seed = int(np.random.SeedSequence([seed, token]).generate_state(1)[0])
        cfg = parse_attack_name(name, eps_x, seed=attack_seed, multi_step_px=multi_step_px)
        correct = 0
        for start in range(0, x.shape[0], batch_size):
            sl = slice(start, min(start + batch_size, x.shape[0]))
            idx = np.arange(sl.start, sl.stop)
            adv = pgd_attack(model, x[sl], y[sl], cfg, example_indices=idx)
            correct += int((nn.predict(model, adv) == y[sl]).sum())
        out[name] = correct / x.shape[0]
    return out
