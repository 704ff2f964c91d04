"""Robustness evaluation and diagnostics.

White-box accuracy tables over the attack suite, black-box transfer accuracy,
per-example gradient-magnitude statistics (a gradient-masking tell), the
label-leaking indicator (FGSM accuracy above clean accuracy), and a sampled
check of the first-order bound L(x', y') <= L + eps_x * ||dL/dx||_1
+ eps_y * ||dL/dy||_1.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import attacks, nn
from .attacks import _as_xy
from .persist import atomic_write_text
from .rng import derived_rng, stable_token

__all__ = [
    "REPORT_FORMAT", "GradientStats", "EvalReport", "evaluate_whitebox",
    "evaluate_blackbox", "gradient_magnitude_stats", "first_order_bound_check",
    "BoundCheck", "save_report",
]

REPORT_FORMAT = "bat-report/1"

RAW_PIXEL_SCALE = 127.5  # [-1,1] units per raw 0-255 pixel unit


@dataclass(frozen=True)
class GradientStats:
    """min/mean/max of squared L2 gradient norms over one example collection."""
    min: float
    mean: float
    max: float
    count: int

    def __post_init__(self):
        vals = (self.min, self.mean, self.max)
        if not all(np.isfinite(v) and v >= 0.0 for v in vals):
            raise ValueError(f"gradient stats must be finite and nonnegative: {vals}")
        if not (self.min <= self.mean <= self.max):
            raise ValueError(f"gradient stats out of order: {vals}")
        if self.count < 1:
            raise ValueError("empty collection has no stats")

    @classmethod
    def from_values(cls, values: np.ndarray) -> "GradientStats":
        values = np.asarray(values, dtype=np.float64)
        lo, hi = float(values.min()), float(values.max())
        mean = min(max(float(values.mean()), lo), hi)  # guard summation rounding
        return cls(min=lo, mean=mean, max=hi, count=int(values.size))

    def as_dict(self) -> dict:
        return {"min": self.min, "mean": self.mean, "max": self.max, "count": self.count}


@dataclass(frozen=True)
class EvalReport:
    clean_accuracy: float
    attack_accuracy: dict[str, float]
    label_leaking: bool
    gradient_stats: dict[str, GradientStats] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        accs = {"clean": self.clean_accuracy, **self.attack_accuracy}
        for name, acc in accs.items():
            if not (np.isfinite(acc) and 0.0 <= acc <= 1.0):
                raise ValueError(f"accuracy for {name!r} outside [0, 1]: {acc}")
        if self.gradient_stats is not None:
            for coll, stats in self.gradient_stats.items():
                if not isinstance(stats, GradientStats):
                    raise ValueError(f"gradient_stats[{coll!r}] has the wrong type")

    def to_json_dict(self) -> dict:
        doc = {
            "format": REPORT_FORMAT,
            "clean_accuracy": self.clean_accuracy,
            "attacks": dict(self.attack_accuracy),
            "label_leaking": self.label_leaking,
            "metadata": dict(self.metadata),
        }
        if self.gradient_stats is not None:
            doc["gradient_stats"] = {k: v.as_dict() for k, v in self.gradient_stats.items()}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["attack,accuracy", f"clean,{self.clean_accuracy!r}"]
        lines += [f"{name},{acc!r}" for name, acc in self.attack_accuracy.items()]
        return "\n".join(lines) + "\n"


def save_report(report: EvalReport, json_path: str | None = None,
                csv_path: str | None = None) -> None:
    if json_path is not None:
        atomic_write_text(json_path, report.to_json())
    if csv_path is not None:
        atomic_write_text(csv_path, report.to_csv())


def _batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def _map_batches(fn, bounds, workers: int):
    if workers <= 1:
        return [fn(b) for b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, bounds))


def _clean_hits(model, x, y, bounds, workers):
    def run(b):
        s, e = b
        return int((nn.predict(model, x[s:e]) == y[s:e]).sum())
    return sum(_map_batches(run, bounds, workers))


def evaluate_whitebox(model: nn.Model, dataset, suite_spec=attacks.SUITE_DEFAULT, *,
                      eps_x: float, seed: int = 0, multi_step_px: float = 2.0,
                      batch_size: int = 128, workers: int = 1,
                      with_gradient_stats: bool = False,
                      metadata: dict | None = None) -> EvalReport:
    """Clean plus per-attack accuracy on one model.

    The per-example noise streams are derived from each example's global
    index, so the report is bit-identical no matter how the batches are
    scheduled across worker threads.
    """
    x, y = _as_xy(dataset)
    if x.shape[0] == 0:
        raise ValueError("empty evaluation set")
    bounds = _batch_bounds(x.shape[0], batch_size)
    clean = _clean_hits(model, x, y, bounds, workers) / x.shape[0]
    table: dict[str, float] = {}
    for name in suite_spec:
        attack_seed = int(np.random.SeedSequence(
            [seed, stable_token(name)]).generate_state(1)[0])
        cfg = attacks.parse_attack_name(name, eps_x, seed=attack_seed,
                                        multi_step_px=multi_step_px)

        def run(b, cfg=cfg):
            s, e = b
            adv = attacks.pgd_attack(model, x[s:e], y[s:e], cfg,
                                     example_indices=np.arange(s, e))
            return int((nn.predict(model, adv) == y[s:e]).sum())

        table[name] = sum(_map_batches(run, bounds, workers)) / x.shape[0]
    leaking = "FGSM" in table and table["FGSM"] > clean
    stats = gradient_magnitude_stats(model, dataset) if with_gradient_stats else None
    meta = {"eps_x": eps_x, "seed": seed, "suite": list(suite_spec),
            "n_examples": int(x.shape[0]), "multi_step_px": multi_step_px}
    meta.update(metadata or {})
    return EvalReport(clean_accuracy=clean, attack_accuracy=table,
                      label_leaking=leaking, gradient_stats=stats, metadata=meta)


def evaluate_blackbox(target_model: nn.Model, surrogate_model: nn.Model, dataset,
                      attack_cfg: attacks.AttackConfig, *, batch_size: int = 128,
                      workers: int = 1) -> float:
    """Accuracy of the target on examples crafted against the surrogate."""
    if surrogate_model.input_shape != target_model.input_shape:
        raise ValueError(
            f"surrogate input shape {surrogate_model.input_shape} does not match "
            f"target {target_model.input_shape}")
    if surrogate_model.n_classes != target_model.n_classes:
        raise ValueError("surrogate and target disagree on the class count")
    x, y = _as_xy(dataset)
    if x.shape[0] == 0:
        raise ValueError("empty evaluation set")

    def run(b):
        s, e = b
        adv = attacks.pgd_attack(surrogate_model, x[s:e], y[s:e], attack_cfg,
                                 example_indices=np.arange(s, e))
        return int((nn.predict(target_model, adv) == y[s:e]).sum())

    bounds = _batch_bounds(x.shape[0], batch_size)
    return sum(_map_batches(run, bounds, workers)) / x.shape[0]


def gradient_magnitude_stats(model: nn.Model, dataset, *,
                             raw_pixel_convention: bool = False) -> dict[str, GradientStats]:
    """Squared L2 norm of each example's CE input gradient, split by correctness.

    Collections: "all" always; "correct"/"wrong" by the clean prediction, each
    omitted when empty. Examples are processed one at a time so the numbers
    are exactly what a caller gets from input_gradient on a single example
    (batched BLAS paths round differently). raw_pixel_convention reports the
    same norms in the raw 0-255 pixel scale instead of the [-1, 1] scale.
    """
    x, y = _as_xy(dataset)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    norms2 = np.empty(x.shape[0])
    correct = np.empty(x.shape[0], dtype=bool)
    for i in range(x.shape[0]):
        g = nn.input_gradient(model, x[i:i + 1], y[i:i + 1])
        norms2[i] = float((g * g).sum())
        correct[i] = nn.predict(model, x[i:i + 1])[0] == y[i]
    if raw_pixel_convention:
        norms2 = norms2 / RAW_PIXEL_SCALE**2
    out = {"all": GradientStats.from_values(norms2)}
    if correct.any():
        out["correct"] = GradientStats.from_values(norms2[correct])
    if (~correct).any():
        out["wrong"] = GradientStats.from_values(norms2[~correct])
    return out


class BoundCheck(NamedTuple):
    lhs: float
    rhs: float
    slack: float


def _sample_feasible_labels(v: np.ndarray, c: int, eps_y: float, n_samples: int, rng):
    """Random simplex points within eps_y (sup-norm) of one-hot c, plus the
    corner that moves the whole budget onto the highest-loss class."""
    n = v.shape[0]
    others = np.array([k for k in range(n) if k != c])
    ys = np.zeros((n_samples + 1, n))
    ys[:, c] = 1.0
    for i in range(n_samples):
        moved = rng.uniform(0.0, eps_y)
        ys[i, others] = moved * rng.dirichlet(np.ones(n - 1))
        ys[i, c] = 1.0 - moved
    worst = others[np.argmax(v[others])]
    if v[worst] > v[c]:
        ys[-1, worst] = eps_y
        ys[-1, c] = 1.0 - eps_y
    return ys


def first_order_bound_check(model: nn.Model, x: np.ndarray, c: int,
                            eps_x: float, eps_y: float, *,
                            kind: nn.LossKind = nn.LossKind.CROSS_ENTROPY_SOFT,
                            n_samples: int = 64, seed: int = 0) -> BoundCheck:
    """Compare max sampled feasible loss against the first-order bound.

    lhs maximizes the loss over random feasible (x', y') pairs plus the
    signed-gradient corner; rhs = L + eps_x * ||dL/dx||_1 + eps_y * ||dL/dy||_1.
    The slack is reported, not asserted: the bound is first-order only.
    """
    if eps_x < 0 or eps_y < 0:
        raise ValueError("budgets must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"expected one example of shape {model.input_shape}, got {x.shape}")
    c = int(c)
    if kind is not nn.LossKind.CROSS_ENTROPY_SOFT and eps_y > 0:
        raise ValueError("a label budget requires the cross-entropy loss")
    xb = x[None]
    _, grad, _ = nn.loss_and_gradients(model, xb, np.array([c]), kind,
                                       want_input=True)
    g = grad[0]
    rng = derived_rng((seed, stable_token("bound-check")))
    deltas = rng.uniform(-eps_x, eps_x, (n_samples,) + x.shape)
    xs = np.concatenate([xb,                                   # the anchor itself
                         np.clip(xb + deltas, -1.0, 1.0),
                         np.clip(xb + eps_x * np.sign(g), -1.0, 1.0)])
    if kind is nn.LossKind.CROSS_ENTROPY_SOFT:
        v = -nn.log_softmax(nn.forward_logits(model, xb))[0]
        label_term = eps_y * float(np.abs(v).sum())
        label_pool = _sample_feasible_labels(v, c, eps_y, n_samples, rng)
        ys = np.concatenate([nn.one_hot(np.array([c]), model.n_classes),
                             label_pool[:-1],
                             label_pool[-1:]])
    else:
        label_term = 0.0
        ys = np.full(xs.shape[0], c)
    # one candidate at a time: the anchor row must reproduce the base loss
    # bitwise, and batched BLAS paths round differently
    losses = np.array([float(nn.loss(model, xs[i:i + 1], ys[i:i + 1], kind)[0])
                       for i in range(xs.shape[0])])
    rhs = float(losses[0]) + eps_x * float(np.abs(g).sum()) + label_term
    lhs = float(losses.max())
    return BoundCheck(lhs=lhs, rhs=rhs, slack=rhs - lhs)
