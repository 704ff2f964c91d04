"""Training loops: standard, Madry-style adversarial, and bilateral (BAT).

BAT perturbs both sides of each training example: the image moves toward the
most-confusing class (random-start one/few-step targeted PGD) while the label
moves mass from the groundtruth onto confusing classes via the closed-form
adversarial distribution. The training batch then contains only perturbed
images, and one SGD step is taken on the soft cross entropy.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, replace

import numpy as np

from . import attacks, labels, nn
from .data import Dataset, DatasetSplits
from .persist import save_checkpoint
from .rng import derived_rng, stable_token

__all__ = [
    "TrainMethod", "TrainConfig", "EpochStats", "make_train_attack",
    "madry_preset", "MADRY_PRESETS", "standard_step", "bat_step", "madry_step",
    "train", "accuracy",
]

# step counts / step sizes (pixels) behind the named multi-step training regimes
MADRY_PRESETS = {"PGD7-2": (7, 2.0), "PGD2-8": (2, 8.0)}


class TrainMethod(enum.Enum):
    STANDARD = "standard"
    MADRY = "madry"
    MADRY_LA = "madry_la"
    BAT = "bat"


def make_train_attack(eps_x: float, steps: int | None = None,
                      step_size: float | None = None, seed: int = 0) -> attacks.AttackConfig:
    """Training-time image attack defaults: random start, full-budget steps.

    Large budgets (>= scaled 12 px) default to two steps, which counters the
    label leaking and gradient masking a one-step attack invites there.
    """
    if steps is None:
        steps = 1 if eps_x < attacks.pixels_to_scale(12.0) else 2
    return attacks.AttackConfig(eps_x=eps_x, steps=steps,
                                step_size=eps_x if step_size is None else step_size,
                                random_start=True, seed=seed)


def madry_preset(name: str, eps_px: float = 8.0, seed: int = 0) -> attacks.AttackConfig:
    """Named multi-step regimes: PGD7-2 (7 steps of 2 px), PGD2-8 (2 steps of 8 px)."""
    if name not in MADRY_PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(MADRY_PRESETS)}")
    steps, step_px = MADRY_PRESETS[name]
    return attacks.AttackConfig(eps_x=attacks.pixels_to_scale(eps_px), steps=steps,
                                step_size=attacks.pixels_to_scale(step_px),
                                random_start=True, seed=seed)


@dataclass(frozen=True)
class TrainConfig:
    method: TrainMethod = TrainMethod.STANDARD
    arch: str = "small-conv"
    epochs: int = 10
    batch_size: int = 128
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01),)
    momentum: float = 0.9
    weight_decay: float = 0.0
    attack: attacks.AttackConfig | None = None
    label_adv: labels.LabelAdvConfig | None = None
    ablate_label_adv: bool = False  # allow bat without a label adversary
    label_from: str = "clean"  # which image the label adversary sees: clean|adversarial
    seed: int = 0
    robust_eval_every: int | None = None

    def __post_init__(self):
        if isinstance(self.method, str):
            object.__setattr__(self, "method", TrainMethod(self.method))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        sched = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if not sched or sched[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        epochs_in_sched = [e for e, _ in sched]
        if epochs_in_sched != sorted(set(epochs_in_sched)):
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if self.epochs > 0 and epochs_in_sched[-1] >= self.epochs:
            raise ValueError("lr_schedule entry exceeds the epoch count")
        if any(lr <= 0 for _, lr in sched):
            raise ValueError("learning rates must be positive")
        if self.label_from not in ("clean", "adversarial"):
            raise ValueError("label_from must be 'clean' or 'adversarial'")
        if self.method in (TrainMethod.MADRY, TrainMethod.MADRY_LA, TrainMethod.BAT):
            if self.attack is None:
                raise ValueError(f"{self.method.value} training needs an attack config")
        if self.method is TrainMethod.BAT and self.label_adv is None and not self.ablate_label_adv:
            raise ValueError("bat training needs label_adv (or ablate_label_adv=True)")
        if self.method is TrainMethod.MADRY_LA and self.label_adv is None:
            raise ValueError("madry_la training needs label_adv")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for e, v in self.lr_schedule:
            if epoch >= e:
                lr = v
        return lr


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    clean_test_accuracy: float
    seconds: float
    robust_test_accuracy: float | None = None

    def as_dict(self) -> dict:
        d = {"epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss,
             "clean_test_accuracy": self.clean_test_accuracy, "seconds": self.seconds}
        if self.robust_test_accuracy is not None:
            d["robust_test_accuracy"] = self.robust_test_accuracy
        return d


def accuracy(model: nn.Model, ds: Dataset, batch_size: int = 256) -> float:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        hits += int((nn.predict(model, ds.x[sl]) == ds.y[sl]).sum())
    return hits / len(ds)


def _grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        for arr in g.values():
            total += float((arr * arr).sum())
    return float(np.sqrt(total))


def _apply(model, x, y_dist, cfg: TrainConfig, lr, opt_state):
    loss, _, grads = nn.loss_and_gradients(model, x, y_dist, want_params=True)
    model, opt_state = nn.sgd_step(model, grads, lr, cfg.momentum, cfg.weight_decay, opt_state)
    return model, opt_state, loss, _grad_norm(grads)


def standard_step(model, x, c, cfg: TrainConfig, lr: float, opt_state=None):
    """One supervised SGD step on the clean batch."""
    y = nn.one_hot(np.asarray(c), model.n_classes)
    model, opt_state, loss, gn = _apply(model, x, y, cfg, lr, opt_state)
    return model, opt_state, {"loss": loss, "grad_norm": gn}


def _resolved_attack(cfg: TrainConfig, mode, attack_seed):
    atk = cfg.attack
    seed = atk.seed if attack_seed is None else int(attack_seed)
    target = None  # training never uses a fixed target class
    return replace(atk, mode=mode, seed=seed, target_class=target)


def bat_step(model, x, c, cfg: TrainConfig, lr: float, opt_state=None,
             attack_seed=None, example_indices=None):
    """One bilateral step: perturb image toward MC, perturb label, SGD on both.

    The adversarial label is computed from the clean image's probabilities by
    default (label_from='clean'); with both budgets disabled (eps_x=0 and an
    infinite beta) this reduces bit-for-bit to standard_step.
    """
    c = np.asarray(c)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    atk = _resolved_attack(cfg, attacks.AttackMode.TARGETED_MC, attack_seed)
    if cfg.label_adv is None:  # explicit ablation: hard labels
        y_dist = nn.one_hot(c, model.n_classes)
        x_adv = attacks.pgd_attack(model, x, c, atk, example_indices)
    elif cfg.label_from == "clean":
        y_dist = labels.make_adversarial_label(model, x, c, cfg.label_adv)
        x_adv = attacks.pgd_attack(model, x, c, atk, example_indices)
    else:
        x_adv = attacks.pgd_attack(model, x, c, atk, example_indices)
        y_dist = labels.make_adversarial_label(model, x_adv, c, cfg.label_adv)
    model, opt_state, loss, gn = _apply(model, x_adv, y_dist, cfg, lr, opt_state)
    eps_y = 1.0 - float(y_dist[np.arange(len(c)), c].mean())
    return model, opt_state, {"loss": loss, "grad_norm": gn, "mean_eps_y": eps_y}


def madry_step(model, x, c, cfg: TrainConfig, lr: float, opt_state=None,
               attack_seed=None, example_indices=None):
    """Multi-step non-targeted adversarial training step (optional label adversary)."""
    c = np.asarray(c)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    atk = _resolved_attack(cfg, attacks.AttackMode.NON_TARGETED, attack_seed)
    if cfg.method is TrainMethod.MADRY_LA:
        y_dist = labels.make_adversarial_label(model, x, c, cfg.label_adv)
        x_adv = attacks.pgd_attack(model, x, c, atk, example_indices, attack_label=y_dist)
    else:
        y_dist = nn.one_hot(c, model.n_classes)
        x_adv = attacks.pgd_attack(model, x, c, atk, example_indices)
    model, opt_state, loss, gn = _apply(model, x_adv, y_dist, cfg, lr, opt_state)
    return model, opt_state, {"loss": loss, "grad_norm": gn}


_STEPS = {
    TrainMethod.STANDARD: None,  # handled inline (no attack plumbing)
    TrainMethod.BAT: bat_step,
    TrainMethod.MADRY: madry_step,
    TrainMethod.MADRY_LA: madry_step,
}


def train(cfg: TrainConfig, splits: DatasetSplits,
          checkpoint_path: str | None = None) -> tuple[nn.Model, tuple[EpochStats, ...]]:
    """Seeded epoch loop over the training split.

    Shuffling, initialization, and attack noise all derive from cfg.seed, so a
    repeated run reproduces the checkpoint bit for bit. History (which includes
    wall-clock) is returned separately and never enters the checkpoint.
    """
    if len(splits.train) == 0:
        raise ValueError("empty training split")
    arch = nn.arch_preset(cfg.arch, splits.train.input_shape, splits.train.n_classes)
    init_seed = int(np.random.SeedSequence([cfg.seed, stable_token("init")]).generate_state(1)[0])
    model = nn.build_model(arch, init_seed)
    opt_state = None
    history: list[EpochStats] = []
    n = len(splits.train)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = derived_rng((cfg.seed, stable_token("shuffle"), epoch)).permutation(n)
        attack_seed = int(np.random.SeedSequence(
            [cfg.seed, stable_token("train-attack"), epoch]).generate_state(1)[0])
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, c = splits.train.x[idx], splits.train.y[idx]
            if cfg.method is TrainMethod.STANDARD:
                model, opt_state, stats = standard_step(model, x, c, cfg, lr, opt_state)
            else:
                step = _STEPS[cfg.method]
                model, opt_state, stats = step(model, x, c, cfg, lr, opt_state,
                                               attack_seed=attack_seed,
                                               example_indices=idx)
            loss_sum += stats["loss"] * len(idx)
        robust = None
        if (cfg.robust_eval_every and cfg.attack is not None
                and (epoch + 1) % cfg.robust_eval_every == 0):
            robust = attacks.attack_suite(
                model, splits.test, ("FGSM",), eps_x=cfg.attack.eps_x,
                seed=int(np.random.SeedSequence(
                    [cfg.seed, stable_token("robust-eval"), epoch]).generate_state(1)[0]),
            )["FGSM"]
        history.append(EpochStats(
            epoch=epoch, lr=lr, train_loss=loss_sum / n,
            clean_test_accuracy=accuracy(model, splits.test),
            seconds=time.perf_counter() - t0, robust_test_accuracy=robust))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, extra={"train_config": encode_train_config(cfg)})
    return model, tuple(history)


def encode_train_config(cfg: TrainConfig) -> dict:
    """JSON-friendly view of a TrainConfig (enums and nested configs flattened)."""
    doc = {
        "method": cfg.method.value, "arch": cfg.arch, "epochs": cfg.epochs,
        "batch_size": cfg.batch_size, "lr_schedule": [list(e) for e in cfg.lr_schedule],
        "momentum": cfg.momentum, "weight_decay": cfg.weight_decay,
        "label_from": cfg.label_from, "seed": cfg.seed,
    }
    if cfg.attack is not None:
        doc["attack"] = {
            "eps_x": cfg.attack.eps_x, "steps": cfg.attack.steps,
            "step_size": cfg.attack.step_size, "random_start": cfg.attack.random_start,
            "seed": cfg.attack.seed,
        }
    if cfg.label_adv is not None:
        doc["label_adv"] = {
            "beta": cfg.label_adv.beta, "gamma": cfg.label_adv.gamma,
            "top_m": cfg.label_adv.top_m, "method": cfg.label_adv.method.value,
        }
    if cfg.ablate_label_adv:
        doc["ablate_label_adv"] = True
    if cfg.robust_eval_every is not None:
        doc["robust_eval_every"] = cfg.robust_eval_every
    return doc
