"""Deep-supervised training of contour networks.

Loss is a class-balanced cross-entropy per prediction head: the positive
class (edges) is a small fraction of the pixels in any contour map, so each
image's loss reweights the two classes by the edge fraction beta.  Two
weighting conventions are supported because the literal formula and common
practice disagree; ``hed`` (weight positives by 1 - beta) is the default.

Optimization is plain SGD with momentum and weight decay, batch size 1,
applying an update only every ``accumulation`` iterations using the mean of
the accumulated gradients.  The learning rate decays by a fixed factor on a
fixed iteration interval.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .network import ContourNet, ModelConfig, PredictionSet
from .tensor import Tape, Tensor, param_array

BETA_CONVENTIONS = ("hed", "as_written")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class LossConfig:
    """Balanced cross-entropy settings.

    ``hed`` weights positives by (1 - beta) with beta the positive fraction,
    the convention that up-weights the rare edge class; ``as_written`` flips
    the two weights.  ``epsilon`` clamps predictions away from 0 and 1 before
    the logs.  ``head_weights`` scales each supervised head (None = all 1).
    """

    beta_convention: str = "hed"
    epsilon: float = 1e-7
    head_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.beta_convention not in BETA_CONVENTIONS:
            raise ValueError(f"beta_convention must be one of {BETA_CONVENTIONS}, "
                             f"got '{self.beta_convention}'")
        if not (0.0 < self.epsilon <= 1e-3):
            raise ValueError(f"epsilon must lie in (0, 1e-3], got {self.epsilon}")


def positive_fraction(gt: np.ndarray) -> float:
    """beta = positives / (positives + negatives) for a binary mask."""
    gt = np.asarray(gt)
    if gt.size == 0:
        raise ValueError("ground truth has zero positives and zero negatives")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth mask must be binary")
    return float(gt.sum()) / gt.size


def balanced_bce(pred, gt, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Class-balanced cross-entropy and its gradient with respect to pred.

    Returns ``(loss, grad)`` where grad has pred's shape.  The gradient is
    exact for the clamped loss: coordinates outside [epsilon, 1-epsilon]
    contribute zero slope.
    """
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if p.shape != y.shape:
        if p.ndim == 3 and p.shape[0] == 1 and p.shape[1:] == y.shape:
            y = y[np.newaxis]
        else:
            raise ValueError(f"prediction shape {p.shape} does not match "
                             f"ground truth {y.shape}")
    beta = positive_fraction(y)
    if cfg.beta_convention == "hed":
        w_pos, w_neg = 1.0 - beta, beta
    else:
        w_pos, w_neg = beta, 1.0 - beta
    clamped = np.clip(p, cfg.epsilon, 1.0 - cfg.epsilon)
    loss = -float(np.sum(y * w_pos * np.log(clamped)
                         + (1.0 - y) * w_neg * np.log(1.0 - clamped)))
    grad = -(y * w_pos / clamped) + (1.0 - y) * w_neg / (1.0 - clamped)
    grad[(p < cfg.epsilon) | (p > 1.0 - cfg.epsilon)] = 0.0
    return loss, grad


def deep_supervised_loss(preds: PredictionSet, gt, cfg: LossConfig = LossConfig(),
                         deep_supervision: bool = True
                         ) -> tuple[float, dict[Tensor, np.ndarray], list[float]]:
    """Sum balanced losses over the supervised heads.

    With deep supervision every head contributes with equal (or configured)
    weight; without it only the final head is supervised.  Returns the total,
    a seed mapping {head tensor: gradient} ready for Tape.backward, and the
    per-head losses.
    """
    if not preds.heads:
        raise ValueError("prediction set has no heads")
    heads = list(preds.heads) if deep_supervision else [preds.heads[-1]]
    weights = cfg.head_weights if cfg.head_weights is not None else (1.0,) * len(heads)
    if len(weights) != len(heads):
        raise ValueError(f"{len(weights)} head weights for {len(heads)} supervised heads")
    total = 0.0
    per_head: list[float] = []
    seeds: dict[Tensor, np.ndarray] = {}
    for head, w in zip(heads, weights):
        loss, grad = balanced_bce(head, gt, cfg)
        total += w * loss
        per_head.append(loss)
        # same tensor supervised twice accumulates, keeping the loss linear in heads
        if head in seeds:
            seeds[head] = seeds[head] + w * grad
        else:
            seeds[head] = w * grad
    return total, seeds, per_head


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """SGD-with-momentum state plus the stepped learning-rate schedule."""

    learning_rate: float = 1e-3
    lr_decay: float = 10.0
    lr_step: int = 10000
    momentum: float = 0.9
    weight_decay: float = 2e-4
    accumulation: int = 10
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, iteration: int) -> float:
        """Learning rate in effect at a given 0-based iteration."""
        if self.lr_step <= 0:
            return self.learning_rate
        return self.learning_rate / (self.lr_decay ** (iteration // self.lr_step))


def sgd_step(params: dict[str, object], grads: dict[str, np.ndarray],
             state: OptimState, lr: float | None = None) -> None:
    """One momentum update in place: v <- m*v - lr*(g + wd*theta); theta += v."""
    lr = state.learning_rate if lr is None else lr
    for name, param in params.items():
        theta = param_array(param)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches parameter "
                             f"'{name}' {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = state.momentum * v - lr * (g + state.weight_decay * theta)
        theta += v
        state.velocity[name] = v


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Loop-level knobs; desk-scale defaults."""

    iterations: int = 2000
    learning_rate: float = 1e-3
    lr_decay: float = 10.0
    lr_step: int = 10000
    momentum: float = 0.9
    weight_decay: float = 2e-4
    accumulation: int = 10
    seed: int = 0
    checkpoint_every: int = 0
    beta_convention: str = "hed"
    epsilon: float = 1e-7

    def optim_state(self) -> OptimState:
        return OptimState(self.learning_rate, self.lr_decay, self.lr_step,
                          self.momentum, self.weight_decay, self.accumulation)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.beta_convention, self.epsilon)

    @staticmethod
    def field_names() -> set[str]:
        return {f.name for f in dataclasses.fields(TrainConfig)}

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "TrainConfig":
        parsed: dict = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            text = raw[f.name].strip()
            if f.name == "beta_convention":
                parsed[f.name] = text
            elif f.name in ("learning_rate", "lr_decay", "momentum",
                            "weight_decay", "epsilon"):
                parsed[f.name] = float(text)
            else:
                parsed[f.name] = int(text)
        return cls(**parsed)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse plain ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key=value, got '{line.strip()}'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def load_config_file(path: str) -> tuple[ModelConfig, TrainConfig]:
    """Split one key=value file into model and training configs."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_config_text(fh.read())
    model_keys = ModelConfig.field_names()
    train_keys = TrainConfig.field_names()
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model_cfg = ModelConfig.from_mapping({k: v for k, v in raw.items() if k in model_keys})
    train_cfg = TrainConfig.from_mapping({k: v for k, v in raw.items() if k in train_keys})
    return model_cfg, train_cfg


def train_loop(dataset: Sequence[tuple[np.ndarray, np.ndarray]], model: ContourNet,
               config: TrainConfig,
               log_fh=None,
               checkpoint_fn: Callable[[int, ContourNet], None] | None = None,
               ) -> list[dict]:
    """Seeded single-sample SGD over the dataset.

    The visit order reshuffles every epoch from one generator seeded by
    ``config.seed``, so a (seed, dataset) pair fixes the whole trajectory.
    Gradients are summed over each accumulation window and applied as their
    mean; a trailing partial window is discarded.  Returns the metric
    records; each is also written to ``log_fh`` as a JSON line when given.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    loss_cfg = config.loss_config()
    optim = config.optim_state()
    params = model.parameters()
    rng = np.random.default_rng(config.seed)
    deep = model.config.deep_supervision

    metrics: list[dict] = []
    accum: dict[str, np.ndarray] = {}
    accum_count = 0
    order: list[int] = []
    for it in range(config.iterations):
        if not order:
            order = list(rng.permutation(len(dataset)))
        image, gt = dataset[order.pop()]
        tape = Tape()
        preds = model.forward(image if isinstance(image, Tensor) else Tensor(image), tape)
        loss, seeds, per_head = deep_supervised_loss(preds, gt, loss_cfg, deep)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {it + 1}")
        grads = model.gradients(tape.backward(seeds))
        for name, g in grads.items():
            if name in accum:
                accum[name] += g
            else:
                accum[name] = g.copy()
        accum_count += 1

        record = {"iteration": it + 1, "loss": loss,
                  "lr": optim.lr_at(it), "per_head": per_head}
        metrics.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")

        if accum_count == optim.accumulation:
            mean_grads = {n: g / accum_count for n, g in accum.items()}
            sgd_step(params, mean_grads, optim, optim.lr_at(it))
            accum = {}
            accum_count = 0
            if (config.checkpoint_every > 0 and checkpoint_fn is not None
                    and (it + 1) % config.checkpoint_every == 0):
                checkpoint_fn(it + 1, model)
    return metrics
