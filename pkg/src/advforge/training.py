"""Training loops: undefended baseline, superimposition defenses, VAT and PGD.

The superimposition + KL objective costs two forward passes and one
backward pass per batch: the mixed-image forward runs tape-free and its
prediction enters the KL term as a constant target, so the backward sweep
touches only the clean branch. VAT and PGD pay for their inner
maximization with extra gradient passes, mirroring their relative
per-epoch costs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .attacks import AttackConfig, ensemble_step
from .data import LabeledDataset, MixConfig, sample_alpha
from .models import Model, accuracy
from .tensor import Tape, Tensor, backward, scale, suspend_tape


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_good: dict):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good


@dataclass
class DefenseVariant:
    """Tagged training-objective choice."""
    kind: str = "none"  # none | fixed_alpha | fixed_alpha_kl | beta_alpha_kl | vat | pgd
    alpha: float = 0.4
    p: float = 2.0
    q: float = 4.0
    kl_weight: float = 10.0
    epsilon: float = 8.0
    step_size: float = 2.0
    iterations: int = 3

    KINDS = ("none", "fixed_alpha", "fixed_alpha_kl", "beta_alpha_kl", "vat", "pgd")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind in ("fixed_alpha", "fixed_alpha_kl") and not 0 < self.alpha < 0.5:
            raise ValueError(f"alpha must be in (0, 0.5), got {self.alpha}")
        if self.kind == "beta_alpha_kl" and (self.p <= 0 or self.q <= 0):
            raise ValueError("beta parameters must be positive")
        if self.kind in ("fixed_alpha_kl", "beta_alpha_kl", "vat") and self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.kind in ("vat", "pgd") and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kind in ("vat", "pgd") and self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @classmethod
    def none(cls):
        return cls(kind="none")

    @classmethod
    def fixed_alpha(cls, alpha: float):
        return cls(kind="fixed_alpha", alpha=alpha)

    @classmethod
    def fixed_alpha_kl(cls, alpha: float, kl_weight: float):
        return cls(kind="fixed_alpha_kl", alpha=alpha, kl_weight=kl_weight)

    @classmethod
    def beta_alpha_kl(cls, p: float, q: float, kl_weight: float):
        return cls(kind="beta_alpha_kl", p=p, q=q, kl_weight=kl_weight)

    @classmethod
    def vat(cls, epsilon: float, iterations: int = 3, kl_weight: float = 1.0):
        return cls(kind="vat", epsilon=epsilon, iterations=iterations, kl_weight=kl_weight)

    @classmethod
    def pgd(cls, epsilon: float = 8.0, step_size: float = 2.0, iterations: int = 7):
        return cls(kind="pgd", epsilon=epsilon, step_size=step_size, iterations=iterations)

    def mix_config(self) -> MixConfig:
        if self.kind in ("fixed_alpha", "fixed_alpha_kl"):
            return MixConfig(mode="fixed", alpha=self.alpha, kl_weight=self.kl_weight)
        return MixConfig(mode="beta", p=self.p, q=self.q, kl_weight=self.kl_weight)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseVariant":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"  # "cosine" | "constant"
    seed: int = 0
    defense: DefenseVariant = field(default_factory=DefenseVariant.none)

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1:
            raise ValueError("learning rate must be positive and epochs >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    epoch_seconds: list[float] = field(default_factory=list)

    def median_epoch_seconds(self) -> float:
        return float(np.median(self.epoch_seconds)) if self.epoch_seconds else 0.0

    def to_dict(self) -> dict:
        return {"records": self.records, "best_epoch": self.best_epoch,
                "best_val_acc": self.best_val_acc,
                "median_epoch_seconds": self.median_epoch_seconds()}


# --------------------------------------------------------------------------
# batch objectives
# --------------------------------------------------------------------------

def _mix_batch(x: np.ndarray, pool: np.ndarray, alphas: np.ndarray,
               partner_idx: np.ndarray) -> np.ndarray:
    a = alphas.astype(np.float32)[:, None, None, None]
    return (1.0 - a) * x + a * pool[partner_idx]


def _sample_alphas(mix: MixConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.array([sample_alpha(mix, rng) for _ in range(n)], dtype=np.float32)


def loss_plain(model: Model, xb: np.ndarray, yb: np.ndarray) -> Tensor:
    logits = model.forward(Tensor(xb), train=True)
    return nn.cross_entropy_loss(logits, yb)


def loss_fixed_alpha(model: Model, xb: np.ndarray, yb: np.ndarray, alpha: float,
                     pool: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Cross-entropy on superimposed images that inherit the original labels."""
    idx = rng.integers(0, len(pool), size=len(xb))
    alphas = np.full(len(xb), alpha, dtype=np.float32)
    mixed = _mix_batch(xb, pool, alphas, idx)
    logits = model.forward(Tensor(mixed), train=True)
    return nn.cross_entropy_loss(logits, yb)


def loss_alpha_kl(model: Model, xb: np.ndarray, yb: np.ndarray, mix: MixConfig,
                  pool: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Clean cross-entropy plus lambda * KL(clean prediction || mixed prediction).

    The mixed-image pass is tape-free and its prediction is a constant
    target, so the objective adds one forward pass and no backward work
    beyond the clean branch.
    """
    idx = rng.integers(0, len(pool), size=len(xb))
    alphas = _sample_alphas(mix, len(xb), rng)
    mixed = _mix_batch(xb, pool, alphas, idx)

    logits = model.forward(Tensor(xb), train=True)
    ce = nn.cross_entropy_loss(logits, yb)
    if mix.kl_weight == 0.0:
        return ce
    with suspend_tape():  # inference-only: the mixed prediction is a constant target
        mixed_logits = model.forward(Tensor(mixed), train=False)
    q_const = Tensor(nn._softmax_array(mixed_logits.data))
    p = nn.softmax(logits)
    kl = nn.kl_divergence(p, q_const)
    return ce + scale(kl, mix.kl_weight)


def vat_loss(model: Model, xb: np.ndarray, yb: np.ndarray, epsilon: float,
             iterations: int, kl_weight: float, rng: np.random.Generator,
             xi_factor: float = 1e-6) -> Tensor:
    """Clean loss plus KL against the locally most-distracting perturbation.

    The perturbation direction comes from power iteration on the KL
    divergence; those probe passes run in float64 because the probe scale
    xi = 1e-6 * per-image l2 norm sits below float32 resolution.
    """
    n = len(xb)
    logits = model.forward(Tensor(xb), train=True)
    ce = nn.cross_entropy_loss(logits, yb)
    if kl_weight == 0.0:
        return ce
    p_const32 = Tensor(nn._softmax_array(logits.data))

    x64 = xb.astype(np.float64)
    p_const64 = Tensor(p_const32.data.astype(np.float64))
    xi = np.maximum(xi_factor * np.sqrt((x64 ** 2).reshape(n, -1).sum(axis=1)), 1e-9)
    xi_full = np.broadcast_to(xi[:, None, None, None], xb.shape).astype(np.float64).copy()

    d = _unit_or_random(rng.standard_normal(size=xb.shape), rng)
    prev = {k: p.requires_grad for k, p in model.params.items()}
    model.set_param_grad(False)  # probes only need the input-direction gradient
    try:
        for _ in range(iterations):
            with Tape():
                dt = Tensor(d, requires_grad=True, dtype=np.float64)
                probe = Tensor(x64) + dt * Tensor(xi_full)
                probe_logits = model.forward(probe, train=True, update_stats=False)
                kl_probe = nn.kl_divergence(p_const64, nn.softmax(probe_logits))
            backward(kl_probe)
            d = _unit_or_random(dt.grad, rng)
    finally:
        for k, p in model.params.items():
            p.requires_grad = prev[k]

    r_adv = np.float32(epsilon) * d.astype(np.float32)
    adv_logits = model.forward(Tensor(xb + r_adv), train=True, update_stats=False)
    q_adv = nn.softmax(adv_logits)
    kl = nn.kl_divergence(p_const32, q_adv)
    return ce + scale(kl, kl_weight)


def _unit_or_random(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Normalize each image's direction to unit l2, resampling degenerate rows."""
    n = d.shape[0]
    flat = d.reshape(n, -1)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    bad = norms <= 1e-12
    while np.any(bad):
        fresh = rng.standard_normal(size=(int(bad.sum()), flat.shape[1]))
        flat[bad] = fresh
        norms = np.sqrt((flat ** 2).sum(axis=1))
        bad = norms <= 1e-12
    return (flat / norms[:, None]).reshape(d.shape)


def pgd_adversarial_loss(model: Model, xb: np.ndarray, yb: np.ndarray,
                         epsilon: float, step_size: float, iterations: int,
                         rng: np.random.Generator | None = None,
                         random_start: bool = False,
                         pixel_domain: tuple[float, float] = (0.0, 255.0)) -> Tensor:
    """Cross-entropy on iterated sign-step adversaries of the current model."""
    if epsilon == 0.0:
        return loss_plain(model, xb, yb)
    cfg = AttackConfig(epsilon=epsilon, step_size=step_size, iterations=iterations,
                       pixel_domain=pixel_domain)
    x = xb.copy()
    if random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        x = np.clip(x + rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32),
                    pixel_domain[0], pixel_domain[1])
    for _ in range(iterations):
        x = ensemble_step([model], x, xb, yb, cfg)
    logits = model.forward(Tensor(x), train=True)
    return nn.cross_entropy_loss(logits, yb)


def batch_loss(model: Model, xb: np.ndarray, yb: np.ndarray, defense: DefenseVariant,
               pool: np.ndarray, rng: np.random.Generator) -> Tensor:
    if defense.kind == "none":
        return loss_plain(model, xb, yb)
    if defense.kind == "fixed_alpha":
        return loss_fixed_alpha(model, xb, yb, defense.alpha, pool, rng)
    if defense.kind in ("fixed_alpha_kl", "beta_alpha_kl"):
        return loss_alpha_kl(model, xb, yb, defense.mix_config(), pool, rng)
    if defense.kind == "vat":
        return vat_loss(model, xb, yb, defense.epsilon, defense.iterations,
                        defense.kl_weight, rng)
    if defense.kind == "pgd":
        return pgd_adversarial_loss(model, xb, yb, defense.epsilon,
                                    defense.step_size, defense.iterations, rng)
    raise ValueError(f"unhandled defense {defense.kind!r}")


# --------------------------------------------------------------------------
# optimizer and loop
# --------------------------------------------------------------------------

class SGD:
    """Momentum SGD with decoupled-from-nothing classic weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float,
                 weight_decay: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            v = self.velocity[name]
            v *= np.float32(self.momentum)
            v += g
            p.data -= np.float32(self.lr) * v
            p.grad = None


def _cosine_lr(base: float, epoch: int, total: int) -> float:
    return base * 0.5 * (1.0 + np.cos(np.pi * epoch / total))


def _snapshot(model: Model) -> dict:
    return {"params": {k: p.data.copy() for k, p in model.params.items()},
            "buffers": {k: b.copy() for k, b in model.buffers.items()}}


def _restore(model: Model, snap: dict) -> None:
    for k, arr in snap["params"].items():
        model.params[k].data = arr.copy()
    for k, arr in snap["buffers"].items():
        model.buffers[k] = arr.copy()


def compute_input_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(images.std(axis=(0, 2, 3), dtype=np.float64), 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def train(model: Model, train_ds: LabeledDataset, val_ds: LabeledDataset,
          cfg: TrainConfig, train_acc_cap: int = 2048) -> TrainReport:
    """Seeded training loop; leaves the best-validation weights in the model."""
    mean, std = compute_input_stats(train_ds.images)
    model.set_input_stats(mean, std)
    model.calibrate_stats(train_ds.images)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    report = TrainReport()
    pool = train_ds.images
    n = len(train_ds)
    best = _snapshot(model)
    last_good = _snapshot(model)

    for epoch in range(cfg.epochs):
        if cfg.schedule == "cosine":
            opt.lr = _cosine_lr(cfg.lr, epoch, cfg.epochs)
        start = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = pool[idx]
            yb = train_ds.labels[idx]
            with Tape():
                loss = batch_loss(model, xb, yb, cfg.defense, pool, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, last_good)
            backward(loss)
            opt.step()
            losses.append(value)
        seconds = time.perf_counter() - start

        cap = min(train_acc_cap, n)
        train_acc = accuracy(model, train_ds.images[:cap], train_ds.labels[:cap])
        val_acc = accuracy(model, val_ds.images, val_ds.labels)
        report.epoch_seconds.append(seconds)
        report.records.append({
            "epoch": epoch,
            "train_acc": train_acc,
            "val_acc": val_acc,
            "train_loss": float(np.mean(losses)),
            "median_epoch_seconds": float(np.median(report.epoch_seconds)),
        })
        last_good = _snapshot(model)
        if val_acc > report.best_val_acc:
            report.best_val_acc = val_acc
            report.best_epoch = epoch
            best = last_good

    _restore(model, best)
    return report
