"""Single-step and multi-step adversary crafting.

The multi-step attack aligns an ensemble: each member's input gradient is
l2-normalized to unit length, the unit gradients are summed to a common
direction, and the image steps by the sign of that sum under pixel-wise
clipping to both the l-infinity ball and the pixel domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .models import Model
from .serialize import read_container, write_container
from .tensor import GradientError, Tape, Tensor, backward

DEGENERATE_NORM = 1e-12


@dataclass
class AttackConfig:
    epsilon: float = 16.0
    step_size: float = 1.0
    iterations: int | None = None  # None: derived from epsilon
    pixel_domain: tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        lo, hi = self.pixel_domain
        if self.epsilon <= 0 or self.step_size <= 0 or lo >= hi:
            raise ValueError(f"invalid attack config {self}")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def resolved_iterations(self) -> int:
        return self.iterations if self.iterations is not None else iteration_count(self.epsilon)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "step_size": self.step_size,
                "iterations": self.resolved_iterations(),
                "pixel_domain": list(self.pixel_domain)}


def iteration_count(epsilon: float) -> int:
    """Step budget min(eps + 4, 1.25 * eps), rounded half-up, at least one."""
    if epsilon < 1:
        raise ValueError(f"epsilon must be >= 1 for the step schedule, got {epsilon}")
    return max(1, int(np.floor(min(epsilon + 4.0, 1.25 * epsilon) + 0.5)))


def normalize_gradient(g: np.ndarray) -> np.ndarray:
    """Scale a whole gradient tensor to unit l2 length."""
    norm = float(np.sqrt(np.sum(np.asarray(g, dtype=np.float64) ** 2)))
    if norm <= DEGENERATE_NORM:
        raise GradientError("degenerate gradient: l2 norm is (near) zero")
    return (g / np.asarray(norm, dtype=g.dtype)).astype(g.dtype)


def input_gradients(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-image gradient of the cross-entropy at x, eval mode, pixel units.

    Parameter gradients are switched off for the pass; the summed (not
    averaged) batch loss keeps per-image rows independent and exact.
    """
    prev = {k: p.requires_grad for k, p in model.params.items()}
    model.set_param_grad(False)
    try:
        with Tape():
            xt = Tensor(np.ascontiguousarray(x, dtype=np.float32), requires_grad=True)
            loss = nn.cross_entropy_loss(model.forward(xt, train=False), y, reduction="sum")
        backward(loss)
        g = xt.grad
    finally:
        for k, p in model.params.items():
            p.requires_grad = prev[k]
    if not np.all(np.isfinite(g)):
        raise GradientError("non-finite input gradient")
    return g


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float,
         pixel_domain: tuple[float, float] = (0.0, 255.0)) -> np.ndarray:
    """Single-step sign attack: clip(x + eps * sign(grad_x loss))."""
    x = np.asarray(x, dtype=np.float32)
    g = input_gradients(model, x, y)
    adv = x + np.float32(epsilon) * np.sign(g)
    return np.clip(adv, pixel_domain[0], pixel_domain[1])


def _unit_rows(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each image's gradient to unit l2; flag degenerate rows."""
    n = g.shape[0]
    flat = g.reshape(n, -1).astype(np.float64)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    ok = norms > DEGENERATE_NORM
    safe = np.where(ok, norms, 1.0)
    unit = (flat / safe[:, None]).reshape(g.shape)
    unit[~ok] = 0.0
    return unit, ok


def ensemble_step(models: list[Model], x_prev: np.ndarray, x_orig: np.ndarray,
                  y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """One aligned step: sign of the summed unit gradients, then clipping.

    A member whose gradient for an image is degenerate is skipped for that
    image; an image all members are degenerate on raises.
    """
    if not models:
        raise ValueError("ensemble must contain at least one model")
    total = np.zeros(x_prev.shape, dtype=np.float64)
    any_ok = np.zeros(x_prev.shape[0], dtype=bool)
    for m in models:
        unit, ok = _unit_rows(input_gradients(m, x_prev, y))
        total += unit
        any_ok |= ok
    if not np.all(any_ok):
        raise GradientError(
            f"all ensemble gradients degenerate for {int((~any_ok).sum())} image(s)")
    x_next = x_prev + np.float32(cfg.step_size) * np.sign(total).astype(np.float32)
    eps = np.float32(cfg.epsilon)
    x_next = np.clip(x_next, x_orig - eps, x_orig + eps)
    return np.clip(x_next, cfg.pixel_domain[0], cfg.pixel_domain[1])


def craft_adversaries(models: list[Model], images: np.ndarray, labels: np.ndarray,
                      cfg: AttackConfig, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Run the iterated ensemble attack from x0 = x for the scheduled step count.

    Returns all candidates plus their per-image l-infinity distances.
    """
    steps = cfg.resolved_iterations()
    images = np.ascontiguousarray(images, dtype=np.float32)
    out = np.empty_like(images)
    for lo in range(0, len(images), batch_size):
        x_orig = images[lo:lo + batch_size]
        y = labels[lo:lo + batch_size]
        x = x_orig.copy()
        for _ in range(steps):
            x = ensemble_step(models, x, x_orig, y, cfg)
        out[lo:lo + batch_size] = x
    dist = np.abs(out - images).reshape(len(images), -1).max(axis=1)
    return out, dist


@dataclass
class AdversarialSet:
    """Candidates that fooled every crafting model, with their originals."""
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    ensemble_ids: list[str]
    linf: np.ndarray
    config: AttackConfig = field(default_factory=AttackConfig)

    def __len__(self) -> int:
        return len(self.labels)


def extract_adversarial_set(models: list[Model], originals: np.ndarray,
                            candidates: np.ndarray, labels: np.ndarray,
                            cfg: AttackConfig,
                            ensemble_ids: list[str] | None = None) -> AdversarialSet:
    """Keep candidates misclassified by every crafting model.

    Members need not agree on the same wrong class. An empty result is a
    valid (empty) set, not an error.
    """
    from .models import predict

    keep = np.ones(len(labels), dtype=bool)
    for m in models:
        wrong = np.zeros(len(labels), dtype=bool)
        for lo in range(0, len(labels), 512):
            _, probs = predict(m, candidates[lo:lo + 512])
            wrong[lo:lo + 512] = probs.argmax(axis=1) != labels[lo:lo + 512]
        keep &= wrong
    ids = ensemble_ids if ensemble_ids is not None else \
        [m.model_id or f"model{i}" for i, m in enumerate(models)]
    dist = np.abs(candidates - originals).reshape(len(labels), -1).max(axis=1)
    return AdversarialSet(
        originals=originals[keep].copy(), adversarials=candidates[keep].copy(),
        labels=labels[keep].copy(), ensemble_ids=list(ids),
        linf=dist[keep].astype(np.float32), config=cfg)


def save_adversarial_set(aset: AdversarialSet, manifest_path) -> None:
    """Persist as a JSON manifest plus a tensor payload file beside it."""
    import json
    from pathlib import Path

    manifest_path = Path(manifest_path)
    payload_path = manifest_path.with_suffix(".advt")
    manifest = {
        "config": aset.config.to_dict(),
        "ensemble_ids": aset.ensemble_ids,
        "size": len(aset),
        "linf": [float(v) for v in aset.linf],
        "payload": payload_path.name,
    }
    tensors = {
        "originals": aset.originals.astype(np.float32),
        "adversarials": aset.adversarials.astype(np.float32),
        "labels": aset.labels.astype(np.int64),
    }
    write_container(payload_path, "adversarial_set", {"manifest": manifest_path.name}, tensors)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_adversarial_set(manifest_path) -> AdversarialSet:
    import json
    from pathlib import Path

    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    _, tensors = read_container(manifest_path.parent / manifest["payload"],
                                kind="adversarial_set")
    c = manifest["config"]
    cfg = AttackConfig(epsilon=c["epsilon"], step_size=c["step_size"],
                       iterations=c["iterations"],
                       pixel_domain=tuple(c["pixel_domain"]))
    return AdversarialSet(
        originals=tensors["originals"], adversarials=tensors["adversarials"],
        labels=tensors["labels"], ensemble_ids=list(manifest["ensemble_ids"]),
        linf=np.asarray(manifest["linf"], dtype=np.float32), config=cfg)
