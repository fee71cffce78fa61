"""Transfer evaluation, two-direction loss-landscape scans, loss-vs-eps curves.

The landscape scan displaces one image along two frozen signed-gradient
directions, x* = x + eps1 * sign(g1) + eps2 * sign(g2), and maps the subject
model's loss over the (eps1, eps2) grid. Sign directions are integer-valued,
so displacements are exact and the scan is symmetric under swapping the two
axes together with their directions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attacks import AdversarialSet, input_gradients
from .models import Model, accuracy
from .tensor import GradientError, Tensor


class ProtocolError(RuntimeError):
    """Evaluation protocol violated (e.g. holdout model inside the ensemble)."""


@dataclass
class LandscapeGrid:
    eps1: np.ndarray
    eps2: np.ndarray
    loss: np.ndarray  # (len(eps1), len(eps2))
    subject_id: str = ""
    surrogate_id: str = ""


def evaluate_transfer(holdout: Model, holdout_id: str, aset: AdversarialSet) -> dict:
    """Accuracy of a non-crafting model on a set's originals and adversaries."""
    if holdout_id in aset.ensemble_ids:
        raise ProtocolError(
            f"holdout {holdout_id!r} was part of the crafting ensemble {aset.ensemble_ids}")
    entry = {
        "holdout_id": holdout_id,
        "ensemble_ids": list(aset.ensemble_ids),
        "epsilon": aset.config.epsilon,
        "set_size": len(aset),
    }
    if len(aset) == 0:
        entry["empty_set"] = True
        return entry
    entry["true_acc"] = accuracy(holdout, aset.originals, aset.labels)
    entry["adv_acc"] = accuracy(holdout, aset.adversarials, aset.labels)
    return entry


def _signed_direction(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    g = input_gradients(model, x, y)
    s = np.sign(g).astype(np.float32)
    if not np.any(s):
        raise GradientError("degenerate direction: gradient sign is zero everywhere")
    return s


def _batched_losses(model: Model, images: np.ndarray, labels: np.ndarray,
                    batch_size: int = 512) -> np.ndarray:
    """Per-image eval-mode cross-entropy, no tape."""
    out = np.empty(len(images), dtype=np.float64)
    for lo in range(0, len(images), batch_size):
        logits = model.forward(Tensor(images[lo:lo + batch_size]), train=False)
        z = logits.data
        shifted = z - z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(len(z))
        out[lo:lo + batch_size] = logsumexp - shifted[rows, labels[lo:lo + batch_size]]
    return out


def landscape_from_directions(model: Model, x: np.ndarray, y: int,
                              d1: np.ndarray, d2: np.ndarray,
                              eps1: np.ndarray, eps2: np.ndarray,
                              pixel_domain: tuple[float, float] = (0.0, 255.0)) -> np.ndarray:
    """Loss surface over displacements along two fixed directions."""
    n1, n2 = len(eps1), len(eps2)
    e1 = np.asarray(eps1, dtype=np.float64)[:, None, None, None, None]
    e2 = np.asarray(eps2, dtype=np.float64)[None, :, None, None, None]
    disp = e1 * d1.astype(np.float64)[None, None] + e2 * d2.astype(np.float64)[None, None]
    pts = np.clip(x.astype(np.float64)[None, None] + disp,
                  pixel_domain[0], pixel_domain[1]).astype(np.float32)
    pts = pts.reshape(n1 * n2, *x.shape)
    labels = np.full(n1 * n2, y, dtype=np.int64)
    losses = _batched_losses(model, pts, labels)
    return losses.reshape(n1, n2)


def landscape_grid(subject: Model, surrogate: Model, x: np.ndarray, y: int,
                   eps1_range: tuple[float, float] = (-16.0, 16.0),
                   eps2_range: tuple[float, float] = (-8.0, 32.0),
                   step: float = 1.0,
                   pixel_domain: tuple[float, float] = (0.0, 255.0)) -> LandscapeGrid:
    """Scan the subject's loss around x.

    Axis 1 follows the surrogate model's signed gradient, axis 2 the
    subject's own. Both directions are computed once at the clean image.
    """
    xb = x[None] if x.ndim == 3 else x
    yb = np.array([y], dtype=np.int64)
    d1 = _signed_direction(surrogate, xb, yb)[0]
    d2 = _signed_direction(subject, xb, yb)[0]
    eps1 = np.arange(eps1_range[0], eps1_range[1] + step / 2, step)
    eps2 = np.arange(eps2_range[0], eps2_range[1] + step / 2, step)
    loss = landscape_from_directions(subject, xb[0], y, d1, d2, eps1, eps2, pixel_domain)
    return LandscapeGrid(eps1=eps1, eps2=eps2, loss=loss,
                         subject_id=subject.model_id, surrogate_id=surrogate.model_id)


def loss_curve(model: Model, images: np.ndarray, labels: np.ndarray,
               eps_values: np.ndarray,
               pixel_domain: tuple[float, float] = (0.0, 255.0)) -> dict:
    """Mean/max loss and fooling rate along each image's own sign direction."""
    if len(images) < 1:
        raise ValueError("need at least one image")
    directions = _signed_direction(model, images, labels)
    rows = []
    for eps in np.asarray(eps_values, dtype=np.float64):
        pts = np.clip(images.astype(np.float64) + eps * directions.astype(np.float64),
                      pixel_domain[0], pixel_domain[1]).astype(np.float32)
        losses = _batched_losses(model, pts, labels)
        fooled = 0
        for lo in range(0, len(images), 512):
            logits = model.forward(Tensor(pts[lo:lo + 512]), train=False)
            fooled += int((logits.data.argmax(axis=1) != labels[lo:lo + 512]).sum())
        rows.append({"eps": float(eps), "mean_loss": float(losses.mean()),
                     "max_loss": float(losses.max()),
                     "fool_rate": fooled / len(images)})
    return {"model_id": model.model_id, "rows": rows}


def most_fooling_eps(curve: dict) -> float:
    """Smallest eps attaining the maximum fooling rate."""
    rows = curve["rows"]
    best = max(r["fool_rate"] for r in rows)
    for r in rows:
        if r["fool_rate"] == best:
            return r["eps"]
    raise ValueError("empty curve")


def flatness_metrics(grid: LandscapeGrid, tau: float) -> dict:
    """Mean/max loss over the grid plus the fraction of cells above tau."""
    if grid.loss.size == 0:
        raise ValueError("empty grid")
    return {
        "mean_loss": float(grid.loss.mean()),
        "max_loss": float(grid.loss.max()),
        "frac_above_tau": float((grid.loss > tau).mean()),
        "tau": float(tau),
    }


# --------------------------------------------------------------------------
# report serialization
# --------------------------------------------------------------------------

def write_landscape_csv(grid: LandscapeGrid, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eps1", "eps2", "loss"])
        for i, e1 in enumerate(grid.eps1):
            for j, e2 in enumerate(grid.eps2):
                w.writerow([f"{e1:g}", f"{e2:g}", f"{grid.loss[i, j]:.6g}"])


def read_landscape_csv(path) -> LandscapeGrid:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    eps1 = sorted({float(r["eps1"]) for r in rows})
    eps2 = sorted({float(r["eps2"]) for r in rows})
    loss = np.empty((len(eps1), len(eps2)))
    pos1 = {v: i for i, v in enumerate(eps1)}
    pos2 = {v: j for j, v in enumerate(eps2)}
    for r in rows:
        loss[pos1[float(r["eps1"])], pos2[float(r["eps2"])]] = float(r["loss"])
    return LandscapeGrid(eps1=np.array(eps1), eps2=np.array(eps2), loss=loss)


def write_curve_csv(curve: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eps", "mean_loss", "max_loss", "fool_rate"])
        for r in curve["rows"]:
            w.writerow([f"{r['eps']:g}", f"{r['mean_loss']:.6g}",
                        f"{r['max_loss']:.6g}", f"{r['fool_rate']:.6g}"])


def write_eval_report(entries: list[dict], path) -> None:
    with open(path, "w") as f:
        json.dump({"entries": entries}, f, indent=2, sort_keys=True)


def read_eval_report(path) -> list[dict]:
    with open(path) as f:
        return json.load(f)["entries"]
