"""Small VGG-style and ResNet-style classifiers with bit-exact persistence.

minivgg: three conv->batch-norm->relu->maxpool blocks, global average
pooling, one dense head. miniresnet: a conv stem plus three residual stages
of two blocks each (stride-2 entry with 1x1 projection from stage two on),
same pooled head. Both standardize raw [0, 255] pixels per channel before
the first convolution, so input gradients live in pixel space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .serialize import (BadMagicError, ContainerError, TruncatedPayloadError,
                        VersionMismatchError, read_container, write_container)
from .tensor import ShapeError, Tensor

__all__ = [
    "ModelSpec", "Model", "build_model", "predict", "accuracy",
    "save_checkpoint", "load_checkpoint",
    "BadMagicError", "VersionMismatchError", "TruncatedPayloadError", "ContainerError",
]

ARCHITECTURES = ("minivgg", "miniresnet")


@dataclass
class ModelSpec:
    arch: str = "minivgg"
    widths: tuple[int, int, int] = (8, 16, 32)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 28, 28)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ShapeError(f"unknown architecture {self.arch!r}")
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ShapeError(f"widths must be three positive ints, got {self.widths}")
        if self.num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ShapeError(f"input_shape must be positive C,H,W, got {self.input_shape}")
        # compose layer output shapes; any non-positive extent is a graph error
        c, h, w = self.input_shape
        if self.arch == "minivgg":
            for i, width in enumerate(self.widths):
                # conv 3x3 s1 p1 preserves extent
                h2, w2 = h // 2, w // 2
                if h2 < 1 or w2 < 1:
                    raise ShapeError(f"block {i}: pooling {h}x{w} gives empty output")
                c, h, w = width, h2, w2
        else:
            for _ in range(2):  # stage 1 and 2 downsample by stride-2 convs
                h = (h - 1) // 2 + 1
                w = (w - 1) // 2 + 1
            if h < 1 or w < 1:
                raise ShapeError(f"input {self.input_shape} too small for miniresnet stages")

    def to_dict(self) -> dict:
        return {"arch": self.arch, "widths": list(self.widths),
                "num_classes": self.num_classes, "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(arch=d["arch"], widths=tuple(d["widths"]),
                   num_classes=int(d["num_classes"]), input_shape=tuple(d["input_shape"]))


class Model:
    """Parameter store plus forward graph for one ModelSpec."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor],
                 buffers: dict[str, np.ndarray], model_id: str = ""):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.model_id = model_id
        self.meta: dict = {}
        self.forward_calls = 0
        self.bn_momentum = nn.BN_MOMENTUM

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_input_stats(self, mean, std) -> None:
        c = self.spec.input_shape[0]
        self.buffers["norm_mean"] = np.asarray(mean, dtype=np.float32).reshape(c).copy()
        self.buffers["norm_std"] = np.asarray(std, dtype=np.float32).reshape(c).copy()

    def set_param_grad(self, enabled: bool) -> None:
        for p in self.params.values():
            p.requires_grad = enabled

    def _bn(self, x: Tensor, name: str, train: bool, update_stats: bool) -> Tensor:
        return nn.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             self.buffers[f"{name}.running_mean"],
                             self.buffers[f"{name}.running_var"], train=train,
                             momentum=self.bn_momentum, update_stats=update_stats)

    def calibrate_stats(self, images: np.ndarray, batch_size: int = 256) -> None:
        """Seed BN running statistics from one forward over sample images."""
        from .tensor import suspend_tape

        prev = self.bn_momentum
        self.bn_momentum = 0.0  # running stats := this batch's statistics
        try:
            with suspend_tape():
                self.forward(Tensor(images[:batch_size]), train=True)
        finally:
            self.bn_momentum = prev

    def forward(self, x: Tensor, train: bool = False, update_stats: bool = True) -> Tensor:
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"input {x.shape} does not match model input {self.spec.input_shape}")
        self.forward_calls += 1
        h = nn.channel_standardize(x, self.buffers["norm_mean"], self.buffers["norm_std"])
        if self.spec.arch == "minivgg":
            h = self._forward_minivgg(h, train, update_stats)
        else:
            h = self._forward_miniresnet(h, train, update_stats)
        h = nn.global_avg_pool(h)
        return nn.dense(h, self.params["head.weight"], self.params["head.bias"])

    def _forward_minivgg(self, h: Tensor, train: bool, update_stats: bool) -> Tensor:
        for i in range(3):
            h = nn.conv2d(h, self.params[f"block{i}.conv"], stride=1, padding=1)
            h = self._bn(h, f"block{i}.bn", train, update_stats)
            h = nn.relu(h)
            h = nn.max_pool2d(h)
        return h

    def _forward_miniresnet(self, h: Tensor, train: bool, update_stats: bool) -> Tensor:
        h = nn.conv2d(h, self.params["stem.conv"], stride=1, padding=1)
        h = nn.relu(self._bn(h, "stem.bn", train, update_stats))
        for s in range(3):
            for b in range(2):
                tag = f"stage{s}.block{b}"
                stride = 2 if (s > 0 and b == 0) else 1
                y = nn.conv2d(h, self.params[f"{tag}.conv1"], stride=stride, padding=1)
                y = nn.relu(self._bn(y, f"{tag}.bn1", train, update_stats))
                y = nn.conv2d(y, self.params[f"{tag}.conv2"], stride=1, padding=1)
                y = self._bn(y, f"{tag}.bn2", train, update_stats)
                if stride != 1:
                    skip = nn.conv2d(h, self.params[f"stage{s}.proj"], stride=2, padding=0)
                    skip = self._bn(skip, f"stage{s}.projbn", train, update_stats)
                else:
                    skip = h
                h = nn.relu(y + skip)
        return h


def _he_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_c * k * k))
    return rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(np.float32)


def _init_bn(params, buffers, name: str, c: int) -> None:
    params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
    buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
    buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)


def build_model(spec: ModelSpec, seed: int, model_id: str = "") -> Model:
    """Deterministic He-style initialization from the seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    c_in = spec.input_shape[0]

    if spec.arch == "minivgg":
        prev = c_in
        for i, width in enumerate(spec.widths):
            params[f"block{i}.conv"] = Tensor(_he_conv(rng, width, prev, 3), requires_grad=True)
            _init_bn(params, buffers, f"block{i}.bn", width)
            prev = width
        head_in = spec.widths[-1]
    else:
        w0 = spec.widths[0]
        params["stem.conv"] = Tensor(_he_conv(rng, w0, c_in, 3), requires_grad=True)
        _init_bn(params, buffers, "stem.bn", w0)
        prev = w0
        for s, width in enumerate(spec.widths):
            for b in range(2):
                tag = f"stage{s}.block{b}"
                cin = prev if b == 0 else width
                params[f"{tag}.conv1"] = Tensor(_he_conv(rng, width, cin, 3), requires_grad=True)
                _init_bn(params, buffers, f"{tag}.bn1", width)
                params[f"{tag}.conv2"] = Tensor(_he_conv(rng, width, width, 3), requires_grad=True)
                _init_bn(params, buffers, f"{tag}.bn2", width)
            if s > 0:
                params[f"stage{s}.proj"] = Tensor(_he_conv(rng, width, prev, 1), requires_grad=True)
                _init_bn(params, buffers, f"stage{s}.projbn", width)
            prev = width
        head_in = spec.widths[-1]

    std = np.sqrt(2.0 / head_in)
    params["head.weight"] = Tensor(
        rng.normal(0.0, std, size=(spec.num_classes, head_in)).astype(np.float32),
        requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(spec.num_classes, dtype=np.float32),
                                 requires_grad=True)
    buffers["norm_mean"] = np.zeros(c_in, dtype=np.float32)
    buffers["norm_std"] = np.full(c_in, 255.0, dtype=np.float32)
    return Model(spec, params, buffers, model_id=model_id)


def predict(model: Model, x) -> tuple[Tensor, np.ndarray]:
    """Eval-mode logits and softmax probabilities for a batch."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    logits = model.forward(xt, train=False)
    probs = nn._softmax_array(logits.data)
    return logits, probs


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 512) -> float:
    """Fraction of argmax-correct eval-mode predictions; ties to lowest index."""
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    correct = 0
    for lo in range(0, n, batch_size):
        _, probs = predict(model, images[lo:lo + batch_size])
        correct += int((probs.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return correct / n


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    names = {"params": [], "buffers": []}
    for name, p in model.params.items():
        tensors[f"param/{name}"] = p.data
        names["params"].append(name)
    for name, b in model.buffers.items():
        tensors[f"buffer/{name}"] = b
        names["buffers"].append(name)
    header = {
        "spec": model.spec.to_dict(),
        "meta": dict(meta or model.meta),
        "model_id": model.model_id,
        "names": names,
    }
    write_container(path, "checkpoint", header, tensors)


def load_checkpoint(path) -> Model:
    header, tensors = read_container(path, kind="checkpoint")
    spec = ModelSpec.from_dict(header["spec"])
    model = build_model(spec, seed=0, model_id=header.get("model_id", ""))
    model.meta = header.get("meta", {})
    for name in header["names"]["params"]:
        arr = tensors[f"param/{name}"]
        if model.params[name].data.shape != arr.shape:
            raise ContainerError(f"{path}: parameter {name} has shape {arr.shape}")
        model.params[name].data = arr.astype(np.float32, copy=True)
    for name in header["names"]["buffers"]:
        model.buffers[name] = tensors[f"buffer/{name}"].astype(np.float32, copy=True)
    return model
