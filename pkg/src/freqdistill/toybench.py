"""Procedural segmentation scenes and the encoder-decoder networks trained on them."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .diffcore import (
    SGD, Conv2d, Module, Tensor, add, cross_entropy, leaky_relu, no_grad, resize_nearest,
)
from .diffcore.tensor import DimensionError, NonFiniteError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or otherwise diverged."""


# -- data ---------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSample:
    image: np.ndarray  # 3×H×W in [0, 1]
    label: np.ndarray  # H×W int64
    seed: int


@dataclass
class SceneSet:
    """A stacked split: images N×3×H×W, labels N×H×W."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_samples(cls, samples: list[SceneSample], num_classes: int) -> "SceneSet":
        if not samples:
            return cls(np.zeros((0, 3, 0, 0)), np.zeros((0, 0, 0), dtype=np.int64), num_classes)
        return cls(np.stack([s.image for s in samples]), np.stack([s.label for s in samples]), num_classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield ``(indices, images, labels)``; shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield idx, self.images[idx], self.labels[idx]


def _texture(kind: int, period: int, yy: np.ndarray, xx: np.ndarray, orient: int) -> np.ndarray:
    if kind == 0:  # stripes
        coord = xx if orient == 0 else yy
        return ((coord // period) % 2).astype(np.float64)
    if kind == 1:  # checkerboard
        return (((xx // period) + (yy // period)) % 2).astype(np.float64)
    return 0.5 + 0.5 * np.cos(np.pi * (xx + yy) / period)  # diagonal waves


def _shape_mask(kind: int, yy, xx, cy, cx, r) -> np.ndarray:
    if kind == 0:  # axis-aligned rectangle
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.7 * r)
    if kind == 1:  # disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return np.abs(yy - cy) + np.abs(xx - cx) <= 1.2 * r  # diamond


def render_scene(seed: int, h: int, w: int, k: int) -> SceneSample:
    """Smooth colour gradient background plus textured shapes and pixel noise.

    Shape class ``c >= 1`` fixes both outline and texture, so the high
    frequencies carry class evidence while colours are random.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c0 = rng.uniform(0.2, 0.8, size=3)
    gy, gx = rng.uniform(-0.4, 0.4, size=(2, 3))
    img = c0[:, None, None] + gy[:, None, None] * (yy / h - 0.5) + gx[:, None, None] * (xx / w - 0.5)
    label = np.zeros((h, w), dtype=np.int64)
    n_shapes = int(rng.integers(1, 4))
    scale = min(h, w)
    for _ in range(n_shapes):
        cls = int(rng.integers(1, k))
        kind = (cls - 1) % 3
        period = 2 + (cls - 1) // 3 + (1 if kind == 2 else 0)
        r = rng.uniform(0.12, 0.24) * scale
        cy, cx = rng.uniform(r * 0.5, h - r * 0.5), rng.uniform(r * 0.5, w - r * 0.5)
        m = _shape_mask(kind, yy, xx, cy, cx, r)
        colour = rng.uniform(0.1, 0.9, size=3)
        tex = _texture(kind, period, yy, xx, int(rng.integers(0, 2)))
        fill = colour[:, None, None] * (0.55 + 0.45 * tex)[None]
        img = np.where(m[None], fill, img)
        label[m] = cls
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return SceneSample(np.clip(img, 0.0, 1.0), label, seed)


def generate(seed: int, count: int, h: int = 64, w: int = 64, k: int = 4, level: int = 3) -> list[SceneSample]:
    """``count`` scenes; sample ``i`` uses a seed derived from ``(seed, i)``."""
    step = 1 << level
    if h <= 0 or w <= 0 or h % step or w % step:
        raise DimensionError(f"H, W must be positive multiples of {step}, got {h}×{w}")
    if k < 2:
        raise DimensionError("need at least two classes")
    if count < 0:
        raise DimensionError("count must be >= 0")
    children = np.random.SeedSequence(seed).spawn(count)
    return [render_scene(int(c.generate_state(1)[0]), h, w, k) for c in children]


def make_split(seed: int, count: int, h: int, w: int, k: int, level: int = 3) -> SceneSet:
    return SceneSet.from_samples(generate(seed, count, h, w, k, level), k)


# -- network ------------------------------------------------------------------

def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


class SegNet(Module):
    """Three-scale encoder-decoder with two tap points.

    ``feature`` is the decoder output at half resolution (the distillation
    tap); ``deep`` is the bottleneck at quarter resolution, one stage deeper.
    """

    def __init__(self, rng: np.random.Generator, width: int, num_classes: int, in_channels: int = 3):
        self.width = width
        self.num_classes = num_classes
        self.enc1 = Conv2d(rng, in_channels, width, 3)
        self.enc2 = Conv2d(rng, width, width, 3)
        self.enc3 = Conv2d(rng, width, width, 3)
        self.dec = Conv2d(rng, width, width, 3)
        self.head = Conv2d(rng, width, num_classes, 3)

    def forward(self, x, tap_hook: Callable[[Tensor], Tensor] | None = None) -> tuple[Tensor, dict[str, Tensor]]:
        """Return ``(logits, taps)``; ``tap_hook`` may replace the decoder feature."""
        e1 = leaky_relu(self.enc1(x))
        e2 = leaky_relu(self.enc2(avg_pool2(e1)))
        e3 = leaky_relu(self.enc3(avg_pool2(e2)))
        h2 = e2.shape[-2:]
        feat = leaky_relu(self.dec(add(resize_nearest(e3, h2), e2)))
        taps = {"feature": feat, "deep": e3}
        if tap_hook is not None:
            feat = tap_hook(feat)
        logits = self.head(add(resize_nearest(feat, e1.shape[-2:]), e1))
        return logits, taps


def predict(net: SegNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = net(Tensor(images[i:i + batch_size]))
            out.append(np.argmax(logits.data, axis=1))
    if not out:
        return np.zeros((0,) + images.shape[2:], dtype=np.int64)
    return np.concatenate(out)


def miou(pred: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Mean IoU over the classes present in ``truth``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.size and (pred.max() >= k or truth.max() >= k or pred.min() < 0 or truth.min() < 0):
        raise ValueError(f"class id outside [0, {k})")
    ious = []
    for c in range(k):
        t = truth == c
        if not t.any():
            continue
        p = pred == c
        ious.append(np.logical_and(p, t).sum() / np.logical_or(p, t).sum())
    return float(np.mean(ious)) if ious else 0.0


def evaluate(net: SegNet, data: SceneSet) -> float:
    return miou(predict(net, data.images), data.labels, data.num_classes)


SCHEDULES = ("constant", "cosine")


def train_segnet(net: SegNet, data: SceneSet, epochs: int, lr: float, seed: int,
                 batch_size: int = 16, momentum: float = 0.9, weight_decay: float = 1e-4,
                 val: SceneSet | None = None,
                 extra_loss: Callable[[np.ndarray, dict[str, Tensor]], Tensor] | None = None,
                 extra_weight: float = 1.0, extra_params: list[Tensor] | None = None,
                 clip_norm: float | None = None, schedule: str = "constant") -> list[dict]:
    """Cross-entropy training; returns one metrics dict per epoch.

    ``extra_loss(indices, taps)`` adds ``extra_weight`` times an auxiliary
    term; ``extra_params`` are optimized alongside the network.
    ``schedule="cosine"`` decays the step size per batch towards zero.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}")
    params = net.parameters() + list(extra_params or [])
    opt = SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay, clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    steps_per_epoch = -(-len(data) // batch_size)
    total_steps = max(epochs * steps_per_epoch, 1)
    step = 0
    history = []
    for epoch in range(epochs):
        sums, count = np.zeros(2), 0
        for idx, xb, yb in data.batches(batch_size, rng):
            if schedule == "cosine":
                opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            try:
                logits, taps = net(Tensor(xb))
                task = cross_entropy(logits, yb)
                loss = task
                aux = 0.0
                if extra_loss is not None:
                    term = extra_loss(idx, taps)
                    aux = term.item()
                    loss = add(task, term * extra_weight)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            opt.step()
            sums += np.array([task.item(), aux]) * len(xb)
            count += len(xb)
        task_mean, aux_mean = sums / max(count, 1)
        row = {"epoch": epoch + 1, "task_loss": float(task_mean)}
        if extra_loss is not None:
            row["distill_loss"] = float(aux_mean)
        if val is not None:
            row["mIoU"] = evaluate(net, val)
        log.info("segnet epoch %d: %s", epoch + 1, row)
        history.append(row)
    return history


def train_teacher(data: SceneSet, epochs: int, lr: float, width: int = 32, seed: int = 0,
                  val: SceneSet | None = None, batch_size: int = 16,
                  clip_norm: float | None = None, schedule: str = "constant") -> tuple[SegNet, list[dict]]:
    net = SegNet(np.random.default_rng(seed), width, data.num_classes)
    history = train_segnet(net, data, epochs, lr, seed + 1, batch_size=batch_size, val=val,
                           clip_norm=clip_norm, schedule=schedule)
    return net, history
