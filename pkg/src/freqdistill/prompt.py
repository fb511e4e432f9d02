"""Frequency prompts: learned per-band masks and their stage-one training.

A prompt holds one ``T × C`` matrix per band.  Multiplying it with the
band flattened to ``C × (Hb·Wb)`` gives ``T`` spatial logit maps; their
sigmoids, summed over the ``T`` principles, gate every channel of the band.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    SGD, Tensor, add, cross_entropy, div, getitem, matmul, maximum, mean, minimum,
    mul, no_grad, reshape, sigmoid, sum,
)
from .diffcore.tensor import DimensionError, NonFiniteError, as_tensor
from .freqxform import BandSet, StructureError, band_labels, get_transform, is_low_band
from .toybench import SceneSet, TrainingError

log = logging.getLogger(__name__)

JACCARD_EPS = 1e-8
BAND_SUBSETS = ("low", "high", "all")


def select_bands(labels, subset: str) -> list[str]:
    """Labels belonging to ``subset``: ``low`` is the LL band, ``high`` the rest."""
    if subset == "all":
        return list(labels)
    if subset == "low":
        return [lab for lab in labels if is_low_band(lab)]
    if subset == "high":
        return [lab for lab in labels if not is_low_band(lab)]
    raise ValueError(f"band subset must be one of {BAND_SUBSETS}, got {subset!r}")


@dataclass
class FrequencyPrompt:
    params: Tensor  # B × T × C
    labels: list[str]
    trained: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, labels, principles: int, channels: int, init_scale: float = 1e-2,
             seed: int = 0, **meta) -> "FrequencyPrompt":
        """Near-zero initialization; ``init_scale=0`` gives the exact zero prompt."""
        shape = (len(labels), principles, channels)
        data = np.zeros(shape) if init_scale == 0 else np.random.default_rng(seed).normal(0.0, init_scale, shape)
        return cls(Tensor(data, requires_grad=True, name="prompt"), list(labels), False, dict(meta))

    @property
    def bands(self) -> int:
        return self.params.shape[0]

    @property
    def principles(self) -> int:
        return self.params.shape[1]

    @property
    def channels(self) -> int:
        return self.params.shape[2]

    def for_band(self, label: str) -> Tensor:
        return getitem(self.params, self.labels.index(label))

    def frozen(self) -> "FrequencyPrompt":
        return FrequencyPrompt(self.params.detach(), list(self.labels), self.trained, dict(self.meta))


@dataclass
class MaskSet:
    """Per-band mask logits ``N × T × (Hb·Wb)`` and the band spatial extents."""

    logits: dict[str, Tensor]
    extents: dict[str, tuple[int, int]]

    @property
    def labels(self) -> list[str]:
        return list(self.logits)

    def soft(self, label: str) -> Tensor:
        return sigmoid(self.logits[label])

    def aggregate(self, label: str) -> Tensor:
        """Sum of the T soft masks as an ``N × 1 × Hb × Wb`` gate."""
        s = sum(self.soft(label), axis=1, keepdims=True)
        hb, wb = self.extents[label]
        return reshape(s, (s.shape[0], 1, hb, wb))

    def detach(self) -> "MaskSet":
        return MaskSet({k: v.detach() for k, v in self.logits.items()}, dict(self.extents))


def compute_masks(prompt_band, band) -> Tensor:
    """``P_b × R`` per sample: ``T × C`` times ``C × (Hb·Wb)``."""
    p, r = as_tensor(prompt_band), as_tensor(band)
    if p.ndim != 2 or r.ndim != 4:
        raise DimensionError("expected a T×C prompt and an N×C×Hb×Wb band")
    if p.shape[1] != r.shape[1]:
        raise DimensionError(f"prompt has {p.shape[1]} channels, band has {r.shape[1]}")
    n, c, hb, wb = r.shape
    return matmul(p, reshape(r, (n, c, hb * wb)))


def apply_masks(band, logits) -> Tensor:
    """``sum_i sigmoid(M_i) * R`` with the spatial mask shared across channels."""
    r, m = as_tensor(band), as_tensor(logits)
    n, c, hb, wb = r.shape
    if m.ndim != 3 or m.shape[0] != n or m.shape[2] != hb * wb:
        raise DimensionError(f"logits {m.shape} do not fit band {r.shape}")
    gate = reshape(sum(sigmoid(m), axis=1, keepdims=True), (n, 1, hb, wb))
    return mul(gate, r)


def band_masks(bands: BandSet, prompt: FrequencyPrompt, subset: str = "all") -> MaskSet:
    if prompt.bands != len(bands):
        raise StructureError(f"prompt covers {prompt.bands} bands, BandSet has {len(bands)}")
    logits, extents = {}, {}
    for lab in select_bands(bands.labels, subset):
        t = bands[lab]
        logits[lab] = compute_masks(prompt.for_band(lab), t)
        extents[lab] = t.shape[-2:]
    return MaskSet(logits, extents)


def masked_bands(bands: BandSet, prompt: FrequencyPrompt, subset: str = "all") -> tuple[BandSet, MaskSet]:
    """Mask the bands in ``subset``; the others pass through unchanged."""
    masks = band_masks(bands, prompt, subset)
    out = bands.map(lambda lab, t: apply_masks(t, masks.logits[lab]) if lab in masks.logits else t)
    return out, masks


def masked_reconstruct(bands: BandSet, prompt: FrequencyPrompt, inverse, subset: str = "all") -> Tensor:
    """Mask every prompted band, then synthesize back to the feature domain."""
    out, _ = masked_bands(bands, prompt, subset)
    return inverse(out)


def soft_jaccard(m, n, eps: float = JACCARD_EPS) -> Tensor:
    """``(sum min(m, n) + eps) / (sum max(m, n) + eps)`` over the last axis."""
    m, n = as_tensor(m), as_tensor(n)
    if m.shape[-1] != n.shape[-1]:
        raise DimensionError(f"mask lengths differ: {m.shape[-1]} vs {n.shape[-1]}")
    inter = add(sum(minimum(m, n), axis=-1), eps)
    union = add(sum(maximum(m, n), axis=-1), eps)
    return div(inter, union)


def pairwise_jaccard(soft: Tensor) -> Tensor:
    """All-pairs soft Jaccard of ``N × T × K`` masks, shape ``N × T × T``."""
    n, t, k = soft.shape
    a = reshape(soft, (n, t, 1, k))
    b = reshape(soft, (n, 1, t, k))
    return soft_jaccard(a, b)


def dissimilarity_loss(masks: MaskSet) -> Tensor:
    """Mean over bands and samples of ``(1/T^2) sum_ij J(sigma(M_i), sigma(M_j))``."""
    per_band = [mean(pairwise_jaccard(masks.soft(lab))) for lab in masks.labels]
    total = per_band[0]
    for term in per_band[1:]:
        total = add(total, term)
    return mul(total, 1.0 / len(per_band))


def mean_offdiagonal_jaccard(masks: MaskSet) -> float:
    vals = []
    with no_grad():
        for lab in masks.labels:
            j = pairwise_jaccard(masks.soft(lab).detach()).data
            t = j.shape[1]
            if t < 2:
                continue
            off = ~np.eye(t, dtype=bool)
            vals.append(j[:, off].mean())
    return float(np.mean(vals)) if vals else 1.0


@dataclass
class PromptTrainConfig:
    lam: float = 1.0
    principles: int = 2
    epochs: int = 2
    lr: float = 0.02
    keep_teacher_weights: bool = False
    batch_size: int = 16
    seed: int = 0
    transform: str = "dwt"
    wavelet: str = "haar"
    level: int = 3
    band_subset: str = "all"
    init_scale: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.principles < 1:
            raise ValueError("principles (T) must be >= 1")
        select_bands(["LL1"], self.band_subset)


def _feature_channels(teacher, data: SceneSet) -> tuple[int, tuple[int, int]]:
    with no_grad():
        _, taps = teacher(Tensor(data.images[:1]))
    f = taps["feature"]
    return f.shape[1], f.shape[-2:]


def train_prompt(teacher, data: SceneSet, cfg: PromptTrainConfig, history: list | None = None) -> FrequencyPrompt:
    """Stage one: learn the prompt through the teacher's task loss.

    Prompt and teacher weights are optimized jointly on
    ``task + lam * dissimilarity``; the teacher is restored afterwards unless
    ``cfg.keep_teacher_weights``.
    """
    xf = get_transform(cfg.transform, cfg.wavelet)
    channels, _ = _feature_channels(teacher, data)
    labels = band_labels(cfg.level)
    prompt = FrequencyPrompt.init(labels, cfg.principles, channels * xf.channel_factor,
                                  cfg.init_scale, cfg.seed, transform=cfg.transform,
                                  wavelet=cfg.wavelet, level=cfg.level, band_subset=cfg.band_subset)
    if cfg.epochs == 0:
        return prompt
    snapshot = copy.deepcopy(teacher.state_dict())
    opt = SGD([prompt.params] + teacher.parameters(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 7)
    holder = {}

    def hook(feat):
        bands = xf.forward(feat, cfg.level)
        out, masks = masked_bands(bands, prompt, cfg.band_subset)
        holder["masks"] = masks
        return xf.inverse(out)

    try:
        for epoch in range(cfg.epochs):
            sums = np.zeros(3)
            seen = 0
            for _, xb, yb in data.batches(cfg.batch_size, rng):
                logits, _ = teacher(Tensor(xb), tap_hook=hook)
                task = cross_entropy(logits, yb)
                dis = dissimilarity_loss(holder["masks"])
                loss = add(task, mul(dis, cfg.lam))
                loss.backward()
                opt.step()
                sums += np.array([loss.item(), task.item(), dis.item()]) * len(xb)
                seen += len(xb)
            row = dict(zip(("prompt_loss", "task_loss", "dis_loss"), sums / max(seen, 1)))
            row["epoch"] = epoch + 1
            log.info("prompt epoch %d: %s", epoch + 1, row)
            if history is not None:
                history.append(row)
    except NonFiniteError as exc:
        raise TrainingError(f"stage-1 prompt training diverged: {exc}") from exc
    finally:
        if not cfg.keep_teacher_weights:
            teacher.load_state_dict(snapshot)
    prompt.params = Tensor(prompt.params.data, requires_grad=True, name="prompt")
    prompt.trained = True
    return prompt
