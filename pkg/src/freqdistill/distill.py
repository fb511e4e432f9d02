"""Stage two: gated, masked band-space imitation of a frozen teacher."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import (
    Conv2d, Linear, Module, Tensor, abs, add, concat, div, matmul, mean, mul, no_grad, relu,
    reshape, resize_nearest, sigmoid, softmax_lastdim, sub, sum, transpose,
)
from .diffcore.tensor import DimensionError
from .freqxform import BandSet, StructureError, get_transform
from .prompt import BAND_SUBSETS, FrequencyPrompt, MaskSet, band_masks, select_bands
from .toybench import SCHEDULES, SceneSet, SegNet, train_segnet

log = logging.getLogger(__name__)

TRANSFORMS = ("dwt", "dct", "dft")
MASK_MODES = ("on", "off")
GATE_NORMS = ("mean", "none")


class ConfigError(ValueError):
    pass


class Projection(Module):
    """1×1 convolution from student to teacher channels."""

    def __init__(self, rng: np.random.Generator, c_student: int, c_teacher: int, identity: bool = False):
        self.conv = Conv2d(rng, c_student, c_teacher, k=1, pad=0)
        if identity:
            if c_student != c_teacher:
                raise DimensionError("identity projection needs equal channel counts")
            self.conv.weight = Tensor(np.eye(c_teacher).reshape(c_teacher, c_teacher, 1, 1), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class GateMLP(Module):
    """Row-wise MLP over an ``N × C × C`` attention matrix: C -> C/r -> 1 -> sigmoid."""

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 4, zero_final: bool = False):
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, 1, zero_init=zero_final)

    def forward(self, a: Tensor) -> Tensor:
        return gate(a, self)


def relational_attention(feat, feat_next) -> Tensor:
    """Row-normalized cross-layer channel affinity ``softmax(psi(F) F^T)``.

    ``feat_next`` is resized (nearest) to ``feat``'s spatial extent.
    """
    f = feat if isinstance(feat, Tensor) else Tensor(feat)
    g = feat_next if isinstance(feat_next, Tensor) else Tensor(feat_next)
    if f.shape[1] != g.shape[1]:
        raise DimensionError(f"channel mismatch: {f.shape[1]} vs {g.shape[1]}")
    n, c, h, w = f.shape
    psi = reshape(resize_nearest(g, (h, w)), (n, c, h * w))
    flat = reshape(f, (n, c, h * w))
    return softmax_lastdim(matmul(psi, transpose(flat, (0, 2, 1))))


def gate(a: Tensor, mlp: GateMLP) -> Tensor:
    """Map each attention row to a channel weight in (0, 1): ``N × C``."""
    if a.ndim != 3 or a.shape[-1] != mlp.channels:
        raise DimensionError(f"attention {a.shape} does not match MLP width {mlp.channels}")
    hidden = relu(mlp.fc1(a))
    out = sigmoid(mlp.fc2(hidden))
    return reshape(out, a.shape[:2])


def combined_gate(omega_teacher: Tensor, omega_student: Tensor) -> Tensor:
    return mul(omega_teacher, omega_student)


def normalize_gate(omega: Tensor) -> Tensor:
    """Rescale each sample's gates to unit channel mean.

    A gate trained on the loss it weights can only shrink; with a fixed
    mean the gradient moves weight between channels instead.
    """
    return div(omega, mean(omega, axis=1, keepdims=True))


def _widen(omega: Tensor, channels: int) -> Tensor:
    c = omega.shape[1]
    if channels == c:
        return omega
    if channels % c:
        raise DimensionError(f"cannot spread {c} gates over {channels} band channels")
    return concat([omega] * (channels // c), axis=1)


def freekd_loss(teacher_bands: BandSet, student_bands: BandSet, masks: MaskSet | None,
                omega, band_subset: str = "all") -> Tensor:
    """Gated, masked L1 between teacher and student bands.

    Each band term is ``sum_c omega[c] * |M * a_c - M * b_c|`` divided by the
    band's element count; terms are averaged over the selected bands.  Masks
    are detached; ``masks=None`` means ``M = 1``.
    """
    if teacher_bands.labels != student_bands.labels:
        raise DimensionError(f"band layouts differ: {teacher_bands.labels} vs {student_bands.labels}")
    labels = select_bands(teacher_bands.labels, band_subset)
    if not labels:
        raise StructureError(f"band subset {band_subset!r} selects nothing")
    if masks is not None:
        masks = masks.detach()
    omega = omega if isinstance(omega, Tensor) else Tensor(omega)
    terms = []
    for lab in labels:
        a, b = teacher_bands[lab], student_bands[lab]
        if a.shape != b.shape:
            raise DimensionError(f"band {lab}: {a.shape} vs {b.shape}")
        if masks is not None:
            if lab not in masks.logits:
                raise StructureError(f"no mask for band {lab}")
            m = masks.aggregate(lab)
            a, b = mul(m, a), mul(m, b)
        n, c, hb, wb = a.shape
        per_channel = sum(abs(sub(a, b)), axis=(2, 3))
        weighted = sum(mul(per_channel, _widen(omega, c)))
        terms.append(mul(weighted, 1.0 / (n * c * hb * wb)))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(terms))


def total_loss(task_loss, distill_loss, mu: float) -> Tensor:
    return add(task_loss, mul(distill_loss, float(mu)))


@dataclass
class DistillConfig:
    mu: float = 5.0
    band_subset: str = "all"
    transform: str = "dwt"
    wavelet: str = "haar"
    level: int = 3
    mask_mode: str = "on"
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0
    reduction: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float | None = 1.0
    schedule: str = "cosine"
    identity_projection: bool = False
    gate_norm: str = "mean"
    variant: str = ""

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.band_subset not in BAND_SUBSETS:
            raise ConfigError(f"band_subset must be one of {BAND_SUBSETS}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.level < 1:
            raise ConfigError("level must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.gate_norm not in GATE_NORMS:
            raise ConfigError(f"gate_norm must be one of {GATE_NORMS}")

    @property
    def name(self) -> str:
        if self.variant:
            return self.variant
        if self.mu == 0:
            return "baseline"
        mask = "mask" if self.mask_mode == "on" else "nomask"
        return f"{self.transform}-{mask}-{self.band_subset}"


@dataclass
class DistillResult:
    student: SegNet
    projection: Projection | None
    teacher_gate: GateMLP | None
    student_gate: GateMLP | None
    history: list[dict]


def teacher_features(teacher: SegNet, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-teacher ``(feature, deep)`` taps for every image."""
    feats, deeps = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            _, taps = teacher(Tensor(images[i:i + batch_size]))
            feats.append(taps["feature"].data)
            deeps.append(taps["deep"].data)
    return np.concatenate(feats), np.concatenate(deeps)


class FreqDistiller:
    """Builds the stage-two distillation term for one student."""

    def __init__(self, teacher_cache: tuple[np.ndarray, np.ndarray], student: SegNet,
                 prompt: FrequencyPrompt | None, cfg: DistillConfig, rng: np.random.Generator):
        feats, _ = teacher_cache
        c_t = feats.shape[1]
        self.cfg = cfg
        self.cache = teacher_cache
        self.transform = get_transform(cfg.transform, cfg.wavelet)
        self.prompt = prompt.frozen() if prompt is not None else None
        self.projection = Projection(rng, student.width, c_t, identity=cfg.identity_projection)
        self.teacher_gate = GateMLP(rng, c_t, cfg.reduction)
        self.student_gate = GateMLP(rng, c_t, cfg.reduction)

    def parameters(self) -> list[Tensor]:
        return self.projection.parameters() + self.teacher_gate.parameters() + self.student_gate.parameters()

    def teacher_side(self, idx: np.ndarray):
        feats, deeps = self.cache
        with no_grad():
            f_t = Tensor(feats[idx])
            bands_t = self.transform.forward(f_t, self.cfg.level)
            masks = None
            if self.cfg.mask_mode == "on":
                masks = band_masks(bands_t, self.prompt, "all")
            attn_t = relational_attention(f_t, Tensor(deeps[idx]))
        return bands_t, masks, attn_t

    def student_side(self, taps: dict[str, Tensor]):
        f_s = self.projection(taps["feature"])
        bands_s = self.transform.forward(f_s, self.cfg.level)
        attn_s = relational_attention(f_s, self.projection(taps["deep"]))
        return bands_s, attn_s

    def __call__(self, idx: np.ndarray, taps: dict[str, Tensor]) -> Tensor:
        bands_t, masks, attn_t = self.teacher_side(idx)
        bands_s, attn_s = self.student_side(taps)
        omega = combined_gate(self.teacher_gate(attn_t), self.student_gate(attn_s))
        if self.cfg.gate_norm == "mean":
            omega = normalize_gate(omega)
        return freekd_loss(bands_t, bands_s, masks, omega, self.cfg.band_subset)


def distill_train(teacher: SegNet | None, student: SegNet, prompt: FrequencyPrompt | None,
                  data: SceneSet, cfg: DistillConfig, val: SceneSet | None = None,
                  teacher_cache: tuple[np.ndarray, np.ndarray] | None = None) -> DistillResult:
    """Train ``student`` on ``task + mu * freekd``; ``mu == 0`` is plain training."""
    if cfg.mu == 0:
        history = train_segnet(student, data, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size,
                               cfg.momentum, cfg.weight_decay, val=val,
                               clip_norm=cfg.clip_norm, schedule=cfg.schedule)
        return DistillResult(student, None, None, None, _label(history, cfg))
    if cfg.mask_mode == "on":
        if prompt is None or not prompt.trained:
            raise ConfigError("mask_mode 'on' requires a trained frequency prompt")
        if prompt.meta.get("transform", cfg.transform) != cfg.transform:
            raise ConfigError(f"prompt was trained for {prompt.meta.get('transform')!r}, not {cfg.transform!r}")
        if prompt.meta.get("level", cfg.level) != cfg.level:
            raise ConfigError("prompt decomposition level differs from the distillation level")
    if teacher_cache is None:
        if teacher is None:
            raise ConfigError("need a teacher or precomputed teacher features")
        teacher_cache = teacher_features(teacher, data.images)
    distiller = FreqDistiller(teacher_cache, student, prompt, cfg, np.random.default_rng(cfg.seed + 101))
    history = train_segnet(student, data, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size,
                           cfg.momentum, cfg.weight_decay, val=val,
                           extra_loss=distiller, extra_weight=cfg.mu, extra_params=distiller.parameters(),
                           clip_norm=cfg.clip_norm, schedule=cfg.schedule)
    return DistillResult(student, distiller.projection, distiller.teacher_gate, distiller.student_gate,
                         _label(history, cfg))


def _label(history: list[dict], cfg: DistillConfig) -> list[dict]:
    rows = []
    for row in history:
        rows.append({
            "epoch": row["epoch"],
            "seed": cfg.seed,
            "variant": cfg.name,
            "task_loss": row["task_loss"],
            "distill_loss": row.get("distill_loss", 0.0),
            "mIoU": row.get("mIoU", float("nan")),
        })
    return rows


def config_dict(cfg: DistillConfig) -> dict:
    return asdict(cfg)
