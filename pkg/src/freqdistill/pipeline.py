"""Two-stage experiment plumbing shared by the CLI subcommands and the ablation grid."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .distill import DistillConfig, DistillResult, distill_train, teacher_features
from .prompt import FrequencyPrompt, PromptTrainConfig, mean_offdiagonal_jaccard, band_masks, train_prompt
from .toybench import SceneSet, SegNet, evaluate, make_split, train_teacher
from .freqxform import get_transform
from .diffcore import Tensor, no_grad

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 1_000_003


def build_data(cfg: ExperimentConfig) -> tuple[SceneSet, SceneSet]:
    train = make_split(cfg.data_seed, cfg.n_train, cfg.height, cfg.width, cfg.classes, cfg.level)
    val = make_split(cfg.data_seed + VAL_SEED_OFFSET, cfg.n_val, cfg.height, cfg.width, cfg.classes, cfg.level)
    return train, val


def fit_teacher(cfg: ExperimentConfig, train: SceneSet, val: SceneSet | None) -> tuple[SegNet, list[dict]]:
    return train_teacher(train, cfg.teacher_epochs, cfg.teacher_lr, cfg.teacher_width, cfg.teacher_seed,
                         val=val, batch_size=cfg.batch_size, clip_norm=cfg.clip_norm, schedule="cosine")


def blank_teacher(cfg: ExperimentConfig) -> SegNet:
    return SegNet(np.random.default_rng(cfg.teacher_seed), cfg.teacher_width, cfg.classes)


def new_student(cfg: ExperimentConfig, seed: int) -> SegNet:
    return SegNet(np.random.default_rng(np.random.SeedSequence([seed, 1])), cfg.student_width, cfg.classes)


def prompt_config(cfg: ExperimentConfig, transform: str) -> PromptTrainConfig:
    return PromptTrainConfig(lam=cfg.lam, principles=cfg.principles, epochs=cfg.prompt_epochs, lr=cfg.prompt_lr,
                             batch_size=cfg.batch_size, seed=cfg.teacher_seed, transform=transform,
                             wavelet=cfg.wavelet, level=cfg.level, band_subset="all",
                             init_scale=cfg.prompt_init_scale, momentum=cfg.momentum,
                             weight_decay=cfg.weight_decay)


def fit_prompt(cfg: ExperimentConfig, teacher: SegNet, train: SceneSet, transform: str,
               history: list | None = None) -> FrequencyPrompt:
    return train_prompt(teacher, train, prompt_config(cfg, transform), history=history)


def distill_config(cfg: ExperimentConfig, seed: int, variant: str) -> DistillConfig:
    if variant == "baseline":
        transform, mask_mode, subset = cfg.transform, "off", "all"
        mu = 0.0
    else:
        transform, mask_mode, subset = cfg.variant_settings(variant)
        mu = cfg.mu
    return DistillConfig(mu=mu, band_subset=subset, transform=transform, wavelet=cfg.wavelet, level=cfg.level,
                         mask_mode=mask_mode, epochs=cfg.distill_epochs, lr=cfg.distill_lr,
                         batch_size=cfg.batch_size, seed=seed, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm, gate_norm=cfg.gate_norm,
                         variant="baseline" if variant == "baseline" else (variant if variant != "default" else ""))


def run_student(cfg: ExperimentConfig, seed: int, variant: str, train: SceneSet, val: SceneSet,
                teacher: SegNet | None, prompts: dict[str, FrequencyPrompt],
                teacher_cache=None) -> DistillResult:
    dcfg = distill_config(cfg, seed, variant)
    prompt = prompts.get(dcfg.transform) if dcfg.mask_mode == "on" else None
    return distill_train(teacher, new_student(cfg, seed), prompt, train, dcfg, val=val, teacher_cache=teacher_cache)


@dataclass
class Cell:
    seed: int
    variant: str
    transform: str
    mask_mode: str
    band_subset: str
    mIoU: float
    task_loss: float
    distill_loss: float
    seconds: float
    history: list[dict] = field(repr=False, default_factory=list)


@dataclass
class AblationResult:
    cells: list[Cell]
    teacher_mIoU: float
    teacher_history: list[dict]
    prompt_stats: dict[str, dict]
    variants: list[str]
    seeds: list[int]

    def by_variant(self, variant: str) -> dict[int, float]:
        return {c.seed: c.mIoU for c in self.cells if c.variant == variant}

    def mean(self, variant: str) -> float:
        return float(np.mean(list(self.by_variant(variant).values())))

    def std(self, variant: str) -> float:
        return float(np.std(list(self.by_variant(variant).values())))

    def run_rows(self) -> list[dict]:
        return [_cell_row(c, "run") for c in self.cells if c.variant != "baseline"]

    def baseline_rows(self) -> list[dict]:
        return [_cell_row(c, "baseline") for c in self.cells if c.variant == "baseline"]

    def summary_rows(self) -> list[dict]:
        rows = []
        for v in ["baseline"] + self.variants:
            vals = self.by_variant(v)
            base = self.by_variant("baseline")
            lift = [vals[s] - base[s] for s in vals] if v != "baseline" else [0.0] * len(vals)
            for stat, fn in (("mean", np.mean), ("std", np.std)):
                rows.append({"kind": stat, "seed": "", "variant": v, "mIoU": float(fn(list(vals.values()))),
                             "lift": float(fn(lift)),
                             "wins": sum(d > 0 for d in lift) if v != "baseline" else ""})
        return rows

    def metric_rows(self) -> list[dict]:
        return [row for c in self.cells for row in c.history]


SUMMARY_COLUMNS = ("kind", "seed", "variant", "transform", "mask_mode", "band_subset", "mIoU", "lift", "wins",
                   "task_loss", "distill_loss")


def _cell_row(c: Cell, kind: str) -> dict:
    return {"kind": kind, "seed": c.seed, "variant": c.variant, "transform": c.transform,
            "mask_mode": c.mask_mode, "band_subset": c.band_subset, "mIoU": c.mIoU,
            "task_loss": c.task_loss, "distill_loss": c.distill_loss}


def run_ablation(cfg: ExperimentConfig, train: SceneSet | None = None, val: SceneSet | None = None,
                 teacher: SegNet | None = None, prompts: dict[str, FrequencyPrompt] | None = None) -> AblationResult:
    """Teacher, one prompt per transform, then every seed × variant cell plus a baseline per seed.

    A supplied ``teacher`` (and any supplied ``prompts``, keyed by transform)
    is reused instead of trained.
    """
    if train is None or val is None:
        train, val = build_data(cfg)
    t_hist: list[dict] = []
    if teacher is None:
        teacher, t_hist = fit_teacher(cfg, train, val)
    teacher_miou = evaluate(teacher, val)
    log.info("teacher mIoU %.4f", teacher_miou)
    needed = sorted({cfg.variant_settings(v)[0] for v in cfg.variants if cfg.variant_settings(v)[1] == "on"})
    prompts, prompt_stats = dict(prompts or {}), {}
    for transform in needed:
        hist: list[dict] = []
        if transform not in prompts:
            prompts[transform] = fit_prompt(cfg, teacher, train, transform, history=hist)
        prompt_stats[transform] = {"history": hist, **prompt_overlap(cfg, teacher, train, prompts[transform])}
    cache = teacher_features(teacher, train.images)
    jobs = [(seed, v) for seed in cfg.seeds for v in ["baseline"] + list(cfg.variants)]

    def work(job):
        seed, variant = job
        start = time.perf_counter()
        res = run_student(cfg, seed, variant, train, val, teacher, prompts, teacher_cache=cache)
        dcfg = distill_config(cfg, seed, variant)
        last = res.history[-1] if res.history else {"task_loss": float("nan"), "distill_loss": 0.0}
        cell = Cell(seed, variant, dcfg.transform if variant != "baseline" else "-",
                    dcfg.mask_mode if variant != "baseline" else "-",
                    dcfg.band_subset if variant != "baseline" else "-",
                    evaluate(res.student, val), last["task_loss"], last["distill_loss"],
                    time.perf_counter() - start, res.history)
        log.info("cell seed=%d %s mIoU=%.4f (%.1fs)", seed, variant, cell.mIoU, cell.seconds)
        return cell

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(work, jobs))
    else:
        cells = [work(j) for j in jobs]
    return AblationResult(cells, teacher_miou, t_hist, prompt_stats, list(cfg.variants), list(cfg.seeds))


def prompt_overlap(cfg: ExperimentConfig, teacher: SegNet, data: SceneSet, prompt: FrequencyPrompt,
                   count: int = 64) -> dict:
    """Mean off-diagonal soft Jaccard of ``prompt`` and of its untrained initialization."""
    xf = get_transform(prompt.meta.get("transform", cfg.transform), cfg.wavelet)
    init = FrequencyPrompt.init(prompt.labels, prompt.principles, prompt.channels, cfg.prompt_init_scale,
                                cfg.teacher_seed)
    with no_grad():
        _, taps = teacher(Tensor(data.images[:count]))
        bands = xf.forward(taps["feature"], cfg.level)
        trained = mean_offdiagonal_jaccard(band_masks(bands, prompt.frozen()))
        start = mean_offdiagonal_jaccard(band_masks(bands, init.frozen()))
    return {"jaccard_trained": trained, "jaccard_init": start}
