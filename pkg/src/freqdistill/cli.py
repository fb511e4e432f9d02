"""Command-line driver: ``freqdistill <subcommand> [--config PATH] [--seed N] [--out DIR] [--variant NAME]``.

Exit codes: 0 success, 1 runtime failure (including failed checks), 2 invalid
configuration or arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .artifacts import METRIC_COLUMNS, array_digest, write_csv, write_json
from .config import ExperimentConfig
from .diffcore import Tensor, load_checkpoint, no_grad, save_checkpoint
from .distill import ConfigError
from .freqxform import get_transform
from .imageio import write_pgm, write_ppm
from .pipeline import (
    build_data, distill_config, fit_prompt, fit_teacher, run_ablation, run_student,
)
from .prompt import FrequencyPrompt, band_masks
from .toybench import SegNet, evaluate

log = logging.getLogger("freqdistill")


class RunError(RuntimeError):
    """A subcommand could not complete (missing inputs, failed checks, divergence)."""


# -- paths --------------------------------------------------------------------

def teacher_path(out: Path) -> Path:
    return out / "teacher" / "teacher.ckpt"


def prompt_path(out: Path, transform: str) -> Path:
    return out / "prompt" / transform / "prompt.ckpt"


def student_dir(out: Path, variant: str, seed: int) -> Path:
    return out / "distill" / variant / f"seed{seed}"


# -- checkpoint helpers -------------------------------------------------------

def _meta(cfg: ExperimentConfig, seed, kind: str, **extra) -> dict:
    return {"kind": kind, "seed": seed, "config": cfg.to_dict(), **extra}


def save_net(path: Path, net: SegNet, meta: dict, extras: dict[str, dict] | None = None) -> None:
    tensors = {f"net.{k}": v for k, v in net.state_dict().items()}
    for prefix, state in (extras or {}).items():
        tensors.update({f"{prefix}.{k}": v for k, v in state.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, tensors, {**meta, "width": net.width, "classes": net.num_classes})


def load_net(path: Path) -> tuple[SegNet, dict]:
    if not path.exists():
        raise RunError(f"checkpoint {path} not found")
    tensors, meta = load_checkpoint(path)
    net = SegNet(np.random.default_rng(0), int(meta["width"]), int(meta["classes"]))
    try:
        net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
    except (KeyError, ValueError) as exc:
        raise RunError(f"{path}: {exc}") from exc
    return net, meta


def load_teacher(cfg: ExperimentConfig, out: Path) -> SegNet:
    net, meta = load_net(teacher_path(out))
    if net.width != cfg.teacher_width or net.num_classes != cfg.classes:
        raise RunError("teacher checkpoint does not match the configured width/classes; rerun train-teacher")
    return net


def save_prompt(path: Path, prompt: FrequencyPrompt, meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {**meta, "B": prompt.bands, "T": prompt.principles, "C": prompt.channels,
              "labels": prompt.labels, "trained": prompt.trained, "prompt_meta": prompt.meta}
    save_checkpoint(path, {"prompt": prompt.params.data}, record)


def load_prompt(path: Path) -> FrequencyPrompt:
    if not path.exists():
        raise RunError(f"prompt checkpoint {path} not found; run train-prompt first")
    tensors, meta = load_checkpoint(path)
    return FrequencyPrompt(Tensor(tensors["prompt"]), list(meta["labels"]), bool(meta["trained"]),
                           dict(meta["prompt_meta"]))


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    train, val = build_data(cfg)
    hist = np.bincount(train.labels.ravel(), minlength=cfg.classes) / max(train.labels.size, 1)
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.data_seed,
        "train": {"count": len(train), "sha256": array_digest(train.images, train.labels)},
        "val": {"count": len(val), "sha256": array_digest(val.images, val.labels)},
        "class_share": [float(v) for v in hist],
    }
    write_json(out / "data" / "manifest.json", manifest)
    comment = cfg.to_json()
    for i in range(min(args.dump, len(val))):
        write_ppm(out / "data" / "samples" / f"val{i:03d}.ppm", val.images[i].transpose(1, 2, 0), comment)
        write_pgm(out / "data" / "samples" / f"val{i:03d}_label.pgm", val.labels[i] / (cfg.classes - 1), comment,
                  normalize=False)
    print(f"train {len(train)} | val {len(val)} | class share {' '.join(f'{v:.4f}' for v in hist)}")
    return 0


def cmd_train_teacher(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    train, val = build_data(cfg)
    net, hist = fit_teacher(cfg, train, val)
    rows = [{**r, "seed": cfg.teacher_seed, "variant": "teacher", "distill_loss": 0.0} for r in hist]
    write_csv(out / "teacher" / "metrics.csv", METRIC_COLUMNS, rows, cfg.to_json(), cfg.teacher_seed)
    save_net(teacher_path(out), net, _meta(cfg, cfg.teacher_seed, "teacher"))
    print(f"teacher mIoU {evaluate(net, val)!r}")
    return 0


def _transforms_for(cfg: ExperimentConfig, variant: str | None) -> list[str]:
    if variant and variant != "default":
        return [cfg.variant_settings(variant)[0]]
    return [cfg.transform]


def cmd_train_prompt(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    train, _ = build_data(cfg)
    teacher = load_teacher(cfg, out)
    for transform in _transforms_for(cfg, args.variant):
        hist: list[dict] = []
        prompt = fit_prompt(cfg, teacher, train, transform, history=hist)
        save_prompt(prompt_path(out, transform), prompt, _meta(cfg, cfg.teacher_seed, "prompt"))
        write_csv(prompt_path(out, transform).with_name("history.csv"),
                  ("epoch", "prompt_loss", "task_loss", "dis_loss"), hist, cfg.to_json(), cfg.teacher_seed)
        last = hist[-1] if hist else {}
        print(f"prompt {transform} | epochs {len(hist)} | dis_loss {last.get('dis_loss', float('nan'))!r}")
    return 0


def cmd_distill(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    variant = args.variant or "default"
    seed = cfg.seeds[0]
    dcfg = distill_config(cfg, seed, variant)
    train, val = build_data(cfg)
    teacher = None
    prompts = {}
    if dcfg.mu > 0:
        teacher = load_teacher(cfg, out)
        if dcfg.mask_mode == "on":
            prompts[dcfg.transform] = load_prompt(prompt_path(out, dcfg.transform))
    res = run_student(cfg, seed, variant, train, val, teacher, prompts)
    target = student_dir(out, dcfg.name, seed)
    extras = {}
    for prefix, mod in (("projection", res.projection), ("teacher_gate", res.teacher_gate),
                        ("student_gate", res.student_gate)):
        if mod is not None:
            extras[prefix] = mod.state_dict()
    save_net(target / "student.ckpt", res.student, _meta(cfg, seed, "student", variant=dcfg.name,
                                                          distill=vars(dcfg)), extras)
    write_csv(target / "metrics.csv", METRIC_COLUMNS, res.history, cfg.to_json(), seed)
    print(f"{dcfg.name} | seed {seed} | mIoU {evaluate(res.student, val)!r}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    if args.checkpoint:
        path = Path(args.checkpoint)
    else:
        dcfg = distill_config(cfg, cfg.seeds[0], args.variant or "default")
        path = student_dir(out, dcfg.name, cfg.seeds[0]) / "student.ckpt"
    net, meta = load_net(path)
    _, val = build_data(cfg)
    print(f"mIoU {evaluate(net, val)!r}")
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    from .report import format_table, write_ablation

    if args.variant:
        cfg = cfg.override(variants=[v for v in args.variant.split(",") if v])
    result = run_ablation(cfg)
    paths = write_ablation(result, Path(cfg.out) / "ablate", cfg.to_json())
    print(format_table(result))
    for name, p in paths.items():
        log.info("%s -> %s", name, p)
    return 0


def cmd_dump_masks(cfg: ExperimentConfig, args) -> int:
    from .report import mask_grid

    out = Path(cfg.out)
    transform = _transforms_for(cfg, args.variant)[0]
    teacher = load_teacher(cfg, out)
    prompt = load_prompt(prompt_path(out, transform))
    _, val = build_data(cfg)
    if not 0 <= args.index < len(val):
        raise ConfigError(f"--index must be in [0, {len(val)})")
    xf = get_transform(transform, cfg.wavelet)
    with no_grad():
        _, taps = teacher(Tensor(val.images[args.index:args.index + 1]))
        bands = xf.forward(taps["feature"], cfg.level)
        masks = band_masks(bands, prompt)
    target = out / "masks" / transform / f"val{args.index:03d}"
    comment = f"{cfg.to_json()}\nseed={cfg.teacher_seed} index={args.index}"
    grid = {}
    for lab in masks.labels:
        hb, wb = masks.extents[lab]
        soft = masks.soft(lab).data[0].reshape(-1, hb, wb)
        grid[lab] = soft
        for t in range(soft.shape[0]):
            write_pgm(target / f"{lab}_p{t}.pgm", soft[t], comment, normalize=False)
    write_ppm(target / "image.ppm", val.images[args.index].transpose(1, 2, 0), comment)
    mask_grid(grid, target / "masks.png", cfg.to_json())
    print(f"wrote {sum(g.shape[0] for g in grid.values())} masks to {target}")
    return 0


def cmd_check(cfg: ExperimentConfig, args) -> int:
    results = checks.run_all(args.suite or None)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-prompt": cmd_train_prompt,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-masks": cmd_dump_masks,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="run seed (replaces the configured seed list)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", help="variant name, 'baseline', or 'default'")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="freqdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "gen-data":
            p.add_argument("--dump", type=int, default=0, help="write this many val samples as PPM/PGM")
        if name == "eval":
            p.add_argument("--checkpoint", help="network checkpoint (default: the distilled student)")
        if name == "dump-masks":
            p.add_argument("--index", type=int, default=0, help="val image index")
        if name == "check":
            p.add_argument("--suite", action="append", choices=sorted(checks.SUITES))
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.out is not None:
        changes["out"] = args.out
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.variant and args.command not in ("ablate",) and args.variant not in ("default", "baseline"):
        cfg.variant_settings(args.variant)
    return cfg.override(**changes) if changes else cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
