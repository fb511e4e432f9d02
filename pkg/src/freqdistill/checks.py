"""Numeric oracle suites behind the ``check`` subcommand.

Each suite returns :class:`CheckResult` records; a suite passes when every
record does.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, gradcheck
from .distill import GateMLP, freekd_loss, gate, relational_attention
from .freqxform import BandSet, HAAR, DB2, dct2d, dft2d, dwt2d, idct2d, idft2d, idwt2d, wavelet_analysis, wavelet_synthesis
from .prompt import FrequencyPrompt, MaskSet, apply_masks, band_masks, compute_masks, dissimilarity_loss, soft_jaccard

GRAD_TOL = 1e-4
RECON_TOL = 1e-8
ENERGY_TOL = 1e-9


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float
    bound: float
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} | {self.suite} | {self.name} | {self.value:.3e} | {self.bound:.1e} | {self.seconds:.2f}s"


# -- transforms ---------------------------------------------------------------

def reconstruction_suite(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst_rec = worst_energy = 0.0
    for i in range(trials):
        h, w = (int(v) for v in rng.integers(8, 65, size=2))
        level = int(rng.integers(1, 4))
        wav = HAAR if i % 2 == 0 else DB2
        x = rng.normal(size=(1, 2, h, w))
        bands = dwt2d(x, wav, level)
        rec = idwt2d(bands, wav).data
        worst_rec = max(worst_rec, float(np.max(np.abs(rec - x))))
        energy = np.sum([np.sum(t.data ** 2) for t in bands.tensors])
        worst_energy = max(worst_energy, abs(energy - np.sum(x ** 2)) / np.sum(x ** 2))
    secs = time.perf_counter() - start
    return [
        CheckResult("transform", f"dwt reconstruction max-abs ({trials} inputs)", worst_rec <= RECON_TOL, worst_rec, RECON_TOL, secs),
        CheckResult("transform", f"dwt energy relative error ({trials} inputs)", worst_energy <= ENERGY_TOL, worst_energy, ENERGY_TOL, secs),
    ]


# -- gradients ----------------------------------------------------------------

GradCase = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


def _weighted(out: Tensor, rng_seed: int) -> Tensor:
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return dc.sum(dc.mul(out, w))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _bands(x: Tensor, level: int) -> BandSet:
    return dwt2d(x, HAAR, level)


def _bandset_scalar(bands: BandSet, seed: int) -> Tensor:
    total = None
    for i, t in enumerate(bands.tensors):
        term = _weighted(t, seed + i)
        total = term if total is None else dc.add(total, term)
    return total


def _case_unary(op, domain="any"):
    def case(rng):
        shape = (3, 4)
        if domain == "positive":
            x = rng.uniform(0.3, 2.0, size=shape)
        elif domain == "kink":
            x = _away_from_zero(rng, shape)
        else:
            x = rng.normal(size=shape)
        s = int(rng.integers(1 << 30))
        return (lambda a: _weighted(op(a), s)), [x]
    return case


def _case_binary(op, kink=False, positive_b=False):
    def case(rng):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4)) if positive_b else rng.normal(size=(3, 4))
        if kink:
            b = a + _away_from_zero(rng, a.shape)
        s = int(rng.integers(1 << 30))
        return (lambda x, y: _weighted(op(x, y), s)), [a, b]
    return case


def _case_matmul(rng):
    s = int(rng.integers(1 << 30))
    return (lambda a, b: _weighted(dc.matmul(a, b), s)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))]


def _case_softmax(rng):
    s = int(rng.integers(1 << 30))
    return (lambda a: _weighted(dc.softmax_lastdim(a), s)), [rng.normal(size=(2, 3, 5))]


def _case_reductions(rng):
    s = int(rng.integers(1 << 30))
    return (lambda a: dc.add(_weighted(dc.sum(a, axis=1), s), dc.mean(dc.square(a)))), [rng.normal(size=(2, 3, 4))]


def _case_shape_ops(rng):
    s = int(rng.integers(1 << 30))

    def fn(a):
        t = dc.transpose(dc.reshape(a, (3, 2, 4)), (2, 0, 1))
        c = dc.concat([dc.getitem(t, (slice(None), 1)), dc.getitem(t, (slice(None), 0))], axis=1)
        return _weighted(c, s)
    return fn, [rng.normal(size=(6, 4))]


def _case_pad_resize(rng):
    s = int(rng.integers(1 << 30))
    return (lambda a: _weighted(dc.resize_nearest(dc.pad2d(a, 1, 2), (6, 12)), s)), [rng.normal(size=(1, 2, 2, 4))]


def _case_conv(rng):
    s = int(rng.integers(1 << 30))
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    return (lambda a, k, c: _weighted(dc.conv2d(a, k, c, stride=stride, pad=1), s)), [x, w, b]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 3, size=(2, 3, 3))
    return (lambda z: dc.cross_entropy(z, labels)), [rng.normal(size=(2, 3, 3, 3))]


def _case_wavelet_axes(rng):
    s = int(rng.integers(1 << 30))
    wav = HAAR if rng.integers(2) else DB2
    axis = int(rng.integers(2, 4))
    return (lambda a: _weighted(wavelet_synthesis(dc.mul(wavelet_analysis(a, wav, axis), 1.5), wav, axis), s)), \
        [rng.normal(size=(1, 2, 4, 6))]


def _case_dwt(rng):
    s = int(rng.integers(1 << 30))
    wav = HAAR if rng.integers(2) else DB2
    return (lambda a: _bandset_scalar(dwt2d(a, wav, 2), s)), [rng.normal(size=(1, 1, 8, 8))]


def _case_idwt(rng):
    s = int(rng.integers(1 << 30))
    wav = HAAR if rng.integers(2) else DB2
    template = dwt2d(np.zeros((1, 1, 8, 8)), wav, 2)
    shapes = [t.shape for t in template.tensors]
    arrays = [rng.normal(size=sh) for sh in shapes]

    def fn(*ts):
        bands = BandSet(template.level, list(zip(template.labels, ts)), template.pad_record)
        return _weighted(idwt2d(bands, wav), s)
    return fn, arrays


def _case_dct_dft(rng):
    s = int(rng.integers(1 << 30))

    def fn(a):
        total = _bandset_scalar(dct2d(a, 1), s)
        return dc.add(total, _bandset_scalar(dft2d(a, 1, norm="ortho"), s + 100))
    return fn, [rng.normal(size=(1, 1, 4, 8))]


def _case_inverse_spectral(rng):
    s = int(rng.integers(1 << 30))
    t_dct = dct2d(np.zeros((1, 1, 4, 8)), 1)
    t_dft = dft2d(np.zeros((1, 1, 4, 8)), 1, norm="ortho")
    x1 = [rng.normal(size=t.shape) for t in t_dct.tensors]
    x2 = [rng.normal(size=t.shape) for t in t_dft.tensors]
    k = len(x1)

    def fn(*ts):
        b1 = BandSet(1, list(zip(t_dct.labels, ts[:k])), t_dct.pad_record, "dct", dict(t_dct.meta))
        b2 = BandSet(1, list(zip(t_dft.labels, ts[k:])), t_dft.pad_record, "dft", dict(t_dft.meta))
        return dc.add(_weighted(idct2d(b1), s), _weighted(idft2d(b2), s + 1))
    return fn, x1 + x2


def _case_soft_jaccard(rng):
    a = rng.uniform(0.05, 1.0, size=(3, 7))
    b = a + _away_from_zero(rng, a.shape, 0.02) * 0.3
    b = np.abs(b) + 0.01
    return (lambda x, y: dc.sum(soft_jaccard(x, y))), [a, b]


def _case_dissimilarity(rng):
    t = int(rng.integers(2, 4))
    logits = rng.normal(size=(2, t, 6)) * 2.0

    def fn(m):
        return dissimilarity_loss(MaskSet({"HH1": m}, {"HH1": (2, 3)}))
    return fn, [logits]


def _case_masks(rng):
    s = int(rng.integers(1 << 30))
    p = rng.normal(size=(2, 3))
    r = rng.normal(size=(2, 3, 2, 2))
    return (lambda pp, rr: _weighted(apply_masks(rr, compute_masks(pp, rr)), s)), [p, r]


def _case_freekd(rng):
    n, c = 2, 2
    ft = rng.normal(size=(n, c, 4, 4))
    fs = ft + _away_from_zero(rng, ft.shape, 0.05)
    omega = rng.uniform(0.1, 0.9, size=(n, c))
    bt = _bands(Tensor(ft), 1)
    prompt = FrequencyPrompt(Tensor(rng.normal(size=(len(bt), 2, c))), list(bt.labels), True)
    masks = band_masks(bt, prompt)

    def fn(s_feat, om):
        return freekd_loss(bt, _bands(s_feat, 1), masks, om, "all")
    return fn, [fs, omega]


def _case_gate(rng):
    c = int(rng.integers(2, 6))
    mlp = GateMLP(rng, c, reduction=2)
    a = rng.normal(size=(2, c, c))
    w1, b1, w2, b2 = (p.data for p in mlp.parameters())

    def fn(aa, p1, q1, p2, q2):
        mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight, mlp.fc2.bias = p1, q1, p2, q2
        return _weighted(gate(aa, mlp), 7)
    return fn, [a, w1, b1, w2, b2]


def _case_attention(rng):
    s = int(rng.integers(1 << 30))
    return (lambda f, g: _weighted(relational_attention(f, g), s)), \
        [rng.normal(size=(2, 3, 4, 4)) * 0.5, rng.normal(size=(2, 3, 2, 2)) * 0.5]


GRAD_CASES: dict[str, GradCase] = {
    "add": _case_binary(dc.add),
    "sub": _case_binary(dc.sub),
    "mul": _case_binary(dc.mul),
    "div": _case_binary(dc.div, positive_b=True),
    "neg": _case_unary(dc.neg),
    "sigmoid": _case_unary(dc.sigmoid),
    "relu": _case_unary(dc.relu, "kink"),
    "leaky_relu": _case_unary(dc.leaky_relu, "kink"),
    "abs": _case_unary(dc.abs, "kink"),
    "exp": _case_unary(dc.exp),
    "log": _case_unary(dc.log, "positive"),
    "square": _case_unary(dc.square),
    "minimum": _case_binary(dc.minimum, kink=True),
    "maximum": _case_binary(dc.maximum, kink=True),
    "matmul": _case_matmul,
    "softmax_lastdim": _case_softmax,
    "sum/mean": _case_reductions,
    "reshape/transpose/getitem/concat": _case_shape_ops,
    "pad2d/resize_nearest": _case_pad_resize,
    "conv2d": _case_conv,
    "cross_entropy": _case_cross_entropy,
    "wavelet analysis/synthesis": _case_wavelet_axes,
    "dwt2d": _case_dwt,
    "idwt2d": _case_idwt,
    "dct2d/dft2d": _case_dct_dft,
    "idct2d/idft2d": _case_inverse_spectral,
    "soft_jaccard": _case_soft_jaccard,
    "dissimilarity_loss": _case_dissimilarity,
    "compute/apply masks": _case_masks,
    "freekd_loss": _case_freekd,
    "gate": _case_gate,
    "relational_attention": _case_attention,
}


def gradient_suite(trials: int = 20, seed: int = 0, cases: dict[str, GradCase] | None = None) -> list[CheckResult]:
    out = []
    for i, (name, case) in enumerate((cases or GRAD_CASES).items()):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        worst = max(gradcheck(*case(rng)) for _ in range(trials))
        out.append(CheckResult("gradient", f"{name} ({trials} trials)", worst <= GRAD_TOL, worst, GRAD_TOL,
                               time.perf_counter() - start))
    return out


# -- loss invariants ----------------------------------------------------------

def loss_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    def dis(m):
        return dissimilarity_loss(MaskSet({"LL1": Tensor(m)}, {"LL1": (1, m.shape[-1])})).item()

    # range over random logits
    worst = 0.0
    for _ in range(200):
        t = int(rng.integers(1, 5))
        logits = rng.normal(size=(2, t, 9)) * rng.uniform(0.1, 8.0)
        v = dis(logits)
        worst = max(worst, max(1.0 / t - v, v - 1.0, 0.0))
    out.append(CheckResult("loss", "dissimilarity in [1/T, 1]", worst <= 1e-12, worst, 1e-12))
    same = rng.normal(size=(1, 1, 9))
    v = dis(np.repeat(same, 3, axis=1))
    out.append(CheckResult("loss", "dissimilarity identical masks = 1", abs(v - 1.0) <= 1e-9, abs(v - 1.0), 1e-9))
    big = 60.0
    disjoint = np.array([[[big, big, -big, -big], [-big, -big, big, big]]])
    v = dis(disjoint)
    out.append(CheckResult("loss", "dissimilarity T=2 disjoint = 0.5", abs(v - 0.5) <= 1e-6, abs(v - 0.5), 1e-6))

    ft = rng.normal(size=(2, 4, 16, 16))
    bt = _bands(Tensor(ft), 3)
    prompt = FrequencyPrompt(Tensor(rng.normal(size=(len(bt), 2, 4))), list(bt.labels), True)
    omega = rng.uniform(0.1, 1.0, size=(2, 4))
    v = freekd_loss(bt, _bands(Tensor(ft.copy()), 3), band_masks(bt, prompt), omega).item()
    out.append(CheckResult("loss", "freekd identical features = 0", v == 0.0, abs(v), 0.0))

    fs = rng.normal(size=ft.shape)
    bs = _bands(Tensor(fs), 3)
    flat = np.mean([np.mean(np.abs(a.data - b.data)) for a, b in zip(bt.tensors, bs.tensors)])
    v = freekd_loss(bt, bs, None, np.ones((2, 4))).item()
    out.append(CheckResult("loss", "freekd unmasked ungated = flat L1", abs(v - flat) <= 1e-10, abs(v - flat), 1e-10))
    return out


def detachment_suite(seed: int = 0) -> list[CheckResult]:
    """Stage-two loss must not push gradient into the prompt."""
    rng = np.random.default_rng(seed)
    ft = rng.normal(size=(2, 4, 16, 16))
    bt = _bands(Tensor(ft), 3)
    prompt = FrequencyPrompt(Tensor(rng.normal(size=(len(bt), 2, 4)), requires_grad=True), list(bt.labels), True)
    masks = band_masks(bt, prompt)  # built with grad enabled on purpose
    fs = Tensor(rng.normal(size=ft.shape), requires_grad=True)
    omega = Tensor(rng.uniform(0.1, 1.0, size=(2, 4)), requires_grad=True)
    loss = freekd_loss(bt, _bands(fs, 3), masks, omega)
    loss.backward()
    g = prompt.params.grad
    norm = 0.0 if g is None else float(np.max(np.abs(g)))
    student_norm = float(np.max(np.abs(fs.grad))) if fs.grad is not None else 0.0
    return [
        CheckResult("detach", "prompt gradient from distillation loss", norm == 0.0, norm, 0.0),
        CheckResult("detach", "student gradient is nonzero", student_norm > 0.0, student_norm, 0.0),
    ]


SUITES = {
    "transform": reconstruction_suite,
    "gradient": gradient_suite,
    "loss": loss_suite,
    "detach": detachment_suite,
}


def run_all(names=None) -> list[CheckResult]:
    results = []
    for name in names or SUITES:
        results.extend(SUITES[name]())
    return results
