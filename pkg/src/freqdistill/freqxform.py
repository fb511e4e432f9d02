"""Multi-level 2-D frequency analysis and synthesis on N×C×H×W tensors.

The wavelet transform is a separable periodized filter bank: along one axis
of even length ``n`` the analysis step computes

    low[k]  = sum_j h[j] * x[(2k + j) mod n]
    high[k] = sum_j g[j] * x[(2k + j) mod n]

and recurses on the LL quadrant.  Each axis step is a recorded op whose
backward is the exact adjoint (analysis gathers, synthesis scatters).
DCT and DFT planes are cut into the same dyadic layout so a level-``l``
decomposition always yields ``3l + 1`` labelled bands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .diffcore import Tensor, concat, getitem, linear_axis, pad2d, scale
from .diffcore.tensor import DimensionError, as_tensor
from .imageio import write_pgm

SQRT2 = np.sqrt(2.0)


class StructureError(ValueError):
    """A BandSet is missing bands or has the wrong layout."""


@dataclass(frozen=True)
class Wavelet:
    """Analysis/synthesis taps in correlation alignment (see module doc)."""

    name: str
    analysis_low: tuple[float, ...]
    analysis_high: tuple[float, ...]
    synthesis_low: tuple[float, ...]
    synthesis_high: tuple[float, ...]
    orthonormal: bool = True


def _qmf(h: tuple[float, ...]) -> tuple[float, ...]:
    n = len(h)
    return tuple((-1) ** j * h[n - 1 - j] for j in range(n))


_H_HAAR = (1 / SQRT2, 1 / SQRT2)
_S3 = np.sqrt(3.0)
_H_DB2 = tuple(float(v) for v in np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * SQRT2))

HAAR = Wavelet("haar", _H_HAAR, _qmf(_H_HAAR), _H_HAAR, _qmf(_H_HAAR))
DB2 = Wavelet("db2", _H_DB2, _qmf(_H_DB2), _H_DB2, _qmf(_H_DB2))
WAVELETS = {w.name: w for w in (HAAR, DB2)}


def get_wavelet(name) -> Wavelet:
    if isinstance(name, Wavelet):
        return name
    try:
        return WAVELETS[name]
    except KeyError:
        raise ValueError(f"unknown wavelet {name!r}; available: {sorted(WAVELETS)}") from None


def _filter_matrix(low, high, n: int) -> np.ndarray:
    """Rows ``0..n/2-1`` apply the low filter, the rest the high filter."""
    if n % 2:
        raise DimensionError(f"axis extent {n} must be even")
    half = n // 2
    m = np.zeros((n, n))
    for k in range(half):
        for j, c in enumerate(low):
            m[k, (2 * k + j) % n] += c
        for j, c in enumerate(high):
            m[half + k, (2 * k + j) % n] += c
    return m


@lru_cache(maxsize=None)
def analysis_matrix(wavelet: Wavelet, n: int) -> np.ndarray:
    m = _filter_matrix(wavelet.analysis_low, wavelet.analysis_high, n)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def synthesis_matrix(wavelet: Wavelet, n: int) -> np.ndarray:
    # synthesis scatters each coefficient back along its filter support
    m = _filter_matrix(wavelet.synthesis_low, wavelet.synthesis_high, n).T.copy()
    m.setflags(write=False)
    return m


def _gather_index(n: int, taps: int) -> np.ndarray:
    k = np.arange(n // 2)[:, None]
    j = np.arange(taps)[None, :]
    return (2 * k + j) % n


def _analyze(arr: np.ndarray, low, high) -> np.ndarray:
    """Filter + decimate the last axis; output is [low half | high half]."""
    n = arr.shape[-1]
    if n % 2:
        raise DimensionError(f"axis extent {n} must be even")
    idx = _gather_index(n, max(len(low), len(high)))
    lo = np.zeros(arr.shape[:-1] + (n // 2,))
    hi = np.zeros_like(lo)
    # tap-by-tap accumulation keeps opposite-signed taps cancelling exactly
    for j, c in enumerate(low):
        lo = lo + c * arr[..., idx[:, j]]
    for j, c in enumerate(high):
        hi = hi + c * arr[..., idx[:, j]]
    return np.concatenate([lo, hi], axis=-1)


def _synthesize(arr: np.ndarray, low, high) -> np.ndarray:
    """Scatter [low | high] coefficients back along their filter supports."""
    n = arr.shape[-1]
    half = n // 2
    idx = _gather_index(n, max(len(low), len(high)))
    lo, hi = arr[..., :half], arr[..., half:]
    out = np.zeros(arr.shape)
    for j in range(idx.shape[1]):
        contrib = 0.0
        if j < len(low):
            contrib = contrib + low[j] * lo
        if j < len(high):
            contrib = contrib + high[j] * hi
        out[..., idx[:, j]] += contrib
    return out


def _along(fn, arr: np.ndarray, axis: int, *taps) -> np.ndarray:
    return np.moveaxis(fn(np.moveaxis(arr, axis, -1), *taps), -1, axis)


def wavelet_analysis(x, wavelet: Wavelet, axis: int) -> Tensor:
    """One periodized analysis step along ``axis``; adjoint is the scatter form."""
    x = as_tensor(x)
    taps = (wavelet.analysis_low, wavelet.analysis_high)
    out = _along(_analyze, x.data, axis, *taps)
    return Tensor._from_op(out, "wavelet_analysis", (x,),
                           lambda g: (_along(_synthesize, g, axis, *taps),))


def wavelet_synthesis(x, wavelet: Wavelet, axis: int) -> Tensor:
    x = as_tensor(x)
    taps = (wavelet.synthesis_low, wavelet.synthesis_high)
    out = _along(_synthesize, x.data, axis, *taps)
    return Tensor._from_op(out, "wavelet_synthesis", (x,),
                           lambda g: (_along(_analyze, g, axis, *taps),))


# -- band containers ---------------------------------------------------------

@dataclass(frozen=True)
class PadRecord:
    height: int
    width: int
    pad_h: int
    pad_w: int


def band_labels(level: int) -> list[str]:
    """Coarse-to-fine labels: LLl, HLl, LHl, HHl, HL(l-1), ..., HH1."""
    labels = [f"LL{level}"]
    for k in range(level, 0, -1):
        labels.extend([f"HL{k}", f"LH{k}", f"HH{k}"])
    return labels


def band_level(label: str) -> int:
    return int(label[2:])


def is_low_band(label: str) -> bool:
    return label.startswith("LL")


@dataclass
class BandSet:
    level: int
    bands: list[tuple[str, Tensor]]
    pad_record: PadRecord
    transform: str = "dwt"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = [lab for lab, _ in self.bands]
        if len(set(labels)) != len(labels):
            raise StructureError(f"duplicate band labels {labels}")

    def __len__(self) -> int:
        return len(self.bands)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.bands)

    def __getitem__(self, label: str) -> Tensor:
        for lab, t in self.bands:
            if lab == label:
                return t
        raise StructureError(f"band {label!r} not present")

    @property
    def labels(self) -> list[str]:
        return [lab for lab, _ in self.bands]

    @property
    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.bands]

    def replace(self, tensors) -> "BandSet":
        tensors = list(tensors)
        if len(tensors) != len(self.bands):
            raise StructureError("replacement must supply every band")
        return BandSet(self.level, [(lab, t) for (lab, _), t in zip(self.bands, tensors)],
                       self.pad_record, self.transform, dict(self.meta))

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "BandSet":
        return self.replace(fn(lab, t) for lab, t in self.bands)

    def detach(self) -> "BandSet":
        return self.replace(t.detach() for t in self.tensors)

    def validate(self) -> None:
        expected = band_labels(self.level)
        missing = [lab for lab in expected if lab not in self.labels]
        if missing:
            raise StructureError(f"missing bands {missing}")
        if self.labels != expected:
            raise StructureError(f"bands out of order: {self.labels}")
        ph = self.pad_record.height + self.pad_record.pad_h
        pw = self.pad_record.width + self.pad_record.pad_w
        for lab, t in self.bands:
            k = band_level(lab)
            if t.shape[-2:] != (ph >> k, pw >> k):
                raise StructureError(f"band {lab} has extent {t.shape[-2:]}, expected {(ph >> k, pw >> k)}")


def _check_input(x: Tensor, level: int) -> tuple[int, int, int, int]:
    if level < 1:
        raise DimensionError("decomposition level must be >= 1")
    if x.ndim != 4 or 0 in x.shape:
        raise DimensionError(f"expected non-empty N×C×H×W input, got {x.shape}")
    h, w = x.shape[-2:]
    step = 1 << level
    pad_h, pad_w = (-h) % step, (-w) % step
    return h, w, pad_h, pad_w


def partition_plane(plane: Tensor, level: int) -> list[tuple[str, Tensor]]:
    """Cut a coefficient plane into the dyadic Mallat layout."""
    h, w = plane.shape[-2:]
    bands = [(f"LL{level}", getitem(plane, (Ellipsis, slice(0, h >> level), slice(0, w >> level))))]
    for k in range(level, 0, -1):
        hk, wk = h >> k, w >> k
        bands.append((f"HL{k}", getitem(plane, (Ellipsis, slice(0, hk), slice(wk, 2 * wk)))))
        bands.append((f"LH{k}", getitem(plane, (Ellipsis, slice(hk, 2 * hk), slice(0, wk)))))
        bands.append((f"HH{k}", getitem(plane, (Ellipsis, slice(hk, 2 * hk), slice(wk, 2 * wk)))))
    return bands


def assemble_plane(bands: BandSet) -> Tensor:
    """Inverse of :func:`partition_plane`."""
    bands.validate()
    cur = bands[f"LL{bands.level}"]
    for k in range(bands.level, 0, -1):
        top = concat([cur, bands[f"HL{k}"]], axis=-1)
        bottom = concat([bands[f"LH{k}"], bands[f"HH{k}"]], axis=-1)
        cur = concat([top, bottom], axis=-2)
    return cur


def _crop(x: Tensor, rec: PadRecord) -> Tensor:
    if rec.pad_h == 0 and rec.pad_w == 0:
        return x
    return getitem(x, (Ellipsis, slice(0, rec.height), slice(0, rec.width)))


# -- wavelet transform -------------------------------------------------------

def dwt2d(x, wavelet="haar", level: int = 3) -> BandSet:
    """Level-``level`` separable DWT of every channel; zero-pads to a multiple of 2^level."""
    x = as_tensor(x)
    wav = get_wavelet(wavelet)
    h, w, pad_h, pad_w = _check_input(x, level)
    cur = pad2d(x, pad_h, pad_w)
    details = []
    for _ in range(level):
        ch, cw = cur.shape[-2:]
        y = wavelet_analysis(cur, wav, axis=-1)
        y = wavelet_analysis(y, wav, axis=-2)
        hh, hw = ch // 2, cw // 2
        details.append((
            getitem(y, (Ellipsis, slice(0, hh), slice(hw, cw))),
            getitem(y, (Ellipsis, slice(hh, ch), slice(0, hw))),
            getitem(y, (Ellipsis, slice(hh, ch), slice(hw, cw))),
        ))
        cur = getitem(y, (Ellipsis, slice(0, hh), slice(0, hw)))
    bands = [(f"LL{level}", cur)]
    for k in range(level, 0, -1):
        hl, lh, hh_ = details[k - 1]
        bands.extend([(f"HL{k}", hl), (f"LH{k}", lh), (f"HH{k}", hh_)])
    return BandSet(level, bands, PadRecord(h, w, pad_h, pad_w), "dwt", {"wavelet": wav.name})


def idwt2d(bands: BandSet, wavelet="haar") -> Tensor:
    """Exact inverse of :func:`dwt2d`, cropped back to the original extent."""
    wav = get_wavelet(wavelet)
    bands.validate()
    cur = bands[f"LL{bands.level}"]
    for k in range(bands.level, 0, -1):
        top = concat([cur, bands[f"HL{k}"]], axis=-1)
        bottom = concat([bands[f"LH{k}"], bands[f"HH{k}"]], axis=-1)
        y = concat([top, bottom], axis=-2)
        y = wavelet_synthesis(y, wav, axis=-2)
        cur = wavelet_synthesis(y, wav, axis=-1)
    return _crop(cur, bands.pad_record)


# -- cosine / Fourier alternatives -------------------------------------------

@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II: ``D[u, m] = a(u) cos(pi (2m + 1) u / 2n)``."""
    u = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * m + 1) * u / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= SQRT2
    d.setflags(write=False)
    return d


def frequency_order(n: int) -> np.ndarray:
    """DFT bins sorted by |frequency|: 0, 1, n-1, 2, n-2, ..."""
    order = [0]
    for f in range(1, n // 2 + 1):
        order.append(f)
        if n - f != f:
            order.append(n - f)
    return np.array(order[:n])


@lru_cache(maxsize=None)
def dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine parts of the DFT with rows in :func:`frequency_order`."""
    u = frequency_order(n)[:, None]
    m = np.arange(n)[None, :]
    ang = 2 * np.pi * u * m / n
    c, s = np.cos(ang), np.sin(ang)
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def dct2d(x, level: int = 3) -> BandSet:
    x = as_tensor(x)
    h, w, pad_h, pad_w = _check_input(x, level)
    xp = pad2d(x, pad_h, pad_w)
    ph, pw = xp.shape[-2:]
    plane = linear_axis(linear_axis(xp, dct_matrix(pw), -1), dct_matrix(ph), -2)
    return BandSet(level, partition_plane(plane, level), PadRecord(h, w, pad_h, pad_w), "dct")


def idct2d(bands: BandSet) -> Tensor:
    plane = assemble_plane(bands)
    ph, pw = plane.shape[-2:]
    x = linear_axis(linear_axis(plane, dct_matrix(ph).T, -2), dct_matrix(pw).T, -1)
    return _crop(x, bands.pad_record)


def dft2d(x, level: int = 3, norm: str = "backward") -> BandSet:
    """2-D DFT as [real; imaginary] stacked on the channel axis (2C channels).

    ``norm="backward"`` leaves the forward transform unscaled (so
    ``sum |X|^2 = H W sum x^2``); ``"ortho"`` scales by ``1/sqrt(HW)``.
    """
    x = as_tensor(x)
    h, w, pad_h, pad_w = _check_input(x, level)
    xp = pad2d(x, pad_h, pad_w)
    ph, pw = xp.shape[-2:]
    ch_, sh_ = dft_matrices(ph)
    cw_, sw_ = dft_matrices(pw)
    xc = linear_axis(xp, cw_, -1)
    xs = linear_axis(xp, sw_, -1)
    real = linear_axis(xc, ch_, -2) - linear_axis(xs, sh_, -2)
    imag = scale(linear_axis(xc, sh_, -2) + linear_axis(xs, ch_, -2), -1.0)
    plane = concat([real, imag], axis=1)
    if norm == "ortho":
        plane = scale(plane, 1.0 / np.sqrt(ph * pw))
    elif norm != "backward":
        raise ValueError(f"unknown norm {norm!r}")
    return BandSet(level, partition_plane(plane, level), PadRecord(h, w, pad_h, pad_w), "dft",
                   {"norm": norm})


def idft2d(bands: BandSet) -> Tensor:
    """Real part of the inverse DFT of a :func:`dft2d` plane."""
    plane = assemble_plane(bands)
    norm = bands.meta.get("norm", "backward")
    n2, ph, pw = plane.shape[1], plane.shape[-2], plane.shape[-1]
    c = n2 // 2
    xr, xi = plane[:, :c], plane[:, c:]
    ch_, sh_ = dft_matrices(ph)
    cw_, sw_ = dft_matrices(pw)

    def both(t, mh, mw):
        return linear_axis(linear_axis(t, mh.T, -2), mw.T, -1)

    x = both(xr, ch_, cw_) - both(xr, sh_, sw_) - both(xi, sh_, cw_) - both(xi, ch_, sw_)
    factor = 1.0 / (ph * pw) if norm == "backward" else 1.0 / np.sqrt(ph * pw)
    return _crop(scale(x, factor), bands.pad_record)


# -- registry ----------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    """A forward/inverse pair producing ``channel_factor * C`` band channels."""

    name: str
    forward: Callable[[Tensor, int], BandSet]
    inverse: Callable[[BandSet], Tensor]
    channel_factor: int = 1


def get_transform(name: str, wavelet="haar") -> Transform:
    if name == "dwt":
        wav = get_wavelet(wavelet)
        return Transform("dwt", lambda x, level: dwt2d(x, wav, level), lambda b: idwt2d(b, wav))
    if name == "dct":
        return Transform("dct", dct2d, idct2d)
    if name == "dft":
        # unit-norm scaling keeps band magnitudes comparable to the wavelet bands
        return Transform("dft", lambda x, level: dft2d(x, level, norm="ortho"), idft2d, channel_factor=2)
    raise ValueError(f"unknown transform {name!r}")


def dump_bandset(bands: BandSet, outdir, prefix: str = "band", sample: int = 0,
                 channel: int | None = None, comment: str | None = None) -> list[Path]:
    """Write one min-max normalized PGM per band; ``channel=None`` averages |coefficients|."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for lab, t in bands:
        arr = t.data[sample]
        img = np.abs(arr).mean(axis=0) if channel is None else arr[channel]
        p = outdir / f"{prefix}_{lab}.pgm"
        write_pgm(p, img, comment=comment)
        paths.append(p)
    return paths
