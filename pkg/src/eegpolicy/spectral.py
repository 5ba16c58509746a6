"""Multitaper band-power features.

Relative theta/alpha power per channel and recording condition, computed
from epoch-averaged multitaper spectra and integrated with composite
Simpson's rule. 54 channels x 2 bands x 2 conditions = 216 features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .eeg_io import EYES_CLOSED, EYES_OPEN
from .preprocess import EpochSet

log = logging.getLogger(__name__)

THETA_BAND = (4.0, 7.0)
ALPHA_BAND = (8.0, 12.0)
TOTAL_BAND = (1.0, 50.0)

_CONDITION_TOKEN = {EYES_OPEN: "open", EYES_CLOSED: "close"}


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class TaperSet:
    tapers: np.ndarray          # K x n, orthonormal rows
    time_bandwidth: float
    concentrations: np.ndarray  # K eigenvalues of the concentration operator

    def __post_init__(self):
        t = np.ascontiguousarray(self.tapers, dtype=np.float64)
        lam = np.asarray(self.concentrations, dtype=np.float64)
        gram = t @ t.T
        if np.abs(gram - np.eye(t.shape[0])).max() > 1e-8:
            raise ValueError("tapers are not orthonormal")
        if lam.shape != (t.shape[0],):
            raise ValueError("one concentration per taper required")
        if np.any(lam <= 0) or np.any(lam > 1 + 1e-9):
            raise ValueError("concentrations must lie in (0, 1]")
        if np.any(np.diff(lam) > 1e-12):
            raise ValueError("concentrations must be non-increasing")
        t.flags.writeable = False
        lam.flags.writeable = False
        object.__setattr__(self, "tapers", t)
        object.__setattr__(self, "concentrations", lam)

    @property
    def k(self) -> int:
        return self.tapers.shape[0]

    @property
    def n(self) -> int:
        return self.tapers.shape[1]


@dataclass(frozen=True)
class Spectrum:
    freqs: np.ndarray
    psd: np.ndarray
    channel: str = ""

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=np.float64)
        p = np.asarray(self.psd, dtype=np.float64)
        if f.ndim != 1 or f.shape != p.shape:
            raise ValueError("freqs and psd must be matching vectors")
        df = np.diff(f)
        if f.size > 1 and (np.any(df <= 0)
                           or np.abs(df - df[0]).max() > 1e-9 * abs(df[0])):
            raise ValueError("frequency grid must be uniform and increasing")
        if np.any(p < 0):
            raise ValueError("psd must be non-negative")
        f.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "freqs", f)
        object.__setattr__(self, "psd", p)

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0])


def dpss_tapers(n: int, nw: float = 4.0, k: int = 7) -> TaperSet:
    """Top-k discrete prolate spheroidal sequences of length n.

    Eigenvectors of the classic symmetric tridiagonal commuting operator;
    concentrations evaluated against the dense sinc-kernel operator.
    """
    if not 1 <= k <= 2 * nw - 1:
        raise SpectralError(f"k must lie in [1, 2*nw-1] = [1, {2 * nw - 1:g}]")
    if n < k:
        raise SpectralError("need at least k samples")
    w = nw / n
    i = np.arange(n)
    diag = ((n - 1) / 2.0 - i) ** 2 * np.cos(2 * np.pi * w)
    off = i[1:] * (n - i[1:]) / 2.0
    _, vec = eigh_tridiagonal(diag, off, select="i", select_range=(n - k, n - 1))
    tapers = vec.T[::-1]  # most concentrated first
    for row in tapers:
        nz = row[np.abs(row) > 1e-12]
        if nz.size and nz[0] < 0:
            row *= -1.0
    lam = np.array([t @ _sinc_kernel_apply(t, w) for t in tapers])
    return TaperSet(tapers, float(nw), np.minimum(lam, 1.0))


def _sinc_kernel_apply(t: np.ndarray, w: float) -> np.ndarray:
    # Toeplitz matvec with K[i,j] = sin(2*pi*w*(i-j)) / (pi*(i-j)), diag 2w
    n = t.size
    d = np.arange(-(n - 1), n)
    safe = np.where(d == 0, 1, d)
    kernel = np.where(d == 0, 2 * w, np.sin(2 * np.pi * w * d) / (np.pi * safe))
    return np.convolve(kernel, t)[n - 1:2 * n - 1]


def multitaper_psd(x: np.ndarray, tapers: TaperSet,
                   sample_rate: float) -> Spectrum:
    """One-sided multitaper PSD, Parseval-consistent."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tapers.n,):
        raise SpectralError(
            f"signal length {x.shape} does not match taper length {tapers.n}")
    psd = _psd_from_tapered(x[None, None, :], tapers.tapers, sample_rate)[0, 0]
    freqs = np.fft.rfftfreq(tapers.n, 1.0 / sample_rate)
    return Spectrum(freqs, psd)


def _psd_from_tapered(x: np.ndarray, tapers: np.ndarray,
                      fs: float) -> np.ndarray:
    """x: (..., n) -> one-sided PSD (..., n//2+1); DC/Nyquist not doubled."""
    n = x.shape[-1]
    spec = np.fft.rfft(x[..., None, :] * tapers, axis=-1)
    psd = (2.0 / fs) * np.mean(spec.real ** 2 + spec.imag ** 2, axis=-2)
    psd[..., 0] *= 0.5
    if n % 2 == 0:
        psd[..., -1] *= 0.5
    return psd


def band_power(spec: Spectrum, band: tuple[float, float]) -> float:
    """Composite Simpson integral of the PSD over [band[0], band[1]]."""
    lo, hi = band
    if lo >= hi:
        raise SpectralError("band must be (lo, hi) with lo < hi")
    if lo < spec.freqs[0] - 1e-9 or hi > spec.freqs[-1] + 1e-9:
        raise SpectralError(
            f"band {band} outside grid [{spec.freqs[0]}, {spec.freqs[-1]}]")
    mask = (spec.freqs >= lo - 1e-9) & (spec.freqs <= hi + 1e-9)
    idx = np.nonzero(mask)[0]
    if idx.size < 3:
        raise SpectralError("band must span at least 3 grid points")
    if idx.size % 2 == 0:  # composite Simpson needs an odd point count
        log.debug("band %s: even point count %d, trimming one trailing point",
                  band, idx.size)
        idx = idx[:-1]
    return _simpson(spec.psd[idx], spec.df)


def _simpson(y: np.ndarray, h: float) -> float:
    weights = np.ones(y.size)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return float(h / 3.0 * (weights @ y))


def relative_band_power(spec: Spectrum, band: tuple[float, float],
                        total: tuple[float, float] = TOTAL_BAND) -> float:
    if band[0] < total[0] or band[1] > total[1]:
        raise SpectralError(f"band {band} not contained in total {total}")
    denom = band_power(spec, total)
    if denom <= 0:
        raise SpectralError("total power is zero; relative power undefined")
    return band_power(spec, band) / denom


# ---------------------------------------------------------------------------
# feature extraction

@dataclass(frozen=True)
class SpectralConfig:
    nw: float = 4.0
    k: int = 7
    theta: tuple[float, float] = THETA_BAND
    alpha: tuple[float, float] = ALPHA_BAND
    total: tuple[float, float] = TOTAL_BAND


@dataclass(frozen=True)
class BandFeatureRow:
    subject_id: str
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.names),):
            raise ValueError("one value per name required")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("relative powers must lie in [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def feature_name(channel: str, condition: str, band: str) -> str:
    return f"{channel.lower()}.{_CONDITION_TOKEN[condition]}.{band}"


def average_psd(epoch_sets: list[EpochSet], condition: str,
                channels: list[str], cfg: SpectralConfig,
                chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Multitaper PSD averaged over all surviving epochs of a condition.

    Returns (freqs, psd) with psd shaped channels x freqs.
    """
    sets = [es for es in epoch_sets if es.condition == condition]
    if not sets:
        raise SpectralError(f"no epoch sets for condition {condition!r}")
    n = sets[0].epochs.shape[2]
    fs = sets[0].sample_rate
    for es in sets:
        if es.epochs.shape[2] != n or es.sample_rate != fs:
            raise SpectralError("epoch sets disagree on length or rate")
    tapers = dpss_tapers(n, cfg.nw, cfg.k)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    total = np.zeros((len(channels), freqs.size))
    count = 0
    for es in sets:
        sel = [_index_of(es, ch) for ch in channels]
        kept = es.epochs[es.keep_mask][:, sel, :]
        for start in range(0, kept.shape[0], chunk):
            block = kept[start:start + chunk]
            total += _psd_from_tapered(block, tapers.tapers, fs).sum(axis=0)
            count += block.shape[0]
    if count == 0:
        raise SpectralError(f"condition {condition!r} has zero surviving epochs")
    return freqs, total / count


def _index_of(es: EpochSet, channel: str) -> int:
    try:
        return es.channel_names.index(channel)
    except ValueError:
        raise SpectralError(f"channel {channel!r} missing from epoch set") from None


def extract_features(epoch_sets: list[EpochSet], channels: list[str],
                     subject_id: str = "",
                     cfg: SpectralConfig = SpectralConfig()) -> BandFeatureRow:
    """216 relative band powers: channel x {open, close} x {theta, alpha}.

    Epoch sets sharing a condition are pooled (multi-block recordings);
    ratios are computed on the epoch-averaged PSD per condition.
    """
    names: list[str] = []
    values: list[float] = []
    for condition in (EYES_OPEN, EYES_CLOSED):
        freqs, psd = average_psd(epoch_sets, condition, channels, cfg)
        for i, ch in enumerate(channels):
            spec = Spectrum(freqs, psd[i], channel=ch)
            for band_name, band in (("theta", cfg.theta), ("alpha", cfg.alpha)):
                names.append(feature_name(ch, condition, band_name))
                values.append(relative_band_power(spec, band, cfg.total))
    return BandFeatureRow(subject_id, tuple(names), np.array(values))
