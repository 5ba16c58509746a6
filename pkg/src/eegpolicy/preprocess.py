"""Automatic EEG cleaning pipeline.

Stages, in the order `preprocess_recording` runs them: resample, notch
filter, band-pass filter, bad-channel detection + spherical-spline repair,
fixed-length epoching, cross-validated peak-to-peak epoch rejection,
common-average re-referencing, common-channel selection.

All operations are pure: they return new objects and never mutate inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from numpy.polynomial.legendre import legval
from scipy import signal

from .eeg_io import Channel, Recording, common_channel_names


class PreprocessError(ValueError):
    pass


class UpsamplingError(PreprocessError):
    pass


class BandOrderError(PreprocessError):
    pass


class MissingPositionError(PreprocessError):
    pass


class AllChannelsBadError(PreprocessError):
    pass


class DegenerateGridError(PreprocessError):
    pass


class MissingChannelError(PreprocessError):
    pass


# ---------------------------------------------------------------------------
# resampling and filtering

def resample(rec: Recording, target_rate: float) -> Recording:
    """Polyphase resampling with anti-alias filtering; downsampling only."""
    if target_rate <= 0:
        raise PreprocessError("target_rate must be positive")
    if target_rate > rec.sample_rate:
        raise UpsamplingError(
            f"cannot upsample from {rec.sample_rate} to {target_rate} Hz")
    if target_rate == rec.sample_rate:
        return rec
    ratio = (Fraction(target_rate).limit_denominator(1_000_000)
             / Fraction(rec.sample_rate).limit_denominator(1_000_000))
    out = signal.resample_poly(rec.data, ratio.numerator, ratio.denominator,
                               axis=1)
    n_out = int(rec.n_samples * ratio)  # floor
    return rec.with_data(out[:, :n_out], float(target_rate))


def _windowed_sinc(cutoffs: list[float], fs: float, n_samples: int,
                   pass_zero, transition_hz: float) -> np.ndarray:
    # Hamming transition width ~= 3.3 / n_taps (normalized)
    n_taps = int(math.ceil(3.3 * fs / transition_hz)) | 1
    n_taps = min(n_taps, max(3, 2 * n_samples - 1))  # both odd, min stays odd
    return signal.firwin(n_taps, cutoffs, pass_zero=pass_zero, fs=fs,
                         window="hamming")


def _filtfilt_same(data: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # symmetric odd-length taps + centered convolution = zero phase.
    # Reflect-pad so edge transients land on surrogate data, then trim.
    pad = min(len(taps) // 2, data.shape[1] - 1)
    padded = np.pad(data, ((0, 0), (pad, pad)), mode="reflect")
    out = signal.fftconvolve(padded, taps[None, :], mode="same", axes=1)
    return out[:, pad:padded.shape[1] - pad] if pad else out


def apply_filters(rec: Recording, notch: float = 60.0, high_pass: float = 1.0,
                  low_pass: float = 50.0, notch_width: float = 2.0) -> Recording:
    """Zero-phase FIR notch + band-pass (windowed sinc, Hamming)."""
    nyq = rec.sample_rate / 2.0
    if not (0 < high_pass < low_pass < nyq):
        raise BandOrderError(
            f"need 0 < high_pass < low_pass < Nyquist, got "
            f"({high_pass}, {low_pass}) at fs={rec.sample_rate}")
    if not (high_pass < notch < nyq):
        raise BandOrderError(f"notch {notch} outside ({high_pass}, {nyq})")
    n = rec.n_samples
    stop = _windowed_sinc([max(notch - notch_width, high_pass * 1.5),
                           min(notch + notch_width, nyq * 0.99)],
                          rec.sample_rate, n, True, 1.0)
    band = _windowed_sinc([high_pass, low_pass], rec.sample_rate, n, False,
                          min(max(0.25 * high_pass, 2.0), high_pass))
    out = _filtfilt_same(_filtfilt_same(rec.data, stop), band)
    return rec.with_data(out)


# ---------------------------------------------------------------------------
# bad channels

@dataclass(frozen=True)
class BadChannelConfig:
    deviation_z: float = 5.0
    correlation_min: float = 0.4
    correlation_window_s: float = 1.0
    predictability_min: float = 0.75
    ransac_trials: int = 50
    ransac_fraction: float = 0.25
    noisiness_z: float = 5.0
    noise_split_hz: float = 40.0
    seed: int = 0


@dataclass(frozen=True)
class BadChannelReport:
    deviation: dict[str, float]       # robust z of robust amplitude
    correlation: dict[str, float]     # min over windows of max |r| vs others
    predictability: dict[str, float]  # median RANSAC prediction correlation
    noisiness: dict[str, float]       # robust z of HF/LF power ratio
    flagged: frozenset[str]
    criteria: dict[str, tuple[str, ...]]  # flagged name -> criteria that fired

    def __post_init__(self):
        for name in self.flagged:
            if not self.criteria.get(name):
                raise ValueError(f"{name} flagged without a firing criterion")


def _robust_z(values: np.ndarray) -> np.ndarray:
    med = np.median(values)
    scale = 1.4826 * np.median(np.abs(values - med))
    if scale == 0:
        return np.where(values == med, 0.0, np.sign(values - med) * np.inf)
    return (values - med) / scale


def _window_correlations(data: np.ndarray, win: int) -> np.ndarray:
    """Per channel: min over windows of max |Pearson r| with any other."""
    n_ch, n = data.shape
    n_win = max(n // win, 1)
    scores = np.full(n_ch, np.inf)
    for w in range(n_win):
        seg = data[:, w * win:min((w + 1) * win, n)]
        segc = seg - seg.mean(axis=1, keepdims=True)
        norm = np.sqrt((segc ** 2).sum(axis=1))
        unit = segc / np.where(norm == 0, 1.0, norm)[:, None]
        c = np.abs(unit @ unit.T)
        c[norm == 0, :] = 0.0
        c[:, norm == 0] = 0.0
        np.fill_diagonal(c, 0.0)
        scores = np.minimum(scores, c.max(axis=1))
    return scores


def _spline_gram(cosang: np.ndarray, stiffness: int = 4,
                 n_terms: int = 50) -> np.ndarray:
    n = np.arange(1, n_terms + 1)
    coeffs = np.zeros(n_terms + 1)
    coeffs[1:] = (2 * n + 1) / (n * (n + 1)) ** stiffness
    return legval(np.clip(cosang, -1.0, 1.0), coeffs) / (4 * np.pi)


def spline_interpolation_matrix(source_pos: np.ndarray,
                                target_pos: np.ndarray,
                                reg: float = 1e-5) -> np.ndarray:
    """Map source-channel samples to spherical-spline estimates at targets."""
    g = source_pos.shape[0]
    G = _spline_gram(source_pos @ source_pos.T) + reg * np.eye(g)
    C = np.zeros((g + 1, g + 1))
    C[:g, :g] = G
    C[:g, g] = 1.0
    C[g, :g] = 1.0
    sol = np.linalg.solve(C, np.vstack([np.eye(g), np.zeros((1, g))]))
    Gt = _spline_gram(target_pos @ source_pos.T)
    return np.hstack([Gt, np.ones((target_pos.shape[0], 1))]) @ sol


def _positions(rec: Recording, names: list[str]) -> np.ndarray:
    missing = [n for n in names
               if rec.channels[rec.channel_names.index(n)].position is None]
    if missing:
        raise MissingPositionError(f"no montage position for {missing}")
    return np.array([rec.channels[rec.channel_names.index(n)].position
                     for n in names])


def detect_bad_channels(rec: Recording,
                        cfg: BadChannelConfig = BadChannelConfig()
                        ) -> BadChannelReport:
    if len(rec.channels) < 4:
        raise PreprocessError("bad-channel detection needs at least 4 channels")
    data = rec.data
    names = rec.channel_names

    med = np.median(data, axis=1, keepdims=True)
    amplitude = 1.4826 * np.median(np.abs(data - med), axis=1)
    dev_z = _robust_z(amplitude)

    corr = _window_correlations(
        data, max(int(round(cfg.correlation_window_s * rec.sample_rate)), 2))

    spec = np.abs(np.fft.rfft(data, axis=1)) ** 2
    freqs = np.fft.rfftfreq(rec.n_samples, 1.0 / rec.sample_rate)
    hi = spec[:, freqs > cfg.noise_split_hz].sum(axis=1)
    lo = spec[:, (freqs > 0) & (freqs <= cfg.noise_split_hz)].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf)
    finite = np.isfinite(ratio)
    noise_z = np.full(len(names), np.inf)
    if finite.any():
        noise_z[finite] = _robust_z(ratio[finite])

    pred = _ransac_predictability(rec, cfg)

    flagged: dict[str, list[str]] = {}

    def fire(i, criterion):
        flagged.setdefault(names[i], []).append(criterion)

    for i in range(len(names)):
        if np.abs(dev_z[i]) > cfg.deviation_z or amplitude[i] == 0:
            fire(i, "deviation")
        if corr[i] < cfg.correlation_min:
            fire(i, "correlation")
        if not np.isnan(pred[i]) and pred[i] < cfg.predictability_min:
            fire(i, "predictability")
        if noise_z[i] > cfg.noisiness_z:
            fire(i, "noisiness")

    return BadChannelReport(
        deviation=dict(zip(names, dev_z.tolist())),
        correlation=dict(zip(names, corr.tolist())),
        predictability=dict(zip(names, pred.tolist())),
        noisiness=dict(zip(names, noise_z.tolist())),
        flagged=frozenset(flagged),
        criteria={k: tuple(v) for k, v in flagged.items()},
    )


def _ransac_predictability(rec: Recording, cfg: BadChannelConfig) -> np.ndarray:
    """Median over trials of corr(channel, spline prediction from a random
    channel subset). Channels without positions score NaN.

    Channel order must not matter, so trials index into the sorted-name list.
    """
    names = rec.channel_names
    positioned = sorted(n for n, ch in zip(names, rec.channels)
                        if ch.position is not None)
    scores = np.full(len(names), np.nan)
    k = max(3, int(round(cfg.ransac_fraction * len(positioned))))
    if len(positioned) < k + 1 or cfg.ransac_trials <= 0:
        return scores
    pos = {n: rec.channels[names.index(n)].position for n in positioned}
    idx = {n: names.index(n) for n in positioned}
    data = rec.data
    centered = data - data.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    rng = np.random.default_rng(cfg.seed)
    trials: dict[str, list[float]] = {n: [] for n in positioned}
    for _ in range(cfg.ransac_trials):
        subset = sorted(rng.choice(len(positioned), size=k, replace=False))
        src = [positioned[j] for j in subset]
        dst = [n for n in positioned if n not in src]
        if not dst:
            continue
        M = spline_interpolation_matrix(
            np.array([pos[n] for n in src]), np.array([pos[n] for n in dst]))
        predicted = M @ data[[idx[n] for n in src]]
        predicted -= predicted.mean(axis=1, keepdims=True)
        pnorm = np.sqrt((predicted ** 2).sum(axis=1))
        for row, n in enumerate(dst):
            denom = pnorm[row] * norms[idx[n]]
            r = (predicted[row] @ centered[idx[n]]) / denom if denom > 0 else 0.0
            trials[n].append(r)
    for n in positioned:
        if trials[n]:
            scores[idx[n]] = float(np.median(trials[n]))
    return scores


def interpolate_bad_channels(rec: Recording,
                             report: BadChannelReport) -> Recording:
    """Replace flagged channels with spherical-spline estimates."""
    bad = [n for n in rec.channel_names if n in report.flagged]
    if not bad:
        return rec
    good = [n for n in rec.channel_names if n not in report.flagged]
    if not good:
        raise AllChannelsBadError("every channel is flagged; nothing to "
                                  "interpolate from")
    good_pos = _positions(rec, good)
    bad_pos = _positions(rec, bad)
    M = spline_interpolation_matrix(good_pos, bad_pos)
    good_idx = [rec.channel_names.index(n) for n in good]
    data = np.array(rec.data)
    estimates = M @ rec.data[good_idx]
    for row, n in enumerate(bad):
        data[rec.channel_names.index(n)] = estimates[row]
    return rec.with_data(data)


# ---------------------------------------------------------------------------
# epochs

@dataclass(frozen=True)
class EpochSet:
    epochs: np.ndarray  # n_epochs x channels x samples
    channel_names: tuple[str, ...]
    sample_rate: float
    condition: str
    block_index: int
    keep_mask: np.ndarray
    per_channel_thresholds: np.ndarray | None = None
    log: tuple[str, ...] = ()

    def __post_init__(self):
        epochs = np.ascontiguousarray(self.epochs, dtype=np.float64)
        if epochs.ndim != 3 or epochs.shape[1] != len(self.channel_names):
            raise ValueError("epochs must be n_epochs x channels x samples")
        mask = np.asarray(self.keep_mask, dtype=bool)
        if mask.shape != (epochs.shape[0],):
            raise ValueError("keep_mask length must equal epoch count")
        epochs.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "epochs", epochs)
        object.__setattr__(self, "keep_mask", mask)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def n_epochs(self) -> int:
        return self.epochs.shape[0]

    @property
    def kept(self) -> np.ndarray:
        return self.epochs[self.keep_mask]

    def select_channels(self, wanted: list[str]) -> "EpochSet":
        missing = [n for n in wanted if n not in self.channel_names]
        if missing:
            raise MissingChannelError(f"channels not present: {missing}")
        idx = [self.channel_names.index(n) for n in wanted]
        thr = self.per_channel_thresholds
        return replace(self, epochs=self.epochs[:, idx, :],
                       channel_names=tuple(wanted),
                       per_channel_thresholds=None if thr is None else thr[idx])


def segment_epochs(rec: Recording, length_s: float = 2.0) -> EpochSet:
    """Non-overlapping fixed-length epochs; trailing partial window dropped."""
    n_per = length_s * rec.sample_rate
    if abs(n_per - round(n_per)) > 1e-9:
        raise PreprocessError(
            f"epoch length {length_s}s is not a whole number of samples "
            f"at {rec.sample_rate} Hz")
    n_per = int(round(n_per))
    n_ep = rec.n_samples // n_per
    if n_ep == 0:
        raise PreprocessError("recording shorter than one epoch")
    trimmed = rec.data[:, :n_ep * n_per]
    epochs = trimmed.reshape(len(rec.channels), n_ep, n_per).transpose(1, 0, 2)
    return EpochSet(epochs, tuple(rec.channel_names), rec.sample_rate,
                    rec.condition, rec.block_index, np.ones(n_ep, dtype=bool))


def default_threshold_grid(es: EpochSet, n_points: int = 20) -> np.ndarray:
    """Quantiles of observed peak-to-peak values, topped by never-reject."""
    ptp = np.ptp(es.epochs, axis=2)
    grid = np.quantile(ptp, np.linspace(0.5, 1.0, n_points))
    return np.unique(np.append(grid, grid[-1] * 1.01 + 1e-12))


def reject_epochs(es: EpochSet, folds: int = 5,
                  threshold_grid: np.ndarray | None = None,
                  flag_fraction: float = 0.1, seed: int = 0) -> EpochSet:
    """Learn per-channel peak-to-peak thresholds by K-fold CV, then mask
    epochs that exceed their threshold on more than `flag_fraction` of
    channels.

    CV error for a (channel, threshold) pair: RMS difference between the
    mean of threshold-surviving training epochs and the pointwise median of
    validation epochs. Ties prefer the largest threshold.
    """
    if es.n_epochs < 2 * folds:
        raise PreprocessError(f"need at least {2 * folds} epochs for "
                              f"{folds}-fold rejection")
    grid = default_threshold_grid(es) if threshold_grid is None \
        else np.asarray(threshold_grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise PreprocessError("threshold grid must be non-empty and ascending")

    n_ep, n_ch, _ = es.epochs.shape
    ptp = np.ptp(es.epochs, axis=2)  # n_ep x n_ch
    order = np.random.default_rng(seed).permutation(n_ep)
    fold_of = np.empty(n_ep, dtype=int)
    for k, chunk in enumerate(np.array_split(order, folds)):
        fold_of[chunk] = k

    log: list[str] = [f"fold assignment: {folds} contiguous blocks after "
                      f"seeded shuffle (seed={seed})"]
    thresholds = np.empty(n_ch)
    for c in range(n_ch):
        errors = np.zeros(grid.size)
        degenerate = np.zeros(grid.size, dtype=bool)
        for k in range(folds):
            val = fold_of == k
            train = ~val
            val_median = np.median(es.epochs[val, c, :], axis=0)
            tr_ptp = ptp[train, c]
            sort = np.argsort(tr_ptp, kind="stable")
            csum = np.cumsum(es.epochs[train][sort][:, c, :], axis=0)
            counts = np.searchsorted(tr_ptp[sort], grid, side="right")
            degenerate |= counts == 0
            for j in np.nonzero(counts)[0]:
                mean_surv = csum[counts[j] - 1] / counts[j]
                errors[j] += math.sqrt(np.mean((mean_surv - val_median) ** 2))
        usable = ~degenerate
        if not usable.any():
            raise DegenerateGridError(
                f"no grid point keeps any training epoch on channel "
                f"{es.channel_names[c]}")
        if degenerate.any():
            log.append(f"channel {es.channel_names[c]}: skipped "
                       f"{int(degenerate.sum())} grid points with empty "
                       "training survivors")
        errors[degenerate] = np.inf
        best = grid.size - 1 - int(np.argmin(errors[::-1]))  # tie -> largest
        thresholds[c] = grid[best]

    exceed_frac = (ptp > thresholds[None, :]).mean(axis=1)
    keep = es.keep_mask & (exceed_frac <= flag_fraction)
    return replace(es, keep_mask=keep, per_channel_thresholds=thresholds,
                   log=es.log + tuple(log))


def rereference_common_average(es: EpochSet) -> EpochSet:
    """Subtract the instantaneous channel mean from every sample."""
    if len(es.channel_names) < 2:
        raise PreprocessError("common average needs at least 2 channels")
    return replace(es, epochs=es.epochs - es.epochs.mean(axis=1, keepdims=True))


def select_common_channels(rec: Recording, wanted: list[str]) -> Recording:
    missing = [n for n in wanted if n not in rec.channel_names]
    if missing:
        raise MissingChannelError(f"channels not present: {missing}")
    idx = [rec.channel_names.index(n) for n in wanted]
    return Recording(tuple(rec.channels[i] for i in idx), rec.sample_rate,
                     rec.data[idx], rec.condition, rec.block_index)


# ---------------------------------------------------------------------------
# composed pipeline

@dataclass(frozen=True)
class PreprocessConfig:
    target_rate: float = 250.0
    notch_hz: float = 60.0
    high_pass_hz: float = 1.0
    low_pass_hz: float = 50.0
    epoch_length_s: float = 2.0
    reject_folds: int = 5
    threshold_grid: tuple[float, ...] | None = None  # None -> data quantiles
    epoch_flag_fraction: float = 0.1
    common_channels: tuple[str, ...] | None = None   # None -> bundled list
    bad_channels: BadChannelConfig = field(default_factory=BadChannelConfig)
    seed: int = 0


@dataclass
class QCReport:
    condition: str
    block_index: int
    flagged_channels: dict[str, tuple[str, ...]]
    per_channel_thresholds: dict[str, float]
    n_epochs_total: int
    n_epochs_rejected: int
    rms_before: float
    rms_after: float
    notes: tuple[str, ...]

    def to_json(self) -> str:
        out = dict(self.__dict__)
        out["flagged_channels"] = {k: list(v)
                                   for k, v in self.flagged_channels.items()}
        out["notes"] = list(self.notes)
        return json.dumps(out, indent=1, sort_keys=True)


def preprocess_recording(rec: Recording,
                         cfg: PreprocessConfig = PreprocessConfig()
                         ) -> tuple[EpochSet, QCReport]:
    rms_before = float(np.sqrt(np.mean(rec.data ** 2)))
    rec = resample(rec, min(cfg.target_rate, rec.sample_rate))
    rec = apply_filters(rec, cfg.notch_hz, cfg.high_pass_hz, cfg.low_pass_hz)
    report = detect_bad_channels(rec, cfg.bad_channels)
    rec = interpolate_bad_channels(rec, report)
    es = segment_epochs(rec, cfg.epoch_length_s)
    grid = None if cfg.threshold_grid is None else np.asarray(cfg.threshold_grid)
    es = reject_epochs(es, cfg.reject_folds, grid,
                       cfg.epoch_flag_fraction, cfg.seed)
    es = rereference_common_average(es)
    wanted = list(cfg.common_channels) if cfg.common_channels is not None \
        else common_channel_names()
    es = es.select_channels(wanted)
    kept = es.kept
    rms_after = float(np.sqrt(np.mean(kept ** 2))) if kept.size else 0.0
    qc = QCReport(
        condition=rec.condition,
        block_index=rec.block_index,
        flagged_channels=dict(report.criteria),
        per_channel_thresholds={} if es.per_channel_thresholds is None else
        dict(zip(es.channel_names, es.per_channel_thresholds.tolist())),
        n_epochs_total=es.n_epochs,
        n_epochs_rejected=int((~es.keep_mask).sum()),
        rms_before=rms_before,
        rms_after=rms_after,
        notes=es.log + (f"epoch flagged when >{cfg.epoch_flag_fraction:.0%} "
                        "of channels exceed their threshold",),
    )
    return es, qc
