import numpy as np
import pytest

from eegpolicy.eeg_io import Channel, Recording, standard_montage


def pink_noise(rng, shape, fs):
    """1/f-shaped noise, unit variance along the last axis."""
    w = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    freqs = np.fft.rfftfreq(shape[-1], 1.0 / fs)
    w[..., 1:] /= np.maximum(freqs[1:], 1.0)
    x = np.fft.irfft(w, shape[-1], axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def smooth_scalp_recording(seed=0, n_sources=6, fs=250.0, duration=20.0,
                           noise=0.05, smoothness=2.0, condition="eyes_open",
                           block_index=1):
    """Synthetic EEG with spatially smooth source mixing.

    Sources are oscillation + pink-noise mixtures projected through
    gain fields that decay smoothly over the scalp, plus one spatially
    uniform background source; per-channel sensor noise is pink so the
    high/low frequency power ratio stays homogeneous across channels.
    """
    montage = standard_montage()
    names = sorted(montage)
    pos = np.array([montage[n] for n in names])
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration * fs)) / fs
    n = t.size
    S = np.zeros((n_sources, n))
    for j in range(n_sources):
        f0 = rng.uniform(3, 20)
        S[j] = (np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
                + 2.0 * pink_noise(rng, (n,), fs))
    u = rng.standard_normal((n_sources, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    gains = np.exp(smoothness * (pos @ u.T - 1.0))
    background = (np.sin(2 * np.pi * 10.0 * t + rng.uniform(0, 2 * np.pi))
                  + 2.0 * pink_noise(rng, (n,), fs))
    data = gains @ S + background[None, :]
    data = 10.0 * data / np.std(data)
    data += noise * 10.0 * pink_noise(rng, (len(names), n), fs)
    channels = tuple(Channel(name, montage[name]) for name in names)
    return Recording(channels, fs, data, condition, block_index)


@pytest.fixture
def scalp_recording():
    return smooth_scalp_recording(seed=0)


def make_synthetic_study(root, n_subjects=6, seed=0, duration_s=24.0,
                         rate=250.0):
    """Raw study directory: per-subject eyes-open/closed recordings plus a
    subjects.csv with treatment, outcome, and two clinical covariates.

    Channels share alpha/theta source time courses through spatially smooth
    gains (real scalps are correlated; fully independent channels would trip
    every bad-channel detector at once).  Eyes-closed gets the classic alpha
    boost so the band-power features carry signal.
    """
    from pathlib import Path

    from eegpolicy.eeg_io import common_channel_names, save_recording

    rng = np.random.default_rng(seed)
    names = common_channel_names()
    lowered = {k.lower(): v for k, v in standard_montage().items()}
    channels = tuple(Channel(n, lowered.get(n.lower())) for n in names)
    pos = np.array([lowered.get(n.lower(), np.zeros(3)) for n in names])
    w_alpha = 1.0 + 0.4 * pos[:, 2] - 0.3 * pos[:, 1]
    w_theta = 1.0 + 0.3 * pos[:, 0]
    t = np.arange(int(duration_s * rate)) / rate
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = ["subject_id,treatment,outcome,age,site"]
    for i in range(n_subjects):
        sid = f"sub{i:02d}"
        sdir = root / sid
        sdir.mkdir(exist_ok=True)
        gain = rng.uniform(0.8, 1.2)
        for cond, boost in (("eyes_open", 1.0), ("eyes_closed", 2.2)):
            a_src = 10.0 * gain * boost * np.sin(
                2 * np.pi * 10.0 * t + rng.uniform(0, 2 * np.pi))
            t_src = 6.0 * gain * np.sin(
                2 * np.pi * 5.5 * t + rng.uniform(0, 2 * np.pi))
            data = (np.outer(w_alpha, a_src) + np.outer(w_theta, t_src)
                    + rng.normal(0, 2.0, size=(len(names), t.size)))
            rec = Recording(channels, rate, data, cond, 1)
            save_recording(rec, sdir / f"{cond}.json")
        rows.append(f"{sid},{i % 2},{(i // 2 + i) % 2},{30 + i},"
                    f"{'A' if i < 3 else 'B'}")
    (root / "subjects.csv").write_text("\n".join(rows) + "\n")
    return root
