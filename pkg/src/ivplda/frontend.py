"""Acoustic front-end: MFCC/PLP extraction, deltas, sliding CMN and energy VAD.

Everything operates at 8 kHz; 16 kHz input is low-pass filtered and
decimated first.  Both feature kinds share the framing code, so MFCC and PLP
streams computed from one signal are frame-aligned.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.fft import dct
from scipy.signal import firwin

from . import kernels
from .errors import DataError

TARGET_RATE = 8000


@dataclass(frozen=True)
class FrontendConfig:
    frame_length_s: float = 0.025
    frame_shift_s: float = 0.010
    num_ceps: int = 19  # plus log-energy -> 20 static dims
    preemphasis: float = 0.97
    fft_size: int = 256
    energy_floor: float = 1e-10
    num_mel_filters: int = 23
    mel_low_hz: float = 20.0
    mel_high_hz: float = 3800.0
    num_bark_filters: int = 17
    lpc_order: int = 12
    lifter: float = 22.0
    delta_window: int = 2
    cmn_window_s: float = 3.0
    vad_offset: float = -0.5  # threshold = mean + offset * std of log-energy
    vad_window: int = 11
    decimation_taps: int = 101

    @property
    def frame_length(self):
        return int(round(self.frame_length_s * TARGET_RATE))

    @property
    def frame_shift(self):
        return int(round(self.frame_shift_s * TARGET_RATE))


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate not in (8000, 16000):
            raise DataError(f"unsupported sample rate {self.sample_rate}; expected 8000 or 16000")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError("audio must be a non-empty mono sequence")
        object.__setattr__(self, "samples", samples)


@dataclass
class FeatureMatrix:
    data: np.ndarray
    energy_index: int = 0
    frame_period: float = 0.010
    kind: str = "mfcc"

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.shape[0] < 1:
            raise DataError("feature matrix has no frames")
        if not 0 <= self.energy_index < self.data.shape[1]:
            raise DataError(f"energy index {self.energy_index} outside {self.data.shape[1]} columns")

    @property
    def num_frames(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def with_data(self, data):
        return replace(self, data=data)


def to_8k(signal, config=FrontendConfig()):
    """Return samples at 8 kHz, decimating 16 kHz input after a 3.8 kHz FIR low-pass."""
    if signal.sample_rate == TARGET_RATE:
        return signal.samples
    taps = firwin(config.decimation_taps, 3800.0, fs=signal.sample_rate)
    filtered = np.convolve(signal.samples, taps, mode="same")
    return filtered[::2]


def frame_count(num_samples, config=FrontendConfig()):
    return (num_samples - config.frame_length) // config.frame_shift + 1


def _frames(signal, config):
    x = to_8k(signal, config)
    flen, fshift = config.frame_length, config.frame_shift
    if x.size < flen:
        raise DataError("utterance too short")
    T = frame_count(x.size, config)
    frames = np.lib.stride_tricks.sliding_window_view(x, flen)[::fshift][:T].copy()
    frames -= frames.mean(axis=1, keepdims=True)
    log_energy = np.log(np.maximum((frames**2).sum(axis=1), config.energy_floor))
    emph = frames.copy()
    emph[:, 1:] -= config.preemphasis * frames[:, :-1]
    emph[:, 0] -= config.preemphasis * frames[:, 0]
    emph *= np.hamming(flen)
    power = np.abs(np.fft.rfft(emph, n=config.fft_size, axis=1)) ** 2
    return power, log_energy


def _hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f) / 700.0)


def mel_filterbank(config=FrontendConfig()):
    nbins = config.fft_size // 2 + 1
    bin_mel = _hz_to_mel(np.arange(nbins) * TARGET_RATE / config.fft_size)
    edges = np.linspace(_hz_to_mel(config.mel_low_hz), _hz_to_mel(config.mel_high_hz),
                        config.num_mel_filters + 2)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - lo) / (mid - lo)
    down = (hi - bin_mel) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _hz_to_bark(f):
    return 6.0 * np.arcsinh(np.asarray(f) / 600.0)


def _bark_to_hz(z):
    return 600.0 * np.sinh(np.asarray(z) / 6.0)


def bark_filterbank(config=FrontendConfig()):
    """Critical-band filters equally spaced on the Bark scale, weighted by equal loudness."""
    nbins = config.fft_size // 2 + 1
    bin_bark = _hz_to_bark(np.arange(nbins) * TARGET_RATE / config.fft_size)
    centers = np.linspace(0.0, _hz_to_bark(TARGET_RATE / 2), config.num_bark_filters)
    z = bin_bark[None, :] - centers[:, None]
    wts = np.zeros_like(z)
    rise = (z >= -1.3) & (z < -0.5)
    flat = (z >= -0.5) & (z <= 0.5)
    fall = (z > 0.5) & (z <= 2.5)
    wts[rise] = 10.0 ** (2.5 * (z[rise] + 0.5))
    wts[flat] = 1.0
    wts[fall] = 10.0 ** (-(z[fall] - 0.5))
    w2 = (2.0 * np.pi * _bark_to_hz(centers)) ** 2
    loudness = (w2 + 56.8e6) * w2**2 / ((w2 + 6.3e6) ** 2 * (w2 + 0.38e9))
    return wts * loudness[:, None]


def _lifter(ceps, L):
    if L <= 0:
        return ceps
    n = np.arange(1, ceps.shape[1] + 1)
    return ceps * (1.0 + 0.5 * L * np.sin(np.pi * n / L))


def levinson(r, order):
    """Levinson-Durbin over rows of autocorrelations; returns (a, prediction error).

    ``a[:, 0] == 1`` and the predictor polynomial is ``1 + sum_k a_k z^-k``.
    """
    T = r.shape[0]
    a = np.zeros((T, order + 1))
    a[:, 0] = 1.0
    err = r[:, 0].copy()
    for i in range(1, order + 1):
        acc = r[:, i] + np.einsum("tj,tj->t", a[:, 1:i], r[:, i - 1:0:-1])
        k = -acc / err
        a[:, 1:i] = a[:, 1:i] + k[:, None] * a[:, i - 1:0:-1]
        a[:, i] = k
        err = err * (1.0 - k**2)
    return a, err


def lpc_to_cepstrum(a, num_ceps):
    """Cepstrum c_1..c_num_ceps of the all-pole model 1 / A(z)."""
    T, p1 = a.shape
    p = p1 - 1
    c = np.zeros((T, num_ceps + 1))
    for n in range(1, num_ceps + 1):
        acc = -a[:, n] if n <= p else np.zeros(T)
        for k in range(max(1, n - p), n):
            acc = acc - (k / n) * c[:, k] * a[:, n - k]
        c[:, n] = acc
    return c[:, 1:]


def compute_mfcc(signal, config=FrontendConfig()):
    """Log-energy plus ``num_ceps`` liftered mel cepstra (C1..Cn), energy in column 0."""
    power, log_energy = _frames(signal, config)
    fbank = np.log(np.maximum(power @ mel_filterbank(config).T, config.energy_floor))
    ceps = dct(fbank, type=2, norm="ortho", axis=1)[:, 1:config.num_ceps + 1]
    ceps = _lifter(ceps, config.lifter)
    data = np.column_stack([log_energy, ceps])
    return FeatureMatrix(data, 0, config.frame_shift_s, "mfcc")


def compute_plp(signal, config=FrontendConfig()):
    """PLP cepstra from a 12th-order all-pole fit to the loudness-compressed Bark spectrum."""
    power, log_energy = _frames(signal, config)
    bands = np.maximum(power @ bark_filterbank(config).T, config.energy_floor)
    bands = bands ** 0.33
    bands[:, 0] = bands[:, 1]
    bands[:, -1] = bands[:, -2]
    nb = bands.shape[1]
    r = np.fft.irfft(bands, n=2 * (nb - 1), axis=1)[:, :config.lpc_order + 1]
    a, _ = levinson(r, config.lpc_order)
    ceps = _lifter(lpc_to_cepstrum(a, config.num_ceps), config.lifter)
    data = np.column_stack([log_energy, ceps])
    return FeatureMatrix(data, 0, config.frame_shift_s, "plp")


def compute_features(signal, kind, config=FrontendConfig()):
    if kind == "mfcc":
        return compute_mfcc(signal, config)
    if kind == "plp":
        return compute_plp(signal, config)
    raise DataError(f"unknown feature kind {kind!r}")


def _regression_delta(x, half):
    T = x.shape[0]
    padded = np.pad(x, ((half, half), (0, 0)), mode="edge")
    num = np.zeros_like(x)
    for k in range(1, half + 1):
        num += k * (padded[half + k:half + k + T] - padded[half - k:half - k + T])
    return num / (2.0 * sum(k * k for k in range(1, half + 1)))


def append_deltas(feats, window=2):
    """Append first and second order regression deltas (edges replicated)."""
    d1 = _regression_delta(feats.data, window)
    d2 = _regression_delta(d1, window)
    return feats.with_data(np.hstack([feats.data, d1, d2]))


def apply_cmn(feats, window_s=3.0):
    """Subtract a centred sliding-window mean from every non-energy column.

    The window spans ``round(window_s / frame_period) + 1`` frames and is
    truncated at the utterance edges; shorter utterances use the global mean.
    """
    if window_s <= 0:
        raise DataError("CMN window must be positive")
    window = int(round(window_s / feats.frame_period)) + 1
    x = feats.data
    if x.shape[0] < window:
        means = np.broadcast_to(x.mean(axis=0), x.shape)
    else:
        means = kernels.sliding_mean(np.ascontiguousarray(x), window // 2)
    out = x - means
    out[:, feats.energy_index] = x[:, feats.energy_index]
    return feats.with_data(out)


def vad_threshold(log_energy, offset=-0.5):
    return log_energy.mean() + offset * log_energy.std()


def compute_vad(feats, offset=-0.5, window=11):
    """Energy VAD: per-frame threshold decisions smoothed by a centred majority vote."""
    energy = np.ascontiguousarray(feats.data[:, feats.energy_index])
    raw = energy > vad_threshold(energy, offset)
    return majority_smooth(raw, window)


def majority_smooth(raw, window=11):
    return kernels.window_majority(np.ascontiguousarray(raw, dtype=np.bool_), window // 2)


def select_voiced(feats, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (feats.num_frames,):
        raise DataError(f"VAD mask length {mask.shape} does not match {feats.num_frames} frames")
    if not mask.any():
        raise DataError("no speech frames")
    return feats.with_data(feats.data[mask])


def extract(signal, kind, config=FrontendConfig()):
    """Static features, deltas and CMN for one utterance (before VAD)."""
    feats = compute_features(signal, kind, config)
    feats = append_deltas(feats, config.delta_window)
    return apply_cmn(feats, config.cmn_window_s)
