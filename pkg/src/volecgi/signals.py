"""Multichannel body-surface signal handling.

A SignalBlock is an immutable (channels x samples) float64 matrix in mV
with a sample rate, per-channel integer ids, and an exclusion mask for
bad channels.  The conditioning chain mirrors a mains-locked acquisition
front end: cascaded notches at the mains fundamental and its first
harmonics, a sharp low-pass, a drift high-pass, and re-referencing to
the common average of the retained channels.

Filters run zero-phase (forward-backward) by default, which squares the
magnitude response; single-pass application is available and then warms
up on an even-symmetric extension of the data, three filter orders long.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np
import scipy.signal as ss

from . import rng
from .errors import NumericalError, UserInputError


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SignalBlock:
    """Channels-by-samples recording.

    samples: (M, T) float64 mV.
    sample_rate: Hz, > 0.
    channel_ids: (M,) distinct non-negative ints (electrode numbers).
    excluded: (M,) bool, True for channels left out of processing.
    time_zero: time of the first sample in seconds.
    """

    samples: np.ndarray
    sample_rate: float
    channel_ids: np.ndarray
    excluded: np.ndarray | None = None
    time_zero: float = 0.0

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=np.float64)
        if x.ndim != 2:
            raise UserInputError(f"samples must be 2-d (channels, time), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise UserInputError("samples contain non-finite values")
        if not self.sample_rate > 0:
            raise UserInputError(f"sample rate must be positive, got {self.sample_rate}")
        ids = np.ascontiguousarray(self.channel_ids, dtype=np.int64)
        if ids.shape != (len(x),):
            raise UserInputError(
                f"channel_ids must have shape ({len(x)},), got {ids.shape}"
            )
        if len(np.unique(ids)) != len(ids):
            raise UserInputError("channel ids must be distinct")
        if self.excluded is None:
            mask = np.zeros(len(x), dtype=bool)
        else:
            mask = np.ascontiguousarray(self.excluded, dtype=bool)
            if mask.shape != (len(x),):
                raise UserInputError(
                    f"excluded must have shape ({len(x)},), got {mask.shape}"
                )
        object.__setattr__(self, "samples", _freeze(x))
        object.__setattr__(self, "channel_ids", _freeze(ids))
        object.__setattr__(self, "excluded", _freeze(mask))
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def times(self) -> np.ndarray:
        return self.time_zero + np.arange(self.n_samples) / self.sample_rate

    def included(self) -> np.ndarray:
        return ~self.excluded

    def with_samples(self, samples: np.ndarray) -> "SignalBlock":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class FilterSpec:
    """Conditioning chain parameters.

    Defaults: notches at 50 Hz and its first three harmonics with 1 Hz
    bandwidth, 10th-order low-pass at 40 Hz, 3rd-order high-pass at
    0.67 Hz, zero-phase application.
    """

    mains_hz: float = 50.0
    n_harmonics: int = 3
    notch_bandwidth_hz: float = 1.0
    lowpass_hz: float = 40.0
    lowpass_order: int = 10
    highpass_hz: float = 0.67
    highpass_order: int = 3
    zero_phase: bool = True


def _check_stable(sos: np.ndarray, what: str):
    for section in np.atleast_2d(sos):
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0 - 1e-12):
            raise NumericalError(f"{what} has poles on or outside the unit circle")


def _warmup_samples(sos: np.ndarray, order: int) -> int:
    """Edge-extension length long enough for the slowest mode to settle.

    Narrow notches have poles just inside the unit circle; a warmup of a
    few filter orders leaves a transient that dwarfs the stopband floor.
    Instead run the slowest pole down to 1e-6 of its starting size.
    """
    radius = 0.0
    for section in np.atleast_2d(sos):
        poles = np.roots(section[3:])
        if len(poles):
            radius = max(radius, float(np.abs(poles).max()))
    need = 3 * order
    if 0.0 < radius < 1.0:
        need = max(need, int(np.ceil(np.log(1e-6) / np.log(radius))))
    return min(need, 20_000)


def _burg_coefficients(x: np.ndarray, order: int) -> np.ndarray:
    """Per-row autoregressive polynomials by Burg's method.

    Returns (M, order + 1) with leading coefficient 1.  Reflection
    coefficients are clamped to [-1, 1], so the recursion never grows;
    once the prediction error underflows the remaining stages are left
    at zero, which keeps an exact fit (pure tones) exact.
    """
    m, n = x.shape
    a = np.zeros((m, order + 1))
    a[:, 0] = 1.0
    f = x[:, 1:].copy()
    b = x[:, :-1].copy()
    floor = 1e-24 * max(float(np.sum(x * x)), 1e-300)
    for k in range(1, order + 1):
        den = np.einsum("ij,ij->i", f, f) + np.einsum("ij,ij->i", b, b)
        num = 2.0 * np.einsum("ij,ij->i", f, b)
        kk = np.where(den > floor, -num / np.where(den > floor, den, 1.0), 0.0)
        kk = np.clip(kk, -1.0, 1.0)
        head = a[:, 1:k + 1].copy()
        a[:, 1:k + 1] = head + kk[:, None] * np.concatenate(
            [head[:, ::-1][:, 1:], np.ones((m, 1))], axis=1
        )
        f, b = f[:, 1:] + kk[:, None] * b[:, 1:], b[:, :-1] + kk[:, None] * f[:, :-1]
        if f.shape[1] == 0:
            break
    return a


def _ar_extension(x: np.ndarray, pad: int, side: str) -> np.ndarray:
    """Continue each row outward by `pad` samples with a local AR model.

    Reflection padding puts a kink at the data boundary, and its
    broadband response sails straight through a narrow notch.  A
    linear-predictive extension continues oscillatory content
    seamlessly, so the filter state is already settled when the real
    samples begin.  The model is fitted on the nearest window.
    """
    m, n = x.shape
    data = x[:, ::-1] if side == "left" else x
    window = data[:, -min(n, 1024):]
    order = min(32, window.shape[1] // 2)
    if order < 2:
        ext = np.repeat(data[:, -1:], pad, axis=1)
        return ext[:, ::-1] if side == "left" else ext
    coef = -_burg_coefficients(window, order)[:, 1:]
    buf = data[:, -order:][:, ::-1].copy()  # buf[:, j] = sample n-1-j
    out = np.empty((m, pad))
    for t in range(pad):
        nxt = np.einsum("ij,ij->i", coef, buf)
        out[:, t] = nxt
        buf[:, 1:] = buf[:, :-1]
        buf[:, 0] = nxt
    return out[:, ::-1] if side == "left" else out


def _apply_sos(x: np.ndarray, sos: np.ndarray, zero_phase: bool, order: int) -> np.ndarray:
    """Run a second-order-section cascade along the last axis.

    Both passes warm up on a linear-predictive extension whose length
    is set by the decay rate of the slowest pole.
    """
    x2 = np.atleast_2d(x)
    pad = _warmup_samples(sos, order) if x2.shape[-1] >= 8 else 0
    if pad == 0:
        out = ss.sosfiltfilt(sos, x2, axis=-1, padtype=None) if zero_phase \
            else ss.sosfilt(sos, x2, axis=-1)
        return out.reshape(x.shape)
    left = _ar_extension(x2, pad, "left")
    if zero_phase:
        right = _ar_extension(x2, pad, "right")
        ext = np.concatenate([left, x2, right], axis=-1)
        out = ss.sosfiltfilt(sos, ext, axis=-1, padtype=None)
        return out[:, pad:pad + x2.shape[-1]].reshape(x.shape)
    ext = np.concatenate([left, x2], axis=-1)
    return ss.sosfilt(sos, ext, axis=-1)[:, pad:].reshape(x.shape)


def _filter_included(block: SignalBlock, sos: np.ndarray, zero_phase: bool, order: int) -> SignalBlock:
    keep = block.included()
    out = np.array(block.samples)
    if np.any(keep):
        out[keep] = _apply_sos(block.samples[keep], sos, zero_phase, order)
    out[block.excluded] = 0.0
    return block.with_samples(out)


def comb_notch(
    block: SignalBlock,
    mains_hz: float = 50.0,
    n_harmonics: int = 3,
    bandwidth_hz: float = 1.0,
    zero_phase: bool = True,
) -> SignalBlock:
    """Cascaded IIR notches at the mains frequency and its harmonics."""
    if mains_hz <= 0 or bandwidth_hz <= 0:
        raise UserInputError("mains frequency and bandwidth must be positive")
    if n_harmonics < 0:
        raise UserInputError("n_harmonics must be >= 0")
    nyq = block.sample_rate / 2.0
    top = mains_hz * (n_harmonics + 1)
    if top >= nyq:
        raise UserInputError(
            f"highest notch {top} Hz is not below the Nyquist rate {nyq} Hz"
        )
    sections = []
    for k in range(1, n_harmonics + 2):
        f0 = mains_hz * k
        b, a = ss.iirnotch(f0, f0 / bandwidth_hz, fs=block.sample_rate)
        sections.append(np.hstack([b, a]))
    sos = np.asarray(sections)
    _check_stable(sos, "notch cascade")
    return _filter_included(block, sos, zero_phase, 2 * len(sections))


def butterworth(
    block: SignalBlock,
    kind: str,
    cutoff_hz: float,
    order: int,
    zero_phase: bool = True,
) -> SignalBlock:
    """Butterworth low- or high-pass as a second-order-section cascade."""
    if kind not in ("lowpass", "highpass"):
        raise UserInputError(f"kind must be 'lowpass' or 'highpass', got {kind!r}")
    if order < 1:
        raise UserInputError("order must be >= 1")
    nyq = block.sample_rate / 2.0
    if not 0 < cutoff_hz < nyq:
        raise UserInputError(
            f"cutoff {cutoff_hz} Hz must lie inside (0, {nyq}) Hz"
        )
    sos = ss.butter(order, cutoff_hz, btype=kind, fs=block.sample_rate, output="sos")
    _check_stable(sos, f"{kind} butterworth")
    return _filter_included(block, sos, zero_phase, order)


def lowpass_array(
    x: np.ndarray, sample_rate: float, cutoff_hz: float, order: int,
    zero_phase: bool = True,
) -> np.ndarray:
    """Butterworth low-pass over the last axis of a bare array."""
    nyq = sample_rate / 2.0
    if not 0 < cutoff_hz < nyq:
        raise UserInputError(f"cutoff {cutoff_hz} Hz must lie inside (0, {nyq}) Hz")
    sos = ss.butter(order, cutoff_hz, btype="lowpass", fs=sample_rate, output="sos")
    _check_stable(sos, "lowpass butterworth")
    return _apply_sos(np.asarray(x, dtype=np.float64), sos, zero_phase, order)


def add_gaussian_noise(block: SignalBlock, snr_db: float, seed: int) -> SignalBlock:
    """Add white Gaussian noise at a signal-to-noise ratio in dB.

    Signal power is the mean square over included channels; the noise
    variance is power * 10^(-snr/10).  An infinite snr_db returns the
    block unchanged.  The draw is reproducible from the seed alone.
    """
    if math.isinf(snr_db):
        return block
    keep = block.included()
    if not np.any(keep):
        raise UserInputError("all channels are excluded; no signal power")
    power = float(np.mean(block.samples[keep] ** 2))
    if power <= 0.0:
        raise UserInputError("signal power is zero; snr is undefined")
    sigma = math.sqrt(power * 10.0 ** (-snr_db / 10.0))
    gen = rng.generator(seed, 0xA0D5E)
    noise = sigma * rng.gaussian(gen, block.samples.shape)
    out = block.samples + noise
    out[block.excluded] = 0.0
    return block.with_samples(out)


def _center_rows(x: np.ndarray) -> np.ndarray:
    """Subtract the per-column mean over rows, exactly idempotently.

    A column whose mean is already at the rounding floor (64 eps of the
    column scale) is left untouched; below that level "the mean" is an
    artifact of summation order, not signal.  Data that has been
    centered once always lands under the floor, so a second application
    returns bit-identical values instead of chasing ulps.
    """
    tol = 64.0 * np.finfo(np.float64).eps * np.abs(x).max(axis=0, initial=0.0)
    mean = x.mean(axis=0)
    if np.all(np.abs(mean) <= tol):
        return np.array(x)
    x = x - mean
    return x - x.mean(axis=0)


def common_reference(block: SignalBlock) -> SignalBlock:
    """Re-reference to the common average of included channels.

    Excluded channels are zeroed and do not influence the average.
    """
    keep = block.included()
    if keep.sum() < 2:
        raise UserInputError("common reference needs at least 2 included channels")
    out = np.zeros_like(block.samples)
    out[keep] = _center_rows(block.samples[keep])
    return block.with_samples(out)


def preprocess(block: SignalBlock, spec: FilterSpec = FilterSpec()) -> SignalBlock:
    """Full conditioning chain.

    Order: zero excluded channels, comb notch, low-pass, high-pass,
    common average reference.  Every stage is linear, so the chain
    commutes with channel-wise linear combination of inputs.
    """
    x = np.array(block.samples)
    x[block.excluded] = 0.0
    block = block.with_samples(x)
    block = comb_notch(
        block, spec.mains_hz, spec.n_harmonics, spec.notch_bandwidth_hz, spec.zero_phase
    )
    block = butterworth(block, "lowpass", spec.lowpass_hz, spec.lowpass_order, spec.zero_phase)
    block = butterworth(block, "highpass", spec.highpass_hz, spec.highpass_order, spec.zero_phase)
    return common_reference(block)


def write_signals_csv(path: str, block: SignalBlock):
    """Delimited text: header `t,<id>,...`, one row per sample.

    Values are written with 17 significant digits, which round-trips
    float64 exactly and keeps repeated runs byte-identical.
    """
    header = "t," + ",".join(str(int(c)) for c in block.channel_ids)
    t = block.times()
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for j in range(block.n_samples):
            row = [("%.17g" % t[j])] + [
                ("%.17g" % v) for v in block.samples[:, j]
            ]
            fh.write(",".join(row) + "\n")


def read_signals_csv(
    path: str,
    sample_rate: float | None = None,
    excluded_ids=(),
) -> SignalBlock:
    """Read the `t,<id>,...` layout back into a SignalBlock.

    The sample rate is taken from the argument when given, otherwise
    from the median spacing of the time column, which must be strictly
    increasing and uniform to 1 part in 1e6.
    """
    if not os.path.exists(path):
        raise UserInputError(f"no such file: {path}")
    with open(path, "r") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if len(cols) < 2 or cols[0] != "t":
            raise UserInputError(f"{path}:1: expected header 't,<id>,...'")
        try:
            ids = np.asarray([int(c) for c in cols[1:]], dtype=np.int64)
        except ValueError:
            raise UserInputError(f"{path}:1: channel ids must be integers")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise UserInputError(f"{path}: malformed numeric row ({exc})")
    if data.shape[1] != len(ids) + 1:
        raise UserInputError(
            f"{path}: rows have {data.shape[1]} fields, header promises {len(ids) + 1}"
        )
    t = data[:, 0]
    if len(t) < 2:
        raise UserInputError(f"{path}: need at least two samples")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise UserInputError(f"{path}: time column is not strictly increasing")
    if sample_rate is None:
        step = float(np.median(dt))
        if np.any(np.abs(dt - step) > 1e-6 * step):
            raise UserInputError(f"{path}: time column is not uniformly sampled")
        sample_rate = 1.0 / step
    excluded = np.isin(ids, np.asarray(list(excluded_ids), dtype=np.int64))
    return SignalBlock(
        samples=np.ascontiguousarray(data[:, 1:].T),
        sample_rate=sample_rate,
        channel_ids=ids,
        excluded=excluded,
        time_zero=float(t[0]),
    )
