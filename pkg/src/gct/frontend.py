"""Audio frontend: WAV loading, 128-bin log-mel features, patch tiling.

Spectrograms are plain (frames, 128) float64 arrays of log mel-band
energies computed with a 25 ms Hamming window and a 10 ms hop. The mel
scale is HTK-style (2595*log10(1+f/700)) spanning 0 Hz to Nyquist, and
energies are floored as ln(e + 1e-10).
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass

import numpy as np

N_MELS = 128
WINDOW_MS = 25
HOP_MS = 10
LOG_ENERGY_FLOOR = 1e-10

# Padding value for feature tensors: the spectrogram of silence.
SPEC_FLOOR = float(np.log(LOG_ENERGY_FLOOR))


class AudioFormatError(ValueError):
    """Raised for WAV files this frontend cannot decode."""


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE PCM16 file; stereo channels are averaged."""
    try:
        with wave.open(str(path), "rb") as wav:
            comptype = wav.getcomptype()
            if comptype != "NONE":
                raise AudioFormatError(
                    f"unsupported compression {comptype!r} in 'fmt ' chunk of {path}"
                )
            width = wav.getsampwidth()
            if width != 2:
                raise AudioFormatError(
                    f"unsupported sample width {8 * width} bits in 'fmt ' chunk of {path}; "
                    "only PCM 16-bit is supported"
                )
            channels = wav.getnchannels()
            rate = wav.getframerate()
            raw = wav.readframes(wav.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"not a readable RIFF/WAVE file: {path} ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return Waveform(samples=pcm / 32768.0, sample_rate=rate)


def save_wav(path, waveform: Waveform) -> None:
    """Write PCM16 mono; values are clipped to [-1, 1)."""
    pcm = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(waveform.sample_rate)
        wav.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft//2 + 1).

    Triangles are sampled at FFT bin centers. A filter narrower than the
    bin spacing can miss every bin; such filters get weight 1.0 at the bin
    nearest their center so no filter is dead.
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(0.0, float(hz_to_mel(nyquist)), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    fb = np.zeros((n_mels, bin_freqs.size))
    for k in range(n_mels):
        lo, center, hi = hz_points[k], hz_points[k + 1], hz_points[k + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        if not tri.any():
            tri[np.argmin(np.abs(bin_freqs - center))] = 1.0
        fb[k] = tri
    return fb


def mel_filter_centers(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    mel_points = np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), n_mels + 2)
    return mel_to_hz(mel_points[1:-1])


def log_mel(waveform: Waveform, n_mels: int = N_MELS) -> np.ndarray:
    """Log mel-band energies, shape (frames, n_mels)."""
    if waveform.sample_rate < 8000:
        raise ValueError(f"sample rate {waveform.sample_rate} Hz is below the 8 kHz minimum")
    sr = waveform.sample_rate
    win = int(round(sr * WINDOW_MS / 1000.0))
    hop = int(round(sr * HOP_MS / 1000.0))
    samples = np.asarray(waveform.samples, dtype=np.float64)
    if samples.size < win:
        raise ValueError(
            f"clip of {samples.size} samples is shorter than one {win}-sample window"
        )
    n_frames = (samples.size - win) // hop + 1
    n_fft = 1
    while n_fft < win:
        n_fft *= 2

    window = np.hamming(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    fb = mel_filterbank(sr, n_fft, n_mels)
    return np.log(power @ fb.T + LOG_ENERGY_FLOOR)


@dataclass
class PatchGrid:
    patches: np.ndarray  # (n_patches, p_t * p_f), time-major order
    grid: tuple[int, int]  # (patches along time, patches along freq)
    patch_shape: tuple[int, int]  # (p_t, p_f)


def to_patches(spec: np.ndarray, p_t: int = 16, p_f: int = 16) -> PatchGrid:
    """Tile the spectrogram into non-overlapping p_t x p_f patches.

    The input is cropped to the largest multiple of the patch size; patches
    are ordered time-major and each is flattened row-major.
    """
    if p_t < 1 or p_f < 1:
        raise ValueError(f"patch dims must be >= 1, got ({p_t}, {p_f})")
    frames, bins = spec.shape
    if frames < p_t or bins < p_f:
        raise ValueError(
            f"spectrogram {spec.shape} is smaller than one ({p_t}, {p_f}) patch"
        )
    n_t, n_f = frames // p_t, bins // p_f
    cropped = spec[: n_t * p_t, : n_f * p_f]
    tiles = cropped.reshape(n_t, p_t, n_f, p_f).transpose(0, 2, 1, 3)
    return PatchGrid(
        patches=np.ascontiguousarray(tiles.reshape(n_t * n_f, p_t * p_f)),
        grid=(n_t, n_f),
        patch_shape=(p_t, p_f),
    )


def from_patches(grid: PatchGrid) -> np.ndarray:
    """Inverse of to_patches on the cropped region."""
    n_t, n_f = grid.grid
    p_t, p_f = grid.patch_shape
    tiles = grid.patches.reshape(n_t, n_f, p_t, p_f).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(tiles.reshape(n_t * p_t, n_f * p_f))


def reverse_time(spec: np.ndarray) -> np.ndarray:
    """Reverse frame order; mel bins untouched."""
    return np.ascontiguousarray(spec[::-1])


def save_spectrogram_csv(path, spec: np.ndarray) -> None:
    np.savetxt(path, spec, delimiter=",", fmt="%.17e")


def load_spectrogram_csv(path) -> np.ndarray:
    spec = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if spec.shape[1] != N_MELS:
        raise ValueError(f"spectrogram CSV must have {N_MELS} columns, got {spec.shape[1]}")
    return spec
