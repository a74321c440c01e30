"""WAV file I/O and linear-magnitude spectrogram analysis.

All audio in this package is mono 16-bit PCM at 16 kHz.  Spectrograms are
(frames, 128) arrays of nonnegative magnitudes computed with a 254-point
Hann window advanced 128 samples per frame.
"""

import struct
import wave

import numpy as np

SAMPLE_RATE = 16000
WINDOW_SIZE = 254
HOP_SIZE = 128
N_BINS = 128

# 16-bit fixed-point scale: sample k maps to k / PCM_SCALE.
PCM_SCALE = 32768


class WavFormatError(ValueError):
    """Base for malformed or unsupported WAV input."""


class UnsupportedEncodingError(WavFormatError):
    """File is not 16-bit linear PCM."""


class ChannelCountError(WavFormatError):
    """File is not mono."""


class SampleRateError(WavFormatError):
    """File is not sampled at 16 kHz."""


def hann_window(size: int = WINDOW_SIZE) -> np.ndarray:
    """Symmetric Hann window w[n] = 0.5 * (1 - cos(2*pi*n / (size-1)))."""
    n = np.arange(size)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (size - 1)))


def frame_count(n_samples: int) -> int:
    """Number of complete analysis frames in a signal of n_samples."""
    if n_samples < WINDOW_SIZE:
        raise ValueError(
            f"waveform has {n_samples} samples, shorter than one "
            f"{WINDOW_SIZE}-sample analysis window"
        )
    return (n_samples - WINDOW_SIZE) // HOP_SIZE + 1


def read_wav(path) -> np.ndarray:
    """Read a mono 16-bit PCM 16 kHz WAV file to float samples in [-1, 1).

    Raises FileNotFoundError for a missing file, UnsupportedEncodingError
    for non-PCM or non-16-bit data, ChannelCountError and SampleRateError
    for the remaining format mismatches.
    """
    try:
        reader = wave.open(str(path), "rb")
    except FileNotFoundError:
        raise
    except (wave.Error, EOFError) as exc:
        raise UnsupportedEncodingError(f"{path}: not a readable PCM WAV file ({exc})")
    with reader:
        if reader.getcomptype() != "NONE":
            raise UnsupportedEncodingError(
                f"{path}: compressed encoding {reader.getcomptype()!r}, expected PCM"
            )
        if reader.getsampwidth() != 2:
            raise UnsupportedEncodingError(
                f"{path}: {8 * reader.getsampwidth()}-bit samples, expected 16-bit"
            )
        if reader.getnchannels() != 1:
            raise ChannelCountError(
                f"{path}: {reader.getnchannels()} channels, expected mono"
            )
        if reader.getframerate() != SAMPLE_RATE:
            raise SampleRateError(
                f"{path}: {reader.getframerate()} Hz, expected {SAMPLE_RATE} Hz"
            )
        raw = reader.readframes(reader.getnframes())
    ints = np.frombuffer(raw, dtype="<i2")
    return ints.astype(np.float64) / PCM_SCALE


def write_wav(samples, path) -> None:
    """Write float samples as a mono 16-bit PCM 16 kHz WAV file.

    Values are clamped to [-1, 1 - 1/32768] and rounded to the nearest
    16-bit level, so a read/write round trip moves each sample by at most
    one quantization step.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d sample array, got shape {x.shape}")
    x = np.clip(x, -1.0, 1.0 - 1.0 / PCM_SCALE)
    ints = np.rint(x * PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(SAMPLE_RATE)
        writer.writeframes(ints.tobytes())


def stft(samples) -> np.ndarray:
    """Magnitude spectrogram of a waveform, shape (frames, 128).

    Frame t covers samples [t*128, t*128 + 254); each frame is Hann
    windowed and transformed by a 254-point DFT, keeping the magnitudes of
    bins 0..127 (DC through Nyquist).  No centering or padding: frames are
    taken from the raw signal start, trailing samples short of a full
    window are dropped.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d sample array, got shape {x.shape}")
    n_frames = frame_count(x.shape[0])
    starts = HOP_SIZE * np.arange(n_frames)
    frames = x[starts[:, None] + np.arange(WINDOW_SIZE)]
    frames = frames * hann_window()
    # 254-point rfft yields exactly 128 bins (DC..Nyquist); no zero padding.
    return np.abs(np.fft.rfft(frames, n=WINDOW_SIZE, axis=1))


def validate_spectrogram(spec) -> np.ndarray:
    """Check the (frames, 128) nonnegative-magnitude contract."""
    s = np.asarray(spec)
    if s.ndim != 2 or s.shape[1] != N_BINS:
        raise ValueError(f"expected shape (frames, {N_BINS}), got {s.shape}")
    if s.shape[0] < 1:
        raise ValueError("spectrogram has no frames")
    if np.any(s < 0):
        raise ValueError("spectrogram contains negative magnitudes")
    return s


def save_spectrogram(spec, path) -> None:
    """Write the raw grid format: u32 frames, u32 bins, f32 row-major data.

    All fields little-endian.
    """
    s = validate_spectrogram(spec)
    with open(path, "wb") as f:
        f.write(struct.pack("<II", s.shape[0], s.shape[1]))
        f.write(np.ascontiguousarray(s, dtype="<f4").tobytes())


def load_spectrogram(path) -> np.ndarray:
    """Read the raw grid format written by save_spectrogram."""
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise ValueError(f"{path}: truncated spectrogram header")
        frames, bins = struct.unpack("<II", header)
        payload = f.read()
    expected = frames * bins * 4
    if len(payload) != expected:
        raise ValueError(
            f"{path}: expected {expected} payload bytes for {frames}x{bins}, "
            f"got {len(payload)}"
        )
    grid = np.frombuffer(payload, dtype="<f4").reshape(frames, bins)
    return grid.astype(np.float64)


def save_spectrogram_csv(spec, path) -> None:
    """Write one frame per row, 128 comma-separated decimals."""
    s = validate_spectrogram(spec)
    np.savetxt(path, s, fmt="%.9g", delimiter=",")
