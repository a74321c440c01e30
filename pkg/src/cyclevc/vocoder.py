"""Autoregressive recurrent vocoder with a single-Gaussian output head.

Eight spectrogram frames condition the 128 waveform samples of the center
frame: the window is upsampled by four fully-connected layers to one
64-wide vector per sample position, a GRU consumes [conditioning; previous
sample] one sample at a time, and two head layers emit the mean and
log-scale of a Gaussian over the next sample.  Training is teacher-forced;
synthesis feeds sampled values back.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import nn
from .audio import HOP_SIZE, N_BINS, PCM_SCALE

WINDOW_FRAMES = 8
# frames t-3 .. t+4 condition the samples of frame t
CENTER_OFFSET = 3
COND_WIDTH = 64

# log-scale clamp applied before every use, training and inference alike
S_MIN = -9.0
S_MAX = 4.0

HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)

_CLAMP_MAX = 1.0 - 1.0 / PCM_SCALE


class GaussianOut(NamedTuple):
    """Predicted sample mean and log standard deviation."""

    mu: float
    s: float


@dataclass
class VocoderConfig:
    hidden: int = 256
    head_hidden: int = 256
    # widths of the three hidden upsampler layers; input 1024 and output
    # 8192 (64 per sample position) are fixed by the architecture
    up_hidden: tuple = (2048, 4096, 8192)

    @property
    def in_width(self):
        return N_BINS * WINDOW_FRAMES

    @property
    def out_width(self):
        return COND_WIDTH * HOP_SIZE


class VocoderNet:
    """Parameters of the upsampler, the GRU core, and the Gaussian head."""

    def __init__(self, cfg: VocoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        widths = [cfg.in_width, *cfg.up_hidden, cfg.out_width]
        if len(widths) != 5:
            raise ValueError("upsampler must have exactly four layers")
        self.up = []
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.up.append((
                ad.Parameter(f"up.{i}.weight", nn.uniform_init(rng, (w_out, w_in), w_in, dtype)),
                ad.Parameter(f"up.{i}.bias", np.zeros(w_out, dtype=dtype)),
            ))
        gru_in = COND_WIDTH + 1
        h = cfg.hidden
        self.w_ih = ad.Parameter("gru.w_ih", nn.uniform_init(rng, (3 * h, gru_in), gru_in, dtype))
        self.w_hh = ad.Parameter("gru.w_hh", nn.uniform_init(rng, (3 * h, h), h, dtype))
        self.b_ih = ad.Parameter("gru.b_ih", np.zeros(3 * h, dtype=dtype))
        self.b_hh = ad.Parameter("gru.b_hh", np.zeros(3 * h, dtype=dtype))
        self.head = [
            (ad.Parameter("head.0.weight", nn.uniform_init(rng, (cfg.head_hidden, h), h, dtype)),
             ad.Parameter("head.0.bias", np.zeros(cfg.head_hidden, dtype=dtype))),
            (ad.Parameter("head.1.weight", nn.uniform_init(rng, (2, cfg.head_hidden), cfg.head_hidden, dtype)),
             ad.Parameter("head.1.bias", np.zeros(2, dtype=dtype))),
        ]

    def parameters(self):
        out = []
        for w, b in self.up:
            out.extend([w, b])
        out.extend([self.w_ih, self.w_hh, self.b_ih, self.b_hh])
        for w, b in self.head:
            out.extend([w, b])
        return out

    # -- plain-numpy forward pieces used by sampling ------------------------

    def upsample_np(self, flat: np.ndarray) -> np.ndarray:
        """(batch, 1024) windows -> (batch, 128, 64) conditioning vectors."""
        h = flat
        for i, (w, b) in enumerate(self.up):
            h = h @ w.data.T + b.data
            if i < len(self.up) - 1:
                h = np.maximum(h, 0.0)
        return h.reshape(h.shape[0], HOP_SIZE, COND_WIDTH)

    def step_np(self, x: np.ndarray, hidden: np.ndarray):
        """One GRU step plus head on (batch, 65) input; returns (mu, s, h)."""
        h_new, *_ = ad.gru_gates(x, hidden, self.w_ih.data, self.w_hh.data,
                                 self.b_ih.data, self.b_hh.data)
        z = np.maximum(h_new @ self.head[0][0].data.T + self.head[0][1].data, 0.0)
        out = z @ self.head[1][0].data.T + self.head[1][1].data
        return out[:, 0], out[:, 1], h_new

    # -- graph forward pieces used by training ------------------------------

    def upsample_graph(self, flat):
        h = flat
        for i, (w, b) in enumerate(self.up):
            h = ad.linear(h, w, b)
            if i < len(self.up) - 1:
                h = ad.relu(h)
        return ad.reshape(h, (h.shape[0], HOP_SIZE, COND_WIDTH))

    def head_graph(self, h):
        z = ad.relu(ad.linear(h, *self.head[0]))
        return ad.linear(z, *self.head[1])


# ---------------------------------------------------------------------------
# operations


def conditioning_window(spec: np.ndarray, t: int) -> np.ndarray:
    """Frames t-3 .. t+4 of a (frames, 128) spectrogram, zero-padded at edges."""
    spec = np.asarray(spec)
    frames = spec.shape[0]
    if not 0 <= t < frames:
        raise ValueError(f"frame {t} out of range for {frames} frames")
    window = np.zeros((WINDOW_FRAMES, N_BINS), dtype=spec.dtype)
    lo = t - CENTER_OFFSET
    for i in range(WINDOW_FRAMES):
        src = lo + i
        if 0 <= src < frames:
            window[i] = spec[src]
    return window


def upsample_condition(net: VocoderNet, window: np.ndarray) -> np.ndarray:
    """One (8, 128) window -> 128 conditioning vectors of 64 values.

    The window is flattened frame-major to 1024 inputs; output slot i is
    slice [64*i, 64*i + 64) of the final 8192-wide layer.
    """
    window = np.asarray(window)
    if window.shape != (WINDOW_FRAMES, N_BINS):
        raise ValueError(f"expected window shape ({WINDOW_FRAMES}, {N_BINS}), got {window.shape}")
    flat = window.reshape(1, -1).astype(net.dtype)
    return net.upsample_np(flat)[0]


def vocoder_step(net: VocoderNet, cond: np.ndarray, prev_sample: float, hidden: np.ndarray):
    """One autoregressive step; returns (GaussianOut, new hidden).

    The GRU consumes the 65-wide concatenation [cond; prev_sample].
    """
    cond = np.asarray(cond, dtype=net.dtype)
    if cond.shape != (COND_WIDTH,):
        raise ValueError(f"expected conditioning shape ({COND_WIDTH},), got {cond.shape}")
    if not -1.0 <= prev_sample < 1.0:
        raise ValueError(f"prev_sample must lie in [-1, 1), got {prev_sample}")
    hidden = np.asarray(hidden, dtype=net.dtype)
    if not np.all(np.isfinite(hidden)):
        raise ValueError("non-finite hidden state")
    x = np.concatenate([cond, [np.asarray(prev_sample, dtype=net.dtype)]])[None, :]
    mu, s, h_new = net.step_np(x, hidden[None, :])
    return GaussianOut(float(mu[0]), float(s[0])), h_new[0]


def gaussian_nll(out: GaussianOut, x_t: float) -> float:
    """0.5 * (log(2*pi) + 2s + (x_t - mu)^2 / exp(2s)), s clamped to [-9, 4]."""
    s = min(max(out.s, S_MIN), S_MAX)
    r = x_t - out.mu
    return HALF_LOG_TWO_PI + s + 0.5 * r * r * math.exp(-2.0 * s)


def sample_gaussian(out: GaussianOut, rng, clamp: bool = True) -> float:
    """Draw mu + exp(s) * z with standard-normal z; clamped to [-1, 1)."""
    s = min(max(out.s, S_MIN), S_MAX)
    x = out.mu + math.exp(s) * rng.standard_normal()
    if clamp:
        x = min(max(x, -1.0), _CLAMP_MAX)
    return x


def _segment_views(spec: np.ndarray, wave: np.ndarray, frame_ids):
    """Windows, previous-sample rows, and target rows for the given frames."""
    windows = np.stack([conditioning_window(spec, t) for t in frame_ids])
    targets = np.stack([wave[t * HOP_SIZE : (t + 1) * HOP_SIZE] for t in frame_ids])
    prevs = np.empty_like(targets)
    for row, t in enumerate(frame_ids):
        start = t * HOP_SIZE
        prevs[row, 0] = wave[start - 1] if start > 0 else 0.0
        prevs[row, 1:] = wave[start : start + HOP_SIZE - 1]
    return windows, prevs, targets


def nll_graph(net: VocoderNet, windows, prevs, targets):
    """Teacher-forced mean negative log likelihood over a batch of segments.

    windows: (B, 8, 128); prevs, targets: (B, steps) with steps = 128 in
    training (shorter runs are allowed, e.g. for gradient checks).  Hidden
    state starts at zero for every segment; returns a scalar Tensor.
    """
    b = windows.shape[0]
    steps = prevs.shape[1]
    if targets.shape != prevs.shape:
        raise ValueError(f"targets {targets.shape} do not match prevs {prevs.shape}")
    dtype = net.dtype
    cond = net.upsample_graph(ad.Tensor(windows.reshape(b, -1).astype(dtype)))
    if steps != HOP_SIZE:
        cond = ad.narrow(cond, (slice(None), slice(0, steps), slice(None)))
    inputs = ad.concat(
        [cond, ad.Tensor(np.ascontiguousarray(prevs[:, :, None], dtype=dtype))], axis=2
    )  # (B, steps, 65)
    h = ad.Tensor(np.zeros((b, net.cfg.hidden), dtype=dtype))
    states = []
    for i in range(steps):
        x_i = ad.narrow(inputs, (slice(None), i, slice(None)))
        h = ad.gru_cell(x_i, h, net.w_ih, net.w_hh, net.b_ih, net.b_hh)
        states.append(h)
    flat_h = ad.reshape(ad.stack(states, axis=1), (b * steps, net.cfg.hidden))
    out = net.head_graph(flat_h)  # (B*128, 2)
    mu = ad.narrow(out, (slice(None), 0))
    s = ad.clamp(ad.narrow(out, (slice(None), 1)), S_MIN, S_MAX)
    residual = ad.sub(ad.Tensor(targets.reshape(-1).astype(dtype)), mu)
    point = ad.add(s, ad.scale(ad.mul(ad.square(residual), ad.exp(ad.scale(s, -2.0))), 0.5))
    return ad.add(ad.mean(point), HALF_LOG_TWO_PI)


def teacher_forced_nll(net: VocoderNet, spec: np.ndarray, wave: np.ndarray):
    """Mean Gaussian NLL of an utterance under teacher forcing.

    Frame t owns samples [t*128, (t+1)*128); every frame is an independent
    segment with a zero initial hidden state.  Returns a scalar Tensor
    (use .item() for the value).
    """
    spec = np.asarray(spec)
    wave = np.asarray(wave, dtype=np.float64)
    if spec.ndim != 2 or spec.shape[1] != N_BINS:
        raise ValueError(f"expected spectrogram (frames, {N_BINS}), got {spec.shape}")
    frames = spec.shape[0]
    if wave.shape[0] < frames * HOP_SIZE:
        raise ValueError(
            f"waveform has {wave.shape[0]} samples but {frames} frames own "
            f"{frames * HOP_SIZE}; misaligned inputs"
        )
    windows, prevs, targets = _segment_views(spec, wave, range(frames))
    return nll_graph(net, windows, prevs, targets)


def synthesize(net: VocoderNet, spec: np.ndarray, rng, initial_hidden=None,
               initial_sample: float = 0.0, return_state: bool = False):
    """Generate frames*128 samples from a (frames, 128) spectrogram.

    Each frame's 128 samples are drawn sequentially from the Gaussian head
    and fed back as the next input; the hidden state is carried across
    frames.  initial_hidden/initial_sample continue a previous call; with
    return_state=True the result is (waveform, hidden, last sample).
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != N_BINS:
        raise ValueError(f"expected spectrogram (frames, {N_BINS}), got {spec.shape}")
    frames = spec.shape[0]
    if frames < 1:
        raise ValueError("spectrogram has no frames")
    dtype = net.dtype
    h = np.zeros((1, net.cfg.hidden), dtype=dtype)
    if initial_hidden is not None:
        h = np.asarray(initial_hidden, dtype=dtype).reshape(1, net.cfg.hidden).copy()
    out = np.zeros(frames * HOP_SIZE, dtype=np.float64)
    prev = float(initial_sample)
    x = np.empty((1, COND_WIDTH + 1), dtype=dtype)
    for t in range(frames):
        cond = upsample_condition(net, conditioning_window(spec, t))
        for i in range(HOP_SIZE):
            x[0, :COND_WIDTH] = cond[i]
            x[0, COND_WIDTH] = prev
            mu, s, h = net.step_np(x, h)
            prev = sample_gaussian(GaussianOut(float(mu[0]), float(s[0])), rng)
            out[t * HOP_SIZE + i] = prev
        if not np.all(np.isfinite(h)):
            raise RuntimeError(f"non-finite hidden state after frame {t}; synthesis aborted")
    if return_state:
        return out, h[0].copy(), prev
    return out
