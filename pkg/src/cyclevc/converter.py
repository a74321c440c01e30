"""Cycle-consistent adversarial spectrogram converter.

Two generators map between the speaker domains, two spectrally normalized
discriminators score 128-frame spectrogram crops, and the losses combine
hinge adversarial terms with L1 cycle and identity terms.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .audio import N_BINS

TRIM_FRAMES = 16


@dataclass
class ConverterConfig:
    bins: int = 128
    channels: int = 256
    n_g: int = 7
    n_d: int = 6
    kernel: int = 5
    trim: int = TRIM_FRAMES
    noise_sigma: float = 0.1
    lambda_cy: float = 10.0
    lambda_id: float = 1.0
    margin: float = 0.5
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.bins != N_BINS:
            raise ValueError(f"spectrogram bins are fixed at {N_BINS}, got {self.bins}")
        if self.lambda_cy <= 0 or self.lambda_id < 0 or self.margin <= 0:
            raise ValueError("need lambda_cy > 0, lambda_id >= 0, margin > 0")


class Conv:
    """One convolution's parameters, optionally spectrally normalized."""

    def __init__(self, rng, name, c_in, c_out, kernel, dtype, spectral_norm=False):
        self.weight = ad.Parameter(
            f"{name}.weight", nn.uniform_init(rng, (c_out, c_in, kernel), c_in * kernel, dtype)
        )
        self.bias = ad.Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.sn_state = nn.PowerIterState(rng, c_out, dtype) if spectral_norm else None
        self._effective = None
        # set by freeze_spectral_norm(); holds sigma constant so that finite
        # differences see the same gradient-stopped scaling backward() uses
        self.frozen_sigma = None

    def prepare(self, update: bool) -> None:
        """Refresh the spectrally normalized weight used by calls that follow."""
        if self.sn_state is None:
            return
        if self.frozen_sigma is not None:
            sigma = self.frozen_sigma
        else:
            _, sigma = nn.spectral_normalize(self.weight.data, self.sn_state, update=update)
        self._effective = ad.scale(self.weight, 1.0 / sigma)

    def __call__(self, x):
        if self.sn_state is None:
            return ad.conv1d(x, self.weight, self.bias)
        if self._effective is None:
            raise RuntimeError("spectrally normalized conv used before prepare()")
        return ad.conv1d(x, self._effective, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ResBlock:
    """input + conv2(leaky_relu(conv1(input))), both convolutions kernel 5."""

    def __init__(self, rng, name, channels, kernel, slope, dtype, spectral_norm=False):
        self.conv1 = Conv(rng, f"{name}.conv1", channels, channels, kernel, dtype, spectral_norm)
        self.conv2 = Conv(rng, f"{name}.conv2", channels, channels, kernel, dtype, spectral_norm)
        self.slope = slope

    def __call__(self, x):
        return ad.add(x, self.conv2(ad.leaky_relu(self.conv1(x), self.slope)))

    def convs(self):
        return [self.conv1, self.conv2]


class GeneratorNet:
    """128 -> channels pointwise, n_g residual blocks, channels -> 128 pointwise.

    Stride 1 everywhere, so frame count is preserved; the output layer is
    linear (magnitudes may go negative during training and are clamped only
    at the vocoder hand-off).
    """

    def __init__(self, cfg: ConverterConfig, rng, name: str, dtype=np.float32):
        self.cfg = cfg
        self.in_conv = Conv(rng, f"{name}.in_conv", cfg.bins, cfg.channels, 1, dtype)
        self.blocks = [
            ResBlock(rng, f"{name}.blocks.{i}", cfg.channels, cfg.kernel, cfg.leaky_slope, dtype)
            for i in range(cfg.n_g)
        ]
        self.out_conv = Conv(rng, f"{name}.out_conv", cfg.channels, cfg.bins, 1, dtype)

    def forward(self, x):
        """x: Tensor (batch, 128, frames) -> Tensor of the same shape."""
        h = ad.leaky_relu(self.in_conv(x), self.cfg.leaky_slope)
        for block in self.blocks:
            h = block(h)
        return self.out_conv(h)

    def convs(self):
        out = [self.in_conv]
        for b in self.blocks:
            out.extend(b.convs())
        out.append(self.out_conv)
        return out

    def parameters(self):
        return [p for c in self.convs() for p in c.parameters()]


class DiscriminatorNet:
    """Spectrally normalized convolution stack pooled to one score per crop."""

    def __init__(self, cfg: ConverterConfig, rng, name: str, dtype=np.float32):
        self.cfg = cfg
        self.in_conv = Conv(rng, f"{name}.in_conv", cfg.bins, cfg.channels, 1, dtype,
                            spectral_norm=True)
        self.blocks = [
            ResBlock(rng, f"{name}.blocks.{i}", cfg.channels, cfg.kernel, cfg.leaky_slope,
                     dtype, spectral_norm=True)
            for i in range(cfg.n_d)
        ]
        self.out_conv = Conv(rng, f"{name}.out_conv", cfg.channels, 1, 1, dtype,
                             spectral_norm=True)

    def prepare(self, update: bool = True) -> None:
        """One power-iteration refresh of every normalized weight."""
        for conv in self.convs():
            conv.prepare(update)

    def freeze_spectral_norm(self) -> None:
        """Pin every sigma at its current estimate (for gradient checking)."""
        for conv in self.convs():
            _, sigma = nn.spectral_normalize(conv.weight.data, conv.sn_state, update=False)
            conv.frozen_sigma = sigma

    def unfreeze_spectral_norm(self) -> None:
        for conv in self.convs():
            conv.frozen_sigma = None

    def forward(self, x):
        """x: Tensor (batch, 128, frames), noise already applied -> Tensor (batch,)."""
        h = ad.leaky_relu(self.in_conv(x), self.cfg.leaky_slope)
        for block in self.blocks:
            h = block(h)
        h = self.out_conv(h)  # (batch, 1, frames)
        return ad.reshape(ad.global_avg_pool(h), (-1,))

    def convs(self):
        out = [self.in_conv]
        for b in self.blocks:
            out.extend(b.convs())
        out.append(self.out_conv)
        return out

    def parameters(self):
        return [p for c in self.convs() for p in c.parameters()]

    def power_iter_states(self):
        return {c.weight.name: c.sn_state for c in self.convs()}


class ConverterPair:
    """Both generators, both discriminators, and the loss weights."""

    def __init__(self, cfg: ConverterConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.g_xy = GeneratorNet(cfg, rng, "g_xy", dtype)
        self.g_yx = GeneratorNet(cfg, rng, "g_yx", dtype)
        self.d_x = DiscriminatorNet(cfg, rng, "d_x", dtype)
        self.d_y = DiscriminatorNet(cfg, rng, "d_y", dtype)

    def generator_parameters(self):
        return self.g_xy.parameters() + self.g_yx.parameters()

    def discriminator_parameters(self):
        return self.d_x.parameters() + self.d_y.parameters()

    def parameters(self):
        return self.generator_parameters() + self.discriminator_parameters()

    def power_iter_states(self):
        states = {}
        states.update(self.d_x.power_iter_states())
        states.update(self.d_y.power_iter_states())
        return states


# ---------------------------------------------------------------------------
# spectrogram-level operations


def trim_edges(spec: np.ndarray, margin: int = TRIM_FRAMES) -> np.ndarray:
    """Drop margin frames from each edge of a (frames, bins) spectrogram."""
    spec = np.asarray(spec)
    if spec.shape[0] <= 2 * margin:
        raise ValueError(
            f"need more than {2 * margin} frames to trim {margin} per edge, "
            f"got {spec.shape[0]}"
        )
    return spec[margin : spec.shape[0] - margin]


def _trim_time(x, margin):
    # tensor variant of trim_edges on (batch, channels, frames)
    frames = x.shape[-1]
    if frames <= 2 * margin:
        raise ValueError(f"cannot trim {margin} frames per edge from {frames}")
    return ad.narrow(x, (slice(None), slice(None), slice(margin, frames - margin)))


def _to_net_layout(batch, dtype):
    """(batch, frames, bins) array -> constant Tensor (batch, bins, frames)."""
    b = np.asarray(batch)
    if b.ndim != 3 or b.shape[2] != N_BINS:
        raise ValueError(f"expected batch shape (B, frames, {N_BINS}), got {b.shape}")
    if b.shape[0] < 1:
        raise ValueError("empty batch")
    return ad.Tensor(np.ascontiguousarray(b.transpose(0, 2, 1), dtype=dtype))


def _noisy(x, rng, sigma, dtype):
    if sigma == 0.0:
        return x
    noise = rng.normal(0.0, sigma, size=x.shape).astype(dtype)
    return ad.add(x, ad.Tensor(noise))


def generator_forward(net: GeneratorNet, spec: np.ndarray) -> np.ndarray:
    """Apply a generator to one (frames, 128) spectrogram, frames preserved."""
    s = np.asarray(spec)
    if s.ndim != 2 or s.shape[1] != N_BINS:
        raise ValueError(f"expected shape (frames, {N_BINS}), got {s.shape}")
    with ad.no_grad():
        out = net.forward(_to_net_layout(s[None], np.float64))
    return out.data[0].T.astype(np.float64)


def discriminator_forward(net: DiscriminatorNet, spec: np.ndarray, noise_rng) -> float:
    """Score one 128-frame crop.  Does not advance the power-iteration state,
    so repeated calls with an equally seeded noise_rng are identical."""
    s = np.asarray(spec)
    if s.shape != (128, N_BINS):
        raise ValueError(f"expected a (128, {N_BINS}) crop, got {s.shape}")
    if isinstance(noise_rng, (int, np.integer)):
        noise_rng = np.random.default_rng(noise_rng)
    net.prepare(update=False)
    with ad.no_grad():
        x = _to_net_layout(s[None], np.float64)
        score = net.forward(_noisy(x, noise_rng, net.cfg.noise_sigma, np.float64))
    return float(score.data[0])


def generator_loss(pair: ConverterPair, batch_x, batch_y, rng, update_sn: bool = True):
    """Hinge adversarial + cycle + identity loss for both generators.

    batch_x, batch_y: (B, frames, 128) crops from each speaker.  Adversarial
    terms score edge-trimmed generator outputs through the discriminators
    (with fresh input noise); the L1 cycle/identity terms compare untrimmed
    grids as mean absolute difference.  Returns (loss Tensor, term dict).
    """
    cfg = pair.cfg
    tx = _to_net_layout(batch_x, pair.dtype)
    ty = _to_net_layout(batch_y, pair.dtype)

    fake_y = pair.g_xy.forward(tx)
    fake_x = pair.g_yx.forward(ty)
    cycled_x = pair.g_yx.forward(fake_y)
    cycled_y = pair.g_xy.forward(fake_x)
    same_x = pair.g_yx.forward(tx)
    same_y = pair.g_xy.forward(ty)

    pair.d_x.prepare(update=update_sn)
    pair.d_y.prepare(update=update_sn)
    score_x = pair.d_x.forward(_noisy(_trim_time(fake_x, cfg.trim), rng, cfg.noise_sigma, pair.dtype))
    score_y = pair.d_y.forward(_noisy(_trim_time(fake_y, cfg.trim), rng, cfg.noise_sigma, pair.dtype))

    terms = {
        "adv_x": ad.mean(ad.relu(ad.neg(score_x))),
        "adv_y": ad.mean(ad.relu(ad.neg(score_y))),
        "cycle_x": ad.mean(ad.absolute(ad.sub(cycled_x, tx))),
        "cycle_y": ad.mean(ad.absolute(ad.sub(cycled_y, ty))),
        "identity_x": ad.mean(ad.absolute(ad.sub(same_x, tx))),
        "identity_y": ad.mean(ad.absolute(ad.sub(same_y, ty))),
    }
    loss = ad.add(terms["adv_x"], terms["adv_y"])
    loss = ad.add(loss, ad.scale(ad.add(terms["cycle_x"], terms["cycle_y"]), cfg.lambda_cy))
    loss = ad.add(loss, ad.scale(ad.add(terms["identity_x"], terms["identity_y"]), cfg.lambda_id))
    return loss, {k: v.item() for k, v in terms.items()}


def discriminator_loss(pair: ConverterPair, batch_x, batch_y, rng, update_sn: bool = True):
    """Hinge loss for both discriminators at margin m.

    Real inputs are the edge-trimmed 128-frame crops; fakes are edge-trimmed
    generator outputs computed without gradients, so no gradient reaches the
    generators.  Returns (loss Tensor, term dict).
    """
    cfg = pair.cfg
    m = cfg.margin
    tx = _to_net_layout(batch_x, pair.dtype)
    ty = _to_net_layout(batch_y, pair.dtype)

    with ad.no_grad():
        fake_y = pair.g_xy.forward(tx)
        fake_x = pair.g_yx.forward(ty)
    fake_y = fake_y.detach()
    fake_x = fake_x.detach()

    pair.d_x.prepare(update=update_sn)
    pair.d_y.prepare(update=update_sn)
    real_x = pair.d_x.forward(_noisy(_trim_time(tx, cfg.trim), rng, cfg.noise_sigma, pair.dtype))
    real_y = pair.d_y.forward(_noisy(_trim_time(ty, cfg.trim), rng, cfg.noise_sigma, pair.dtype))
    fake_x_score = pair.d_x.forward(_noisy(_trim_time(fake_x, cfg.trim), rng, cfg.noise_sigma, pair.dtype))
    fake_y_score = pair.d_y.forward(_noisy(_trim_time(fake_y, cfg.trim), rng, cfg.noise_sigma, pair.dtype))

    terms = {
        "real_x": ad.mean(ad.relu(ad.sub(m, real_x))),
        "real_y": ad.mean(ad.relu(ad.sub(m, real_y))),
        "fake_x": ad.mean(ad.relu(ad.add(m, fake_x_score))),
        "fake_y": ad.mean(ad.relu(ad.add(m, fake_y_score))),
    }
    loss = ad.add(ad.add(terms["real_x"], terms["real_y"]),
                  ad.add(terms["fake_x"], terms["fake_y"]))
    return loss, {k: v.item() for k, v in terms.items()}


def convert_utterance(pair: ConverterPair, spec: np.ndarray, direction: str) -> np.ndarray:
    """Convert a (frames, 128) spectrogram; output aligns 1:1 with input frames.

    The input is zero-padded by the trim margin on each edge before the
    generator so that edge trimming cancels the padding exactly.  direction
    is "a2b" (g_xy) or "b2a" (g_yx).
    """
    if direction == "a2b":
        net = pair.g_xy
    elif direction == "b2a":
        net = pair.g_yx
    else:
        raise ValueError(f"direction must be 'a2b' or 'b2a', got {direction!r}")
    s = np.asarray(spec)
    if s.ndim != 2 or s.shape[1] != N_BINS:
        raise ValueError(f"expected shape (frames, {N_BINS}), got {s.shape}")
    margin = pair.cfg.trim
    padded = np.pad(s, ((margin, margin), (0, 0)))
    out = generator_forward(net, padded)
    return trim_edges(out, margin)
