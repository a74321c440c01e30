"""Data sampling, training loops, and resumable checkpoints.

All training runs in float32 with a single seeded random stream per
trainer, so fixed seed + fixed corpus reproduces loss logs bit for bit and
checkpoints round-trip exactly.
"""

import dataclasses
import json
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .converter import ConverterConfig, ConverterPair, discriminator_loss, generator_loss
from .nn import Adam
from .vocoder import VocoderConfig, VocoderNet, _segment_views, nll_graph

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SCYC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Base for unreadable or incompatible checkpoint files."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Checkpoint arrays do not fit the model built from the config."""


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite; the step was rejected."""


@dataclass
class TrainConfig:
    crop_frames: int = 160
    trim_frames: int = 16
    batch_converter: int = 64
    batch_vocoder: int = 160
    lr_converter: float = 2e-4
    lr_vocoder: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    lambda_cy: float = 10.0
    lambda_id: float = 1.0
    margin: float = 0.5
    noise_sigma: float = 0.1
    n_g: int = 7
    n_d: int = 6
    channels: int = 256
    vocoder_hidden: int = 256
    vocoder_head_hidden: int = 256
    vocoder_up_hidden: tuple = (2048, 4096, 8192)
    seed: int = 1234
    steps: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.crop_frames <= 2 * self.trim_frames:
            raise ValueError(
                f"crop_frames ({self.crop_frames}) must exceed twice "
                f"trim_frames ({self.trim_frames})"
            )
        for field in ("lr_converter", "lr_vocoder"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if isinstance(self.vocoder_up_hidden, list):
            self.vocoder_up_hidden = tuple(self.vocoder_up_hidden)

    def converter_config(self) -> ConverterConfig:
        return ConverterConfig(
            channels=self.channels, n_g=self.n_g, n_d=self.n_d,
            trim=self.trim_frames, noise_sigma=self.noise_sigma,
            lambda_cy=self.lambda_cy, lambda_id=self.lambda_id, margin=self.margin,
        )

    def vocoder_config(self) -> VocoderConfig:
        return VocoderConfig(
            hidden=self.vocoder_hidden, head_hidden=self.vocoder_head_hidden,
            up_hidden=tuple(self.vocoder_up_hidden),
        )


# ---------------------------------------------------------------------------
# corpus sampling


def sample_crop(corpus, rng, crop_frames: int = 160) -> np.ndarray:
    """A contiguous crop from a uniformly chosen eligible utterance.

    Utterances shorter than crop_frames are not eligible; the start offset
    is uniform over all valid positions, so crops never cross utterance
    boundaries.
    """
    eligible = [s for s in corpus if s.shape[0] >= crop_frames]
    if not eligible:
        raise ValueError(f"no utterance with at least {crop_frames} frames")
    spec = eligible[rng.integers(len(eligible))]
    offset = int(rng.integers(spec.shape[0] - crop_frames + 1))
    return spec[offset : offset + crop_frames]


def converter_corpus(specs, crop_frames: int):
    """Filter a spectrogram list to crop-eligible utterances, logging drops."""
    kept = [s for s in specs if s.shape[0] >= crop_frames]
    dropped = len(specs) - len(kept)
    if dropped:
        logger.warning("excluded %d utterance(s) shorter than %d frames",
                       dropped, crop_frames)
    return kept


def sample_converter_batch(corpus, rng, batch_size: int, crop_frames: int) -> np.ndarray:
    return np.stack([sample_crop(corpus, rng, crop_frames) for _ in range(batch_size)])


def sample_vocoder_batch(corpus, rng, batch_size: int):
    """batch_size (window, prev, target) segments from (spec, wave) pairs.

    Segments are one frame each: uniform utterance, then uniform frame.
    """
    if not corpus:
        raise ValueError("empty vocoder corpus")
    windows, prevs, targets = [], [], []
    for _ in range(batch_size):
        spec, wave = corpus[rng.integers(len(corpus))]
        t = int(rng.integers(spec.shape[0]))
        w, p, x = _segment_views(spec, wave, [t])
        windows.append(w[0])
        prevs.append(p[0])
        targets.append(x[0])
    return np.stack(windows), np.stack(prevs), np.stack(targets)


# ---------------------------------------------------------------------------
# train states and steps


class ConverterTrainState:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.pair = ConverterPair(config.converter_config(), self.rng, dtype=np.float32)
        self.opt_d = Adam(self.pair.discriminator_parameters(), config.lr_converter,
                          config.beta1, config.beta2, config.epsilon)
        self.opt_g = Adam(self.pair.generator_parameters(), config.lr_converter,
                          config.beta1, config.beta2, config.epsilon)
        self.step = 0


class VocoderTrainState:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.net = VocoderNet(config.vocoder_config(), self.rng, dtype=np.float32)
        self.opt = Adam(self.net.parameters(), config.lr_vocoder,
                        config.beta1, config.beta2, config.epsilon)
        self.step = 0


def train_converter_step(state: ConverterTrainState, batch_x, batch_y):
    """One discriminator update then one generator update on the same batches.

    Returns the pre-update values (L_D, L_G).  The generator update leaves
    discriminator parameters untouched and vice versa.
    """
    pair = state.pair
    state.opt_d.zero_grad()
    state.opt_g.zero_grad()
    loss_d, _ = discriminator_loss(pair, batch_x, batch_y, state.rng)
    ld = loss_d.item()
    if not np.isfinite(ld):
        raise TrainingDivergedError(f"non-finite discriminator loss {ld}")
    ad.backward(loss_d)
    state.opt_d.step()

    state.opt_d.zero_grad()
    state.opt_g.zero_grad()
    loss_g, _ = generator_loss(pair, batch_x, batch_y, state.rng)
    lg = loss_g.item()
    if not np.isfinite(lg):
        raise TrainingDivergedError(f"non-finite generator loss {lg}")
    ad.backward(loss_g)
    state.opt_g.step()
    return ld, lg


def train_vocoder_step(state: VocoderTrainState, batch):
    """One Adam update on the teacher-forced NLL of a segment batch.

    Returns the loss value evaluated before the update.
    """
    windows, prevs, targets = batch
    state.opt.zero_grad()
    loss = nll_graph(state.net, windows, prevs, targets)
    lw = loss.item()
    if not np.isfinite(lw):
        raise TrainingDivergedError(f"non-finite vocoder loss {lw}")
    ad.backward(loss)
    state.opt.step()
    return lw


# ---------------------------------------------------------------------------
# checkpoints


def _named_arrays(state):
    arrays = {}
    if isinstance(state, ConverterTrainState):
        for p in state.pair.parameters():
            arrays[f"param.{p.name}"] = p.data
        for tag, opt in (("adam_d", state.opt_d), ("adam_g", state.opt_g)):
            for p in opt.params:
                arrays[f"{tag}.m.{p.name}"] = opt.m[p.name]
                arrays[f"{tag}.v.{p.name}"] = opt.v[p.name]
        for name, sn in state.pair.power_iter_states().items():
            arrays[f"sn_u.{name}"] = sn.u
    else:
        for p in state.net.parameters():
            arrays[f"param.{p.name}"] = p.data
        for p in state.opt.params:
            arrays[f"adam.m.{p.name}"] = state.opt.m[p.name]
            arrays[f"adam.v.{p.name}"] = state.opt.v[p.name]
    return arrays


def _meta(state):
    if isinstance(state, ConverterTrainState):
        kind = "converter"
        optim = {"d": state.opt_d.step_count, "g": state.opt_g.step_count}
        sn_iters = {name: sn.iteration_count
                    for name, sn in state.pair.power_iter_states().items()}
    else:
        kind = "vocoder"
        optim = {"t": state.opt.step_count}
        sn_iters = {}
    return {
        "kind": kind,
        "step": state.step,
        "config": dataclasses.asdict(state.config),
        "optim": optim,
        "sn_iters": sn_iters,
        "rng": state.rng.bit_generator.state,
    }


def save_checkpoint(state, path) -> None:
    """Write the whole training state: parameters, Adam moments, power
    iteration vectors, config snapshot, and random-stream state."""
    meta = json.dumps(_meta(state), sort_keys=True, separators=(",", ":")).encode()
    arrays = _named_arrays(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_raw(path):
    """Parse a checkpoint file into (meta dict, {name: float32 array})."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        data = r.take(4 * int(np.prod(shape, dtype=np.int64)))
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape)
    if r.pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return meta, arrays


def load_checkpoint(path, config: TrainConfig | None = None):
    """Rebuild a training state from a checkpoint.

    The model is constructed from the stored config (or the given override)
    and every stored grid is copied in; any missing, unknown, or misshapen
    array raises CheckpointMismatchError naming it.
    """
    meta, arrays = read_checkpoint_raw(path)
    if config is None:
        config = TrainConfig(**meta["config"])
    state = ConverterTrainState(config) if meta["kind"] == "converter" else VocoderTrainState(config)
    targets = _named_arrays(state)
    for name in targets:
        if name not in arrays:
            raise CheckpointMismatchError(f"{path}: checkpoint is missing {name!r}")
    for name, stored in arrays.items():
        if name not in targets:
            raise CheckpointMismatchError(f"{path}: unexpected array {name!r}")
        target = targets[name]
        if tuple(stored.shape) != tuple(target.shape):
            raise CheckpointMismatchError(
                f"{path}: shape mismatch for {name!r}: checkpoint "
                f"{tuple(stored.shape)} vs model {tuple(target.shape)}"
            )
        target[...] = stored
    state.step = int(meta["step"])
    if meta["kind"] == "converter":
        state.opt_d.step_count = int(meta["optim"]["d"])
        state.opt_g.step_count = int(meta["optim"]["g"])
        for name, sn in state.pair.power_iter_states().items():
            sn.iteration_count = int(meta["sn_iters"].get(name, 0))
    else:
        state.opt.step_count = int(meta["optim"]["t"])
    state.rng.bit_generator.state = meta["rng"]
    return state


# ---------------------------------------------------------------------------
# training loops


def _log_line(entry) -> str:
    return "\t".join([str(entry[0])] + [f"{v:.9e}" for v in entry[1:]])


def _run_loop(state, steps, one_step, log_path, checkpoint_path, checkpoint_every):
    entries = []
    log_file = open(log_path, "w") if log_path else None
    try:
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
        for _ in range(steps):
            entry = one_step()
            entries.append(entry)
            if log_file:
                log_file.write(_log_line(entry) + "\n")
                log_file.flush()
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    return entries


def run_converter_training(state: ConverterTrainState, corpus_x, corpus_y, steps=None,
                           log_path=None, checkpoint_path=None, checkpoint_every=None):
    """Train for the given number of steps; returns [(step, L_D, L_G), ...].

    Writes one log line per step and periodic checkpoints when paths are
    given; the checkpoint file always holds the newest complete state.
    """
    cfg = state.config
    steps = cfg.steps if steps is None else steps
    checkpoint_every = cfg.checkpoint_every if checkpoint_every is None else checkpoint_every
    corpus_x = converter_corpus(corpus_x, cfg.crop_frames)
    corpus_y = converter_corpus(corpus_y, cfg.crop_frames)

    def one_step():
        bx = sample_converter_batch(corpus_x, state.rng, cfg.batch_converter, cfg.crop_frames)
        by = sample_converter_batch(corpus_y, state.rng, cfg.batch_converter, cfg.crop_frames)
        ld, lg = train_converter_step(state, bx, by)
        state.step += 1
        return (state.step, ld, lg)

    return _run_loop(state, steps, one_step, log_path, checkpoint_path, checkpoint_every)


def run_vocoder_training(state: VocoderTrainState, corpus, steps=None, log_path=None,
                         checkpoint_path=None, checkpoint_every=None):
    """Train for the given number of steps; returns [(step, L_W), ...]."""
    cfg = state.config
    steps = cfg.steps if steps is None else steps
    checkpoint_every = cfg.checkpoint_every if checkpoint_every is None else checkpoint_every

    def one_step():
        batch = sample_vocoder_batch(corpus, state.rng, cfg.batch_vocoder)
        lw = train_vocoder_step(state, batch)
        state.step += 1
        return (state.step, lw)

    return _run_loop(state, steps, one_step, log_path, checkpoint_path, checkpoint_every)
