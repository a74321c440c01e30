"""Command-line pipeline driver.

Subcommands: features, train-converter, train-vocoder, convert, copy-synth,
plot, verify.  Exit codes: 0 success, 1 check or processing failure,
2 usage/config error.  Every command is deterministic for a fixed --seed.
"""

import argparse
import dataclasses
import logging
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from . import audio, training
from .converter import convert_utterance
from .reference import run_verification
from .training import TrainConfig, load_checkpoint
from .vocoder import synthesize

DEFAULT_SEED = 1234

# config-file keys that are paths rather than TrainConfig fields
PATH_KEYS = ("corpus_a", "corpus_b", "output_dir", "converter_checkpoint",
             "vocoder_checkpoint")


class ConfigError(ValueError):
    """Bad config file or flag combination (exit code 2)."""


def parse_config_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment, blank lines ignored."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key: str, value: str):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if key in PATH_KEYS:
        return value
    if key not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    kind = fields[key].type
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in (tuple, "tuple"):
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}")
    return value


def build_run_config(args) -> tuple:
    """Merge config file and command-line overrides into (TrainConfig, paths)."""
    raw = {}
    if args.config:
        raw.update(parse_config_file(args.config))
    for key, value in getattr(args, "set", None) or []:
        raw[key] = value
    for flag in ("corpus_a", "corpus_b", "output_dir"):
        if getattr(args, flag, None) is not None:
            raw[flag] = getattr(args, flag)
    for flag in ("steps", "seed", "checkpoint_every"):
        if getattr(args, flag, None) is not None:
            raw[flag] = str(getattr(args, flag))
    paths = {}
    config_kwargs = {}
    for key, value in raw.items():
        coerced = _coerce(key, str(value))
        if key in PATH_KEYS:
            paths[key] = coerced
        else:
            config_kwargs[key] = coerced
    try:
        config = TrainConfig(**config_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}")
    return config, paths


def _load_spec_corpus(dirpath, what: str):
    root = Path(dirpath)
    if not root.is_dir():
        raise ConfigError(f"{what} {dirpath!r} is not a directory")
    files = sorted(root.glob("*.wav"))
    if not files:
        raise ConfigError(f"{what} {dirpath!r} contains no .wav files")
    specs = []
    waves = []
    for f in files:
        wave = audio.read_wav(f)
        waves.append(wave)
        specs.append(audio.stft(wave))
    return specs, waves


def cmd_features(args) -> int:
    src = Path(args.inp)
    if src.is_dir():
        files = sorted(src.glob("*.wav"))
        if not files:
            print("error: no input files", file=sys.stderr)
            return 1
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        failures = 0
        for f in files:
            try:
                spec = audio.stft(audio.read_wav(f))
                audio.save_spectrogram(spec, out_dir / f"{f.stem}.spec")
                if args.csv:
                    audio.save_spectrogram_csv(spec, out_dir / f"{f.stem}.csv")
            except (OSError, ValueError) as exc:
                print(f"error: {f}: {exc}", file=sys.stderr)
                failures += 1
        return 1 if failures else 0
    spec = audio.stft(audio.read_wav(src))
    out = Path(args.out)
    if out.is_dir():
        out = out / f"{src.stem}.spec"
    audio.save_spectrogram(spec, out)
    if args.csv:
        audio.save_spectrogram_csv(spec, out.with_suffix(".csv"))
    return 0


def cmd_train_converter(args) -> int:
    config, paths = build_run_config(args)
    for key in ("corpus_a", "corpus_b", "output_dir"):
        if key not in paths:
            raise ConfigError(f"train-converter needs {key} (flag or config file)")
    print(f"seed: {config.seed}")
    specs_a, _ = _load_spec_corpus(paths["corpus_a"], "corpus_a")
    specs_b, _ = _load_spec_corpus(paths["corpus_b"], "corpus_b")
    out_dir = Path(paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_checkpoint(args.resume)
        if not isinstance(state, training.ConverterTrainState):
            raise ConfigError(f"{args.resume} is not a converter checkpoint")
    else:
        state = training.ConverterTrainState(config)
    training.run_converter_training(
        state, specs_a, specs_b,
        log_path=out_dir / "converter_log.txt",
        checkpoint_path=out_dir / "converter.ckpt",
    )
    print(f"trained to step {state.step}; checkpoint at {out_dir / 'converter.ckpt'}")
    return 0


def cmd_train_vocoder(args) -> int:
    config, paths = build_run_config(args)
    for key in ("corpus_a", "output_dir"):
        if key not in paths:
            raise ConfigError(f"train-vocoder needs {key} (flag or config file)")
    print(f"seed: {config.seed}")
    specs, waves = _load_spec_corpus(paths["corpus_a"], "corpus_a")
    corpus = list(zip(specs, waves))
    out_dir = Path(paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_checkpoint(args.resume)
        if not isinstance(state, training.VocoderTrainState):
            raise ConfigError(f"{args.resume} is not a vocoder checkpoint")
    else:
        state = training.VocoderTrainState(config)
    training.run_vocoder_training(
        state, corpus,
        log_path=out_dir / "vocoder_log.txt",
        checkpoint_path=out_dir / "vocoder.ckpt",
    )
    print(f"trained to step {state.step}; checkpoint at {out_dir / 'vocoder.ckpt'}")
    return 0


def _load_vocoder_net(path):
    state = load_checkpoint(path)
    if not isinstance(state, training.VocoderTrainState):
        raise ConfigError(f"{path} is not a vocoder checkpoint")
    return state.net


def cmd_convert(args) -> int:
    print(f"seed: {args.seed}")
    wave = audio.read_wav(args.inp)
    spec = audio.stft(wave)
    conv_state = load_checkpoint(args.converter)
    if not isinstance(conv_state, training.ConverterTrainState):
        raise ConfigError(f"{args.converter} is not a converter checkpoint")
    net = _load_vocoder_net(args.vocoder)
    converted = convert_utterance(conv_state.pair, spec, args.direction)
    converted = np.maximum(converted, 0.0)  # magnitudes are nonnegative by contract
    out_wave = synthesize(net, converted, np.random.default_rng(args.seed))
    audio.write_wav(out_wave, args.out)
    print(f"wrote {len(out_wave)} samples to {args.out}")
    return 0


def cmd_copy_synth(args) -> int:
    print(f"seed: {args.seed}")
    wave = audio.read_wav(args.inp)
    spec = audio.stft(wave)
    net = _load_vocoder_net(args.vocoder)
    out_wave = synthesize(net, spec, np.random.default_rng(args.seed))
    audio.write_wav(out_wave, args.out)
    print(f"wrote {len(out_wave)} samples to {args.out}")
    return 0


def render_spectrogram_image(spec) -> np.ndarray:
    """(frames, 128) grid -> uint8 image, bin 0 at the bottom row,
    log-compressed intensity normalized to [0, 255]."""
    grid = np.log1p(np.maximum(np.asarray(spec, dtype=np.float64), 0.0))
    peak = grid.max()
    if peak > 0:
        grid = grid / peak * 255.0
    return np.ascontiguousarray(grid.T[::-1, :]).astype(np.uint8)


def _write_pgm(img, path):
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def _write_png(img, path):
    def chunk(tag, payload):
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    height, width = img.shape
    header = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)  # 8-bit grayscale
    raw = b"".join(b"\x00" + img[row].tobytes() for row in range(height))
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", header))
        f.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        f.write(chunk(b"IEND", b""))


def cmd_plot(args) -> int:
    spec = audio.load_spectrogram(args.spec)
    img = render_spectrogram_image(spec)
    out = Path(args.out)
    if out.suffix.lower() == ".png":
        _write_png(img, out)
    else:
        _write_pgm(img, out)
    print(f"wrote {img.shape[1]}x{img.shape[0]} image to {out}")
    return 0


def cmd_verify(args) -> int:
    reports = run_verification(corrupt=args.corrupt)
    for report in reports:
        print(report.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclevc",
        description="Unpaired spectrogram-to-spectrogram voice conversion pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract spectrograms from WAV files")
    p.add_argument("--in", dest="inp", required=True, help="input WAV file or directory")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--csv", action="store_true", help="also write CSV grids")
    p.set_defaults(func=cmd_features)

    for name, fn in (("train-converter", cmd_train_converter),
                     ("train-vocoder", cmd_train_vocoder)):
        p = sub.add_parser(name, help=f"run {name.replace('-', ' ')}")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       type=lambda kv: kv.split("=", 1), help="override one config key")
        p.add_argument("--corpus-a", dest="corpus_a", help="WAV directory, speaker A")
        p.add_argument("--corpus-b", dest="corpus_b", help="WAV directory, speaker B")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        p.add_argument("--resume", help="checkpoint to continue from")
        p.set_defaults(func=fn)

    p = sub.add_parser("convert", help="convert one utterance end to end")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--direction", choices=("a2b", "b2a"), required=True,
                   help="a2b converts speaker A (corpus_a) toward speaker B")
    p.add_argument("--converter", required=True, help="converter checkpoint")
    p.add_argument("--vocoder", required=True, help="vocoder checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("copy-synth", help="vocode an utterance without conversion")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--vocoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_copy_synth)

    p = sub.add_parser("plot", help="render a spectrogram grid file to an image")
    p.add_argument("--spec", required=True, help="raw grid file from `features`")
    p.add_argument("--out", required=True, help=".pgm (default) or .png")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("verify", help="run all oracle checks")
    p.add_argument("--corrupt", help="deliberately corrupt one named check (testing aid)")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
