"""Command-line surface: train, encode, decode, eval, inspect.

Exit codes are a stable scripting contract: 0 success, 2 input error,
3 numeric failure, 4 stream/config mismatch.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import dsp
from .bitstream import StreamFormatError, read_stream, stage_histograms, unpack, write_stream
from .config import CodecConfig, load_config
from .pipeline import Codec, StreamConfigMismatch
from .quantizer import perplexity
from .sampler import IntegrationError, SamplerConfig
from .trainer import (
    SyntheticDatasetSpec,
    TrainConfig,
    TrainingDiverged,
    generate_synthetic_corpus,
    log_spectral_distance,
    train,
    write_loss_csv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_MISMATCH = 4


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _load_audio(path, config: CodecConfig) -> dsp.AudioBuffer:
    """Read a WAV and resample to the codec rate when they disagree."""
    audio = dsp.read_wav(path)
    if audio.sample_rate != config.sample_rate:
        _warn(f"{path}: resampling {audio.sample_rate} Hz -> {config.sample_rate} Hz")
        audio = dsp.resample_linear(audio, config.sample_rate)
    return audio


def _clamped_cfg_factor(value: float) -> float:
    if not 0.0 <= value <= 2.0:
        clamped = min(max(value, 0.0), 2.0)
        _warn(f"guidance factor {value} outside [0, 2]; clamped to {clamped}")
        return clamped
    return value


def _sampler_from_args(config: CodecConfig, args) -> SamplerConfig:
    steps = config.ode_steps if args.nfe_steps is None else args.nfe_steps
    factor = config.cfg_factor if args.cfg is None else _clamped_cfg_factor(args.cfg)
    enabled = config.cfg_enabled and not args.no_cfg
    return SamplerConfig(steps=steps, cfg_factor=factor, cfg_enabled=enabled, seed=args.seed)


def _load_codec(path) -> tuple[Codec, dict]:
    codec, metadata = Codec.load(path)
    codec.eval_mode()
    return codec, metadata


# -- commands ------------------------------------------------------------


def cmd_train(args) -> int:
    codec_cfg, rest = load_config(args.config)
    train_kw = dict(rest.get("train", {}))
    unknown = set(train_kw) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown [train] keys in {args.config}: {sorted(unknown)}")
    for key in ("steps", "batch_size", "lr", "seed", "precision"):
        value = getattr(args, key)
        if value is not None:
            train_kw[key] = value
    train_cfg = TrainConfig(**train_kw)

    if args.wav_dir is not None:
        paths = sorted(Path(args.wav_dir).glob("*.wav"))
        if not paths:
            raise ValueError(f"no .wav files in {args.wav_dir}")
        corpus = [_load_audio(p, codec_cfg) for p in paths]
        print(f"training corpus: {len(corpus)} files from {args.wav_dir}")
    else:
        data_kw = dict(rest.get("data", {}))
        unknown = set(data_kw) - set(SyntheticDatasetSpec.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown [data] keys in {args.config}: {sorted(unknown)}")
        data_kw.setdefault("sample_rate", codec_cfg.sample_rate)
        spec = SyntheticDatasetSpec(**data_kw)
        corpus = generate_synthetic_corpus(spec)
        print(f"training corpus: {len(corpus)} synthetic items (seed {spec.seed})")

    def progress(r):
        print(
            f"step {r.step}: total={r.total:.4f} L_prior={r.l_prior:.4f} "
            f"L_q={r.l_q:.4f} L_CFM={r.l_cfm:.4f} |g|={r.grad_norm:.3f}"
        )

    t0 = time.perf_counter()
    state, reports = train(codec_cfg, train_cfg, corpus, log_every=args.log_every, progress=progress)
    minutes = (time.perf_counter() - t0) / 60.0
    state.save(args.out)
    csv_path = args.loss_csv if args.loss_csv is not None else str(args.out) + ".loss.csv"
    write_loss_csv(csv_path, reports)
    print(f"trained {train_cfg.steps} steps in {minutes:.1f} min")
    print(f"checkpoint: {args.out}")
    print(f"loss curve: {csv_path}")
    return EXIT_OK


def cmd_encode(args) -> int:
    codec, _ = _load_codec(args.checkpoint)
    if args.stages is not None and not 1 <= args.stages <= codec.config.stages:
        raise ValueError(f"--stages must be in 1..{codec.config.stages}, got {args.stages}")
    audio = _load_audio(args.wav_in, codec.config)
    stream = codec.encode_audio(audio, args.stages)
    write_stream(args.fmac_out, stream)
    h = stream.header
    print(f"encoded {args.wav_in} -> {args.fmac_out}")
    print(f"frames: {h.frame_count}  stages: {h.stages}  payload: {h.payload_bytes} bytes")
    print(f"rate: {h.bits_per_second} bps")
    return EXIT_OK


def cmd_decode(args) -> int:
    codec, _ = _load_codec(args.checkpoint)
    stream = read_stream(args.fmac_in)
    sampler = _sampler_from_args(codec.config, args)
    audio, info = codec.decode_stream(
        stream, sampler, single_step=args.single_step, griffin_lim_iters=args.gl_iters
    )
    dsp.write_wav(args.wav_out, audio)
    print(f"decoded {args.fmac_in} -> {args.wav_out}")
    print(f"NFE: {info.nfe}")
    print(f"RTF: {info.rtf:.3f}  ({info.decode_seconds:.2f} s decode for {info.audio_seconds:.2f} s audio)")
    return EXIT_OK


def cmd_eval(args) -> int:
    paths = sorted(Path(args.wav_dir).glob("*.wav"))
    if not paths:
        raise ValueError(f"no .wav files in {args.wav_dir}")
    codec, _ = _load_codec(args.checkpoint)
    sampler = _sampler_from_args(codec.config, args)
    if args.plot_dir is not None:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            raise ValueError("--plot-dir requires matplotlib, which is not installed")
        Path(args.plot_dir).mkdir(parents=True, exist_ok=True)

    rows = []
    for path in paths:
        audio = _load_audio(path, codec.config)
        mel = dsp.mel_analyze(audio, codec.config, codec.stats)
        t0 = time.perf_counter()
        if args.identity:
            gen, nfe, bps = mel, 0, 0.0
        else:
            stream = codec.encode_mel_frames(mel, args.stages)
            codes, _ = unpack(stream)
            condition = codec.decoded_condition(codes)
            gen, nfe = codec.sample_mel(condition, sampler, args.single_step)
            bps = stream.header.bits_per_second
        rtf = (time.perf_counter() - t0) / audio.duration
        ref_log = dsp.denormalize(mel, codec.stats)
        gen_log = dsp.denormalize(gen, codec.stats)
        lsd = log_spectral_distance(ref_log, gen_log)
        rows.append([path.name, audio.duration, lsd, bps, nfe, rtf])
        print(f"{path.name}: LSD={lsd:.4f}  rate={bps} bps  NFE={nfe}  RTF={rtf:.3f}")
        if args.plot_dir is not None:
            t = min(ref_log.shape[0], gen_log.shape[0])
            fig, ax = plt.subplots(figsize=(8, 4))
            im = ax.imshow((gen_log[:t] - ref_log[:t]).T, aspect="auto", origin="lower", cmap="coolwarm")
            ax.set_xlabel("frame")
            ax.set_ylabel("mel band")
            ax.set_title(f"{path.name}: generated - reference log-mel")
            fig.colorbar(im, ax=ax)
            fig.savefig(Path(args.plot_dir) / f"{path.stem}_meldiff.png", dpi=100)
            plt.close(fig)

    agg = [
        "aggregate",
        float(np.sum([r[1] for r in rows])),
        float(np.mean([r[2] for r in rows])),
        float(np.mean([r[3] for r in rows])),
        rows[-1][4],
        float(np.mean([r[5] for r in rows])),
    ]
    with open(args.report_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["item", "seconds", "lsd", "bps", "nfe", "rtf"])
        w.writerows(rows)
        w.writerow(agg)
    print(f"report: {args.report_csv} ({len(rows)} items + aggregate)")
    print(f"aggregate LSD: {agg[2]:.4f}  mean RTF: {agg[5]:.3f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    stream = read_stream(args.fmac_in)
    h = stream.header
    codes, _ = unpack(stream)
    hists = stage_histograms(stream)
    print(f"magic: FMAC  version: {h.version}")
    print(f"sample_rate: {h.sample_rate}  hop: {h.hop}  n_mels: {h.n_mels}")
    print(f"stages: {h.stages}  bits_per_index: {h.codebook_bits}")
    print(f"frames: {h.frame_count}  duration: {h.duration_seconds:.3f} s")
    print(f"rate: {h.bits_per_second} bps")
    size = 2**h.codebook_bits
    buckets = min(16, size)
    width = size // buckets
    for s in range(h.stages):
        hist = hists[s]
        used = int(np.count_nonzero(hist))
        perp = perplexity(codes.indices[:, s], size)
        coarse = hist.reshape(buckets, width).sum(axis=1)
        bar = " ".join(str(int(v)) for v in coarse)
        print(f"stage {s}: used {used}/{size}  perplexity {perp:.2f}")
        print(f"  histogram ({buckets} buckets of {width}): {bar}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nfe-steps", type=int, default=None, help="Euler steps (NFE doubles when guidance is on)")
    p.add_argument("--cfg", type=float, default=None, help="guidance factor, clamped to [0, 2]")
    p.add_argument("--no-cfg", action="store_true", help="disable classifier-free guidance")
    p.add_argument("--seed", type=int, default=0, help="noise seed for the ODE start point")
    p.add_argument("--single-step", action="store_true", help="one Euler step without guidance (1 NFE)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowmac",
        description="Flow-matching mel audio codec. Exit codes: 0 ok, 2 input error, "
        "3 numeric failure, 4 stream/config mismatch.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec and write a checkpoint")
    p.add_argument("config", help="TOML config file ([codec], [train], [data] sections)")
    p.add_argument("out", help="output checkpoint path")
    p.add_argument("--wav-dir", default=None, help="train on WAVs from this directory instead of synthetic data")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", choices=("float32", "float64"), default=None)
    p.add_argument("--loss-csv", default=None, help="loss curve path (default: <out>.loss.csv)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a WAV into a .fmac stream")
    p.add_argument("wav_in")
    p.add_argument("checkpoint")
    p.add_argument("fmac_out")
    p.add_argument("--stages", type=int, default=None, help="quantizer stages to keep (8 -> 3000 bps, 4 -> 1500 bps)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a .fmac stream into a WAV")
    p.add_argument("fmac_in")
    p.add_argument("checkpoint")
    p.add_argument("wav_out")
    _add_sampler_flags(p)
    p.add_argument("--gl-iters", type=int, default=32, help="Griffin-Lim iterations for waveform synthesis")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="round-trip a directory of WAVs and report metrics")
    p.add_argument("wav_dir")
    p.add_argument("checkpoint")
    p.add_argument("report_csv")
    p.add_argument("--stages", type=int, default=None)
    _add_sampler_flags(p)
    p.add_argument("--plot-dir", default=None, help="write per-item mel-difference plots here")
    p.add_argument("--identity", action="store_true", help="bypass the codec (plumbing check; LSD must be 0)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print header fields and per-stage index histograms")
    p.add_argument("fmac_in")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StreamConfigMismatch as e:
        print(f"error: stream/config mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except StreamFormatError as e:
        print(f"error: bad stream: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (TrainingDiverged, IntegrationError) as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, dsp.AudioFormatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
