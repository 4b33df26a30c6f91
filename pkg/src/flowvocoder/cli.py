"""Command line: extract-mels, train, synthesize, evaluate, check.

Exit codes: 0 success, 1 check or numeric failure, 2 usage, config or input error.
"""
import argparse
import logging
import sys
from pathlib import Path

import torch

from .conditioning import mel_extract, normalize_audio, write_mel_cache
from .config import Config
from .errors import ConfigurationError, InputError, NumericFailure
from .wavio import read_wav

log = logging.getLogger("flowvocoder")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def resolve_config(path, base=None):
    config = Config.load(path, base) if path else (base or Config())
    log.info("resolved config:\n%s", config.to_text().rstrip())
    return config


def cmd_extract_mels(args):
    config = resolve_config(args.config)
    src, dst = Path(args.inp), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    dst.mkdir(parents=True, exist_ok=True)
    wavs = sorted(src.glob("*.wav"))
    written = 0
    for path in wavs:
        try:
            pcm, rate = read_wav(path)
            if rate != config.sample_rate:
                raise InputError(f"{path}: sample rate {rate} != configured {config.sample_rate}")
            mel = mel_extract(normalize_audio(pcm), config.sample_rate, config.fft, config.hop,
                              config.win, config.n_mels)
        except InputError as exc:
            log.warning("skipping %s", exc)
            continue
        write_mel_cache(dst / f"{path.stem}.fvml", mel.frames)
        written += 1
    log.info("wrote %d of %d mel files to %s", written, len(wavs), dst)
    if wavs and not written:
        raise UsageError("no input file could be processed")
    return EXIT_OK


def cmd_train(args):
    from .training import Checkpoint, Trainer, load_dataset, split_dataset, train

    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"data directory {data} does not exist")
    ckpt = Checkpoint.load(args.resume) if args.resume else None
    config = resolve_config(args.config, ckpt.config if ckpt else None)
    train_set, test_set = split_dataset(load_dataset(data, config))
    if not train_set:
        raise UsageError(f"no usable training files in {data}")
    log.info("%d training and %d held-out files", len(train_set), len(test_set))
    trainer = Trainer.from_checkpoint(ckpt, train_set, config) if ckpt else None
    trainer, history = train(train_set, config, out_dir=args.out, trainer=trainer)
    if history:
        log.info("finished at iteration %d, last loss %.6f", trainer.iteration, history[-1])
    return EXIT_OK


def cmd_synthesize(args):
    from .synthesis import load_mel_source, save_result, synthesize
    from .training import load_model

    model, _ = load_model(args.ckpt)
    mel = load_mel_source(model, mel_path=args.mel, wav_path=args.wav)
    result = synthesize(mel, model, temperature=args.temperature, seed=args.seed,
                        tol=model.config.inverse_tol)
    out = Path(args.out)
    save_result(result, out, out.with_suffix(".timing.csv"))
    print(f"wrote {result.pcm.size} samples to {out}; RTF {result.rtf:.3f}")
    return EXIT_OK


def cmd_evaluate(args):
    from .metrics import evaluate
    from .training import load_dataset, load_model

    if args.n is not None and args.n < 1:
        raise UsageError(f"--n must be at least 1, got {args.n}")
    model, _ = load_model(args.ckpt)
    ref = Path(args.ref_dir)
    if not ref.is_dir():
        raise UsageError(f"reference directory {ref} does not exist")
    utterances = load_dataset(ref, model.config)
    report, rows = evaluate(utterances, model, n=args.n, seed=model.config.seed,
                            tol=model.config.inverse_tol)
    print(report.summary())
    if args.report:
        report.write_csv(args.report, rows)
    else:
        print()
        report.write_csv(sys.stdout, rows)
    return EXIT_OK


def cmd_check(args):
    from .checks import run_checks

    return EXIT_OK if run_checks(sys.stdout) else EXIT_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="flowvocoder", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap on CPU threads")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key=value config file")
        p.set_defaults(func=fn)
        return p

    p = add("extract-mels", cmd_extract_mels, "write one FVML mel file per WAV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "maximum-likelihood training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")

    p = add("synthesize", cmd_synthesize, "generate a waveform from mel frames")
    p.add_argument("--ckpt", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mel")
    src.add_argument("--wav")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = add("evaluate", cmd_evaluate, "analysis-synthesis metrics on reference WAVs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--report", help="write the CSV report here instead of standard output")

    add("check", cmd_check, "run the invariant self-check suite")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
