"""Command-line entry point: ``inpaintvad {generate,train,eval,score}``.

Exit codes: 0 ok, 2 usage, 3 contract violation (anomalous data handed to
training), 4 data/model mismatch or malformed input.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    CORRUPTION_MODES, FormatError, GeneratorConfig, LabeledSequence, build_test_set,
    generate_dataset, load_sprites, parse_sequences, read_sequences, write_sequences,
)
from .evaluation import (
    EvalConfig, eer_from_scored, export_loss_map, score_dataset, write_scores,
)
from .training import TrainConfig, train

logger = logging.getLogger("inpaintvad")

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_MISMATCH = 0, 2, 3, 4


class ContractError(Exception):
    pass


class MismatchError(Exception):
    pass


def _periods(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWS,COLS, got {text!r}") from None
    return a, b


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inpaintvad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="optional key=value file; flags override it")
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS thread cap; 1 gives bit-exact runs (default 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    g = sub.add_parser("generate", help="write train.mmsq and test.mmsq")
    common(g)
    g.add_argument("--train", type=int, default=1000, help="normal training sequences")
    g.add_argument("--test-normal", type=int, default=100, help="normal test sequences")
    g.add_argument("--test-corrupted", type=int, default=100, help="corrupted test sequences")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--frame-size", type=int, default=64, help="frame height and width")
    g.add_argument("--frames", type=int, default=20, help="frames per sequence")
    g.add_argument("--digits", type=int, default=2, help="digits per sequence")
    g.add_argument("--sprite-size", type=int, default=28, help="rendered digit size in pixels")
    g.add_argument("--speed", type=float, nargs=2, default=(2.0, 4.0), metavar=("MIN", "MAX"),
                   help="speed range in pixels per frame")
    g.add_argument("--sprites", help="IDX3 digit file (default: built-in glyphs)")
    g.add_argument("--mode", choices=CORRUPTION_MODES, default="both", help="corruption mode")

    t = sub.add_parser("train", help="fit a checkpoint on normal sequences")
    common(t)
    t.add_argument("--data", required=True, help="MMSQ training file")
    t.add_argument("--out", required=True, help="output directory for model.ivck and train.log")
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--context-length", type=int, default=9)
    t.add_argument("--bins", type=int, default=256, choices=(32, 64, 128, 256))
    t.add_argument("--hidden", type=int, default=32, help="hidden channels")
    t.add_argument("--precision", choices=("float32", "float64"), default="float32")
    t.add_argument("--mask-periods", type=_periods, default=(4, 5), help="ROWS,COLS lattice spacing")
    t.add_argument("--loss-scope", choices=("all", "masked_only"), default="all")
    t.add_argument("--log-interval", type=int, default=50)
    t.add_argument("--checkpoint-interval", type=int, default=500)
    t.add_argument("--no-attention", action="store_true", help="ablate the dynamic-filter attention")
    t.add_argument("--no-masked-frame", action="store_true", help="ablate the masked-frame input")

    e = sub.add_parser("eval", help="score a labeled dataset and report the EER")
    common(e)
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="MMSQ test file")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--scope", choices=("all", "masked", "masked_only"), default="masked_only")
    e.add_argument("--masks", type=int, default=1, help="evaluation masks averaged per sequence")
    e.add_argument("--mask-periods", type=_periods, default=(4, 5))
    e.add_argument("--maps", type=int, default=0, help="export P5 loss maps of the k worst frames")

    s = sub.add_parser("score", help="score one sequence, print mean_nll and timing")
    common(s)
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--input", default="-", help="MMSQ (count 1) or raw uint8 frames; '-' reads stdin")
    s.add_argument("--scope", choices=("all", "masked", "masked_only"), default="masked_only")
    s.add_argument("--mask-periods", type=_periods, default=(4, 5))
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except (OSError, ValueError) as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(known))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, raw in values.items():
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes")
            elif action.nargs is not None:
                defaults[key] = [action.type(v) if action.type else v for v in raw.split()]
            else:
                defaults[key] = action.type(raw) if action.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_generate(args) -> int:
    config = GeneratorConfig(frame_size=args.frame_size, n_frames=args.frames, n_digits=args.digits,
                             speed_range=tuple(args.speed), sprite_size=args.sprite_size)
    sprites = load_sprites(args.sprites) if args.sprites else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = (config.n_frames, config.frame_size, config.frame_size, 1)
    train_set = generate_dataset(args.train, args.seed, sprites, config)
    test_set = build_test_set(args.test_normal, args.test_corrupted, args.seed + 1, sprites, config, args.mode)
    write_sequences(out / "train.mmsq", train_set, shape)
    write_sequences(out / "test.mmsq", test_set, shape)
    logger.info("wrote %d train and %d test sequences to %s", len(train_set), len(test_set), out)
    return EXIT_OK


def _load_data(path) -> list[LabeledSequence]:
    try:
        return read_sequences(path)
    except (OSError, FormatError) as exc:
        raise MismatchError(str(exc)) from exc


def cmd_train(args) -> int:
    data = _load_data(args.data)
    if any(not s.is_normal for s in data):
        raise ContractError(f"{args.data} contains corrupted sequences; training needs anomaly-free data")
    config = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, steps=args.steps, seed=args.seed,
        context_length=args.context_length, mask_periods=args.mask_periods, n_bins=args.bins,
        hidden=args.hidden, precision=args.precision, checkpoint_interval=args.checkpoint_interval,
        log_interval=args.log_interval, loss_scope=args.loss_scope,
        use_attention=not args.no_attention, use_masked_frame=not args.no_masked_frame,
    )
    if not data:
        raise MismatchError(f"{args.data} holds no sequences")
    if data[0].frames.shape[0] < config.context_length + 1:
        raise MismatchError(f"sequences have {data[0].frames.shape[0]} frames; "
                            f"context length {config.context_length} needs more")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    log_path.write_text("")
    params, records = train(config, data, log_path=log_path, checkpoint_path=out / "model.ivck")
    save_checkpoint(params, out / "model.ivck")
    if records:
        logger.info("final training nll %.4f after %d steps", records[-1].nll, records[-1].step)
    return EXIT_OK


def _eval_config(args, n_masks: int = 1) -> EvalConfig:
    return EvalConfig(scope="masked_only" if args.scope == "masked" else args.scope, mask_seed=args.seed,
                      n_masks=n_masks, mask_periods=args.mask_periods)


def _load_params(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise MismatchError(str(exc)) from exc


def cmd_eval(args) -> int:
    params = _load_params(args.ckpt)
    data = _load_data(args.data)
    try:
        scored = score_dataset(params, data, _eval_config(args, args.masks))
        report = eer_from_scored(scored, _checkpoint_id(args.ckpt))
    except ValueError as exc:
        raise MismatchError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.tsv", scored)
    if args.maps:
        worst = sorted(scored, key=lambda s: (-s.score.mean_nll, s.seq_id))[:args.maps]
        for rank, s in enumerate(worst):
            export_loss_map(s.loss_map, out / f"lossmap_{rank:02d}_seq{s.seq_id:05d}.pgm")
    (out / "report.txt").write_text(report.to_text())
    logger.info("eer %.4f (accuracy at eer %.4f)", report.eer, report.accuracy_at_eer)
    return EXIT_OK


def _read_single(path, params) -> np.ndarray:
    raw = sys.stdin.buffer.read() if path == "-" else Path(path).read_bytes()
    h = params.hyper
    if raw[:4] == b"MMSQ":
        try:
            seqs, _ = parse_sequences(raw, path)
        except FormatError as exc:
            raise MismatchError(str(exc)) from exc
        if len(seqs) != 1:
            raise MismatchError(f"expected exactly one sequence, found {len(seqs)}")
        return seqs[0].frames
    frame_bytes = h.height * h.width * h.channels
    if not raw or len(raw) % frame_bytes:
        raise MismatchError(f"raw input of {len(raw)} bytes is not a whole number of "
                            f"{h.height}x{h.width}x{h.channels} frames")
    return np.frombuffer(raw, np.uint8).reshape(-1, h.height, h.width, h.channels)


def cmd_score(args) -> int:
    params = _load_params(args.ckpt)
    frames = _read_single(args.input, params)
    tic = time.perf_counter()
    try:
        scored = score_dataset(params, [LabeledSequence(frames)], _eval_config(args))
    except ValueError as exc:
        raise MismatchError(str(exc)) from exc
    ms = (time.perf_counter() - tic) * 1e3
    print(f"mean_nll={scored[0].score.mean_nll:.6f} ms={ms:.1f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "score": cmd_score}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    for key, value in sorted(vars(args).items()):
        logger.info("%s = %s", key, value)
    with threadpool_limits(limits=args.threads):
        try:
            return COMMANDS[args.command](args)
        except ContractError as exc:
            logger.error("%s", exc)
            return EXIT_CONTRACT
        except MismatchError as exc:
            logger.error("%s", exc)
            return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
