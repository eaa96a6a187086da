"""Command-line surface.

Subcommands: datagen, pretrain, eval, imagine, train-generator, gradcheck,
config.  Exit codes are a stable contract: 0 success, 1 usage error,
2 data/format error, 3 numerical failure.  Logs go to stderr; machine
output goes to stdout or files.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import datagen, evaluation
from .checkpoint import (
    CheckpointError,
    load_generator,
    load_model,
    load_trainer,
    save_generator,
    save_trainer,
)
from .config import ConfigError
from .contrastive import Trainer
from .datagen import DatasetFormatError
from .encoders import EncoderConfig, ImageEncoder, TextEncoder
from .gradcheck import check_primitives, finite_difference_check, format_reports
from .imagination import (
    GeneratorConfig,
    NonFiniteLossError,
    VisConfig,
    codebook_usage,
    generate_from_text,
    train_toy_generator,
    visualize_text,
    write_ppm,
    write_trace,
)
from .rng import SplitMix64
from .vocab import batch_tokenize

log = logging.getLogger("brivl")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_cfg(args) -> config_mod.RunConfig:
    path = getattr(args, "config", None)
    overrides = getattr(args, "set", None) or []
    return config_mod.load_config(path, overrides)


def _load_dataset(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    return datagen.read_dataset(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_config(args) -> int:
    if args.print_defaults:
        sys.stdout.write(config_mod.defaults_text())
        return EXIT_OK
    sys.stdout.write(config_mod.to_text(_load_cfg(args)))
    return EXIT_OK


def cmd_datagen(args) -> int:
    if args.size < 1:
        raise _UsageError("--size must be a positive integer")
    log.info("generating %d records (seed %d)", args.size, args.seed)
    ds = datagen.generate_dataset(
        args.seed, args.size, image_size=args.image_size, split=args.split
    )
    datagen.write_dataset(ds, args.out)
    checksum = datagen.file_checksum(args.out)
    sys.stdout.write(f"records={len(ds.records)} checksum={checksum}\n")
    return EXIT_OK


def _append_metrics(path, lines) -> None:
    with open(path, "a") as fh:
        for line in lines:
            fh.write(line + "\n")


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    ds = _load_dataset(args.data)
    images, texts, _ = datagen.load_arrays(ds)
    tokens = batch_tokenize(texts, cfg.max_text_len)
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        trainer = load_trainer(args.resume, expected_cfg=cfg)
        log.info(
            "resumed at epoch %d, step %d",
            trainer.completed_epochs,
            trainer.global_step,
        )
    else:
        trainer = Trainer(cfg)
    if trainer.completed_epochs >= cfg.epochs:
        sys.stdout.write(
            f"training already complete ({trainer.completed_epochs} epochs)\n"
        )
        return EXIT_OK
    metrics_path = os.path.join(args.out, "metrics.log")
    while trainer.completed_epochs < cfg.epochs:
        buffered = []
        trainer.run_epoch(
            images, tokens.ids, tokens.lengths,
            on_metrics=lambda m: buffered.append(m.log_line()),
        )
        _append_metrics(metrics_path, buffered)
        ckpt = os.path.join(args.out, f"epoch_{trainer.completed_epochs:04d}.ckpt")
        save_trainer(ckpt, trainer)
        log.info("epoch %d done, checkpoint %s", trainer.completed_epochs, ckpt)
    final = os.path.join(args.out, "model.ckpt")
    save_trainer(final, trainer)
    sys.stdout.write(f"trained {trainer.completed_epochs} epochs -> {final}\n")
    return EXIT_OK


def _write_reports(out_dir, reports) -> None:
    os.makedirs(out_dir, exist_ok=True)
    text = evaluation.report_text(reports)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(out_dir, "report.kv"), "w") as fh:
        fh.write(evaluation.report_kv(reports))
    sys.stdout.write(text)


def cmd_eval(args) -> int:
    bundle = load_model(args.checkpoint)
    ds = _load_dataset(args.data)
    images, texts, _ = datagen.load_arrays(ds)
    if args.task == "retrieval":
        img_emb = bundle.encode_images(images)
        txt_emb = bundle.encode_texts(texts)
        n = img_emb.shape[0]
        reports = evaluation.retrieval_eval(
            img_emb, txt_emb,
            evaluation.identity_truth(n), evaluation.identity_truth(n),
        )
        _write_reports(args.out, reports)
    elif args.task == "zeroshot":
        class_names = [c.strip() for c in args.classes.split(",") if c.strip()]
        idx, labels = datagen.single_shape_labels(ds)
        if not idx:
            raise _UsageError("dataset holds no single-shape records to classify")
        item_emb = bundle.encode_images(images[np.asarray(idx)])
        report = evaluation.zero_shot_classify(
            item_emb, labels, class_names, bundle.encode_texts
        )
        _write_reports(args.out, [report])
    else:  # neighbors
        if not args.query:
            raise _UsageError("--query is required for the neighbors task")
        ranked = evaluation.topk_text_neighbors(
            args.query, texts, args.k, bundle.encode_texts
        )
        os.makedirs(args.out, exist_ok=True)
        lines = [f"{i}\t{score:.6f}\t{text}" for i, text, score in ranked]
        body = "\n".join(lines) + "\n"
        with open(os.path.join(args.out, "neighbors.txt"), "w") as fh:
            fh.write(body)
        sys.stdout.write(body)
    return EXIT_OK


def cmd_imagine(args) -> int:
    cfg = _load_cfg(args)
    bundle = load_model(args.checkpoint)
    vis = VisConfig(
        iterations=args.iters if args.iters is not None else (
            cfg.vis_iterations if args.mode == "visualize" else cfg.gen_iterations
        ),
        lr=args.lr if args.lr is not None else (
            cfg.vis_lr if args.mode == "visualize" else cfg.gen_lr
        ),
        neuron=args.neuron,
        alpha=cfg.vis_alpha,
        seed=args.seed,
    )
    if args.mode == "visualize":
        image, trace = visualize_text(
            bundle.image_encoder, bundle.text_encoder, args.text, vis
        )
    else:
        if not args.generator:
            raise _UsageError("--generator is required for --mode generate")
        gen = load_generator(args.generator)
        image, trace, _ = generate_from_text(
            bundle.image_encoder, bundle.text_encoder, gen, args.text, vis
        )
    write_ppm(args.out, image)
    trace_path = args.trace or (args.out + ".trace.txt")
    write_trace(trace_path, trace)
    sys.stdout.write(
        f"initial_cos={trace[0]:.6f} final_cos={trace[-1]:.6f} image={args.out}\n"
    )
    return EXIT_OK


def cmd_train_generator(args) -> int:
    cfg = _load_cfg(args)
    ds = _load_dataset(args.data)
    images, _, _ = datagen.load_arrays(ds)
    gen_cfg = GeneratorConfig(
        grid=cfg.code_grid,
        code_dim=cfg.code_dim,
        codebook_size=cfg.codebook_size,
        train_steps=args.steps if args.steps is not None else cfg.gen_train_steps,
        lr=cfg.gen_train_lr,
        seed=args.seed,
    )
    log.info("training toy generator for %d steps", gen_cfg.train_steps)
    gen = train_toy_generator(images, gen_cfg)
    save_generator(args.out, gen)
    holdout = images[: min(128, images.shape[0])]
    recon = gen.reconstruct(holdout)
    mse = float(np.mean((recon - holdout) ** 2))
    usage = codebook_usage(gen, holdout)
    sys.stdout.write(f"recon_mse={mse:.6f} codebook_usage={usage:.3f}\n")
    return EXIT_OK


def tower_gradcheck_reports(step: float = 1e-3, max_elements: int = 384):
    """Finite-difference checks through both full towers at desk config."""
    from .autodiff import Tensor, dot

    cfg = EncoderConfig()
    rng = SplitMix64(5)
    image_enc = ImageEncoder(cfg, rng)
    text_enc = TextEncoder(cfg, rng)
    probe = np.random.default_rng(6)
    img = probe.uniform(0.0, 1.0, (1, 3, cfg.image_size, cfg.image_size))
    proj = probe.normal(size=(1, cfg.embed_dim)).astype(np.float32)

    def image_fn(x):
        return dot(image_enc(x), Tensor(proj))

    tokens = batch_tokenize(["red circle nice photo"], cfg.max_text_len)

    def text_fn(emb):
        original = text_enc.tok_emb
        text_enc.tok_emb = emb
        try:
            return dot(text_enc(tokens), Tensor(proj))
        finally:
            text_enc.tok_emb = original

    return [
        finite_difference_check(
            image_fn, Tensor(img.astype(np.float32)), step=step,
            name="image_tower", max_elements=max_elements, exclude_kinks=True,
        ),
        finite_difference_check(
            text_fn, Tensor(text_enc.tok_emb.data.copy()), step=step,
            name="text_tower", max_elements=max_elements, exclude_kinks=True,
        ),
    ]


def cmd_gradcheck(args) -> int:
    reports = check_primitives(step=args.step)
    reports.extend(tower_gradcheck_reports(step=args.step))
    sys.stdout.write(format_reports(reports, args.tolerance) + "\n")
    failed = [r for r in reports if not r.passed(args.tolerance)]
    if failed:
        log.error("%d gradient checks failed", len(failed))
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="brivl", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("config", help="show configuration")
    p.add_argument("--print-defaults", action="store_true")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("datagen", help="generate a synthetic pair dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("retrieval", "zeroshot", "neighbors"),
                   required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--classes", default="circle,square,triangle")
    p.add_argument("--query")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("imagine", help="invert a text embedding into an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--mode", choices=("visualize", "generate"), default="visualize")
    p.add_argument("--neuron", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--generator")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_imagine)

    p = sub.add_parser("train-generator", help="train the toy codebook generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all primitives")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.ERROR
    logging.basicConfig(stream=sys.stderr, level=level, format="%(message)s")
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CheckpointError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
