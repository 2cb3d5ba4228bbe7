"""Command-line entry point: ``text2face <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure. Every
failure ends with one ``error: <kind>: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import training
from .captions import AttributeVector, flip_attribute, parse_caption_verbose, random_attributes, render_caption
from .data import load_dataset, synthesize_dataset
from .errors import DataError, NumericError
from .generator import gen_init
from .imageio import image_grid, save_image
from .metrics import fid, format_report, fsd, fss, paired
from .vectors import read_vectors

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise UsageError(f"expected true or false, got {text!r}")


def _flip(text: str) -> tuple[str, bool]:
    name, sep, value = text.partition("=")
    if not sep:
        raise UsageError(f"--flip expects ATTR=BOOL, got {text!r}")
    return name.strip(), _bool(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0 or the config's)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = _Parser(prog="text2face", description="Caption-to-face latent mapping toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("train", parents=[common], help="train a text-to-latent model")
    s.add_argument("--config", help="key=value config file (defaults if omitted)")
    s.add_argument("--data", required=True, help="dataset manifest")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--embeddings", help="precomputed embedding file")
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.add_argument("--experiment", type=int, help="override the configured experiment id")
    s.add_argument("--embed-frozen", action="store_true",
                   help="also store generator and extractor weights in the checkpoint")

    s = sub.add_parser("generate", parents=[common], help="render a face for a caption")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--caption", required=True)
    s.add_argument("--out", required=True, help="output image (.ppm or .png)")

    s = sub.add_parser("manipulate", parents=[common], help="flip attributes and render a comparison grid")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--caption", required=True)
    s.add_argument("--flip", action="append", required=True, type=str, metavar="ATTR=BOOL",
                   help="attribute to set, e.g. Black_Hair=true (repeatable, one panel each)")
    s.add_argument("--out-grid", required=True, help="output grid image (.ppm or .png)")

    s = sub.add_parser("evaluate", parents=[common], help="FSD, FSS and FID of a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--embeddings")
    s.add_argument("--self-check", action="store_true", help="compare generated images with themselves")

    s = sub.add_parser("caption", help="caption grammar utilities")
    csub = s.add_subparsers(dest="caption_command", metavar="ACTION", parser_class=_Parser)
    csub.required = True
    c = csub.add_parser("parse", parents=[common], help="print the attributes a caption sets")
    c.add_argument("text", nargs="?", help="caption (read from stdin if omitted)")
    c = csub.add_parser("render", parents=[common], help="render the caption for an attribute set")
    c.add_argument("--attrs", help="comma-separated attribute names")
    c.add_argument("--random", type=int, metavar="COUNT", help="render COUNT seeded random attribute sets")

    s = sub.add_parser("dataset", help="dataset utilities")
    dsub = s.add_subparsers(dest="dataset_command", metavar="ACTION", parser_class=_Parser)
    dsub.required = True
    d = dsub.add_parser("synth", parents=[common], help="write a synthetic oracle dataset")
    d.add_argument("--n", type=int, required=True, help="number of samples")
    d.add_argument("--out", required=True)
    d.add_argument("--resolution", type=int, default=16)
    d.add_argument("--generator-seed", type=int, default=0)

    s = sub.add_parser("experiments", parents=[common], help="run the six-experiment matrix")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="base config file")
    s.add_argument("--epochs", type=int)
    s.add_argument("--embeddings")

    s = sub.add_parser("metrics", help="metrics on precomputed feature files")
    msub = s.add_subparsers(dest="metric", metavar="METRIC", parser_class=_Parser)
    msub.required = True
    for name in ("fid", "fsd", "fss"):
        m = msub.add_parser(name, parents=[common])
        m.add_argument("--features-a", required=True)
        m.add_argument("--features-b", required=True)
        if name == "fsd":
            m.add_argument("--mode", choices=("l2", "mean_abs"), default="l2")
    return p


def _load_config(args) -> training.TrainConfig:
    overrides = {}
    for key in ("epochs", "experiment", "seed"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.config:
        return training.TrainConfig.from_file(args.config, **overrides)
    return training.TrainConfig(**overrides)


def cmd_train(args) -> int:
    config = _load_config(args)
    data = load_dataset(args.data, config.resolution, args.embeddings)
    g = gen_init(config.generator_seed, config.resolution)
    fe = training.extractor_init(config.extractor_seed, config.width_divisor)
    result = training.train(config, data, None, g, fe,
                            on_epoch=lambda e, loss: print(f"epoch={e} mean_loss={loss!r}", flush=True))
    ckpt = result.checkpoint
    if args.embed_frozen:
        ckpt.frozen = {**training.export_tensors(g, "generator"), **training.export_tensors(fe, "extractor")}
    ckpt.save(args.out)
    training.write_history(training.history_path(args.out), ckpt.history)
    return EXIT_OK


def _render(ckpt, captions) -> np.ndarray:
    return training.generate_images(ckpt, captions)


def cmd_generate(args) -> int:
    ckpt = training.Checkpoint.load(args.ckpt)
    parse_caption_verbose(args.caption)  # fail early on captions with no known phrase
    save_image(args.out, _render(ckpt, [args.caption])[0])
    return EXIT_OK


def cmd_manipulate(args) -> int:
    ckpt = training.Checkpoint.load(args.ckpt)
    attrs, _ = parse_caption_verbose(args.caption)
    captions = [args.caption]
    for item in args.flip:
        name, value = _flip(item)
        flipped = flip_attribute(attrs, name, value)
        if flipped == attrs:
            print(f"warning: {name}={str(value).lower()} leaves the attributes unchanged", file=sys.stderr)
        text = render_caption(flipped).text
        print(f"{name}={str(value).lower()}\t{text}")
        captions.append(text)
    save_image(args.out_grid, image_grid(list(_render(ckpt, captions))))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = training.Checkpoint.load(args.ckpt)
    data = load_dataset(args.data, ckpt.config.resolution, args.embeddings)
    report = training.evaluate(ckpt, data, self_check=args.self_check)
    text = report.text()
    Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_caption(args) -> int:
    if args.caption_command == "parse":
        text = args.text if args.text is not None else sys.stdin.read()
        attrs, unknown = parse_caption_verbose(text)
        for sentence in unknown:
            print(f"warning: unrecognized sentence: {sentence}", file=sys.stderr)
        for name in attrs.names():
            print(name)
        return EXIT_OK
    if args.attrs is not None and args.random is not None:
        raise UsageError("--attrs and --random are mutually exclusive")
    if args.random is not None:
        rng = np.random.default_rng(args.seed or 0)
        for _ in range(args.random):
            print(render_caption(random_attributes(rng)).text)
        return EXIT_OK
    names = [n.strip() for n in (args.attrs or "").split(",") if n.strip()]
    print(render_caption(AttributeVector.from_names(names).validate()).text)
    return EXIT_OK


def cmd_dataset(args) -> int:
    g = gen_init(args.generator_seed, args.resolution)
    ds = synthesize_dataset(args.n, args.seed or 0, g, args.out)
    print(f"records={len(ds)} resolution={ds.resolution} manifest={Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def cmd_experiments(args) -> int:
    config = _load_config(args)
    data = load_dataset(args.data, config.resolution, args.embeddings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = training.run_experiment_matrix(config, data, out)
    sys.stdout.write((out / "report.tsv").read_text(encoding="utf-8"))
    return EXIT_OK if len(rows) == 6 else EXIT_NUMERIC


def cmd_metrics(args) -> int:
    a = read_vectors(args.features_a)
    b = read_vectors(args.features_b)
    if args.metric == "fid":
        value = fid(np.stack(list(a.values())), np.stack(list(b.values())))
    elif args.metric == "fsd":
        value = fsd(paired(a, b), args.mode)
    else:
        value = 100.0 * fss(paired(a, b))
    sys.stdout.write(format_report([(args.metric, value)]))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "generate": cmd_generate, "manipulate": cmd_manipulate,
    "evaluate": cmd_evaluate, "caption": cmd_caption, "dataset": cmd_dataset,
    "experiments": cmd_experiments, "metrics": cmd_metrics,
}


def _fail(kind: str, message: object, code: int) -> int:
    reason = " ".join(str(message).split())
    print(f"error: {kind}: {reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except NumericError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except (DataError, ValueError, KeyError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except OSError as exc:
        return _fail("data", f"{exc.strerror or exc}: {exc.filename or ''}", EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
