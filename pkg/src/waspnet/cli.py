"""Command-line entry point.

Settings come from, in increasing precedence: built-in defaults, a
``--config`` file, then individual flags. Every config key has a flag of
the same name with dashes (``base_lr`` -> ``--base-lr``).

Exit status: 0 success, 1 configuration error, 2 data error, 3 numerical
failure. ``WASPNET_THREADS`` caps the BLAS thread pool.
"""

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, _kind, load_config, parse_config
from .crf import UnaryField, energy_report, mean_field_refine
from .exceptions import ConfigError, DataError, NumericalError, ShapeError
from .io import (load_dataset, load_graph, load_label_dir, load_tensors, read_pgm, read_ppm, save_graph,
                 save_tensors, write_pgm)
from .metrics import ConfusionMatrix
from .ops import softmax_channels
from .reports import (COMPARE_HEADER, RF_HEADER, SWEEP_HEADER, TRACE_HEADER, class_frequency_rows,
                      compare_rows, compare_table, eval_rows, format_table, load_splits, params_row,
                      rf_rows, run_training, sweep_rows, to_csv, trace_rows, write_csv)
from .synthetic import class_frequencies, make_synthetic_dataset
from .training import predict_logits

THREADS_ENV = "WASPNET_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

COMMAND_HELP = {
    "params": "count parameters of the configured network and its reduction vs ASPP",
    "compare": "compare parameter counts and receptive fields across heads",
    "rf": "per-branch and output receptive fields of the configured head",
    "train": "train a network and save it with its metric trace",
    "infer": "write argmax label maps (P5) for a directory of images",
    "eval": "score predicted label maps against ground truth",
    "crf": "refine a probability map with the dense CRF",
    "sweep": "train the configured head once per dilation-rate set",
    "synth": "generate the synthetic shapes dataset",
}

log = logging.getLogger("waspnet")


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", metavar="FILE", help="config file (key = value lines)")
    group = p.add_argument_group("settings (override the config file)")
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = _kind(f.name)
        metavar = {"bool": "true|false", "tuple_int": "R,R,...", "tuple_str": "NAME,..."}.get(
            kind, kind.upper())
        group.add_argument(flag, dest=f"set_{f.name}", metavar=metavar, default=None,
                           help=f"default: {_default_text(f)}")
    group.add_argument("--no-gap-branch", dest="set_gap_branch", action="store_const",
                       const="false", help="drop the image-pooling branch from the WASP head")
    p.add_argument("--train-heads", action="store_true",
                   help="compare: also train every head and report validation mIOU")
    p.add_argument("--save-probabilities", action="store_true",
                   help="infer: also write per-image probability containers")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")


def _default_text(f):
    v = getattr(RunConfig(), f.name)
    if v is None:
        return "backbone default"
    if isinstance(v, tuple):
        return ",".join(map(str, v)) or "head default"
    return str(v).lower() if isinstance(v, bool) else str(v) or "unset"


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(
        prog="waspnet", description="Multi-scale segmentation heads: accounting, training, CRF.",
        epilog=f"Exit codes: 0 ok, 1 config error, 2 data error, 3 numerical failure. "
               f"{THREADS_ENV}=N limits BLAS threads.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True,
                                parser_class=_Parser)
    for name, text in COMMAND_HELP.items():
        _add_config_flags(sub.add_parser(name, help=text, description=text))
    return parser


def resolve_config(args):
    """Merge config file and flag overrides into a validated :class:`RunConfig`."""
    cfg = RunConfig(command=args.command)
    if args.config:
        cfg = load_config(args.config, cfg)
    lines = [f"{k[4:]} = {v}" for k, v in vars(args).items() if k.startswith("set_") and v is not None]
    cfg = parse_config("\n".join(lines), cfg)
    return cfg.replace(command=args.command).validate()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _out(cfg, name):
    path = Path(cfg.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_params(cfg, args):
    row = params_row(cfg)
    text = write_csv(_out(cfg, "params.csv"), COMPARE_HEADER, compare_table([row]))
    sys.stdout.write(text)


def cmd_compare(cfg, args):
    splits = load_splits(cfg) if args.train_heads else None
    rows = compare_rows(cfg, splits=splits)
    table = compare_table(rows)
    write_csv(_out(cfg, "compare.csv"), COMPARE_HEADER, table)
    sys.stdout.write(format_table(COMPARE_HEADER, table))


def cmd_rf(cfg, args):
    sys.stdout.write(write_csv(_out(cfg, "rf.csv"), RF_HEADER, rf_rows(cfg)))


def cmd_train(cfg, args):
    graph, result, miou = run_training(cfg, load_splits(cfg))
    save_graph(_out(cfg, "model.wsp"), graph)
    write_csv(_out(cfg, "trace.csv"), TRACE_HEADER, trace_rows(result))
    sys.stdout.write(f"val_miou,{miou:.4f}\nchecksum,{result.checksum}\n")


def cmd_infer(cfg, args):
    if not cfg.model:
        raise ConfigError("infer needs model = <trained .wsp file>")
    if not cfg.data_dir:
        raise ConfigError("infer needs data_dir = <directory with images/>")
    graph = load_graph(cfg.model)
    if not graph.params:
        raise DataError("model holds no trained parameters", cfg.model)
    data = load_dataset(cfg.data_dir, require_labels=False)
    pred_dir = Path(cfg.pred_dir or Path(cfg.out_dir) / "pred")
    pred_dir.mkdir(parents=True, exist_ok=True)
    for name, image in zip(data.names, data.images):
        logits = predict_logits(graph, image[None], 1)
        write_pgm(pred_dir / f"{name}.pgm", logits[0].argmax(axis=0).astype(np.uint8))
        if args.save_probabilities:
            prob = softmax_channels(logits)[0]
            save_tensors(pred_dir / f"{name}.wsp", {"probabilities": prob}, {"image": name})
    sys.stdout.write(f"predicted,{len(data)}\n")


def cmd_eval(cfg, args):
    if not cfg.pred_dir:
        raise ConfigError("eval needs pred_dir = <directory of predicted .pgm maps>")
    truth_dir = cfg.labels or (Path(cfg.data_dir) / "labels" if cfg.data_dir else "")
    if not truth_dir:
        raise ConfigError("eval needs labels = <ground-truth .pgm directory> or data_dir")
    pred, truth = load_label_dir(cfg.pred_dir), load_label_dir(truth_dir)
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise DataError(f"no prediction for {missing[0]}", cfg.pred_dir)
    conf = ConfusionMatrix(cfg.num_classes)
    for name in sorted(truth):
        try:
            conf.accumulate(pred[name], truth[name])
        except ShapeError as e:
            raise DataError(str(e), Path(cfg.pred_dir) / f"{name}.pgm") from None
    sys.stdout.write(write_csv(_out(cfg, "eval.csv"), ("metric", "value"), eval_rows(conf)))


def _load_probabilities(path):
    tensors, _ = load_tensors(path)
    if len(tensors) != 1 and "probabilities" not in tensors:
        raise DataError("container must hold one tensor or one named 'probabilities'", path)
    prob = tensors.get("probabilities", next(iter(tensors.values())))
    if prob.ndim == 4 and prob.shape[0] == 1:
        prob = prob[0]
    return prob


def cmd_crf(cfg, args):
    if not cfg.probabilities or not cfg.image:
        raise ConfigError("crf needs probabilities = <.wsp> and image = <.ppm>")
    prob = _load_probabilities(cfg.probabilities)
    image = read_ppm(cfg.image)
    try:
        unary = UnaryField(prob, image)
    except ShapeError as e:
        raise DataError(str(e), cfg.probabilities) from None
    params = cfg.crf_params()
    refined = mean_field_refine(unary, params)
    save_tensors(_out(cfg, "refined.wsp"), {"probabilities": refined.astype(np.float32)},
                 {"crf": params.to_dict()})

    before, after = prob.argmax(axis=0), refined.argmax(axis=0)
    e0, e1 = energy_report(before, unary, params), energy_report(after, unary, params)
    rows = [("unary_energy", f"{e0.unary:.6f}", f"{e1.unary:.6f}"),
            ("pairwise_energy", f"{e0.pairwise:.6f}", f"{e1.pairwise:.6f}"),
            ("total_energy", f"{e0.total:.6f}", f"{e1.total:.6f}")]
    if cfg.labels:
        gt = read_pgm(cfg.labels)
        scores = []
        for lab in (before, after):
            conf = ConfusionMatrix(unary.num_classes)
            try:
                conf.accumulate(lab, gt)
            except ShapeError as e:
                raise DataError(str(e), cfg.labels) from None
            scores.append(f"{conf.miou()[0]:.6f}")
        rows.append(("miou", *scores))
    sys.stdout.write(write_csv(_out(cfg, "crf.csv"), ("metric", "unrefined", "refined"), rows))


def cmd_sweep(cfg, args):
    rows = sweep_rows(cfg)
    write_csv(_out(cfg, "sweep.csv"), SWEEP_HEADER, rows)
    sys.stdout.write(format_table(SWEEP_HEADER, rows))


def cmd_synth(cfg, args):
    root = cfg.data_dir or cfg.out_dir
    ds = make_synthetic_dataset(root, cfg.n_images, cfg.image_size, cfg.num_classes, cfg.seed)
    rows = class_frequency_rows(class_frequencies(ds.labels, cfg.num_classes))
    sys.stdout.write(to_csv(("class", "pixel_share"), rows))


COMMANDS = {
    "params": cmd_params, "compare": cmd_compare, "rf": cmd_rf, "train": cmd_train,
    "infer": cmd_infer, "eval": cmd_eval, "crf": cmd_crf, "sweep": cmd_sweep, "synth": cmd_synth,
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit():
            COMMANDS[cfg.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
