"""Experiment harnesses and their CSV / text reports.

Every CSV written here is byte-stable for a fixed configuration: rows come
in a fixed order, floats use fixed-width formats and lines end in ``\\n``.
"""

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import branch_receptive_fields, count_parameters, receptive_field
from .builders import build_backbone, build_head, build_network
from .exceptions import ConfigError, DataError, ShapeError
from .io import load_dataset
from .synthetic import make_synthetic
from .training import evaluate_graph, train
from .validation import check_labels

SWEEP_RATE_SETS = ((2, 4, 6, 8), (4, 8, 12, 16), (6, 12, 18, 24), (8, 16, 24, 32))
BASELINE = "aspp"


def _fmt(v, digits=4):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows):
    text = to_csv(header, rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return text


def format_table(header, rows):
    """Plain fixed-width table for terminals."""
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Data and training harness
# ---------------------------------------------------------------------------


def load_splits(cfg):
    """``(train, val)`` datasets from ``cfg.data_dir``/``cfg.val_dir``, or the
    synthetic generator when no data directory is configured."""
    if cfg.data_dir:
        data = load_dataset(cfg.data_dir)
    else:
        data = make_synthetic(cfg.n_images, cfg.image_size, cfg.num_classes, cfg.seed)
    if cfg.val_dir:
        return data, load_dataset(cfg.val_dir)
    if not 0 < cfg.n_val < len(data):
        raise ConfigError(f"n_val must lie in (0, {len(data)}), got {cfg.n_val}")
    return data.split(len(data) - cfg.n_val)


def network_for(cfg, head=None, rates=None):
    head = head or cfg.head
    return build_network(head, rates or cfg.rates or None, cfg.backbone, cfg.num_classes,
                         cfg.widths(), cfg.decoder_ch, cfg.dropout)


def run_training(cfg, splits, head=None, rates=None):
    """Train one network on ``splits = (train, val)``.

    Returns ``(graph, TrainResult, validation mIOU)``.
    """
    train_ds, val_ds = splits
    for ds in splits:
        try:
            check_labels(ds.labels, cfg.num_classes)
        except ShapeError as e:
            raise DataError(str(e)) from None
    graph = network_for(cfg, head, rates)
    graph.init_params(cfg.seed)
    result = train(
        graph, train_ds.as_pair(), cfg.schedule(), cfg.batch_size,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay, augment=cfg.augment_config(),
        seed=cfg.seed, eval_set=val_ds.as_pair(), eval_every=cfg.eval_every,
        num_classes=cfg.num_classes,
    )
    miou = evaluate_graph(graph, *val_ds.as_pair(), cfg.num_classes, cfg.batch_size).miou()[0]
    return graph, result, miou


TRACE_HEADER = ("step", "lr", "loss", "miou")


def trace_rows(result):
    return [(r.step, f"{r.lr:.8f}", f"{r.loss:.6f}", _fmt(r.miou, 6)) for r in result.trace]


# ---------------------------------------------------------------------------
# Parameter comparison
# ---------------------------------------------------------------------------


@dataclass
class CompareRow:
    name: str
    parameters: int
    reduction_pct: float
    receptive_field: object
    miou: float = math.nan
    checksum: str = ""


COMPARE_HEADER = ("architecture", "parameters", "reduction_vs_aspp_pct", "receptive_field", "miou")


def head_rf(cfg, head):
    """RF of the head alone, in feature-map pixels."""
    rates = cfg.rates or None
    return receptive_field(build_head(head, build_backbone(cfg.backbone).metadata["out_ch"],
                                      rates, cfg.widths())).size


def compare_rows(cfg, heads=None, splits=None):
    """One row per head. Reductions are relative to the ASPP row when it is
    present, otherwise to the first row. With ``splits`` each network is
    also trained and scored."""
    heads = list(heads or cfg.heads)
    if not heads:
        raise ConfigError("compare needs at least one head")
    counts = {h: count_parameters(network_for(cfg, h)) for h in heads}
    base = counts[BASELINE] if BASELINE in counts else counts[heads[0]]
    rows = []
    for h in heads:
        row = CompareRow(h, counts[h], 100.0 * (base - counts[h]) / base, head_rf(cfg, h))
        if splits is not None:
            _, result, row.miou = run_training(cfg, splits, h)
            row.checksum = result.checksum
        rows.append(row)
    return rows


def compare_table(rows):
    return [(r.name, r.parameters, f"{r.reduction_pct:.2f}", r.receptive_field, _fmt(r.miou))
            for r in rows]


def params_row(cfg):
    """The configured head's row, with its reduction against an ASPP network
    built from the same configuration."""
    heads = [cfg.head] if cfg.head == BASELINE else [BASELINE, cfg.head]
    return compare_rows(cfg, heads)[-1]


# ---------------------------------------------------------------------------
# Receptive fields
# ---------------------------------------------------------------------------

RF_HEADER = ("head", "node", "rate", "effective_kernel", "receptive_field")


def rf_rows(cfg, heads=None):
    """Per-branch rows followed by the output row for each head."""
    in_ch = build_backbone(cfg.backbone).metadata["out_ch"]
    rows = []
    for h in heads or [cfg.head]:
        g = build_head(h, in_ch, cfg.rates or None, cfg.widths())
        for node, rf, ke in branch_receptive_fields(g):
            rows.append((h, node, g.layers[node].attrs.get("rate", 1), ke, rf))
        rows.append((h, "output", "", "", receptive_field(g).size))
    return rows


# ---------------------------------------------------------------------------
# Dilation sweep
# ---------------------------------------------------------------------------

SWEEP_HEADER = ("head", "rates", "parameters", "receptive_field", "miou")


def sweep_rows(cfg, rate_sets=SWEEP_RATE_SETS, splits=None):
    """Train and score the configured head once per rate set."""
    splits = splits or load_splits(cfg)
    rows = []
    for rates in rate_sets:
        graph, _, miou = run_training(cfg, splits, rates=rates)
        label = "{" + ", ".join(str(r) for r in rates) + "}"
        rf = head_rf(cfg.replace(rates=tuple(rates)), cfg.head)
        rows.append((cfg.head, label, count_parameters(graph), rf, _fmt(miou)))
    return rows


# ---------------------------------------------------------------------------
# Segmentation evaluation
# ---------------------------------------------------------------------------


def eval_rows(conf):
    """Per-class IoU rows plus the mean; absent classes are left blank."""
    mean, per_class = conf.miou()
    rows = [(f"class_{k}", _fmt(float(v), 6)) for k, v in enumerate(per_class)]
    rows.append(("pixel_accuracy", _fmt(conf.pixel_accuracy(), 6)))
    rows.append(("miou", _fmt(float(mean), 6)))
    return rows


def class_frequency_rows(freqs):
    return [(f"class_{k}", f"{float(f):.6f}") for k, f in enumerate(np.asarray(freqs))]
