"""Run configuration and its line-oriented text format.

Grammar, one setting per line::

    line    := blank | comment | setting
    comment := '#' anything
    setting := key ws* '=' ws* value [ws* comment]
    value   := int | float | 'true' | 'false' | int (',' int)* | bare-string

Keys are the field names of :class:`RunConfig`. Unknown or repeated keys
are errors. Width keys and ``num_classes`` left unset fall back to the
backbone's defaults: full-scale widths and 21 classes for
``resnet101-counting``, toy widths and 4 classes otherwise.
"""

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

from .builders import HEAD_KINDS, TOY_WIDTHS, HeadWidths, build_backbone, build_head
from .crf import CrfParams
from .exceptions import ConfigError
from .training import AugmentConfig, PolySchedule

COMMANDS = ("params", "compare", "rf", "train", "infer", "eval", "crf", "sweep", "synth", "")
_WIDTH_KEYS = [f.name for f in fields(HeadWidths)]


@dataclass
class RunConfig:
    command: str = ""
    # architecture
    head: str = "wasp"
    heads: tuple = ("aspp", "res2net-seg", "wasp")
    rates: tuple = ()
    backbone: str = "toy-resnet(2,16)"
    num_classes: Optional[int] = None
    out_ch: Optional[int] = None
    aspp_branch: Optional[int] = None
    aspp_fusion: Optional[str] = None
    cascade_branch: Optional[int] = None
    wasp_branch: Optional[int] = None
    wasp_tap: Optional[int] = None
    res2net_bottleneck: Optional[int] = None
    res2net_gap: Optional[int] = None
    se_reduction: Optional[int] = None
    gap_branch: Optional[bool] = None
    decoder_ch: Optional[int] = None
    dropout: float = 0.5
    # data and outputs
    data_dir: str = ""
    val_dir: str = ""
    out_dir: str = "out"
    model: str = ""
    image: str = ""
    probabilities: str = ""
    labels: str = ""
    pred_dir: str = ""
    n_images: int = 200
    n_val: int = 40
    image_size: int = 64
    # schedule
    base_lr: float = 0.007
    max_iter: int = 500
    power: float = 0.9
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    scale_min: float = 0.5
    scale_max: float = 1.5
    eval_every: int = 100
    # CRF
    crf_w1: float = 4.0
    crf_w2: float = 3.0
    crf_sigma_alpha: float = 50.0
    crf_sigma_beta: float = 3.0
    crf_sigma_gamma: float = 3.0
    crf_iterations: int = 10
    seed: int = 0

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for h in (self.head, *self.heads):
            if h not in HEAD_KINDS:
                raise ConfigError(f"unknown head {h!r}; choose from {HEAD_KINDS}")
        if any(r < 1 for r in self.rates):
            raise ConfigError(f"rates must be >= 1, got {self.rates}")
        try:
            build_backbone(self.backbone)
            self.schedule()
            self.augment_config()
            self.crf_params()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.num_classes is None:
            self.num_classes = 21 if self._full_scale() else 4
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.aspp_fusion not in (None, "sum", "concat"):
            raise ConfigError(f"aspp_fusion must be sum or concat, got {self.aspp_fusion!r}")
        for h in self.heads if self.command == "compare" else (self.head,):
            try:
                build_head(h, 8, self.rates or None, self.widths())
            except ValueError as e:
                raise ConfigError(f"head {h!r}: {e}") from None
        return self

    def _full_scale(self):
        return self.backbone.replace(" ", "") == "resnet101-counting"

    def widths(self):
        base = HeadWidths() if self._full_scale() else TOY_WIDTHS
        overrides = {k: getattr(self, k) for k in _WIDTH_KEYS if getattr(self, k) is not None}
        return dataclasses.replace(base, **overrides)

    def schedule(self):
        return PolySchedule(self.base_lr, self.max_iter, self.power)

    def augment_config(self):
        return AugmentConfig(self.scale_min, self.scale_max, self.seed) if self.augment else None

    def crf_params(self):
        return CrfParams(self.crf_w1, self.crf_w2, self.crf_sigma_alpha, self.crf_sigma_beta,
                         self.crf_sigma_gamma, self.crf_iterations)

    def replace(self, **changes):
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _kind(name):
    default = getattr(_DEFAULTS, name)
    if isinstance(default, tuple):
        return "tuple_str" if name == "heads" else "tuple_int"
    if name == "gap_branch" or isinstance(default, bool):
        return "bool"
    if name == "aspp_fusion":
        return "str"
    if isinstance(default, int) or _FIELDS[name].type == Optional[int]:
        return "int"
    if isinstance(default, float):
        return "float"
    return "str"


def _coerce(name, text, lineno):
    kind = _kind(name)
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text.lower() == "true"
        if kind == "tuple_int":
            return tuple(int(t) for t in text.replace("{", "").replace("}", "").split(",") if t.strip())
        if kind == "tuple_str":
            return tuple(t.strip() for t in text.split(",") if t.strip())
        return text
    except ValueError as e:
        raise ConfigError(f"line {lineno}: bad value for {name!r}: {e}") from None


def parse_config(text, base=None):
    """Parse config text onto ``base`` (defaults when None) and validate."""
    values, seen = {}, set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (s.strip() for s in line.partition("="))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _coerce(key, value, lineno)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    return cfg.validate()


def format_config(cfg):
    """Serialise every set field; ``parse_config(format_config(c)) == c``."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = ",".join(str(t) for t in v)
            if not text:
                continue
        else:
            text = str(v)
        if f.name != "command" or text:
            lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path, base=None):
    try:
        with open(path) as fh:
            return parse_config(fh.read(), base)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
