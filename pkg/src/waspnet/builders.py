"""Builders for the segmentation heads, decoder, backbones and full networks.

Every head maps an ``in_ch``-channel feature map to ``out_ch`` channels at
the same spatial size. Atrous 3x3 convolutions use ``pad = rate`` so all
branches can be fused without cropping.
"""

import re
from dataclasses import asdict, dataclass

from .exceptions import ConfigError, ShapeError
from .graph import ModuleGraph

HEAD_KINDS = ("aspp", "cascade", "res2net-seg", "wasp")
DEFAULT_RATES = (6, 12, 18, 24)
RES2NET_RATES = (2, 4, 6)


@dataclass(frozen=True)
class HeadWidths:
    """Channel widths for every head.

    The defaults are the full-scale configuration used for parameter
    accounting on a 2048-channel ResNet-101 feature map.
    """

    out_ch: int = 256
    aspp_branch: int = 204
    aspp_fusion: str = "sum"
    cascade_branch: int = 256
    wasp_branch: int = 112
    wasp_tap: int = 256
    res2net_bottleneck: int = 1280
    res2net_gap: int = 256
    se_reduction: int = 16
    gap_branch: bool = True

    def to_dict(self):
        return asdict(self)


# Small widths for desk-scale training on the toy backbone.
TOY_WIDTHS = HeadWidths(
    out_ch=32, aspp_branch=32, cascade_branch=32, wasp_branch=32, wasp_tap=16,
    res2net_bottleneck=32, res2net_gap=16, se_reduction=4,
)


def _check_rates(rates):
    rates = tuple(int(r) for r in rates)
    if not rates:
        raise ShapeError("rates must be non-empty")
    if min(rates) < 1:
        raise ShapeError(f"rates must all be >= 1, got {rates}")
    return rates


def _atrous(g, name, src, in_ch, out_ch, rate):
    return g.add(name, "atrous-conv", src, in_ch=in_ch, out_ch=out_ch, kernel=3, rate=rate)


def _pointwise(g, name, src, in_ch, out_ch):
    return g.add(name, "conv", src, in_ch=in_ch, out_ch=out_ch, kernel=1, rate=1)


def _gap_branch(g, prefix, src, in_ch, out_ch):
    """Image-level branch: pool, 1x1 conv, ReLU, broadcast back to ``src``'s size."""
    pooled = g.add(f"{prefix}.pool", "global-avg-pool", src)
    proj = _pointwise(g, f"{prefix}.conv", pooled, in_ch, out_ch)
    act = g.add(f"{prefix}.relu", "relu", proj)
    return g.add(f"{prefix}.broadcast", "bilinear", [act, src])


def build_aspp(in_ch, branch_ch, rates=DEFAULT_RATES, fusion="sum", out_ch=256):
    """Parallel atrous branches, one per rate, fused by sum or concat.

    Branch: 3x3 atrous conv -> ReLU -> 1x1 conv -> ReLU -> 1x1 conv to
    ``out_ch``. Concat fusion adds a 1x1 projection back to ``out_ch``.
    """
    rates = _check_rates(rates)
    if fusion not in ("sum", "concat"):
        raise ShapeError(f"fusion must be 'sum' or 'concat', got {fusion!r}")
    g = ModuleGraph("aspp", {"head": "aspp", "rates": list(rates), "fusion": fusion, "branches": []})
    x = g.add_input("input", in_ch)
    outs = []
    for i, r in enumerate(rates, 1):
        b = f"b{i}"
        a = _atrous(g, f"{b}.atrous", x, in_ch, branch_ch, r)
        g.metadata["branches"].append(a)
        h = g.add(f"{b}.relu1", "relu", a)
        h = _pointwise(g, f"{b}.fc1", h, branch_ch, branch_ch)
        h = g.add(f"{b}.relu2", "relu", h)
        outs.append(_pointwise(g, f"{b}.fc2", h, branch_ch, out_ch))
    if fusion == "sum":
        fused = outs[0] if len(outs) == 1 else g.add("fuse", "sum", outs)
    else:
        cat = g.add("concat", "concat", outs)
        fused = _pointwise(g, "fuse", cat, out_ch * len(outs), out_ch)
    g.add("out", "relu", fused)
    return g


def build_cascade(in_ch, rates=DEFAULT_RATES, branch_ch=256, out_ch=256):
    """Atrous convolutions in series with strictly increasing rates."""
    rates = _check_rates(rates)
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ShapeError(f"cascade rates must be strictly increasing, got {rates}")
    g = ModuleGraph("cascade", {"head": "cascade", "rates": list(rates), "branches": []})
    h = g.add_input("input", in_ch)
    c = in_ch
    for i, r in enumerate(rates, 1):
        a = _atrous(g, f"s{i}.atrous", h, c, branch_ch, r)
        g.metadata["branches"].append(a)
        h = g.add(f"s{i}.relu", "relu", a)
        c = branch_ch
    h = _pointwise(g, "proj", h, branch_ch, out_ch)
    g.add("out", "relu", h)
    return g


def build_wasp(in_ch, rates=DEFAULT_RATES, branch_ch=256, tap_ch=256, out_ch=256, gap_branch=True):
    """Waterfall atrous spatial pooling.

    Branch ``i`` convolves the previous branch's atrous output (branch 1
    reads the module input) with rate ``rates[i]``; each atrous output also
    feeds a 1x1 tap. Taps and the optional image-level branch are
    concatenated and projected to ``out_ch``.
    """
    rates = _check_rates(rates)
    if any(b < a for a, b in zip(rates, rates[1:])):
        raise ShapeError(f"WASP rates must be ordered, got {rates}")
    g = ModuleGraph("wasp", {"head": "wasp", "rates": list(rates), "gap_branch": bool(gap_branch),
                             "branches": []})
    x = g.add_input("input", in_ch)
    src, c, taps = x, in_ch, []
    for i, r in enumerate(rates, 1):
        a = _atrous(g, f"w{i}.atrous", src, c, branch_ch, r)
        g.metadata["branches"].append(a)
        src = g.add(f"w{i}.relu", "relu", a)
        t = _pointwise(g, f"w{i}.tap", src, branch_ch, tap_ch)
        taps.append(g.add(f"w{i}.tap_relu", "relu", t))
        c = branch_ch
    if gap_branch:
        taps.append(_gap_branch(g, "gap", x, in_ch, tap_ch))
    cat = taps[0] if len(taps) == 1 else g.add("concat", "concat", taps)
    fused = _pointwise(g, "fuse", cat, tap_ch * len(taps), out_ch)
    g.add("out", "relu", fused)
    return g


def build_res2net_seg(in_ch, scales=4, rates=RES2NET_RATES, se_reduction=16, out_ch=256,
                      bottleneck_ch=None, gap_ch=256):
    """Res2Net bottleneck adapted for segmentation.

    The (optionally 1x1-reduced) input is split into ``scales`` equal
    channel groups. Group 1 passes through; group ``s >= 2`` is added to the
    previous group's output and convolved with a 3x3 atrous kernel at
    ``rates[s-2]``. The groups and an image-level branch are concatenated,
    recalibrated by a squeeze-and-excitation gate and projected to
    ``out_ch``.
    """
    rates = _check_rates(rates)
    if scales < 2:
        raise ShapeError("res2net-seg needs at least 2 scales")
    if len(rates) != scales - 1:
        raise ShapeError(f"res2net-seg with {scales} scales needs {scales - 1} rates, got {rates}")
    width = bottleneck_ch or in_ch
    if width % scales:
        raise ShapeError(f"{width} channels are not divisible into {scales} scales")
    gw = width // scales
    g = ModuleGraph("res2net-seg", {"head": "res2net-seg", "rates": list(rates), "scales": scales,
                                    "branches": []})
    x = g.add_input("input", in_ch)
    src = x
    if bottleneck_ch:
        src = g.add("reduce_relu", "relu", _pointwise(g, "reduce", x, in_ch, width))
    groups = [g.add(f"g{s}", "split", src, start=(s - 1) * gw, stop=s * gw) for s in range(1, scales + 1)]
    outs = [groups[0]]
    for s in range(2, scales + 1):
        h = g.add(f"g{s}.add", "sum", [groups[s - 1], outs[-1]])
        a = _atrous(g, f"g{s}.atrous", h, gw, gw, rates[s - 2])
        g.metadata["branches"].append(a)
        outs.append(g.add(f"g{s}.relu", "relu", a))
    parts = outs + [_gap_branch(g, "gap", x, in_ch, gap_ch)]
    fused = g.add("concat", "concat", parts)
    c = width + gap_ch
    gated = g.add("se", "se-gate", fused, channels=c, reduction=se_reduction)
    proj = _pointwise(g, "proj", gated, c, out_ch)
    g.add("out", "relu", proj)
    return g


def build_head(kind, in_ch, rates=None, widths=HeadWidths()):
    """Dispatch to the builder for ``kind`` using ``widths``."""
    if kind == "aspp":
        return build_aspp(in_ch, widths.aspp_branch, rates or DEFAULT_RATES, widths.aspp_fusion, widths.out_ch)
    if kind == "cascade":
        return build_cascade(in_ch, rates or DEFAULT_RATES, widths.cascade_branch, widths.out_ch)
    if kind == "wasp":
        return build_wasp(in_ch, rates or DEFAULT_RATES, widths.wasp_branch, widths.wasp_tap,
                          widths.out_ch, widths.gap_branch)
    if kind == "res2net-seg":
        return build_res2net_seg(in_ch, 4, rates or RES2NET_RATES, widths.se_reduction, widths.out_ch,
                                 widths.res2net_bottleneck, widths.res2net_gap)
    raise ConfigError(f"unknown head kind {kind!r}; choose from {HEAD_KINDS}")


def build_decoder(score_ch=256, lowlevel_ch=256, num_classes=21, mid_ch=256, dropout=0.5):
    """Two-input decoder: fuse stride-8 scores with stride-4 low-level features.

    Scores are upsampled x2 and concatenated with the low-level map, passed
    through two 3x3 conv/ReLU/dropout stages, projected to ``num_classes``
    and upsampled x4 to input resolution.
    """
    if min(score_ch, lowlevel_ch, num_classes, mid_ch) < 1:
        raise ShapeError("decoder channel counts must be positive")
    g = ModuleGraph("decoder", {"num_classes": num_classes})
    score = g.add_input("score", score_ch)
    low = g.add_input("lowlevel", lowlevel_ch)
    up = g.add("up2", "bilinear", score, scale=2)
    h = g.add("concat", "concat", [up, low])
    c = score_ch + lowlevel_ch
    for i in (1, 2):
        h = g.add(f"conv{i}", "conv", h, in_ch=c, out_ch=mid_ch, kernel=3, rate=1)
        h = g.add(f"relu{i}", "relu", h)
        h = g.add(f"drop{i}", "dropout", h, p=dropout)
        c = mid_ch
    h = _pointwise(g, "classifier", h, mid_ch, num_classes)
    g.add("up4", "bilinear", h, scale=4)
    return g


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------


def _conv_bn(g, name, src, in_ch, out_ch, kernel, stride=1, rate=1, relu=True):
    pad = rate * (kernel - 1) // 2
    h = g.add(f"{name}.conv", "conv", src, in_ch=in_ch, out_ch=out_ch, kernel=kernel,
              stride=stride, rate=rate, padding=pad, bias=False)
    h = g.add(f"{name}.bn", "batchnorm", h, channels=out_ch)
    return g.add(f"{name}.relu", "relu", h) if relu else h


def _bottleneck(g, name, src, in_ch, planes, stride, rate):
    h = _conv_bn(g, f"{name}.a", src, in_ch, planes, 1)
    h = _conv_bn(g, f"{name}.b", h, planes, planes, 3, stride=stride, rate=rate)
    h = _conv_bn(g, f"{name}.c", h, planes, planes * 4, 1, relu=False)
    skip = src
    if stride != 1 or in_ch != planes * 4:
        skip = _conv_bn(g, f"{name}.down", src, in_ch, planes * 4, 1, stride=stride, relu=False)
    s = g.add(f"{name}.add", "sum", [h, skip])
    return g.add(f"{name}.out", "relu", s)


def _basic_block(g, name, src, ch):
    h = _conv_bn(g, f"{name}.a", src, ch, ch, 3)
    h = _conv_bn(g, f"{name}.b", h, ch, ch, 3, relu=False)
    s = g.add(f"{name}.add", "sum", [h, src])
    return g.add(f"{name}.out", "relu", s)


def resnet101_trunk():
    """ResNet-101 convolutional trunk (no classifier) at output stride 8.

    Blocks 4 and 5 keep stride 1 and dilate their 3x3 convs by 2 and 4.
    Used for parameter and receptive-field accounting only.
    """
    g = ModuleGraph("resnet101-counting", {"backbone": "resnet101-counting", "output_stride": 8})
    x = g.add_input("input", 3)
    h = _conv_bn(g, "stem", x, 3, 64, 7, stride=2)
    h = g.add("pool", "maxpool", h, kernel=3, stride=2, padding=1)
    in_ch = 64
    stages = [(64, 3, 1, 1), (128, 4, 2, 1), (256, 23, 1, 2), (512, 3, 1, 4)]
    for si, (planes, blocks, stride, rate) in enumerate(stages, 2):
        for b in range(blocks):
            h = _bottleneck(g, f"res{si}.{b}", h, in_ch, planes, stride if b == 0 else 1, rate)
            in_ch = planes * 4
        if si == 2:
            g.metadata["lowlevel"] = h
            g.metadata["lowlevel_ch"] = in_ch
    g.metadata["out_ch"] = in_ch
    return g


def toy_resnet(depth=2, width=16):
    """Small trainable residual backbone: stride-4 tap of ``width`` channels,
    stride-8 output of ``2*width`` channels."""
    if depth < 0 or width < 1:
        raise ConfigError(f"toy-resnet needs depth >= 0 and width >= 1, got ({depth}, {width})")
    g = ModuleGraph("toy-resnet", {"backbone": f"toy-resnet({depth},{width})", "output_stride": 8})
    x = g.add_input("input", 3)
    h = _conv_bn(g, "stem", x, 3, width, 3, stride=2)
    h = _conv_bn(g, "down1", h, width, width, 3, stride=2)
    for b in range(depth):
        h = _basic_block(g, f"stage1.{b}", h, width)
    g.metadata["lowlevel"] = h
    g.metadata["lowlevel_ch"] = width
    h = _conv_bn(g, "down2", h, width, 2 * width, 3, stride=2)
    for b in range(depth):
        h = _basic_block(g, f"stage2.{b}", h, 2 * width)
    g.metadata["out_ch"] = 2 * width
    return g


_TOY_RE = re.compile(r"^toy-resnet(?:\((\d+)\s*,\s*(\d+)\))?$")


def build_backbone(descriptor="toy-resnet(2,16)"):
    """``resnet101-counting`` or ``toy-resnet(depth,width)``."""
    descriptor = descriptor.replace(" ", "")
    if descriptor == "resnet101-counting":
        return resnet101_trunk()
    m = _TOY_RE.match(descriptor)
    if m:
        depth, width = (int(m.group(1)), int(m.group(2))) if m.group(1) else (2, 16)
        return toy_resnet(depth, width)
    raise ConfigError(f"unknown backbone descriptor {descriptor!r}")


def build_network(head="wasp", rates=None, backbone="toy-resnet(2,16)", num_classes=21,
                  widths=None, decoder_ch=None, dropout=0.5):
    """Backbone + head + decoder as one single-input graph."""
    bb = build_backbone(backbone)
    if widths is None:
        widths = HeadWidths() if bb.name == "resnet101-counting" else TOY_WIDTHS
    if decoder_ch is None:
        decoder_ch = 256 if bb.name == "resnet101-counting" else widths.out_ch
    g = ModuleGraph(f"{bb.name}+{head}", {
        "head": head, "rates": list(rates or (RES2NET_RATES if head == "res2net-seg" else DEFAULT_RATES)),
        "backbone": bb.metadata["backbone"], "num_classes": num_classes, "widths": widths.to_dict(),
        "decoder_ch": decoder_ch,
    })
    g.add_input("input", 3)
    out = g.inline(bb, "backbone", {"input": "input"})
    low = f"backbone.{bb.metadata['lowlevel']}"
    hd = build_head(head, bb.metadata["out_ch"], rates, widths)
    score = g.inline(hd, "head", {"input": out})
    dec = build_decoder(widths.out_ch, bb.metadata["lowlevel_ch"], num_classes, decoder_ch, dropout)
    logits = g.inline(dec, "decoder", {"score": score, "lowlevel": low})
    g.set_output(logits)
    return g
