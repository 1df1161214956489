"""Parameter counting and receptive-field analysis over layer graphs."""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .exceptions import ShapeError
from .ops import effective_kernel


def count_parameters(graph):
    """Exact number of trainable scalars (batchnorm running stats excluded)."""
    return int(sum(int(np.prod(s)) for s in graph.param_shapes().values()))


@dataclass(frozen=True)
class RFState:
    """Receptive-field bookkeeping at one node.

    ``rf`` is measured in input pixels along one axis and ``jump`` is the
    distance in input pixels between neighbouring positions of this node.
    ``effective_kernel`` is the dilated extent of the node's own kernel (1
    for kernel-free layers). ``global_context`` records that an image-level
    pooling path reaches the node; such a path is not counted in ``rf``.
    """

    rf: Fraction
    jump: Fraction
    effective_kernel: int = 1
    global_context: bool = False

    @property
    def size(self):
        return int(self.rf) if self.rf.denominator == 1 else float(self.rf)


_PASSTHROUGH = {"identity", "relu", "batchnorm", "dropout", "softmax", "split"}


def _node_rf(spec, ins):
    kind, a = spec.kind, spec.attrs
    if kind in _PASSTHROUGH:
        return RFState(ins[0].rf, ins[0].jump, 1, ins[0].global_context)
    if kind in ("conv", "atrous-conv", "maxpool"):
        k = a.get("kernel", 3)
        r = a.get("rate", 1)
        s = a.get("stride", 1 if kind != "maxpool" else 2)
        ke = effective_kernel(k, r)
        src = ins[0]
        return RFState(src.rf + (ke - 1) * src.jump, src.jump * s, ke, src.global_context)
    if kind == "global-avg-pool":
        return RFState(ins[0].rf, ins[0].jump, 1, True)
    if kind == "se-gate":
        return RFState(ins[0].rf, ins[0].jump, 1, True)
    if kind == "bilinear":
        src = ins[0]
        if len(ins) > 1:
            # resize to a reference map: broadcast onto its grid
            ref = ins[1]
            return RFState(src.rf, ref.jump, 1, src.global_context)
        scale = a["scale"]
        return RFState(src.rf + src.jump, src.jump / scale, 2, src.global_context)
    if kind in ("concat", "sum"):
        return RFState(max(s.rf for s in ins), min(s.jump for s in ins), 1,
                       any(s.global_context for s in ins))
    raise ShapeError(f"receptive_field: unsupported layer kind {kind!r} at {spec.name!r}")


def receptive_fields(graph):
    """RF state for every node, via ``rf_out = rf_in + (k_eff - 1) * jump``.

    Fusion nodes take the maximum over their inputs.
    """
    states = {}
    for name, spec in graph.layers.items():
        if spec.kind == "input":
            states[name] = RFState(Fraction(1), Fraction(1))
        else:
            states[name] = _node_rf(spec, [states[i] for i in spec.inputs])
    return states


def receptive_field(graph):
    """RF state at the graph's output node."""
    return receptive_fields(graph)[graph.output]


def branch_receptive_fields(graph):
    """``[(node, rf, effective_kernel)]`` for each branch named in the metadata."""
    states = receptive_fields(graph)
    return [(b, states[b].size, states[b].effective_kernel) for b in graph.metadata.get("branches", [])]
