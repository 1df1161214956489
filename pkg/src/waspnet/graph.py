"""Layer graphs: declarative construction, forward/backward, shape inference.

A :class:`ModuleGraph` is an ordered dict of :class:`LayerSpec` nodes. A node
may only consume nodes added before it, so insertion order is a topological
order and cycles cannot be expressed. Channel counts are propagated at
construction time; spatial sizes are checked when data flows.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .exceptions import ShapeError
from .validation import check_finite, check_tensor

KINDS = (
    "input", "identity", "conv", "atrous-conv", "relu", "batchnorm", "dropout",
    "bilinear", "global-avg-pool", "se-gate", "concat", "sum", "split",
    "softmax", "maxpool",
)


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs),
                "attrs": dict(self.attrs)}


# ---------------------------------------------------------------------------
# Per-kind behaviour
# ---------------------------------------------------------------------------


class _Layer:
    arity = 1

    def channels(self, a, in_ch):
        return in_ch[0]

    def param_shapes(self, a):
        return {}

    def buffer_shapes(self, a):
        return {}

    def out_shape(self, a, shapes):
        return shapes[0]

    def forward(self, a, xs, P, ctx):
        raise NotImplementedError

    def backward(self, a, g, cache, P):
        raise NotImplementedError


class _Identity(_Layer):
    def forward(self, a, xs, P, ctx):
        return xs[0], None

    def backward(self, a, g, cache, P):
        return [g], {}


def _conv_spec(a, P):
    k = a["kernel"]
    pad = a.get("padding", a["rate"] * (k - 1) // 2)
    return ops.ConvSpec(P["weight"], P.get("bias"), stride=a.get("stride", 1),
                        dilation=a["rate"], padding=pad)


class _Conv(_Layer):
    def channels(self, a, in_ch):
        if in_ch[0] != a["in_ch"]:
            raise ShapeError(f"conv expects {a['in_ch']} input channels, edge carries {in_ch[0]}")
        return a["out_ch"]

    def param_shapes(self, a):
        shapes = {"weight": (a["out_ch"], a["in_ch"], a["kernel"], a["kernel"])}
        if a.get("bias", True):
            shapes["bias"] = (a["out_ch"],)
        return shapes

    def out_shape(self, a, shapes):
        n, c, h, w = shapes[0]
        k, r, s = a["kernel"], a["rate"], a.get("stride", 1)
        pad = a.get("padding", r * (k - 1) // 2)
        oh = ops.conv_output_size(h, k, r, pad, s)
        ow = ops.conv_output_size(w, k, r, pad, s)
        if oh < 1 or ow < 1:
            raise ShapeError(f"degenerate conv output {oh}x{ow} from {h}x{w}")
        return (n, a["out_ch"], oh, ow)

    def forward(self, a, xs, P, ctx):
        spec = _conv_spec(a, P)
        return ops.conv2d(xs[0], spec), (xs[0], spec)

    def backward(self, a, g, cache, P):
        x, spec = cache
        gx, gw, gb = ops.conv2d_backward(x, spec, g)
        grads = {"weight": gw}
        if gb is not None:
            grads["bias"] = gb
        return [gx], grads


class _Relu(_Layer):
    def forward(self, a, xs, P, ctx):
        return ops.relu(xs[0]), xs[0] > 0

    def backward(self, a, g, mask, P):
        return [np.where(mask, g, 0).astype(g.dtype, copy=False)], {}


class _BatchNorm(_Layer):
    def channels(self, a, in_ch):
        if in_ch[0] != a["channels"]:
            raise ShapeError(f"batchnorm over {a['channels']} channels, edge carries {in_ch[0]}")
        return in_ch[0]

    def param_shapes(self, a):
        return {"gamma": (a["channels"],), "beta": (a["channels"],)}

    def buffer_shapes(self, a):
        return {"running_mean": (a["channels"],), "running_var": (a["channels"],)}

    def _state(self, P, B):
        return ops.BatchNormState(P["gamma"], P["beta"], B["running_mean"], B["running_var"])

    def forward(self, a, xs, P, ctx):
        state = self._state(P, ctx["buffers"])
        out, cache = ops.batchnorm(xs[0], state, ctx["mode"])
        return out, (cache, state)

    def backward(self, a, g, cache, P):
        bn_cache, state = cache
        gx, gg, gb = ops.batchnorm_backward(g, bn_cache, state)
        return [gx], {"gamma": gg, "beta": gb}


class _Dropout(_Layer):
    def forward(self, a, xs, P, ctx):
        return ops.dropout(xs[0], a.get("p", 0.5), ctx["mode"], ctx["rng"])

    def backward(self, a, g, mask, P):
        return [ops.dropout_backward(g, mask)], {}


class _Bilinear(_Layer):
    def out_shape(self, a, shapes):
        n, c, h, w = shapes[0]
        if "size" in a:
            return (n, c, *a["size"])
        if len(shapes) > 1:
            return (n, c, *shapes[1][2:])
        return (n, c, h * a["scale"], w * a["scale"])

    @property
    def arity(self):
        return None

    def channels(self, a, in_ch):
        return in_ch[0]

    def forward(self, a, xs, P, ctx):
        x = xs[0]
        _, _, oh, ow = self.out_shape(a, [x.shape] + [t.shape for t in xs[1:]])
        return ops.bilinear_resize(x, oh, ow), x.shape[2:]

    def backward(self, a, g, in_hw, P):
        # a second input only supplies the target size
        return [ops.bilinear_resize_backward(g, *in_hw)] + [None] * (a.get("_n_in", 1) - 1), {}


class _GlobalAvgPool(_Layer):
    def out_shape(self, a, shapes):
        n, c = shapes[0][:2]
        return (n, c, 1, 1)

    def forward(self, a, xs, P, ctx):
        return ops.global_avg_pool(xs[0]), xs[0].shape

    def backward(self, a, g, shape, P):
        return [ops.global_avg_pool_backward(g, shape)], {}


class _SEGate(_Layer):
    """Squeeze (global mean) and excite (two pointwise layers, sigmoid gate)."""

    def hidden(self, a):
        return max(1, a["channels"] // a.get("reduction", 16))

    def channels(self, a, in_ch):
        if in_ch[0] != a["channels"]:
            raise ShapeError(f"se-gate over {a['channels']} channels, edge carries {in_ch[0]}")
        return in_ch[0]

    def param_shapes(self, a):
        c, h = a["channels"], self.hidden(a)
        return {"fc1.weight": (h, c, 1, 1), "fc1.bias": (h,),
                "fc2.weight": (c, h, 1, 1), "fc2.bias": (c,)}

    def forward(self, a, xs, P, ctx):
        x = xs[0]
        s = x.mean(axis=(2, 3), dtype=np.float64)
        w1 = P["fc1.weight"][:, :, 0, 0].astype(np.float64)
        w2 = P["fc2.weight"][:, :, 0, 0].astype(np.float64)
        z = s @ w1.T + P["fc1.bias"]
        hdn = np.maximum(z, 0)
        gate = ops.sigmoid(hdn @ w2.T + P["fc2.bias"])
        out = (x * gate[:, :, None, None]).astype(x.dtype, copy=False)
        return check_finite(out, "se-gate output"), (x, s, z, hdn, gate, w1, w2)

    def backward(self, a, g, cache, P):
        x, s, z, hdn, gate, w1, w2 = cache
        g64 = g.astype(np.float64, copy=False)
        gx = g64 * gate[:, :, None, None]
        ggate = (g64 * x).sum(axis=(2, 3))
        gpre2 = ggate * gate * (1 - gate)
        gw2 = gpre2.T @ hdn
        gb2 = gpre2.sum(axis=0)
        ghid = gpre2 @ w2
        gz = ghid * (z > 0)
        gw1 = gz.T @ s
        gb1 = gz.sum(axis=0)
        gs = gz @ w1
        gx = gx + gs[:, :, None, None] / (x.shape[2] * x.shape[3])
        dt = P["fc1.weight"].dtype
        grads = {"fc1.weight": gw1[:, :, None, None].astype(dt), "fc1.bias": gb1.astype(dt),
                 "fc2.weight": gw2[:, :, None, None].astype(dt), "fc2.bias": gb2.astype(dt)}
        return [gx.astype(g.dtype)], grads


class _Concat(_Layer):
    arity = None

    def channels(self, a, in_ch):
        return sum(in_ch)

    def out_shape(self, a, shapes):
        _check_same_hw(shapes)
        n, _, h, w = shapes[0]
        return (n, sum(s[1] for s in shapes), h, w)

    def forward(self, a, xs, P, ctx):
        _check_same_hw([x.shape for x in xs])
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, a, g, sizes, P):
        return list(np.split(g, np.cumsum(sizes)[:-1], axis=1)), {}


class _Sum(_Layer):
    arity = None

    def channels(self, a, in_ch):
        if len(set(in_ch)) != 1:
            raise ShapeError(f"sum of tensors with different channel counts {in_ch}")
        return in_ch[0]

    def out_shape(self, a, shapes):
        if len(set(shapes)) != 1:
            raise ShapeError(f"sum of mismatched shapes {shapes}")
        return shapes[0]

    def forward(self, a, xs, P, ctx):
        self.out_shape(a, [x.shape for x in xs])
        out = xs[0].copy()
        for x in xs[1:]:
            out = out + x
        return out, len(xs)

    def backward(self, a, g, n, P):
        return [g] * n, {}


class _Split(_Layer):
    def channels(self, a, in_ch):
        if not 0 <= a["start"] < a["stop"] <= in_ch[0]:
            raise ShapeError(f"split [{a['start']}:{a['stop']}] out of range for {in_ch[0]} channels")
        return a["stop"] - a["start"]

    def out_shape(self, a, shapes):
        n, c, h, w = shapes[0]
        return (n, a["stop"] - a["start"], h, w)

    def forward(self, a, xs, P, ctx):
        return xs[0][:, a["start"] : a["stop"]], xs[0].shape

    def backward(self, a, g, shape, P):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, a["start"] : a["stop"]] = g
        return [gx], {}


class _Softmax(_Layer):
    def forward(self, a, xs, P, ctx):
        y = ops.softmax_channels(xs[0])
        return y, y

    def backward(self, a, g, y, P):
        return [ops.softmax_channels_backward(g, y)], {}


class _MaxPool(_Layer):
    def _geom(self, a):
        return a.get("kernel", 3), a.get("stride", 2), a.get("padding", 1)

    def out_shape(self, a, shapes):
        n, c, h, w = shapes[0]
        k, s, p = self._geom(a)
        return (n, c, ops.conv_output_size(h, k, 1, p, s), ops.conv_output_size(w, k, 1, p, s))

    def forward(self, a, xs, P, ctx):
        out, arg = ops.maxpool2d(xs[0], *self._geom(a))
        return out, (arg, xs[0].shape)

    def backward(self, a, g, cache, P):
        arg, shape = cache
        return [ops.maxpool2d_backward(g, arg, shape, *self._geom(a))], {}


def _check_same_hw(shapes):
    hw = {tuple(s[2:]) for s in shapes}
    if len(hw) != 1:
        raise ShapeError(f"resolution mismatch: cannot fuse spatial sizes {sorted(hw)}")


_LAYERS = {
    "identity": _Identity(), "conv": _Conv(), "atrous-conv": _Conv(), "relu": _Relu(),
    "batchnorm": _BatchNorm(), "dropout": _Dropout(), "bilinear": _Bilinear(),
    "global-avg-pool": _GlobalAvgPool(), "se-gate": _SEGate(), "concat": _Concat(),
    "sum": _Sum(), "split": _Split(), "softmax": _Softmax(), "maxpool": _MaxPool(),
}


# ---------------------------------------------------------------------------
# The graph
# ---------------------------------------------------------------------------


class ModuleGraph:
    """A DAG of layers with named parameters.

    Parameters are created by :meth:`init_params`; until then the graph is a
    pure description whose size can still be counted from its shapes.
    """

    def __init__(self, name="graph", metadata=None):
        self.name = name
        self.metadata = dict(metadata or {})
        self.layers = {}
        self.channels = {}
        self.inputs = []
        self.output = None
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self._values = None
        self._caches = None

    # -- construction -----------------------------------------------------

    def add_input(self, name, channels):
        self._add(LayerSpec(name, "input", (), {"channels": int(channels)}))
        self.inputs.append(name)
        if self.output is None:
            self.output = name
        return name

    def add(self, name, kind, inputs, **attrs):
        if isinstance(inputs, str):
            inputs = (inputs,)
        self._add(LayerSpec(name, kind, tuple(inputs), attrs))
        self.output = name
        return name

    def _add(self, spec):
        if spec.name in self.layers:
            raise ShapeError(f"duplicate layer name {spec.name!r}")
        if spec.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {spec.kind!r}")
        if spec.kind == "input":
            self.channels[spec.name] = spec.attrs["channels"]
        else:
            missing = [i for i in spec.inputs if i not in self.layers]
            if missing:
                raise ShapeError(f"layer {spec.name!r} consumes undefined node(s) {missing}")
            if not spec.inputs:
                raise ShapeError(f"layer {spec.name!r} has no inputs")
            impl = _LAYERS[spec.kind]
            if impl.arity == 1 and len(spec.inputs) != 1:
                raise ShapeError(f"layer {spec.name!r} ({spec.kind}) takes exactly one input")
            if spec.kind in ("conv", "atrous-conv"):
                if "rate" not in spec.attrs:
                    if spec.kind == "atrous-conv":
                        raise ShapeError(f"atrous-conv {spec.name!r} needs an explicit rate")
                    spec.attrs["rate"] = 1
                if int(spec.attrs["rate"]) < 1:
                    raise ShapeError(f"layer {spec.name!r}: rate must be >= 1")
            if spec.kind == "bilinear":
                spec.attrs["_n_in"] = len(spec.inputs)
            try:
                self.channels[spec.name] = impl.channels(spec.attrs, [self.channels[i] for i in spec.inputs])
            except ShapeError as e:
                raise ShapeError(f"layer {spec.name!r} ({spec.kind}): {e}") from None
        self.layers[spec.name] = spec

    def set_output(self, name):
        if name not in self.layers:
            raise ShapeError(f"unknown output node {name!r}")
        self.output = name

    def inline(self, other, prefix, bindings):
        """Copy ``other`` into this graph, wiring its inputs to ``bindings``.

        Returns the name under which ``other``'s output now lives.
        """
        names = {}
        for spec in other.layers.values():
            if spec.kind == "input":
                if spec.name not in bindings:
                    raise ShapeError(f"inline: input {spec.name!r} of {other.name!r} is unbound")
                target = bindings[spec.name]
                if self.channels[target] != other.channels[spec.name]:
                    raise ShapeError(
                        f"inline: {target!r} carries {self.channels[target]} channels, "
                        f"{other.name}.{spec.name} expects {other.channels[spec.name]}"
                    )
                names[spec.name] = target
                continue
            new = f"{prefix}.{spec.name}"
            names[spec.name] = new
            attrs = {k: v for k, v in spec.attrs.items() if k != "_n_in"}
            self.add(new, spec.kind, [names[i] for i in spec.inputs], **copy.deepcopy(attrs))
        for key, arr in other.params.items():
            node, _, suffix = key.partition(".")
            self.params[f"{names[node]}.{suffix}"] = arr.copy()
        for key, arr in other.buffers.items():
            node, _, suffix = key.partition(".")
            self.buffers[f"{names[node]}.{suffix}"] = arr.copy()
        self.metadata.setdefault("components", {})[prefix] = dict(other.metadata)
        return names[other.output]

    # -- parameters -------------------------------------------------------

    def param_shapes(self):
        shapes = {}
        for spec in self.layers.values():
            if spec.kind == "input":
                continue
            for suffix, shape in _LAYERS[spec.kind].param_shapes(spec.attrs).items():
                shapes[f"{spec.name}.{suffix}"] = tuple(int(d) for d in shape)
        return shapes

    def buffer_shapes(self):
        shapes = {}
        for spec in self.layers.values():
            if spec.kind == "input":
                continue
            for suffix, shape in _LAYERS[spec.kind].buffer_shapes(spec.attrs).items():
                shapes[f"{spec.name}.{suffix}"] = tuple(shape)
        return shapes

    def init_params(self, seed=0, dtype=np.float32):
        """He-normal weights, zero biases, identity batchnorm."""
        rng = np.random.default_rng(seed)
        self.params = {}
        for key, shape in self.param_shapes().items():
            suffix = key.rsplit(".", 1)[1]
            if suffix == "weight":
                fan_in = int(np.prod(shape[1:]))
                arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif suffix == "gamma":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            self.params[key] = arr.astype(dtype)
        self.buffers = {}
        for key, shape in self.buffer_shapes().items():
            fill = 1.0 if key.endswith("running_var") else 0.0
            self.buffers[key] = np.full(shape, fill, dtype=dtype)
        return self

    def astype(self, dtype):
        """Deep copy with parameters and buffers cast to ``dtype``."""
        g = copy.copy(self)
        g.layers = dict(self.layers)
        g.metadata = copy.deepcopy(self.metadata)
        g.params = {k: v.astype(dtype) for k, v in self.params.items()}
        g.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        g.grads, g._values, g._caches = {}, None, None
        return g

    def _node_params(self, name, table):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in table.items() if k.startswith(prefix)}

    # -- execution --------------------------------------------------------

    def _bind_inputs(self, x):
        if not isinstance(x, dict):
            if len(self.inputs) != 1:
                raise ShapeError(f"graph {self.name!r} has inputs {self.inputs}; pass a dict")
            x = {self.inputs[0]: x}
        bound = {}
        for name in self.inputs:
            if name not in x:
                raise ShapeError(f"graph {self.name!r}: missing input {name!r}")
            t = check_tensor(x[name], name)
            if t.shape[1] != self.channels[name]:
                raise ShapeError(
                    f"input {name!r}: expected {self.channels[name]} channels, got {t.shape[1]}"
                )
            bound[name] = t
        return bound

    def forward(self, x, mode="eval", rng=None, outputs=None):
        """Evaluate in topological order.

        ``x`` is a tensor (single-input graphs) or a dict keyed by input name.
        With ``outputs`` a dict of the named intermediate values is returned.
        """
        if self.param_shapes() and not self.params:
            raise ShapeError(f"graph {self.name!r} has no parameters; call init_params()")
        values = self._bind_inputs(x)
        caches = {}
        ctx = {"mode": mode, "rng": rng}
        for name, spec in self.layers.items():
            if spec.kind == "input":
                continue
            impl = _LAYERS[spec.kind]
            xs = [values[i] for i in spec.inputs]
            ctx["buffers"] = self._node_params(name, self.buffers)
            try:
                out, cache = impl.forward(spec.attrs, xs, self._node_params(name, self.params), ctx)
            except ShapeError as e:
                raise ShapeError(f"layer {name!r} ({spec.kind}): {e}") from None
            values[name], caches[name] = out, cache
        self._values, self._caches = values, caches
        if outputs is not None:
            return {k: values[k] for k in outputs}
        return values[self.output]

    def backward(self, grad_out):
        """Backpropagate from the output of the last :meth:`forward`.

        Parameter gradients are stored in ``self.grads`` (replacing earlier
        ones); gradients for the graph inputs are returned as a dict.
        """
        if self._caches is None:
            raise RuntimeError("backward() called before forward()")
        out_val = self._values[self.output]
        grad_out = np.asarray(grad_out)
        if grad_out.shape != out_val.shape:
            raise ShapeError(f"backward: grad shape {grad_out.shape} != output {out_val.shape}")
        grads = {self.output: grad_out.astype(out_val.dtype, copy=False)}
        pgrads = {}
        for name in reversed(list(self.layers)):
            spec = self.layers[name]
            if spec.kind == "input" or name not in grads:
                continue
            g = grads.pop(name)
            gin, gp = _LAYERS[spec.kind].backward(
                spec.attrs, g, self._caches[name], self._node_params(name, self.params)
            )
            for suffix, v in gp.items():
                pgrads[f"{name}.{suffix}"] = v
            for src, gi in zip(spec.inputs, gin):
                if gi is None:
                    continue
                grads[src] = grads[src] + gi if src in grads else gi
        for key, arr in self.params.items():
            if key not in pgrads:
                pgrads[key] = np.zeros_like(arr)
        self.grads = pgrads
        return {name: grads.get(name, np.zeros_like(self._values[name])) for name in self.inputs}

    def activation_signature(self):
        """Bytes fingerprint of every ReLU mask in the last forward pass."""
        parts = []
        for name, spec in self.layers.items():
            if spec.kind == "relu":
                parts.append(np.packbits(self._caches[name]).tobytes())
            elif spec.kind == "se-gate":
                parts.append(np.packbits(self._caches[name][2] > 0).tobytes())
            elif spec.kind == "maxpool":
                parts.append(self._caches[name][0].tobytes())
        return b"".join(parts)

    def infer_shapes(self, input_shapes):
        """Propagate tensor shapes without touching data."""
        if not isinstance(input_shapes, dict):
            input_shapes = {self.inputs[0]: tuple(input_shapes)}
        shapes = {}
        for name, spec in self.layers.items():
            if spec.kind == "input":
                s = tuple(input_shapes[name])
                if s[1] != self.channels[name]:
                    raise ShapeError(f"input {name!r}: expected {self.channels[name]} channels")
                shapes[name] = s
                continue
            try:
                shapes[name] = tuple(_LAYERS[spec.kind].out_shape(spec.attrs, [shapes[i] for i in spec.inputs]))
            except ShapeError as e:
                raise ShapeError(f"layer {name!r} ({spec.kind}): {e}") from None
        return shapes

    # -- serialisation ----------------------------------------------------

    def to_dict(self):
        layers = []
        for spec in self.layers.values():
            d = spec.to_dict()
            d["attrs"].pop("_n_in", None)
            layers.append(d)
        return {"name": self.name, "metadata": copy.deepcopy(self.metadata),
                "inputs": list(self.inputs), "output": self.output, "layers": layers}

    @classmethod
    def from_dict(cls, d):
        g = cls(d["name"], d.get("metadata"))
        for layer in d["layers"]:
            attrs = {k: tuple(v) if isinstance(v, list) else v for k, v in layer["attrs"].items()}
            if layer["kind"] == "input":
                g.add_input(layer["name"], attrs["channels"])
            else:
                g.add(layer["name"], layer["kind"], layer["inputs"], **attrs)
        g.set_output(d["output"])
        return g

    def __repr__(self):
        return f"ModuleGraph({self.name!r}, {len(self.layers)} layers, inputs={self.inputs}, output={self.output!r})"
