"""Static MACs and parameter counting over a declarative layer graph.

Models emit their structure as LayerSpecs through a GraphBuilder; analyze()
infers every edge shape from the input size and applies fixed counting
rules, so complexity numbers come from the same objects that own the
executable parameters.

Counting convention (documented, since published tables rarely state one):
convolution MACs are weight-parameter count times output positions with
bias additions excluded; a normalization costs 2 MACs per element; pooling,
resampling, activations, and elementwise add/mul cost 1 MAC per output
element; concatenation is free.
"""
from dataclasses import dataclass, field


class GraphError(ValueError):
    """The layer graph is malformed or its shapes cannot be inferred."""


@dataclass
class LayerSpec:
    name: str
    kind: str                     # conv|fc|norm|pool|upsample|activation|add|concat|mul
    inputs: tuple
    attrs: dict = field(default_factory=dict)


@dataclass
class GraphSpec:
    input_dims: tuple             # (c, h, w) of the single input edge
    layers: list = field(default_factory=list)
    input_edge: str = "input"


@dataclass
class LayerStats:
    name: str
    kind: str
    params: int
    macs: int
    out_dims: tuple


@dataclass
class ModelStats:
    layers: list
    total_params: int
    total_macs: int


class GraphBuilder:
    """Collects LayerSpecs; each method returns the new output edge name."""

    def __init__(self, input_dims, input_edge="input"):
        self.graph = GraphSpec(input_dims=tuple(input_dims), input_edge=input_edge)
        self._names = set()

    def _emit(self, name, kind, inputs, **attrs):
        if name in self._names:
            raise GraphError(f"duplicate layer name {name!r}")
        self._names.add(name)
        self.graph.layers.append(LayerSpec(name, kind, tuple(inputs), attrs))
        return name

    def conv(self, name, src, c_out, k, stride=1, padding=0, dilation=1, groups=1):
        return self._emit(name, "conv", (src,), c_out=c_out, k=k, stride=stride,
                          padding=padding, dilation=dilation, groups=groups)

    def fc(self, name, src, c_out):
        return self._emit(name, "fc", (src,), c_out=c_out)

    def norm(self, name, src):
        return self._emit(name, "norm", (src,))

    def activation(self, name, src):
        return self._emit(name, "activation", (src,))

    def pool(self, name, src, k, stride=None, padding=0):
        stride = k if stride is None else stride
        return self._emit(name, "pool", (src,), k=k, stride=stride, padding=padding)

    def upsample(self, name, src, factor):
        return self._emit(name, "upsample", (src,), factor=factor)

    def add(self, name, a, b):
        return self._emit(name, "add", (a, b))

    def mul(self, name, a, b):
        return self._emit(name, "mul", (a, b))

    def concat(self, name, srcs):
        return self._emit(name, "concat", tuple(srcs))


def _conv_extent(size, k, stride, padding, dilation):
    out = (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    if out < 1:
        raise GraphError(f"size {size} too small for k={k}, stride={stride}, "
                         f"padding={padding}, dilation={dilation}")
    return out


def _elements(dims):
    c, h, w = dims
    return c * h * w


def count_layer(layer, in_dims):
    """(macs, params, out_dims) for one layer given its input dims.

    in_dims is (c, h, w) for single-input layers, a list of dims for
    add/mul/concat.
    """
    kind = layer.kind
    a = layer.attrs
    if kind == "conv":
        c, h, w = in_dims
        c_out, k = a["c_out"], a["k"]
        groups = a.get("groups", 1)
        if c % groups or c_out % groups:
            raise GraphError(
                f"layer {layer.name}: channels {c}->{c_out} vs groups={groups}")
        h_out = _conv_extent(h, k, a["stride"], a["padding"], a["dilation"])
        w_out = _conv_extent(w, k, a["stride"], a["padding"], a["dilation"])
        weight_params = c_out * (c // groups) * k * k
        params = weight_params + c_out
        macs = weight_params * h_out * w_out
        return macs, params, (c_out, h_out, w_out)
    if kind == "fc":
        c, h, w = in_dims
        if (h, w) != (1, 1):
            raise GraphError(f"layer {layer.name}: fc input must be (c, 1, 1), "
                             f"got {in_dims}")
        c_out = a["c_out"]
        return c_out * c, c_out * c + c_out, (c_out, 1, 1)
    if kind == "norm":
        c, h, w = in_dims
        return 2 * c * h * w, 2 * c, in_dims
    if kind == "pool":
        c, h, w = in_dims
        if a["k"] == "global":
            out = (c, 1, 1)
        else:
            out = (c,
                   _conv_extent(h, a["k"], a["stride"], a.get("padding", 0), 1),
                   _conv_extent(w, a["k"], a["stride"], a.get("padding", 0), 1))
        return _elements(out), 0, out
    if kind == "upsample":
        c, h, w = in_dims
        out = (c, h * a["factor"], w * a["factor"])
        return _elements(out), 0, out
    if kind == "activation":
        return _elements(in_dims), 0, in_dims
    if kind in ("add", "mul"):
        da, db = in_dims
        out = tuple(max(x, y) for x, y in zip(da, db))
        for x, y in zip(da, db):
            if x != y and 1 not in (x, y):
                raise GraphError(
                    f"layer {layer.name}: dims {da} and {db} do not broadcast")
        return _elements(out), 0, out
    if kind == "concat":
        hw = {(h, w) for _, h, w in in_dims}
        if len(hw) != 1:
            raise GraphError(f"layer {layer.name}: concat dims differ: {in_dims}")
        out = (sum(c for c, _, _ in in_dims), *next(iter(hw)))
        return 0, 0, out
    raise GraphError(f"layer {layer.name}: unknown kind {kind!r}")


def analyze(graph):
    """Walk the graph in order, inferring shapes and summing the counts."""
    shapes = {graph.input_edge: tuple(graph.input_dims)}
    stats = []
    total_params = 0
    total_macs = 0
    for layer in graph.layers:
        dims = []
        for edge in layer.inputs:
            if edge not in shapes:
                raise GraphError(
                    f"layer {layer.name}: input edge {edge!r} is not defined yet")
            dims.append(shapes[edge])
        if layer.name in shapes:
            raise GraphError(f"edge {layer.name!r} defined twice")
        in_dims = dims if layer.kind in ("add", "mul", "concat") else dims[0]
        macs, params, out_dims = count_layer(layer, in_dims)
        shapes[layer.name] = out_dims
        stats.append(LayerStats(layer.name, layer.kind, params, macs, out_dims))
        total_params += params
        total_macs += macs
    return ModelStats(stats, total_params, total_macs)


def stats_report(stats):
    """One `name kind params macs out_dims` line per layer, then TOTAL."""
    lines = []
    for s in stats.layers:
        dims = "x".join(str(d) for d in s.out_dims)
        lines.append(f"{s.name} {s.kind} {s.params} {s.macs} {dims}")
    lines.append(f"TOTAL {stats.total_params} {stats.total_macs}")
    return "\n".join(lines) + "\n"
