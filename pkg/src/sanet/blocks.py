"""The three building blocks: residual, squeeze-excitation, squeeze-attention.

Every layer wrapper owns its parameters (registered in a ParamStore) and
knows how to do two things: run forward, and emit its static description
into a graph builder for the complexity analyzer.  Emission reads the same
shape fields the forward pass uses, so analyzer parameter counts agree with
the executable parameter store by construction.
"""
from dataclasses import dataclass

from . import tensor as T
from .tensor import ConvParams, ShapeError


class Conv:
    def __init__(self, store, name, c_in, c_out, k, stride=1, padding=0,
                 dilation=1, groups=1):
        weight, bias = store.conv(name, c_in, c_out, k, groups)
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.p = ConvParams(weight, bias, stride, padding, dilation, groups)

    def __call__(self, x):
        return T.conv2d(x, self.p)

    def emit(self, g, src):
        return g.conv(self.name, src, self.c_out, self.k, stride=self.p.stride,
                      padding=self.p.padding, dilation=self.p.dilation,
                      groups=self.p.groups)


class Norm:
    def __init__(self, store, name, c):
        self.name = name
        self.c = c
        self.gamma, self.beta, self.rmean, self.rvar = store.norm(name, c)

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.rmean, self.rvar, training)

    def emit(self, g, src):
        return g.norm(self.name, src)


class FC:
    def __init__(self, store, name, c_in, c_out):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.weight, self.bias = store.fc(name, c_in, c_out)

    def __call__(self, x):
        return T.fully_connected(x, self.weight, self.bias)

    def emit(self, g, src):
        return g.fc(self.name, src, self.c_out)


@dataclass
class ResidualBlockCfg:
    c_in: int
    c_mid: int
    c_out: int
    stride: int = 1
    dilation: int = 1
    norm: bool = True
    projection: bool = None  # default: project iff dims change

    def __post_init__(self):
        if self.projection is None:
            self.projection = self.stride != 1 or self.c_in != self.c_out


class _ConvPair:
    """conv-norm-relu-conv-norm, the function F shared by all three blocks."""

    def __init__(self, store, name, cfg, groups_first=1):
        d = cfg.dilation
        self.conv1 = Conv(store, name + ".conv1", cfg.c_in, cfg.c_mid, 3,
                          stride=cfg.stride, padding=d, dilation=d,
                          groups=groups_first)
        self.norm1 = Norm(store, name + ".norm1", cfg.c_mid) if cfg.norm else None
        self.conv2 = Conv(store, name + ".conv2", cfg.c_mid, cfg.c_out, 3,
                          padding=d, dilation=d)
        self.norm2 = Norm(store, name + ".norm2", cfg.c_out) if cfg.norm else None

    def __call__(self, x, training):
        y = self.conv1(x)
        if self.norm1 is not None:
            y = self.norm1(y, training)
        y = T.relu(y)
        y = self.conv2(y)
        if self.norm2 is not None:
            y = self.norm2(y, training)
        return y

    def emit(self, g, src):
        e = self.conv1.emit(g, src)
        if self.norm1 is not None:
            e = self.norm1.emit(g, e)
        e = g.activation(self.conv1.name + ".relu", e)
        e = self.conv2.emit(g, e)
        if self.norm2 is not None:
            e = self.norm2.emit(g, e)
        return e


class ResidualBlock:
    """shortcut(x) + F(x) with F = conv-norm-relu-conv-norm."""

    def __init__(self, store, name, cfg):
        self.name = name
        self.cfg = cfg
        self.f = _ConvPair(store, name + ".f", cfg)
        if cfg.projection:
            self.proj = Conv(store, name + ".proj", cfg.c_in, cfg.c_out, 1,
                             stride=cfg.stride)
            self.proj_norm = Norm(store, name + ".proj_norm", cfg.c_out) \
                if cfg.norm else None
        else:
            self.proj = None
            self.proj_norm = None

    def forward(self, x, training):
        main = self.f(x, training)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj(shortcut)
            if self.proj_norm is not None:
                shortcut = self.proj_norm(shortcut, training)
        if shortcut.shape != main.shape:
            raise ShapeError(
                f"residual_block {self.name}: shortcut {shortcut.shape} "
                f"!= main path {main.shape}"
            )
        return T.add(shortcut, main)

    def emit(self, g, src):
        main = self.f.emit(g, src)
        shortcut = src
        if self.proj is not None:
            shortcut = self.proj.emit(g, src)
            if self.proj_norm is not None:
                shortcut = self.proj_norm.emit(g, shortcut)
        return g.add(self.name + ".add", shortcut, main)


@dataclass
class SEBlockCfg:
    c_in: int
    c_mid: int
    se_mid: int = 4
    dilation: int = 1
    norm: bool = True

    def __post_init__(self):
        if self.se_mid < 1:
            raise ShapeError(f"se_module: se_mid must be >= 1, got {self.se_mid}")


class SEBlock:
    """w * x + F(x) with per-channel weights w from the squeezed input.

    w = sigmoid(fc2(relu(fc1(global_avg_pool(x))))); the weighted term is
    the block input itself, so input and output widths must match.
    """

    def __init__(self, store, name, cfg):
        self.name = name
        self.cfg = cfg
        base = ResidualBlockCfg(cfg.c_in, cfg.c_mid, cfg.c_in,
                                dilation=cfg.dilation, norm=cfg.norm)
        self.f = _ConvPair(store, name + ".f", base)
        self.fc1 = FC(store, name + ".fc1", cfg.c_in, cfg.se_mid)
        self.fc2 = FC(store, name + ".fc2", cfg.se_mid, cfg.c_in)

    def channel_weights(self, x):
        s = T.global_avg_pool(x)
        s = T.relu(self.fc1(s))
        return T.sigmoid(self.fc2(s))

    def forward(self, x, training):
        w = self.channel_weights(x)
        return T.add(T.mul(w, x), self.f(x, training))

    def emit(self, g, src):
        s = g.pool(self.name + ".gap", src, k="global")
        s = self.fc1.emit(g, s)
        s = g.activation(self.name + ".fc1.relu", s)
        s = self.fc2.emit(g, s)
        s = g.activation(self.name + ".fc2.sigmoid", s)
        weighted = g.mul(self.name + ".scale", s, src)
        main = self.f.emit(g, src)
        return g.add(self.name + ".add", weighted, main)


@dataclass
class SABlockCfg:
    c_in: int
    c_attn: int = None       # default c_in // reduction
    c_out: int = None        # default c_in
    ratio: int = 8
    reduction: int = 4
    groups_first_conv: int = 2
    pool_kind: str = "avg"
    activation: str = "sigmoid"
    norm: bool = True

    def __post_init__(self):
        if self.c_in % self.reduction:
            raise ShapeError(
                f"sa_module: c_in={self.c_in} not divisible by "
                f"reduction={self.reduction}"
            )
        if self.ratio < 1:
            raise ShapeError(f"sa_module: ratio must be >= 1, got {self.ratio}")
        if self.pool_kind not in ("avg", "max"):
            raise ShapeError(f"sa_module: pool_kind must be avg or max, "
                             f"got {self.pool_kind!r}")
        if self.activation not in ("sigmoid", "relu"):
            raise ShapeError(f"sa_module: activation must be sigmoid or relu, "
                             f"got {self.activation!r}")
        if self.c_attn is None:
            self.c_attn = self.c_in // self.reduction
        if self.c_out is None:
            self.c_out = self.c_in
        g = self.groups_first_conv
        for label, c in (("c_in", self.c_in),
                         ("c_in/reduction", self.c_in // self.reduction),
                         ("c_attn", self.c_attn)):
            if c % g:
                raise ShapeError(
                    f"sa_module: {label}={c} not divisible by first-conv "
                    f"groups={g}"
                )


class SABlock:
    """Spatial attention over a reduced residual function.

    Main channel: a two-conv residual function at width c_in/reduction
    giving the features `res`.  Attention channel: pool by `ratio`, two
    convolutions, the mask activation, then upsample by `ratio` giving the
    mask `attn`.  Output is attn * res + attn; the triple (out, attn, res)
    is returned so the mask and features can be exported.
    """

    def __init__(self, store, name, cfg):
        self.name = name
        self.cfg = cfg
        g = cfg.groups_first_conv
        main_cfg = ResidualBlockCfg(cfg.c_in, cfg.c_in // cfg.reduction,
                                    cfg.c_out, norm=cfg.norm)
        self.main = _ConvPair(store, name + ".main", main_cfg, groups_first=g)
        self.attn_conv1 = Conv(store, name + ".attn.conv1", cfg.c_in,
                               cfg.c_attn, 3, padding=1, groups=g)
        self.attn_norm = Norm(store, name + ".attn.norm", cfg.c_attn) \
            if cfg.norm else None
        self.attn_conv2 = Conv(store, name + ".attn.conv2", cfg.c_attn,
                               cfg.c_out, 3, padding=1)

    def _mask_act(self, x):
        return T.sigmoid(x) if self.cfg.activation == "sigmoid" else T.relu(x)

    def forward(self, x, training):
        r = self.cfg.ratio
        n, c, h, w = x.shape
        if h % r or w % r:
            raise ShapeError(
                f"sa_module {self.name}: spatial dims {h}x{w} not divisible "
                f"by ratio={r}"
            )
        res = self.main(x, training)
        if self.cfg.pool_kind == "avg":
            a = T.avg_pool2d(x, r, r)
        else:
            a = T.max_pool2d(x, r, r)
        a = self.attn_conv1(a)
        if self.attn_norm is not None:
            a = self.attn_norm(a, training)
        a = T.relu(a)
        a = self.attn_conv2(a)
        a = self._mask_act(a)
        attn = T.bilinear_upsample(a, r)
        out = T.add(T.mul(attn, res), attn)
        return out, attn, res

    def emit(self, g, src):
        r = self.cfg.ratio
        res = self.main.emit(g, src)
        a = g.pool(self.name + ".pool", src, k=r, stride=r)
        a = self.attn_conv1.emit(g, a)
        if self.attn_norm is not None:
            a = self.attn_norm.emit(g, a)
        a = g.activation(self.name + ".attn.relu", a)
        a = self.attn_conv2.emit(g, a)
        a = g.activation(self.name + ".attn." + self.cfg.activation, a)
        attn = g.upsample(self.name + ".up", a, r)
        scaled = g.mul(self.name + ".mul", attn, res)
        return g.add(self.name + ".add", scaled, attn)
