"""Dilated residual backbones exposing four stage outputs.

Two sizes share one contract (strides 4, 8, 8, 8 with dilations 1, 1, 2, 4):

* ``desk``: 3x3/2 stem and two basic blocks per stage at widths
  16/32/64/128, small enough to train in minutes on a CPU.
* ``resnet50`` / ``resnet101``: 7x7/2 stem, 3x3/2 max pool, bottleneck
  blocks at standard widths; used by the static complexity analyzer.
"""
from . import tensor as T
from .blocks import Conv, Norm, ResidualBlock, ResidualBlockCfg
from .tensor import ShapeError

DESK_CHANNELS = (16, 32, 64, 128)
BOTTLENECK_MID = (64, 128, 256, 512)
STAGE_STRIDES_DESK = (2, 2, 1, 1)
STAGE_STRIDES_CATALOG = (1, 2, 1, 1)
STAGE_DILATIONS = (1, 1, 2, 4)
BLOCK_COUNTS = {"resnet50": (3, 4, 6, 3), "resnet101": (3, 4, 23, 3)}
VARIANTS = ("desk", "resnet50", "resnet101")


class BottleneckBlock:
    """1x1 reduce, 3x3 (stride/dilation), 1x1 expand, plus shortcut."""

    def __init__(self, store, name, c_in, c_mid, c_out, stride, dilation):
        self.name = name
        self.conv1 = Conv(store, name + ".conv1", c_in, c_mid, 1)
        self.norm1 = Norm(store, name + ".norm1", c_mid)
        self.conv2 = Conv(store, name + ".conv2", c_mid, c_mid, 3,
                          stride=stride, padding=dilation, dilation=dilation)
        self.norm2 = Norm(store, name + ".norm2", c_mid)
        self.conv3 = Conv(store, name + ".conv3", c_mid, c_out, 1)
        self.norm3 = Norm(store, name + ".norm3", c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv(store, name + ".proj", c_in, c_out, 1, stride=stride)
            self.proj_norm = Norm(store, name + ".proj_norm", c_out)
        else:
            self.proj = None
            self.proj_norm = None

    def forward(self, x, training):
        y = T.relu(self.norm1(self.conv1(x), training))
        y = T.relu(self.norm2(self.conv2(y), training))
        y = self.norm3(self.conv3(y), training)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_norm(self.proj(x), training)
        return T.add(shortcut, y)

    def emit(self, g, src):
        e = self.conv1.emit(g, src)
        e = self.norm1.emit(g, e)
        e = g.activation(self.name + ".relu1", e)
        e = self.conv2.emit(g, e)
        e = self.norm2.emit(g, e)
        e = g.activation(self.name + ".relu2", e)
        e = self.conv3.emit(g, e)
        e = self.norm3.emit(g, e)
        shortcut = src
        if self.proj is not None:
            shortcut = self.proj.emit(g, src)
            shortcut = self.proj_norm.emit(g, shortcut)
        return g.add(self.name + ".add", shortcut, e)


class Backbone:
    def __init__(self, store, variant, name="backbone"):
        if variant not in VARIANTS:
            raise ShapeError(f"unknown backbone variant {variant!r}")
        self.variant = variant
        self.name = name
        self.stages = []
        if variant == "desk":
            self.stem_conv = Conv(store, name + ".stem", 3, 16, 3,
                                  stride=2, padding=1)
            self.stem_norm = Norm(store, name + ".stem_norm", 16)
            self.stem_pool = False
            c_in = 16
            self.stage_channels = DESK_CHANNELS
            for si, c_out in enumerate(DESK_CHANNELS):
                blocks = []
                for bi in range(2):
                    stride = STAGE_STRIDES_DESK[si] if bi == 0 else 1
                    cfg = ResidualBlockCfg(c_in, c_out, c_out, stride=stride,
                                           dilation=STAGE_DILATIONS[si])
                    blocks.append(ResidualBlock(
                        store, f"{name}.s{si + 1}.b{bi}", cfg))
                    c_in = c_out
                self.stages.append(blocks)
        else:
            self.stem_conv = Conv(store, name + ".stem", 3, 64, 7,
                                  stride=2, padding=3)
            self.stem_norm = Norm(store, name + ".stem_norm", 64)
            self.stem_pool = True
            c_in = 64
            self.stage_channels = tuple(4 * m for m in BOTTLENECK_MID)
            for si, (count, c_mid) in enumerate(
                    zip(BLOCK_COUNTS[variant], BOTTLENECK_MID)):
                blocks = []
                c_out = 4 * c_mid
                for bi in range(count):
                    stride = STAGE_STRIDES_CATALOG[si] if bi == 0 else 1
                    blocks.append(BottleneckBlock(
                        store, f"{name}.s{si + 1}.b{bi}", c_in, c_mid, c_out,
                        stride, STAGE_DILATIONS[si]))
                    c_in = c_out
                self.stages.append(blocks)

    def forward(self, x, training):
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"backbone: expected 3 input channels, got {c}")
        if h % 8 or w % 8:
            raise ShapeError(f"backbone: input dims {h}x{w} not divisible by 8")
        y = T.relu(self.stem_norm(self.stem_conv(x), training))
        if self.stem_pool:
            y = T.max_pool2d(y, 3, 2, padding=1)
        outs = []
        for blocks in self.stages:
            for b in blocks:
                y = b.forward(y, training)
            outs.append(y)
        return tuple(outs)

    def emit(self, g, src):
        e = self.stem_conv.emit(g, src)
        e = self.stem_norm.emit(g, e)
        e = g.activation(self.name + ".stem_relu", e)
        if self.stem_pool:
            e = g.pool(self.name + ".stem_pool", e, k=3, stride=2, padding=1)
        outs = []
        for blocks in self.stages:
            for b in blocks:
                e = b.emit(g, e)
            outs.append(e)
        return tuple(outs)
