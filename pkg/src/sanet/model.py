"""Segmentation models: the four-head attention network and its baselines.

Three families share one output contract:

* ``fcn``:     backbone + dense head on stage 4.
* ``fcn-se``:  same, with a squeeze-excitation block ahead of the head.
* ``sanet``:   per-stage attention heads fused into a mask prediction,
               a categorical presence head, and the dense head; the final
               prediction decodes softmax(dense + head-4) upsampled to
               input resolution.

Every family is available at desk scale (for training) and at catalog
scale resnet50/resnet101 (for static analysis).
"""
from dataclasses import dataclass

from . import tensor as T
from .analysis import GraphBuilder
from .backbone import Backbone, VARIANTS
from .blocks import FC, Conv, SABlock, SABlockCfg, SEBlock, SEBlockCfg
from .config import ConfigError
from .tensor import Tensor, UsageError

FAMILIES = ("fcn", "fcn-se", "sanet")
MODEL_NAMES = tuple(f"{f}-{v}" for f in FAMILIES for v in VARIANTS)


def parse_model_name(name):
    for v in VARIANTS:
        suffix = "-" + v
        if name.endswith(suffix):
            family = name[: -len(suffix)]
            if family in FAMILIES:
                return family, v
    raise ConfigError(
        f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")


@dataclass
class ModelCfg:
    family: str
    variant: str
    classes: int
    sa_ratio: int
    sa_activation: str = "sigmoid"
    sa_pool: str = "avg"
    dropout: float = 0.1

    @classmethod
    def from_name(cls, name, classes=None, sa_ratio=None,
                  sa_activation="sigmoid", sa_pool="avg"):
        family, variant = parse_model_name(name)
        if classes is None:
            classes = 3 if variant == "desk" else 21
        if sa_ratio is None:
            sa_ratio = 2 if variant == "desk" else 8
        if classes < 2:
            raise ConfigError(f"model.classes must be >= 2, got {classes}")
        if sa_ratio < 1:
            raise ConfigError(f"model.sa.ratio must be >= 1, got {sa_ratio}")
        return cls(family, variant, classes, sa_ratio, sa_activation, sa_pool)

    @property
    def name(self):
        return f"{self.family}-{self.variant}"


@dataclass
class ModelOutputs:
    y_den: Tensor                 # dense-head logits at stride 8
    y_final: Tensor               # per-pixel probabilities at input size
    y_mask: Tensor = None         # fused attention-head logits (sanet only)
    y_cat: Tensor = None          # per-image presence logits (sanet only)
    y_sa4: Tensor = None          # head-4 logits (sanet only)
    sa_maps: tuple = None         # per head: (out, attn, res)


def predict_labels(outputs):
    """Per-pixel argmax over channels; ties go to the lower class id."""
    return outputs.y_final.data.argmax(axis=1)


class FCNHead:
    """3x3 conv, relu, dropout, 1x1 conv to the class count."""

    def __init__(self, store, name, c_in, width, classes, dropout):
        self.name = name
        self.dropout = dropout
        self.conv1 = Conv(store, name + ".conv1", c_in, width, 3, padding=1)
        self.conv2 = Conv(store, name + ".conv2", width, classes, 1)

    def forward(self, x, training, rng):
        y = T.relu(self.conv1(x))
        if training:
            y = T.dropout(y, self.dropout, rng, training)
        return self.conv2(y)

    def emit(self, g, src):
        e = self.conv1.emit(g, src)
        e = g.activation(self.name + ".relu", e)
        # dropout is identity at inference; it contributes nothing here
        return self.conv2.emit(g, e)


class LinearHead:
    """A bare 1x1 classifier, the head of the plain dilated baseline."""

    def __init__(self, store, name, c_in, classes):
        self.name = name
        self.conv = Conv(store, name + ".conv", c_in, classes, 1)

    def forward(self, x, training, rng):
        return self.conv(x)

    def emit(self, g, src):
        return self.conv.emit(g, src)


class SegModel:
    def __init__(self, store, cfg):
        self.cfg = cfg
        self.backbone = Backbone(store, cfg.variant)
        chans = self.backbone.stage_channels
        c4 = chans[3]
        fcn_width = 64 if cfg.variant == "desk" else 512
        classes = cfg.classes

        self.se = None
        if cfg.family == "fcn-se":
            self.se = SEBlock(store, "se4",
                              SEBlockCfg(c_in=c4, c_mid=c4 // 4, dilation=4))

        self.sa_heads = None
        if cfg.family == "sanet":
            self.sa_heads = []
            for i, c in enumerate(chans, start=1):
                if cfg.variant == "desk":
                    proj = None
                    c_head = c
                else:
                    # catalog stages are too wide to attend directly
                    c_head = c // 4
                    proj = (Conv(store, f"head{i}.proj", c, c_head, 1),)
                sa = SABlock(store, f"head{i}.sa", SABlockCfg(
                    c_in=c_head, ratio=cfg.sa_ratio,
                    pool_kind=cfg.sa_pool, activation=cfg.sa_activation))
                to_c = Conv(store, f"head{i}.cls", c_head, classes, 1)
                self.sa_heads.append((proj, sa, to_c))
            self.fuse = Conv(store, "fuse", 4 * classes, classes, 1)
            self.cat_fc = FC(store, "cat", classes, classes)

        if cfg.family == "sanet":
            self.fcn_head = FCNHead(store, "den", c4, fcn_width, classes,
                                    cfg.dropout)
        else:
            # the plain baselines classify stage 4 directly; the wide dense
            # head is part of the attention model's budget, not the backbone's
            self.fcn_head = LinearHead(store, "den", c4, classes)

    def forward(self, x, training=False, rng=None):
        if training and rng is None:
            raise UsageError("training forward needs an rng (dropout)")
        s1, s2, s3, s4 = self.backbone.forward(x, training)

        if self.se is not None:
            s4 = self.se.forward(s4, training)

        y_mask = y_cat = y_sa4 = None
        sa_maps = None
        if self.sa_heads is not None:
            head_logits = []
            sa_maps = []
            for i, ((proj, sa, to_c), s) in enumerate(
                    zip(self.sa_heads, (s1, s2, s3, s4)), start=1):
                feat = s
                if proj is not None:
                    feat = T.relu(proj[0](feat))
                out, attn, res = sa.forward(feat, training)
                logits = to_c(out)
                if i == 1:
                    logits = T.avg_pool2d(logits, 2, 2)
                head_logits.append(logits)
                sa_maps.append((out, attn, res))
            y_mask = self.fuse(T.concat_channels(head_logits))
            y_cat = self.cat_fc(T.global_avg_pool(y_mask))
            y_sa4 = head_logits[3]
            sa_maps = tuple(sa_maps)

        y_den = self.fcn_head.forward(s4, training, rng)
        y_reg = T.add(y_den, y_sa4) if y_sa4 is not None else y_den
        y_final = T.bilinear_upsample(T.softmax_channels(y_reg), 8)
        return ModelOutputs(y_den=y_den, y_final=y_final, y_mask=y_mask,
                            y_cat=y_cat, y_sa4=y_sa4, sa_maps=sa_maps)

    def graph(self, h, w):
        """Static layer graph for the analyzer, from the same layer objects."""
        g = GraphBuilder((3, h, w))
        s1, s2, s3, s4 = self.backbone.emit(g, g.graph.input_edge)
        if self.se is not None:
            s4 = self.se.emit(g, s4)
        y_sa4 = None
        if self.sa_heads is not None:
            head_edges = []
            for i, ((proj, sa, to_c), s) in enumerate(
                    zip(self.sa_heads, (s1, s2, s3, s4)), start=1):
                e = s
                if proj is not None:
                    e = proj[0].emit(g, e)
                    e = g.activation(f"head{i}.proj.relu", e)
                e = sa.emit(g, e)
                e = to_c.emit(g, e)
                if i == 1:
                    e = g.pool(f"head{i}.down", e, k=2, stride=2)
                head_edges.append(e)
            y_mask = self.fuse.emit(g, g.concat("concat_heads", head_edges))
            pooled = g.pool("cat.gap", y_mask, k="global")
            self.cat_fc.emit(g, pooled)
            y_sa4 = head_edges[3]
        y_den = self.fcn_head.emit(g, s4)
        y_reg = g.add("regularized", y_den, y_sa4) if y_sa4 is not None else y_den
        e = g.activation("final.softmax", y_reg)
        g.upsample("final.up", e, 8)
        return g.graph


def build_model(store, name, classes=None, sa_ratio=None,
                sa_activation="sigmoid", sa_pool="avg"):
    cfg = ModelCfg.from_name(name, classes=classes, sa_ratio=sa_ratio,
                             sa_activation=sa_activation, sa_pool=sa_pool)
    return SegModel(store, cfg)
