"""FPN macro-topologies over a three-stage toy backbone.

Channel plan: C2 8ch at H/4, C3 16ch at H/8, C4 32ch at H/16.  Laterals
project C3 and C4 to 16 channels (P3, P4), P4 is upsampled to P3's
resolution, and every topology ends with a 1x1 head producing one logit map
at stride 8.

The low-level shortcut (GILS) takes C2 through a stop-gradient, a 2x2
space-to-depth (8 -> 32 channels at H/8) and a 1x1 conv back to 16 channels.
The fusion block is ``concat(a, b) -> 3x3 conv -> relu``; the parameter-shared
topologies call one block twice.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .graph import Graph, Parameter
from .ops import ConvWeights
from .tensor import Rng, as_tensor

C2_CH, C3_CH, C4_CH, FPN_CH = 8, 16, 32, 16
STRIDE = 8


class Kind(str, enum.Enum):
    VANILLA = "vanilla"
    HIGHRES = "highres"
    HOURGLASS = "hourglass"
    VARIANT1 = "variant1"
    VARIANT2 = "variant2"
    NO_ISOLATION = "no_isolation"
    NO_SHARING = "no_sharing"
    MAXPOOL_DOWN = "maxpool_down"
    AVGPOOL_DOWN = "avgpool_down"


# (barrier on the C2 branch, downsampler, second fusion uses its own weights)
_VARIANT2_FAMILY = {
    Kind.VARIANT2: (True, "learned", False),
    Kind.NO_ISOLATION: (False, "learned", False),
    Kind.NO_SHARING: (True, "learned", True),
    Kind.MAXPOOL_DOWN: (True, "max", False),
    Kind.AVGPOOL_DOWN: (True, "avg", False),
    Kind.HIGHRES: (False, "learned", True),
}

SHARED_KINDS = frozenset({Kind.VARIANT1, Kind.VARIANT2, Kind.NO_ISOLATION, Kind.MAXPOOL_DOWN, Kind.AVGPOOL_DOWN})
TWO_FUSION_KINDS = SHARED_KINDS | {Kind.NO_SHARING, Kind.HIGHRES}


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: Kind

    @classmethod
    def parse(cls, name: str) -> "ArchitectureSpec":
        try:
            return cls(Kind(name.lower().replace("-", "_")))
        except ValueError:
            choices = ", ".join(k.value for k in Kind)
            raise ValueError(f"unknown architecture {name!r}; choose from {choices}") from None

    @property
    def shares_fusion(self) -> bool:
        return self.kind in SHARED_KINDS

    @property
    def has_gils_conv(self) -> bool:
        return self.kind not in (Kind.VANILLA, Kind.MAXPOOL_DOWN, Kind.AVGPOOL_DOWN)


@dataclass
class FusionCall:
    concat: int
    conv: int
    bias: int
    out: int


@dataclass
class Handles:
    image: int
    c2: int
    c3: int
    c4: int
    p3: int
    p4: int
    p4_up: int
    out: int
    logits: int
    gils: Optional[int] = None
    gils_source: Optional[int] = None  # barrier node, severed leaf, or C2 itself
    t: Optional[int] = None
    fusions: list = field(default_factory=list)
    stage_convs: dict = field(default_factory=dict)


class Model:
    """Parameters for one :class:`ArchitectureSpec`.

    Each parameter is drawn from a stream keyed by its name, so every
    topology built from the same seed shares identical backbone, lateral,
    fusion and head weights.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        root = Rng(seed)
        kind = spec.kind

        def conv(name, out_c, in_c, k):
            w = ConvWeights.init(name, out_c, in_c, k, root.spawn(name))
            self.convs[name] = w
            return w

        self.convs: dict[str, ConvWeights] = {}
        conv("backbone.stage1", C2_CH, 1, 3)
        conv("backbone.stage2", C3_CH, C2_CH, 3)
        conv("backbone.stage3", C4_CH, C3_CH, 3)
        conv("lateral3", FPN_CH, C3_CH, 1)
        conv("lateral4", FPN_CH, C4_CH, 1)
        if kind is Kind.HOURGLASS:
            conv("fusion", FPN_CH, 3 * FPN_CH, 3)
        else:
            conv("fusion", FPN_CH, 2 * FPN_CH, 3)
        if kind in (Kind.NO_SHARING, Kind.HIGHRES):
            conv("fusion_2", FPN_CH, 2 * FPN_CH, 3)
        if spec.has_gils_conv:
            conv("gils", 2 * C2_CH, 4 * C2_CH, 1)
        conv("head", 1, FPN_CH, 1)

    @property
    def parameters(self) -> list[Parameter]:
        return [p for w in self.convs.values() for p in w.params]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters}

    def backbone_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters if p.name.startswith("backbone.")]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters}

    def load_state(self, state: dict) -> None:
        for p in self.parameters:
            p.value = as_tensor(state[p.name]).copy()

    def count_params(self) -> int:
        return sum(p.size for p in self.parameters)

    # -- building blocks ---------------------------------------------------

    def _fuse(self, g: Graph, a: int, b: int, weights: ConvWeights, calls: list) -> int:
        cat = ops.concat_channels(g, [a, b])
        conv = ops.conv2d_nobias(g, cat, weights.weight)
        biased = ops.bias_add(g, conv, weights.bias)
        out = ops.relu(g, biased)
        calls.append(FusionCall(cat, conv, biased, out))
        return out

    def _gils(self, g: Graph, c2: int, barrier: bool, down: str, sever) -> tuple[int, int]:
        if sever is not None:
            src = g.input(sever, name="c2_severed")
        elif barrier:
            src = g.stop_gradient(c2)
        else:
            src = c2
        if down == "learned":
            return src, gils(g, src, self.convs["gils"])
        pooled = ops.maxpool2(g, src) if down == "max" else ops.avgpool2(g, src)
        # pooled C2 has 8 channels; repeat to the fused width without parameters
        return src, ops.concat_channels(g, [pooled, pooled])

    def forward(self, g: Graph, image, sever_gils: bool = False, gils_input=None) -> Handles:
        """Record the forward pass of this topology on ``g``.

        ``sever_gils`` feeds the C2 branch from a fresh leaf holding C2's
        value instead of from C2 itself: the branch-deleted reference that
        gradient isolation is measured against.  ``gils_input`` feeds the
        branch from a leaf holding the given array instead.
        """
        image = as_tensor(image)
        n, c, h, w = image.shape
        if c != 1:
            raise ShapeError(f"image must have 1 channel, got {c}")
        if h % 16 or w % 16:
            raise ShapeError(f"image height and width must be divisible by 16, got {h}x{w}")
        kind = self.spec.kind
        cv = self.convs
        stage_convs = {}

        img = g.input(image, name="image", requires_grad=False)
        x = ops.avgpool2(g, ops.avgpool2(g, img))
        stage_convs["stage1"] = x_conv = ops.conv2d(g, x, cv["backbone.stage1"])
        c2 = ops.relu(g, x_conv)
        stage_convs["stage2"] = x_conv = ops.conv2d(g, ops.avgpool2(g, c2), cv["backbone.stage2"])
        c3 = ops.relu(g, x_conv)
        stage_convs["stage3"] = x_conv = ops.conv2d(g, ops.avgpool2(g, c3), cv["backbone.stage3"])
        c4 = ops.relu(g, x_conv)
        p3 = ops.conv2d(g, c3, cv["lateral3"])
        p4 = ops.conv2d(g, c4, cv["lateral4"])
        p4_up = ops.upsample_nearest2(g, p4)

        if gils_input is not None:
            sever = as_tensor(gils_input).copy()
            if sever.shape != g.value(c2).shape:
                raise ShapeError(f"gils_input {sever.shape} does not match C2 {g.value(c2).shape}")
        else:
            sever = g.value(c2).copy() if sever_gils else None
        calls: list[FusionCall] = []
        gils_src = gils_out = t = None
        if kind is Kind.VANILLA:
            out = self._fuse(g, p3, p4_up, cv["fusion"], calls)
        elif kind is Kind.HOURGLASS:
            gils_src, gils_out = self._gils(g, c2, barrier=False, down="learned", sever=sever)
            cat = ops.concat_channels(g, [p3, p4_up, gils_out])
            conv = ops.conv2d_nobias(g, cat, cv["fusion"].weight)
            biased = ops.bias_add(g, conv, cv["fusion"].bias)
            out = ops.relu(g, biased)
            calls.append(FusionCall(cat, conv, biased, out))
        elif kind is Kind.VARIANT1:
            gils_src, gils_out = self._gils(g, c2, barrier=True, down="learned", sever=sever)
            t = self._fuse(g, gils_out, p3, cv["fusion"], calls)
            out = self._fuse(g, p4_up, t, cv["fusion"], calls)
        else:
            barrier, down, separate = _VARIANT2_FAMILY[kind]
            t = self._fuse(g, p3, p4_up, cv["fusion"], calls)
            gils_src, gils_out = self._gils(g, c2, barrier, down, sever)
            second = cv["fusion_2"] if separate else cv["fusion"]
            out = self._fuse(g, t, gils_out, second, calls)
        logits = ops.conv2d(g, out, cv["head"])
        return Handles(
            image=img, c2=c2, c3=c3, c4=c4, p3=p3, p4=p4, p4_up=p4_up, out=out,
            logits=logits, gils=gils_out, gils_source=gils_src, t=t, fusions=calls,
            stage_convs=stage_convs,
        )


def gils(g: Graph, c2: int, weights: ConvWeights) -> int:
    """Space-to-depth then 1x1 conv: (C, H, W) -> (2C, H/2, W/2).

    ``c2`` is expected to be a barrier (or otherwise detached) node; the
    builder in :class:`Model` takes care of that.
    """
    _, ch, h, w = g.value(c2).shape
    if weights.in_c != 4 * ch or weights.out_c != 2 * ch or weights.k != 1:
        raise ShapeError(
            f"GILS weights {weights.weight.value.shape} do not map {4 * ch} -> {2 * ch} channels with a 1x1 kernel"
        )
    return ops.conv2d(g, ops.space_to_depth2(g, c2), weights)


def build_and_forward(spec: ArchitectureSpec, image, graph: Graph, seed: int = 0, model: Optional[Model] = None):
    model = model if model is not None else Model(spec, seed)
    return model.forward(graph, image), model


def count_params(spec: ArchitectureSpec) -> int:
    return Model(spec, 0).count_params()


def count_flops(spec: ArchitectureSpec, input_shape) -> int:
    """Inference FLOPs of one forward pass (see :mod:`bpfpn_lab.ops` for the per-primitive rules)."""
    g = Graph()
    Model(spec, 0).forward(g, np.zeros(tuple(input_shape)))
    return sum(node.meta.get("flops", 0) for node in g.nodes)


def gils_addon_flops(input_shape) -> int:
    """Closed-form FLOPs Variant2 adds over Vanilla at input ``(n, 1, h, w)``.

    Both extras run at stride 8 on 16 output channels: the GILS 1x1 conv
    (32 -> 16, plus bias) and the second call of the shared 3x3 fusion block
    (32 -> 16, plus bias and relu).
    """
    n, _, h, w = input_shape
    cells = n * FPN_CH * (h // STRIDE) * (w // STRIDE)
    gils_conv = 2 * cells * 4 * C2_CH + cells
    second_fusion = 2 * cells * 2 * FPN_CH * 9 + 2 * cells
    return gils_conv + second_fusion
