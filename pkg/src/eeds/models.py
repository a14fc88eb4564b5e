"""Deep, shallow and ensemble super-resolution networks as explicit graphs.

The deep network maps an LR luminance patch to HR in 13 trainable layers:

* feature extraction: three 3x3/64 convs, layer-1 output added to layer 3;
* upsampling: 1x1 reduction to 4 channels, transposed conv by the scale
  factor, 1x1 restoration to 64 channels;
* reconstruction: two residual blocks of 3x3/64 convs, 1x1 reduction to 16,
  a multi-scale layer of four parallel 16-channel convs (1/3/5/7), concat to
  64 and a final 1x1 conv to one channel.

The shallow network is conv3x3/4, transposed conv, conv5x5/1.  The ensemble
output is the elementwise sum of both.

Residual additions are applied before the ReLU of the layer they end on; the
final layer of every network is linear.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .images import ImagePlane, bicubic_resize_batch
from .ops import GradTape, LayerParams
from .tensor import DTYPE, add, check_tensor, concat_channels

SCALES = (2, 3, 4)
DEFAULT_DECONV_KERNEL = {2: 14, 3: 15, 4: 16}
DEFAULT_DECONV_PAD = 6
MULTISCALE_KERNELS = (1, 3, 5, 7)
MIN_INPUT_SIZE = 8

VARIANT_KINDS = (
    "EEDS", "EED", "EES", "EEDS-ND", "EED-ND",
    "EEDS-SS1", "EEDS-SS3", "EEDS-SS5", "EEDS-SS7",
    "EEDS-D7", "EEDS-D15", "EEDS-D21", "EEDS-D25",
)


def check_scale(scale: int) -> int:
    if scale not in SCALES:
        raise ValueError(f"unsupported scale {scale}; supported: {SCALES}")
    return scale


def deconv_geometry(kernel: int, scale: int, crop_excess: bool = False) -> tuple[int, int]:
    """Padding and trailing crop that make a transposed conv upsample exactly by ``scale``.

    ``pad = (kernel - scale) / 2``.  When that is not integral the floor is used
    and one trailing row/column must be cropped, which is only done if
    ``crop_excess`` is set.
    """
    if kernel < scale:
        raise ValueError(f"deconv kernel {kernel} smaller than scale {scale}")
    excess = (kernel - scale) % 2
    if excess and not crop_excess:
        raise ValueError(
            f"deconv kernel {kernel} at scale {scale} needs a 1-pixel crop to reach "
            f"{scale}x output; pass crop_excess=True to allow it"
        )
    return (kernel - scale) // 2, excess


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    layer: LayerParams | None = None
    arg: int = 0


class ModelGraph:
    """Topologically ordered computation graph with a single 1-channel output.

    Node 0 is the input.  Every ``LayerParams`` carries a trainable-layer index
    (``layer_index``); the four multi-scale branch convs share one index.
    """

    def __init__(self, name: str, scale: int, kind: str):
        self.name = name
        self.scale = scale
        self.kind = kind
        self.nodes: list[Node] = [Node("input", ())]
        self.layer_index: dict[str, int] = {}
        self.output = 0
        self.size_preserving = False

    # -- construction -------------------------------------------------------

    def _push(self, node: Node) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"node input {i} does not exist yet")
        self.nodes.append(node)
        self.output = len(self.nodes) - 1
        return self.output

    def conv(self, src, c_in, c_out, k, pad, name, layer_no):
        p = LayerParams.create("conv", c_in, c_out, k, 1, pad, name)
        self.layer_index[name] = layer_no
        return self._push(Node("conv", (src,), p))

    def deconv(self, src, c_in, c_out, k, stride, pad, name, layer_no):
        p = LayerParams.create("deconv", c_in, c_out, k, stride, pad, name)
        self.layer_index[name] = layer_no
        return self._push(Node("deconv", (src,), p))

    def relu(self, src):
        return self._push(Node("relu", (src,)))

    def add(self, a, b):
        return self._push(Node("add", (a, b)))

    def concat(self, parts):
        return self._push(Node("concat", tuple(parts)))

    def crop(self, src, amount):
        return self._push(Node("crop", (src,), arg=amount))

    # -- introspection ------------------------------------------------------

    def layers(self) -> list[LayerParams]:
        return [n.layer for n in self.nodes if n.layer is not None]

    def layer(self, name: str) -> LayerParams:
        for p in self.layers():
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def trainable_layers(self) -> int:
        return len(set(self.layer_index.values()))

    @property
    def num_params(self) -> int:
        return sum(p.num_params for p in self.layers())

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for p in self.layers():
            yield f"{self.name}.{p.name}.weight", p.weight
            yield f"{self.name}.{p.name}.bias", p.bias

    def zero_grad(self):
        for p in self.layers():
            p.zero_grad()

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        if self.size_preserving:
            return h, w
        return h * self.scale, w * self.scale

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray, tape: GradTape | None = None, input_key=None) -> np.ndarray:
        """Run the graph.  With a tape, record adjoints keyed by ``(name, node)``;
        the input is keyed ``input_key`` (default ``(name, 0)``)."""
        check_tensor(x, f"{self.name} input")
        if x.shape[1] != 1:
            raise ValueError(f"{self.name} expects a 1-channel input, got C={x.shape[1]}")
        values: list[np.ndarray | None] = [None] * len(self.nodes)
        values[0] = x
        keys = [input_key if input_key is not None else (self.name, 0)]
        keys += [(self.name, i) for i in range(1, len(self.nodes))]
        for i, node in enumerate(self.nodes[1:], start=1):
            args = [values[j] for j in node.inputs]
            out, vjp = _apply(node, args)
            values[i] = out
            if tape is not None:
                tape.record([keys[j] for j in node.inputs], keys[i], vjp)
        return values[self.output]

    def key(self, node: int | None = None):
        return (self.name, self.output if node is None else node)


def _apply(node: Node, args):
    op = node.op
    if op in ("conv", "deconv"):
        (x,), layer = args, node.layer
        cols = layer.im2col(x)
        return layer.forward(x, cols), lambda g: (layer.backward(g, x, cols=cols),)
    if op == "relu":
        (x,) = args
        return ops.relu_forward(x), lambda g: (ops.relu_backward(g, x),)
    if op == "add":
        a, b = args
        return add(a, b), lambda g: (g, g)
    if op == "concat":
        sizes = [a.shape[1] for a in args]
        return concat_channels(args), lambda g: ops.concat_backward(g, sizes)
    if op == "crop":
        (x,) = args
        return ops.crop_forward(x, node.arg), lambda g: (ops.crop_backward(g, node.arg),)
    raise ValueError(f"unknown op {op!r}")


# --------------------------------------------------------------------------
# builders


def build_deep(scale: int, deconv_kernel: int | None = None,
               multiscale_kernels=MULTISCALE_KERNELS, no_deconv: bool = False,
               crop_excess: bool = False, kind: str = "EED") -> ModelGraph:
    check_scale(scale)
    g = ModelGraph("deep", scale, kind)
    x = 0
    f1 = g.relu(g.conv(x, 1, 64, 3, 1, "fe1", 1))
    f2 = g.relu(g.conv(f1, 64, 64, 3, 1, "fe2", 2))
    f3 = g.relu(g.add(g.conv(f2, 64, 64, 3, 1, "fe3", 3), f1))

    u = g.relu(g.conv(f3, 64, 4, 1, 0, "up_reduce", 4))
    if no_deconv:
        u = g.relu(g.conv(u, 4, 4, 3, 1, "up_conv", 5))
        g.size_preserving = True
    else:
        k = deconv_kernel or DEFAULT_DECONV_KERNEL[scale]
        if deconv_kernel is None:
            pad, excess = DEFAULT_DECONV_PAD, 0
        else:
            pad, excess = deconv_geometry(k, scale, crop_excess)
        u = g.deconv(u, 4, 4, k, scale, pad, "up_deconv", 5)
        if excess:
            u = g.crop(u, excess)
        u = g.relu(u)
    u = g.relu(g.conv(u, 4, 64, 1, 0, "up_restore", 6))

    r = g.relu(g.conv(u, 64, 64, 3, 1, "rec1", 7))
    b1 = g.relu(g.add(g.conv(r, 64, 64, 3, 1, "rec2", 8), u))
    r = g.relu(g.conv(b1, 64, 64, 3, 1, "rec3", 9))
    b2 = g.relu(g.add(g.conv(r, 64, 64, 3, 1, "rec4", 10), b1))
    r = g.relu(g.conv(b2, 64, 16, 1, 0, "rec_reduce", 11))

    branches = []
    for j, k in enumerate(multiscale_kernels):
        if k % 2 == 0:
            raise ValueError(f"multi-scale kernel {k} must be odd for same-size padding")
        branches.append(g.relu(g.conv(r, 16, 16, k, (k - 1) // 2, f"ms{j}_k{k}", 12)))
    c = g.concat(branches)
    g.conv(c, 16 * len(branches), 1, 1, 0, "rec_out", 13)
    return g


def build_shallow(scale: int, no_deconv: bool = False, kind: str = "EES") -> ModelGraph:
    check_scale(scale)
    g = ModelGraph("shallow", scale, kind)
    s = g.relu(g.conv(0, 1, 4, 3, 1, "conv1", 1))
    if no_deconv:
        s = g.relu(g.conv(s, 4, 4, 3, 1, "up_conv", 2))
        g.size_preserving = True
    else:
        k = DEFAULT_DECONV_KERNEL[scale]
        s = g.relu(g.deconv(s, 4, 4, k, scale, DEFAULT_DECONV_PAD, "up_deconv", 2))
    g.conv(s, 4, 1, 5, 2, "conv_out", 3)
    return g


@dataclass(frozen=True)
class VariantConfig:
    kind: str = "EEDS"
    scale: int = 3
    crop_excess: bool = False

    def __post_init__(self):
        check_scale(self.scale)
        if self.kind not in VARIANT_KINDS and not re.fullmatch(r"EEDS-D\d+", self.kind):
            raise ValueError(f"unknown variant {self.kind!r}; known: {', '.join(VARIANT_KINDS)}")

    @property
    def has_deep(self) -> bool:
        return self.kind != "EES"

    @property
    def has_shallow(self) -> bool:
        return self.kind not in ("EED", "EED-ND")

    @property
    def no_deconv(self) -> bool:
        return self.kind.endswith("-ND")

    @property
    def multiscale_kernels(self) -> tuple[int, ...]:
        m = re.fullmatch(r"EEDS-SS(\d+)", self.kind)
        return (int(m.group(1)),) * 4 if m else MULTISCALE_KERNELS

    @property
    def deconv_kernel(self) -> int | None:
        m = re.fullmatch(r"EEDS-D(\d+)", self.kind)
        return int(m.group(1)) if m else None


@dataclass
class SRModel:
    """One variant: an optional deep graph, an optional shallow graph, summed."""

    variant: VariantConfig
    deep: ModelGraph | None = None
    shallow: ModelGraph | None = None
    graphs: list[ModelGraph] = field(init=False)

    def __post_init__(self):
        self.graphs = [g for g in (self.deep, self.shallow) if g is not None]
        if not self.graphs:
            raise ValueError("model needs at least one network")
        if len({g.scale for g in self.graphs}) != 1:
            raise ValueError("deep and shallow networks must share a scale")

    @property
    def scale(self) -> int:
        return self.variant.scale

    @property
    def kind(self) -> str:
        return self.variant.kind

    @property
    def pre_upscale(self) -> bool:
        return self.variant.no_deconv

    def layers(self) -> list[LayerParams]:
        return [p for g in self.graphs for p in g.layers()]

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {k: v for g in self.graphs for k, v in g.named_parameters()}

    def named_layers(self) -> dict[str, LayerParams]:
        return {f"{g.name}.{p.name}": p for g in self.graphs for p in g.layers()}

    @property
    def num_params(self) -> int:
        return sum(g.num_params for g in self.graphs)

    def zero_grad(self):
        for g in self.graphs:
            g.zero_grad()

    def prepare_input(self, lr: np.ndarray) -> np.ndarray:
        """Network input for an LR batch: bicubic pre-upscaled for the ND variants."""
        if self.pre_upscale:
            return bicubic_resize_batch(lr, self.scale)
        return lr

    def forward(self, x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
        if tape is None:
            return forward_ensemble(self.deep, self.shallow, x)
        outs = [g.forward(x, tape, input_key="x") for g in self.graphs]
        if len(outs) == 1:
            tape.record([self.graphs[0].key()], "y", lambda g: (g,))
            return outs[0]
        tape.record([self.graphs[0].key(), self.graphs[1].key()], "y", lambda g: (g, g))
        return add(*outs)

    def branch_outputs(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {g.name: g.forward(x) for g in self.graphs}


def forward_ensemble(deep: ModelGraph | None, shallow: ModelGraph | None, x: np.ndarray) -> np.ndarray:
    if deep is not None and shallow is not None:
        if deep.scale != shallow.scale:
            raise ValueError(f"scale mismatch: deep x{deep.scale}, shallow x{shallow.scale}")
        return add(deep.forward(x), shallow.forward(x))
    graph = deep if deep is not None else shallow
    if graph is None:
        raise ValueError("need at least one network")
    return graph.forward(x)


def build_variant(cfg: VariantConfig) -> SRModel:
    deep = shallow = None
    if cfg.has_deep:
        deep = build_deep(cfg.scale, deconv_kernel=cfg.deconv_kernel,
                          multiscale_kernels=cfg.multiscale_kernels,
                          no_deconv=cfg.no_deconv, crop_excess=cfg.crop_excess, kind=cfg.kind)
    if cfg.has_shallow:
        shallow = build_shallow(cfg.scale, no_deconv=cfg.no_deconv, kind=cfg.kind)
    return SRModel(cfg, deep, shallow)


def build_model(kind: str = "EEDS", scale: int = 3, **kw) -> SRModel:
    return build_variant(VariantConfig(kind, scale, **kw))


# --------------------------------------------------------------------------
# inference


def infer(image: ImagePlane, model: SRModel) -> ImagePlane:
    """Super-resolve one luminance plane of any size ``>= 8 x 8``.

    The networks work on unit-range luminance, so byte-range planes are
    scaled by ``1 / 255`` on the way in and back on the way out.  The output
    is clamped to the valid range once, at the very end.
    """
    if min(image.height, image.width) < MIN_INPUT_SIZE:
        raise ValueError(
            f"image {image.height}x{image.width} is below the {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} minimum"
        )
    peak = np.float32(image.peak)
    x = (image.values.astype(DTYPE) / peak)[None, None]
    y = model.forward(model.prepare_input(x))
    out = ImagePlane((y[0, 0] * peak).astype(np.float32), image.range)
    return out.clamped()
