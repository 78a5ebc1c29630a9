"""The three sub-networks and their weight management.

- the style network is a fixed encoder/decoder: a full-resolution conv,
  two stride-2 downsampling convs, residual blocks, two stride-2
  transposed convs and a full-resolution output conv mapped to [0,1].
  A designated split layer marks where features are extracted and
  re-injected; everything up to the split is the encoder, the rest the
  decoder.
- the flow network is a small contracting/expanding stack over the
  channel-concatenated frame pair, predicting a 2-channel displacement
  field at quarter resolution, in pixels at that resolution.
- the mask network is three stride-1 convs over the absolute feature
  difference, ending in a sigmoid; its single output channel is shared
  by every feature channel during composition.

Style weights are always frozen: only flow and mask weights ever carry
gradients, and the flow component can additionally be frozen to study
training without flow adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .functional import concat, conv2d, conv2d_transposed
from .tensor import ShapeError, Tensor, mul, relu, sigmoid, sub, tanh

SPLIT_LAYERS = ("r1e", "r1/2e", "r1/4e", "r1/2d", "r1d")

# spatial stride the whole style network applies internally; frames must
# be divisible by this regardless of the split choice
STYLE_STRIDE = 4
FLOW_STRIDE = 8


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str  # "conv" | "conv_t"
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int
    activation: str  # "relu" | "sigmoid" | "tanh01" | "none"


@dataclass(frozen=True)
class StyleNetSpec:
    """Encoder/decoder stylization network with a feature split point."""

    widths: tuple[int, int, int] = (8, 16, 32)
    num_res_blocks: int = 3
    split_layer: str = "r1/4e"

    def __post_init__(self):
        if self.split_layer not in SPLIT_LAYERS:
            raise ValueError(
                f"split_layer must be one of {SPLIT_LAYERS}, got {self.split_layer!r}"
            )
        if self.num_res_blocks < 1:
            raise ValueError("need at least one residual block")

    def steps(self) -> list:
        """Forward program: ("layer", LayerDef) or ("res", LayerDef, LayerDef)."""
        w0, w1, w2 = self.widths
        prog: list = [
            ("layer", LayerDef("conv_in", "conv", 3, w0, 3, 1, 1, "relu")),
            ("layer", LayerDef("down1", "conv", w0, w1, 4, 2, 1, "relu")),
            ("layer", LayerDef("down2", "conv", w1, w2, 4, 2, 1, "relu")),
        ]
        for i in range(self.num_res_blocks):
            prog.append(
                (
                    "res",
                    LayerDef(f"res{i}a", "conv", w2, w2, 3, 1, 1, "relu"),
                    LayerDef(f"res{i}b", "conv", w2, w2, 3, 1, 1, "none"),
                )
            )
        prog += [
            ("layer", LayerDef("up1", "conv_t", w2, w1, 4, 2, 1, "relu")),
            ("layer", LayerDef("up2", "conv_t", w1, w0, 4, 2, 1, "relu")),
            ("layer", LayerDef("conv_out", "conv", w0, 3, 3, 1, 1, "tanh01")),
        ]
        return prog

    def split_index(self) -> int:
        """Number of forward steps that belong to the encoder."""
        n_res = self.num_res_blocks
        return {
            "r1e": 1,
            "r1/2e": 2,
            "r1/4e": 3,
            "r1/2d": 3 + n_res + 1,
            "r1d": 3 + n_res + 2,
        }[self.split_layer]

    def feature_channels(self) -> int:
        w0, w1, w2 = self.widths
        return {"r1e": w0, "r1/2e": w1, "r1/4e": w2, "r1/2d": w1, "r1d": w0}[self.split_layer]

    def feature_scale(self) -> int:
        """Image-to-feature downsampling factor at the split layer."""
        return {"r1e": 1, "r1/2e": 2, "r1/4e": 4, "r1/2d": 2, "r1d": 1}[self.split_layer]


@dataclass(frozen=True)
class FlowNetSpec:
    """Contracting/expanding displacement estimator over a frame pair."""

    contract_widths: tuple[int, ...] = (16, 32, 32, 32)
    contract_strides: tuple[int, ...] = (2, 2, 2, 1)
    expand_widths: tuple[int, ...] = (16,)
    flow_scale: float = 1.0

    def __post_init__(self):
        if len(self.contract_widths) != len(self.contract_strides):
            raise ValueError("contracting widths and strides must pair up")
        down = 1
        for s in self.contract_strides:
            down *= s
        up = 2 ** len(self.expand_widths)
        if down % up != 0:
            raise ValueError("flow output resolution must divide the input resolution")

    def output_stride(self) -> int:
        down = 1
        for s in self.contract_strides:
            down *= s
        return down // (2 ** len(self.expand_widths))

    def steps(self) -> list:
        prog: list = []
        in_ch = 6
        for i, (w, s) in enumerate(zip(self.contract_widths, self.contract_strides)):
            k, p = (4, 1) if s == 2 else (3, 1)
            prog.append(("layer", LayerDef(f"c{i}", "conv", in_ch, w, k, s, p, "relu")))
            in_ch = w
        for i, w in enumerate(self.expand_widths):
            prog.append(("layer", LayerDef(f"up{i}", "conv_t", in_ch, w, 4, 2, 1, "relu")))
            in_ch = w
        prog.append(("layer", LayerDef("flow", "conv", in_ch, 2, 3, 1, 1, "none")))
        return prog


@dataclass(frozen=True)
class MaskNetSpec:
    """Three stride-1 convs from feature difference to a single-channel mask."""

    in_channels: int = 32
    widths: tuple[int, int] = (16, 16)
    kernel: int = 3

    def steps(self) -> list:
        k = self.kernel
        p = k // 2
        w1, w2 = self.widths
        return [
            ("layer", LayerDef("m0", "conv", self.in_channels, w1, k, 1, p, "relu")),
            ("layer", LayerDef("m1", "conv", w1, w2, k, 1, p, "relu")),
            ("layer", LayerDef("m2", "conv", w2, 1, k, 1, p, "sigmoid")),
        ]


def _layers_of(prog: list) -> Iterator[LayerDef]:
    for step in prog:
        for layer in step[1:]:
            yield layer


def init_weights(spec, seed: int, scheme: str = "he_normal") -> dict[str, Tensor]:
    """Seeded weight buffers for a network spec.

    ``he_normal`` draws weights with variance 2/fan_in (fan_in counted as
    in_channels * k * k for both conv kinds) and zero biases; ``zeros``
    zero-fills everything.
    """
    if scheme not in ("he_normal", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    for layer in _layers_of(spec.steps()):
        if layer.kind == "conv":
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
        else:
            shape = (layer.in_ch, layer.out_ch, layer.kernel, layer.kernel)
        if scheme == "zeros":
            w = np.zeros(shape)
        else:
            std = np.sqrt(2.0 / (layer.in_ch * layer.kernel * layer.kernel))
            w = rng.normal(0.0, std, size=shape)
        weights[f"{layer.name}.weight"] = Tensor(w)
        weights[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_ch))
    return weights


@dataclass
class ModelBundle:
    """Specs plus weights for all three components, with freeze flags.

    The style component is permanently frozen; only flow and mask weights
    are ever updated, and ``freeze_flow`` pins the flow weights too.
    """

    style_spec: StyleNetSpec
    flow_spec: FlowNetSpec
    mask_spec: MaskNetSpec
    style_weights: dict[str, Tensor]
    flow_weights: dict[str, Tensor]
    mask_weights: dict[str, Tensor]
    freeze_flow: bool = False
    freeze_mask: bool = False
    freeze_style: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.mask_spec.in_channels != self.style_spec.feature_channels():
            raise ShapeError(
                f"mask network expects {self.mask_spec.in_channels} input channels but "
                f"the style split layer produces {self.style_spec.feature_channels()}"
            )
        validate_weights(self.style_spec, self.style_weights, "style")
        validate_weights(self.flow_spec, self.flow_weights, "flow")
        validate_weights(self.mask_spec, self.mask_weights, "mask")
        self.apply_freeze()

    def apply_freeze(self) -> None:
        for t in self.style_weights.values():
            t.requires_grad = False
        for t in self.flow_weights.values():
            t.requires_grad = not self.freeze_flow
        for t in self.mask_weights.values():
            t.requires_grad = not self.freeze_mask

    def trainable_parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if not self.freeze_flow:
            params.extend(self.flow_weights.values())
        if not self.freeze_mask:
            params.extend(self.mask_weights.values())
        return params


def validate_weights(spec, weights: dict[str, Tensor], component: str) -> None:
    """Weight buffers must match the spec's layer list exactly."""
    expected = {}
    for layer in _layers_of(spec.steps()):
        if layer.kind == "conv":
            expected[f"{layer.name}.weight"] = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
        else:
            expected[f"{layer.name}.weight"] = (layer.in_ch, layer.out_ch, layer.kernel, layer.kernel)
        expected[f"{layer.name}.bias"] = (layer.out_ch,)
    if set(expected) != set(weights):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ShapeError(
            f"{component} weights do not match spec: missing {missing}, unexpected {extra}"
        )
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ShapeError(
                f"{component} weight {name} has shape {weights[name].shape}, spec wants {shape}"
            )


def make_bundle(
    style_spec: StyleNetSpec | None = None,
    flow_spec: FlowNetSpec | None = None,
    mask_spec: MaskNetSpec | None = None,
    seed: int = 0,
    scheme: str = "he_normal",
    freeze_flow: bool = False,
) -> ModelBundle:
    """Fresh bundle with seeded weights; mask input width follows the split layer."""
    style_spec = style_spec or StyleNetSpec()
    flow_spec = flow_spec or FlowNetSpec()
    if mask_spec is None:
        mask_spec = MaskNetSpec(in_channels=style_spec.feature_channels())
    return ModelBundle(
        style_spec=style_spec,
        flow_spec=flow_spec,
        mask_spec=mask_spec,
        style_weights=init_weights(style_spec, np.random.default_rng([seed, 0]).integers(2**31), scheme),
        flow_weights=init_weights(flow_spec, np.random.default_rng([seed, 1]).integers(2**31), scheme),
        mask_weights=init_weights(mask_spec, np.random.default_rng([seed, 2]).integers(2**31), scheme),
        freeze_flow=freeze_flow,
    )


def merge_bundles(style_src: ModelBundle, coherence_src: ModelBundle) -> ModelBundle:
    """Style component from one bundle, flow+mask from another.

    Valid only when the donors agree on the feature interface: the mask
    network's input width must match the style split layer's channel
    count.
    """
    if coherence_src.mask_spec.in_channels != style_src.style_spec.feature_channels():
        raise ShapeError(
            f"incompatible specs: mask network was trained on "
            f"{coherence_src.mask_spec.in_channels}-channel features but the style "
            f"split layer produces {style_src.style_spec.feature_channels()}"
        )
    return ModelBundle(
        style_spec=style_src.style_spec,
        flow_spec=coherence_src.flow_spec,
        mask_spec=coherence_src.mask_spec,
        style_weights={k: t.copy() for k, t in style_src.style_weights.items()},
        flow_weights={k: t.copy() for k, t in coherence_src.flow_weights.items()},
        mask_weights={k: t.copy() for k, t in coherence_src.mask_weights.items()},
        freeze_flow=coherence_src.freeze_flow,
        freeze_mask=coherence_src.freeze_mask,
    )


# -- forward passes -------------------------------------------------------


def _apply_layer(layer: LayerDef, weights: dict[str, Tensor], x: Tensor) -> Tensor:
    w = weights[f"{layer.name}.weight"]
    b = weights[f"{layer.name}.bias"]
    if layer.kind == "conv":
        y = conv2d(x, w, b, stride=layer.stride, padding=layer.padding)
    else:
        y = conv2d_transposed(x, w, b, stride=layer.stride, padding=layer.padding)
    if layer.activation == "relu":
        return relu(y)
    if layer.activation == "sigmoid":
        return sigmoid(y)
    if layer.activation == "tanh01":
        return mul(tanh(y) + 1.0, 0.5)
    return y


def _run_steps(steps: list, weights: dict[str, Tensor], x: Tensor) -> Tensor:
    for step in steps:
        if step[0] == "layer":
            x = _apply_layer(step[1], weights, x)
        else:
            y = _apply_layer(step[1], weights, x)
            y = _apply_layer(step[2], weights, y)
            x = x + y
    return x


def _check_frame(frame: Tensor, who: str) -> None:
    if frame.ndim != 4 or frame.shape[1] != 3:
        raise ShapeError(f"{who} expects frames shaped (B,3,H,W), got {frame.shape}")
    if frame.data.min() < 0.0 or frame.data.max() > 1.0:
        raise ValueError(f"{who} expects frame values in [0,1]")


def style_encode(bundle: ModelBundle, frame: Tensor) -> Tensor:
    """Image to split-layer features."""
    _check_frame(frame, "style_encode")
    h, w = frame.shape[2], frame.shape[3]
    if h % STYLE_STRIDE or w % STYLE_STRIDE:
        raise ShapeError(
            f"frame size {h}x{w} must be divisible by {STYLE_STRIDE} for the style network"
        )
    steps = bundle.style_spec.steps()
    split = bundle.style_spec.split_index()
    return _run_steps(steps[:split], bundle.style_weights, frame)


def style_decode(bundle: ModelBundle, features: Tensor) -> Tensor:
    """Split-layer features to a stylized image in [0,1]."""
    want_c = bundle.style_spec.feature_channels()
    if features.ndim != 4 or features.shape[1] != want_c:
        raise ShapeError(
            f"style_decode expects features with {want_c} channels at the "
            f"{bundle.style_spec.split_layer} split, got shape {features.shape}"
        )
    steps = bundle.style_spec.steps()
    split = bundle.style_spec.split_index()
    return _run_steps(steps[split:], bundle.style_weights, features)


def flow_predict(bundle: ModelBundle, frame_prev: Tensor, frame_cur: Tensor):
    """Displacement field from the previous to the current frame.

    Each frame is standardized per channel (zero mean, unit variance)
    before entering the network, which makes the prediction invariant to
    global brightness and contrast changes. The stack is then evaluated
    on both frame orders and the two predictions are antisymmetrized,
    (f(prev,cur) - f(cur,prev)) / 2, so an identical frame pair (up to
    photometric scaling) maps to exactly zero flow and a swapped pair to
    the negated field. Returned at the network's native reduced
    resolution, in pixels at that resolution, wrapped as a FlowField.
    """
    from .coherence import FlowField

    if frame_prev.shape != frame_cur.shape:
        raise ShapeError(
            f"flow_predict frames differ in shape: {frame_prev.shape} vs {frame_cur.shape}"
        )
    _check_frame(frame_cur, "flow_predict")
    h, w = frame_cur.shape[2], frame_cur.shape[3]
    if h % FLOW_STRIDE or w % FLOW_STRIDE:
        raise ShapeError(
            f"frame size {h}x{w} must be divisible by {FLOW_STRIDE} for the flow network"
        )
    prev_n = _standardize(frame_prev)
    cur_n = _standardize(frame_cur)
    steps = bundle.flow_spec.steps()
    fwd = _run_steps(steps, bundle.flow_weights, concat([prev_n, cur_n], axis=1))
    rev = _run_steps(steps, bundle.flow_weights, concat([cur_n, prev_n], axis=1))
    out = mul(sub(fwd, rev), 0.5 * bundle.flow_spec.flow_scale)
    return FlowField(out)


def _standardize(frame: Tensor) -> Tensor:
    """Per-frame, per-channel zero-mean unit-variance view of an input frame."""
    data = frame.data
    mean = data.mean(axis=(2, 3), keepdims=True)
    std = np.maximum(data.std(axis=(2, 3), keepdims=True), 1e-3)
    return Tensor((data - mean) / std)


def mask_predict(bundle: ModelBundle, delta: Tensor):
    """Composition mask from the absolute feature difference.

    One channel regardless of the feature width: every feature channel
    shares the same mask value at a location.
    """
    from .coherence import MaskMap

    want_c = bundle.mask_spec.in_channels
    if delta.ndim != 4 or delta.shape[1] != want_c:
        raise ShapeError(
            f"mask_predict expects {want_c}-channel deltas, got shape {delta.shape}"
        )
    out = _run_steps(bundle.mask_spec.steps(), bundle.mask_weights, delta)
    return MaskMap(out)
