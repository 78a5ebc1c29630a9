"""Feature warping, mask composition, the coherence losses and the
stability metric.

Conventions that every caller relies on:

- flow fields follow the backward convention: the value at target
  location p is the displacement to the source location in the previous
  frame, so warping computes out(p) = prev(p + flow(p));
- a mask value of 1 marks a traceable location (reuse warped content),
  0 marks an occluded or untrusted one (keep current content);
- every squared-norm loss is reduced as the MEAN over all tensor
  elements after mask weighting, not the sum, which keeps loss
  magnitudes independent of resolution so the default loss weights stay
  meaningful at any frame size;
- masks weight the squared residual multiplicatively, which coincides
  with restriction for binary masks and stays well defined for soft ones.

Training supervision (loss_coherence) warps with ground-truth flow and
mask at image resolution, while inference composition uses the predicted
flow and mask at feature resolution; the two code paths never mix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import grid_sample_bilinear, resize_bilinear
from .tensor import ShapeError, Tensor, as_tensor, mean, mul, no_grad, sub


@dataclass(frozen=True)
class LossWeights:
    """Weights of the coherence, occlusion and flow terms (alpha, beta, lambda)."""

    alpha: float = 1e5
    beta: float = 2e4
    lam: float = 20.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


class FlowField:
    """2-channel displacement map; channel 0 is dx, channel 1 is dy.

    Units are pixels at the field's own resolution, backward convention.
    """

    __slots__ = ("tensor",)

    def __init__(self, tensor: Tensor):
        tensor = as_tensor(tensor)
        if tensor.ndim != 4 or tensor.shape[1] != 2:
            raise ShapeError(f"flow field must be (B,2,h,w), got {tensor.shape}")
        self.tensor = tensor

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[2], self.tensor.shape[3]

    def detach(self) -> "FlowField":
        return FlowField(self.tensor.detach())


class MaskMap:
    """Single-channel map in [0,1]; 1 = traceable, 0 = occluded/untrusted."""

    __slots__ = ("tensor",)

    def __init__(self, tensor: Tensor):
        tensor = as_tensor(tensor)
        if tensor.ndim != 4 or tensor.shape[1] != 1:
            raise ShapeError(f"mask must be (B,1,h,w), got {tensor.shape}")
        lo, hi = tensor.data.min(), tensor.data.max()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"mask values must lie in [0,1], got range [{lo}, {hi}]")
        self.tensor = tensor

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[2], self.tensor.shape[3]

    def is_binary(self) -> bool:
        d = self.tensor.data
        return bool(np.all((d == 0.0) | (d == 1.0)))

    def detach(self) -> "MaskMap":
        return MaskMap(self.tensor.detach())


def warp_features(features: Tensor, flow: FlowField) -> Tensor:
    """Pull features from the previous frame along the backward flow.

    The flow must already be at feature resolution (see resize_flow).
    """
    if flow.spatial != (features.shape[2], features.shape[3]):
        raise ShapeError(
            f"flow resolution {flow.spatial} does not match features "
            f"{features.shape[2:]} - resize the flow first"
        )
    return grid_sample_bilinear(features, flow.tensor)


def resize_flow(flow: FlowField, out_h: int, out_w: int) -> FlowField:
    """Resample a flow field and rescale its vectors to the new pixel grid.

    Displacements are multiplied by (out_w/in_w, out_h/in_h) so they stay
    correct in target-resolution pixels.
    """
    in_h, in_w = flow.spatial
    resized = resize_bilinear(flow.tensor, out_h, out_w)
    scale = np.array([out_w / in_w, out_h / in_h]).reshape(1, 2, 1, 1)
    return FlowField(mul(resized, scale))


def compose_features(f_cur: Tensor, f_warped: Tensor, mask: MaskMap) -> Tensor:
    """Per-location convex blend: (1 - M) * current + M * warped."""
    if f_cur.shape != f_warped.shape:
        raise ShapeError(
            f"compose_features shapes differ: {f_cur.shape} vs {f_warped.shape}"
        )
    if mask.spatial != (f_cur.shape[2], f_cur.shape[3]) or mask.shape[0] != f_cur.shape[0]:
        raise ShapeError(
            f"mask shape {mask.shape} does not broadcast over features {f_cur.shape}"
        )
    m = mask.tensor
    return mul(sub(1.0, m), f_cur) + mul(m, f_warped)


def _masked_mse(residual: Tensor, mask_tensor) -> Tensor:
    return mean(mul(mask_tensor, mul(residual, residual)))


def _check_same_resolution(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: resolution mismatch {a.shape} vs {b.shape}")


def loss_coherence(
    o_cur: Tensor, s_prev: Tensor, gt_flow: FlowField, gt_mask: MaskMap
) -> Tensor:
    """Masked squared difference between the output and the warped
    independently-stylized previous frame.

    ``gt_flow`` and ``gt_mask`` are at image resolution; warping uses the
    ground-truth flow.
    """
    _check_same_resolution(o_cur, s_prev, "loss_coherence")
    if gt_flow.spatial != (o_cur.shape[2], o_cur.shape[3]):
        raise ShapeError(
            f"loss_coherence needs image-resolution flow, got {gt_flow.spatial} "
            f"for outputs {o_cur.shape[2:]}"
        )
    warped = warp_features(s_prev, gt_flow)
    return _masked_mse(sub(o_cur, warped), gt_mask.tensor)


def loss_occlusion(o_cur: Tensor, s_cur: Tensor, gt_mask: MaskMap) -> Tensor:
    """Masked squared difference against the current frame's own
    stylization, restricted to the occluded complement (1 - mask)."""
    _check_same_resolution(o_cur, s_cur, "loss_occlusion")
    return _masked_mse(sub(o_cur, s_cur), sub(1.0, gt_mask.tensor))


def loss_flow(pred_flow: FlowField, gt_flow: FlowField) -> Tensor:
    """Mean squared endpoint difference over both channels.

    The ground-truth flow must already be resized (resize_flow) to the
    prediction's resolution.
    """
    if pred_flow.shape != gt_flow.shape:
        raise ShapeError(
            f"loss_flow: resolution mismatch after resize, {pred_flow.shape} vs "
            f"{gt_flow.shape}"
        )
    diff = sub(pred_flow.tensor, gt_flow.tensor)
    return mean(mul(diff, diff))


def loss_total(cohe: Tensor, occ: Tensor, flow: Tensor, w: LossWeights) -> Tensor:
    """Weighted sum alpha*cohe + beta*occ + lambda*flow."""
    return mul(cohe, w.alpha) + mul(occ, w.beta) + mul(flow, w.lam)


def stability_error(
    o_cur: Tensor, o_prev: Tensor, gt_flow: FlowField, gt_mask: MaskMap
) -> float:
    """Warped-difference error between consecutive outputs on traceable
    regions; lower is more temporally stable.

    Same masked-mean form as loss_coherence, but measured between the
    pipeline's actual outputs rather than against training targets.
    """
    with no_grad():
        value = loss_coherence(o_cur.detach(), o_prev.detach(), gt_flow, gt_mask)
    return float(value.data)


def sequence_stability(
    outputs: list[Tensor], gt_flows: list[FlowField], gt_masks: list[MaskMap]
) -> tuple[list[float], float]:
    """Per-pair stability errors and their average over the sequence."""
    if len(outputs) < 2:
        raise ValueError("need at least two frames to measure stability")
    if len(gt_flows) != len(outputs) - 1 or len(gt_masks) != len(outputs) - 1:
        raise ValueError(
            f"{len(outputs)} frames need {len(outputs) - 1} flows and masks, "
            f"got {len(gt_flows)} and {len(gt_masks)}"
        )
    errors = [
        stability_error(outputs[t], outputs[t - 1], gt_flows[t - 1], gt_masks[t - 1])
        for t in range(1, len(outputs))
    ]
    return errors, float(np.mean(errors))
