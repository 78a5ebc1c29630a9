"""Training loop for the flow and mask networks, and the online
inference loop that propagates composite features.

Training uses the two-frame scheme: both frames are encoded fresh, the
predicted flow warps the previous features, the mask blends warped and
current features, and the decoded result is pulled towards the warped
previous stylization on traceable pixels and towards the current
frame's own stylization elsewhere. Inference differs in exactly one
place: the warped features come from the previous frame's composite
features rather than a fresh encode, which propagates content along
motion trajectories for as long as they stay traceable.

Default schedule is the desk-scale one (2,000 iterations, learning rate
1e-4 decayed by 0.8 every 500 iterations, batch 1); the full-scale
schedule (100k iterations, decay every 5k) is a config change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .coherence import (
    FlowField,
    LossWeights,
    MaskMap,
    compose_features,
    loss_coherence,
    loss_flow,
    loss_occlusion,
    loss_total,
    resize_flow,
    sequence_stability,
    warp_features,
)
from .groundtruth import ClipSample
from .models import ModelBundle, flow_predict, mask_predict, style_decode, style_encode
from .tensor import NonFiniteError, ShapeError, Tensor, abs_, backward, no_grad, sub


class NumericError(RuntimeError):
    """Training hit a non-finite loss; carries the per-term diagnostic."""

    def __init__(self, message: str, report: Optional[dict] = None):
        super().__init__(message)
        self.report = report or {}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loss weighting.

    Full-scale reference values: 100,000 iterations with decay_every
    5,000; the defaults below shrink the horizon while keeping the
    learning rate and decay ratio.
    """

    iterations: int = 2000
    batch: int = 1
    lr: float = 1e-4
    lr_decay: float = 0.8
    decay_every: int = 500
    loss_weights: LossWeights = field(default_factory=LossWeights)
    split_layer: str = "r1/4e"
    seed: int = 0
    freeze_flow: bool = False
    checkpoint_every: int = 500
    # iterations at the start of a run spent pretraining the flow network
    # on flow supervision alone (coherence and occlusion weights zeroed);
    # the stand-in for starting from an externally pretrained flow network
    flow_warmup_iters: int = 800

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.iterations < 0 or self.batch < 1 or self.decay_every < 1:
            raise ValueError("invalid schedule")
        if self.flow_warmup_iters < 0:
            raise ValueError("flow_warmup_iters must be non-negative")

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.lr_decay ** (iteration // self.decay_every)


@dataclass
class CoherenceState:
    """Rolling per-video state: previous frame and previous composite features."""

    prev_frame: Tensor
    prev_composite: Tensor
    frame_index: int

    def __post_init__(self):
        if self.frame_index < 1:
            raise ValueError("frame_index starts at 1")


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _coherence_forward(
    bundle: ModelBundle,
    f_prev: Tensor,
    f_cur: Tensor,
    flow_native: FlowField,
) -> tuple[Tensor, MaskMap, Tensor]:
    """Warp, mask and compose; returns (output image, mask, composite)."""
    feat_h, feat_w = f_cur.shape[2], f_cur.shape[3]
    flow_feat = resize_flow(flow_native, feat_h, feat_w)
    f_warped = warp_features(f_prev, flow_feat)
    delta = abs_(sub(f_cur, f_warped))
    mask = mask_predict(bundle, delta)
    composite = compose_features(f_cur, f_warped, mask)
    out = style_decode(bundle, composite)
    return out, mask, composite


def train_step(
    bundle: ModelBundle,
    pair: tuple[Tensor, Tensor, FlowField, MaskMap],
    cfg: TrainConfig,
    optimizer: Optional[Adam] = None,
    lr: Optional[float] = None,
) -> tuple[ModelBundle, dict]:
    """One Adam update of the flow and mask weights on a frame pair.

    The pair is (frame_prev, frame_cur, gt_flow, gt_mask) with the flow
    and mask at image resolution. Style weights never move; flow weights
    move unless cfg.freeze_flow. Returns the bundle and a report with
    the three raw loss terms, the weighted total and the learning rate.
    """
    frame_prev, frame_cur, gt_flow, gt_mask = pair
    if bundle.freeze_flow != cfg.freeze_flow:
        bundle.freeze_flow = cfg.freeze_flow
        bundle.apply_freeze()
    if optimizer is None:
        optimizer = Adam(bundle.trainable_parameters(), cfg.lr)
    with no_grad():
        f_prev = style_encode(bundle, frame_prev)
        f_cur = style_encode(bundle, frame_cur)
        s_prev = style_decode(bundle, f_prev)
        s_cur = style_decode(bundle, f_cur)

    if cfg.freeze_flow:
        with no_grad():
            flow_native = flow_predict(bundle, frame_prev, frame_cur)
    else:
        flow_native = flow_predict(bundle, frame_prev, frame_cur)
    o_cur, _, _ = _coherence_forward(bundle, f_prev, f_cur, flow_native)

    gt_flow_native = resize_flow(
        gt_flow, flow_native.tensor.shape[2], flow_native.tensor.shape[3]
    )
    l_cohe = loss_coherence(o_cur, s_prev, gt_flow, gt_mask)
    l_occ = loss_occlusion(o_cur, s_cur, gt_mask)
    l_flow = loss_flow(flow_native, gt_flow_native)
    total = loss_total(l_cohe, l_occ, l_flow, cfg.loss_weights)

    report = {
        "loss_cohe": float(l_cohe.data),
        "loss_occ": float(l_occ.data),
        "loss_flow": float(l_flow.data),
        "loss_total": float(total.data),
        "lr": cfg.lr if lr is None else lr,
    }
    if not np.isfinite(report["loss_total"]):
        raise NumericError(
            "non-finite loss: "
            + " ".join(f"{k}={report[k]}" for k in ("loss_cohe", "loss_occ", "loss_flow")),
            report,
        )
    optimizer.zero_grad()
    backward(total)
    optimizer.step(lr)
    return bundle, report


def _stack_pairs(pairs: list[tuple]) -> tuple:
    if len(pairs) == 1:
        return pairs[0]
    frames_prev = Tensor(np.concatenate([p[0].data for p in pairs], axis=0))
    frames_cur = Tensor(np.concatenate([p[1].data for p in pairs], axis=0))
    flows = FlowField(Tensor(np.concatenate([p[2].tensor.data for p in pairs], axis=0)))
    masks = MaskMap(Tensor(np.concatenate([p[3].tensor.data for p in pairs], axis=0)))
    return frames_prev, frames_cur, flows, masks


def train(
    bundle: ModelBundle,
    clips: Sequence[ClipSample],
    cfg: TrainConfig,
    checkpoint_dir=None,
    progress: Optional[callable] = None,
) -> tuple[ModelBundle, list[dict]]:
    """Run the step-decay schedule over uniformly sampled adjacent pairs.

    The first cfg.flow_warmup_iters iterations pretrain the flow network
    on flow supervision alone; the remaining iterations minimize the full
    weighted loss (with the flow network pinned when cfg.freeze_flow).
    Pairs are drawn uniformly at random (seeded) across clips and frame
    indices. Checkpoints land in checkpoint_dir every
    cfg.checkpoint_every iterations when a directory is given.
    """
    clips = [c for c in clips]
    if not clips:
        raise ValueError("empty dataset: need at least one clip")
    if any(c.num_pairs < 1 for c in clips):
        raise ValueError("every training clip needs at least two frames")
    # the flow network always trains through its warmup (pretraining
    # surrogate); freeze_flow then pins it for the joint phase
    warmup_cfg = replace(
        cfg,
        freeze_flow=False,
        loss_weights=LossWeights(alpha=0.0, beta=0.0, lam=cfg.loss_weights.lam),
    )
    params: list[Tensor] = []
    if not bundle.freeze_mask:
        params.extend(bundle.mask_weights.values())
    params.extend(bundle.flow_weights.values())
    optimizer = Adam(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    history: list[dict] = []
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for it in range(cfg.iterations):
        warming = it < cfg.flow_warmup_iters
        phase_cfg = warmup_cfg if warming else cfg
        lr = cfg.lr_at(it)
        pairs = []
        for _ in range(cfg.batch):
            clip = clips[int(rng.integers(len(clips)))]
            t = int(rng.integers(1, clip.num_pairs + 1))
            pairs.append(clip.pair(t))
        try:
            _, report = train_step(bundle, _stack_pairs(pairs), phase_cfg, optimizer, lr)
        except NumericError as exc:
            exc.report["iteration"] = it
            raise
        except NonFiniteError as exc:
            raise NumericError(
                f"non-finite values during the forward pass: {exc}", {"iteration": it}
            ) from exc
        report["iteration"] = it
        report["phase"] = "warmup" if warming else "joint"
        history.append(report)
        if progress is not None:
            progress(report)
        if checkpoint_dir is not None and (it + 1) % cfg.checkpoint_every == 0:
            from .io import save_bundle

            save_bundle(bundle, checkpoint_dir / f"checkpoint_{it + 1:06d}.swb")
    bundle.freeze_flow = cfg.freeze_flow
    bundle.apply_freeze()
    return bundle, history


def history_lines(history: Iterable[dict]) -> list[str]:
    """Line-delimited training records: iteration, lr, terms, total."""
    return [
        "iter={iteration} lr={lr:.10g} cohe={loss_cohe:.12g} occ={loss_occ:.12g} "
        "flow={loss_flow:.12g} total={loss_total:.12g}".format(**rec)
        for rec in history
    ]


# -- inference ---------------------------------------------------------------


def stylize_first_frame(bundle: ModelBundle, frame: Tensor) -> tuple[Tensor, CoherenceState]:
    """Plain encode/decode of the first frame; seeds the rolling state."""
    with no_grad():
        feats = style_encode(bundle, frame)
        out = style_decode(bundle, feats)
    return out, CoherenceState(prev_frame=frame.detach(), prev_composite=feats, frame_index=1)


def stylize_next_frame(
    bundle: ModelBundle,
    state: CoherenceState,
    frame: Tensor,
    flow: Optional[FlowField] = None,
    mask: Optional[MaskMap] = None,
) -> tuple[Tensor, CoherenceState]:
    """Advance one frame, reusing the previous composite features.

    ``flow`` and ``mask`` override the predictions when given (oracle
    injection); the flow is interpreted at its own resolution and
    resized to feature resolution.
    """
    out, new_state, _, _ = coherent_step(bundle, state, frame, flow, mask)
    return out, new_state


def coherent_step(
    bundle: ModelBundle,
    state: CoherenceState,
    frame: Tensor,
    flow: Optional[FlowField] = None,
    mask: Optional[MaskMap] = None,
) -> tuple[Tensor, CoherenceState, FlowField, MaskMap]:
    """stylize_next_frame plus the flow and mask actually used."""
    if frame.shape != state.prev_frame.shape:
        raise ShapeError(
            f"frame size changed mid-video: {state.prev_frame.shape} -> {frame.shape}"
        )
    with no_grad():
        if flow is None:
            flow = flow_predict(bundle, state.prev_frame, frame)
        f_cur = style_encode(bundle, frame)
        feat_h, feat_w = f_cur.shape[2], f_cur.shape[3]
        flow_feat = resize_flow(flow, feat_h, feat_w)
        f_warped = warp_features(state.prev_composite, flow_feat)
        if mask is None:
            delta = abs_(sub(f_cur, f_warped))
            mask = mask_predict(bundle, delta)
        composite = compose_features(f_cur, f_warped, mask)
        out = style_decode(bundle, composite)
    new_state = CoherenceState(
        prev_frame=frame.detach(),
        prev_composite=composite,
        frame_index=state.frame_index + 1,
    )
    return out, new_state, flow, mask


def stylize_video(
    bundle: ModelBundle, frames: Sequence[Tensor]
) -> tuple[list[Tensor], list[MaskMap], list[FlowField]]:
    """Coherent pipeline over a frame sequence.

    Returns outputs plus the predicted masks and flows of every
    propagation step (empty for a single frame).
    """
    if not frames:
        raise ValueError("no frames to stylize")
    out, state = stylize_first_frame(bundle, frames[0])
    outputs = [out]
    masks: list[MaskMap] = []
    flows: list[FlowField] = []
    for frame in frames[1:]:
        out, state, flow, mask = coherent_step(bundle, state, frame)
        outputs.append(out)
        masks.append(mask)
        flows.append(flow)
    return outputs, masks, flows


def stylize_video_baseline(bundle: ModelBundle, frames: Sequence[Tensor]) -> list[Tensor]:
    """Per-frame encode/decode with no propagation (the comparison arm)."""
    outputs = []
    with no_grad():
        for frame in frames:
            outputs.append(style_decode(bundle, style_encode(bundle, frame)))
    return outputs


def evaluate_clips(bundle: ModelBundle, clips: Sequence[ClipSample], mode: str) -> dict:
    """Stability of a pipeline over validation clips, using exact ground truth.

    Returns per-clip averages, their mean, and (coherent mode) the mean
    predicted mask value across all propagation steps.
    """
    if mode not in ("coherent", "baseline"):
        raise ValueError(f"unknown mode {mode!r}")
    per_clip = []
    mask_values = []
    for clip in clips:
        if mode == "coherent":
            outputs, masks, _ = stylize_video(bundle, clip.frames)
            mask_values.extend(float(m.tensor.data.mean()) for m in masks)
        else:
            outputs = stylize_video_baseline(bundle, clip.frames)
        _, avg = sequence_stability(outputs, clip.gt_flows, clip.gt_masks)
        per_clip.append(avg)
    result = {"per_clip": per_clip, "stability": float(np.mean(per_clip))}
    if mask_values:
        result["mask_mean"] = float(np.mean(mask_values))
    return result
