"""Training and evaluation supervision: occlusion masks from
bidirectional flows, and fully synthetic clips with exact ground truth.

The synthetic generator renders smooth procedural textures (sums of a
few low-frequency sinusoids, so every frame is a sample of an analytic,
bandlimited field) on a translating background with moving textured
rectangles and ellipses on top. Because object positions and the camera
offset are known exactly, the generator emits exact backward flow, exact
forward flow and an analytic occlusion mask: a pixel is traceable unless
its backward-flow source falls outside the frame or any bilinear
neighbour of the source belonged to a different surface in the previous
frame (disocclusion bands behind moving objects, newly revealed borders).

Occlusion masks for arbitrary flow pairs follow the classic
consistency criteria: a pixel is untrusted when the forward flow sampled
at its backward target fails the cross-check inequality, when the
backward flow has a large spatial gradient (motion boundary), or when
the backward target leaves the frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .coherence import FlowField, MaskMap
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class OcclusionParams:
    """Thresholds of the cross-check and motion-boundary criteria.

    A pixel p with backward flow w_b and forward flow w_f sampled at
    q = p + w_b(p) is marked occluded when

        |w_b(p) + w_f(q)|^2 > cross_check_coeff * (|w_b(p)|^2 + |w_f(q)|^2)
                              + cross_check_bias

    and marked a motion boundary when

        |grad w_b(p)|^2 > boundary_coeff * |w_b(p)|^2 + boundary_bias.
    """

    cross_check_coeff: float = 0.01
    cross_check_bias: float = 0.5
    boundary_coeff: float = 0.01
    boundary_bias: float = 0.002

    def __post_init__(self):
        for name in ("cross_check_coeff", "cross_check_bias", "boundary_coeff", "boundary_bias"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def flow_gradient_magnitude(flow: FlowField) -> Tensor:
    """Squared flow gradient |grad u|^2 + |grad v|^2 per pixel.

    Central differences in the interior, one-sided at the borders.
    """
    f = flow.tensor.data
    total = np.zeros((f.shape[0], 1, f.shape[2], f.shape[3]))
    for c in range(2):
        comp = f[:, c]
        dx = np.empty_like(comp)
        dx[:, :, 1:-1] = 0.5 * (comp[:, :, 2:] - comp[:, :, :-2])
        dx[:, :, 0] = comp[:, :, 1] - comp[:, :, 0] if comp.shape[2] > 1 else 0.0
        dx[:, :, -1] = comp[:, :, -1] - comp[:, :, -2] if comp.shape[2] > 1 else 0.0
        dy = np.empty_like(comp)
        dy[:, 1:-1] = 0.5 * (comp[:, 2:] - comp[:, :-2])
        dy[:, 0] = comp[:, 1] - comp[:, 0] if comp.shape[1] > 1 else 0.0
        dy[:, -1] = comp[:, -1] - comp[:, -2] if comp.shape[1] > 1 else 0.0
        total[:, 0] += dx * dx + dy * dy
    return Tensor(total)


def _bilinear_lookup(arr: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample (B,C,H,W) arrays at float coordinates with border clamping."""
    b, c, h, w = arr.shape
    sxc = np.clip(sx, 0.0, w - 1.0)
    syc = np.clip(sy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(sxc), w - 1.0).astype(np.int64)
    y0 = np.minimum(np.floor(syc), h - 1.0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sxc - x0)[:, None]
    fy = (syc - y0)[:, None]
    bi = np.arange(b)[:, None, None]
    flat = arr.reshape(b, c, h * w)

    def take(iy, ix):
        idx = (iy * w + ix).reshape(b, 1, -1)
        out = np.take_along_axis(flat, np.broadcast_to(idx, (b, c, idx.shape[2])), axis=2)
        return out.reshape(b, c, *iy.shape[1:])

    v00, v01, v10, v11 = take(y0, x0), take(y0, x1), take(y1, x0), take(y1, x1)
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)


def occlusion_mask(
    forward_flow: FlowField, backward_flow: FlowField, params: Optional[OcclusionParams] = None
) -> MaskMap:
    """Binary traceability mask from a bidirectional flow pair.

    The backward flow is the field used downstream; pixels failing the
    cross-check or motion-boundary criteria, or whose backward target
    leaves the frame, are set to 0.
    """
    params = params or OcclusionParams()
    if forward_flow.shape != backward_flow.shape:
        raise ShapeError(
            f"flow pair resolutions differ: {forward_flow.shape} vs {backward_flow.shape}"
        )
    wb = backward_flow.tensor.data
    wf = forward_flow.tensor.data
    b, _, h, w = wb.shape
    gx = np.arange(w, dtype=np.float64)[None, None, :]
    gy = np.arange(h, dtype=np.float64)[:, None][None]
    qx = gx + wb[:, 0]
    qy = gy + wb[:, 1]
    in_frame = (qx >= 0.0) & (qx <= w - 1.0) & (qy >= 0.0) & (qy <= h - 1.0)

    wf_q = _bilinear_lookup(wf, qx, qy)
    resid = (wb[:, 0] + wf_q[:, 0]) ** 2 + (wb[:, 1] + wf_q[:, 1]) ** 2
    wb_mag = wb[:, 0] ** 2 + wb[:, 1] ** 2
    wf_mag = wf_q[:, 0] ** 2 + wf_q[:, 1] ** 2
    cross_fail = resid > params.cross_check_coeff * (wb_mag + wf_mag) + params.cross_check_bias

    grad_mag = flow_gradient_magnitude(backward_flow).data[:, 0]
    boundary_fail = grad_mag > params.boundary_coeff * wb_mag + params.boundary_bias

    ok = in_frame & ~cross_fail & ~boundary_fail
    return MaskMap(Tensor(ok[:, None].astype(np.float64)))


# -- synthetic clips -------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Generator parameters for one synthetic clip."""

    height: int = 48
    width: int = 48
    num_frames: int = 8
    num_objects: int = 2
    camera_velocity: Optional[tuple[float, float]] = None  # None: random per clip
    camera_speed: float = 1.0  # per-axis bound when camera_velocity is random
    velocity_mode: str = "mixed"  # constant | sinusoidal | mixed
    max_speed: float = 3.0
    min_object_size: int = 8
    max_object_size: int = 18
    brightness_jitter: float = 0.0
    noise_sigma: float = 0.0
    # integer start positions and velocities, constant motion only: every
    # backward target lands on the pixel grid, so warping is exact
    integer_velocities: bool = False

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("clip size must be at least 8x8")
        if self.num_frames < 1:
            raise ValueError("need at least one frame")
        if self.num_objects < 0:
            raise ValueError("num_objects must be non-negative")
        if self.min_object_size < 2 or self.max_object_size < self.min_object_size:
            raise ValueError("degenerate object sizes rejected")
        if self.velocity_mode not in ("constant", "sinusoidal", "mixed"):
            raise ValueError(f"unknown velocity_mode {self.velocity_mode!r}")
        if self.max_speed < 0 or self.camera_speed < 0:
            raise ValueError("speeds must be non-negative")
        if self.brightness_jitter < 0 or self.noise_sigma < 0:
            raise ValueError("perturbation magnitudes must be non-negative")


@dataclass
class ClipSample:
    """Frames plus exact supervision for every consecutive pair."""

    frames: list[Tensor]
    gt_flows: list[FlowField]  # backward, image resolution
    gt_masks: list[MaskMap]  # binary
    gt_flows_forward: list[FlowField]
    metadata: dict

    def __post_init__(self):
        n = len(self.frames)
        if len(self.gt_flows) != n - 1 or len(self.gt_masks) != n - 1:
            raise ValueError(
                f"{n} frames need {n - 1} flows/masks, got "
                f"{len(self.gt_flows)} flows and {len(self.gt_masks)} masks"
            )
        if len(self.gt_flows_forward) not in (0, n - 1):
            raise ValueError("forward flows, when present, must cover every pair")
        for m in self.gt_masks:
            if not m.is_binary():
                raise ValueError("ground-truth masks must be binary")

    @property
    def num_pairs(self) -> int:
        return len(self.frames) - 1

    def pair(self, t: int) -> tuple[Tensor, Tensor, FlowField, MaskMap]:
        """(frame_{t-1}, frame_t, backward flow, mask) for pair index t-1."""
        return self.frames[t - 1], self.frames[t], self.gt_flows[t - 1], self.gt_masks[t - 1]


class _SineTexture:
    """Smooth analytic texture: base colour plus low-frequency sinusoids."""

    def __init__(self, rng: np.random.Generator, waves: int = 4):
        self.base = rng.uniform(0.42, 0.58, size=3)
        raw = rng.uniform(0.3, 1.0, size=(3, waves))
        total = rng.uniform(0.2, 0.32, size=(3, 1))
        self.amps = raw / raw.sum(axis=1, keepdims=True) * total
        mags = rng.uniform(1.0 / 96.0, 1.0 / 24.0, size=(3, waves))
        angles = rng.uniform(0.0, 2.0 * math.pi, size=(3, waves))
        self.freqs = np.stack([mags * np.cos(angles), mags * np.sin(angles)], axis=-1)
        self.phases = rng.uniform(0.0, 2.0 * math.pi, size=(3, waves))

    def sample(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        out = np.empty((3,) + ys.shape)
        for c in range(3):
            acc = np.full(ys.shape, self.base[c])
            for k in range(self.amps.shape[1]):
                arg = 2.0 * math.pi * (self.freqs[c, k, 0] * xs + self.freqs[c, k, 1] * ys)
                acc = acc + self.amps[c, k] * np.sin(arg + self.phases[c, k])
            out[c] = acc
        return out


class _ObjectTrack:
    """A textured rectangle or ellipse with an exact centre trajectory."""

    def __init__(self, rng: np.random.Generator, cfg: SynthConfig):
        self.kind = "rect" if rng.uniform() < 0.5 else "ellipse"
        self.half_w = rng.uniform(cfg.min_object_size, cfg.max_object_size) / 2.0
        self.half_h = rng.uniform(cfg.min_object_size, cfg.max_object_size) / 2.0
        self.texture = _SineTexture(rng)
        cx0 = rng.uniform(0.25 * cfg.width, 0.75 * cfg.width)
        cy0 = rng.uniform(0.25 * cfg.height, 0.75 * cfg.height)
        self.start = np.array([cx0, cy0])
        mode = cfg.velocity_mode
        if mode == "mixed":
            mode = "constant" if rng.uniform() < 0.5 else "sinusoidal"
        if cfg.integer_velocities:
            mode = "constant"
            self.start = np.round(self.start)
        self.mode = mode
        if mode == "constant":
            angle = rng.uniform(0.0, 2.0 * math.pi)
            speed = rng.uniform(0.4, 1.0) * cfg.max_speed
            self.velocity = speed * np.array([math.cos(angle), math.sin(angle)])
            if cfg.integer_velocities:
                self.velocity = np.round(self.velocity)
        else:
            self.omega = rng.uniform(0.3, 0.9, size=2)
            speed = rng.uniform(0.4, 1.0, size=2) * cfg.max_speed
            self.amp = np.where(self.omega > 0, speed / np.maximum(self.omega, 1e-9), 0.0)
            self.phase = rng.uniform(0.0, 2.0 * math.pi, size=2)

    def center(self, t: int) -> np.ndarray:
        if self.mode == "constant":
            return self.start + self.velocity * float(t)
        return self.start + self.amp * np.sin(self.omega * float(t) + self.phase)

    def inside(self, ys: np.ndarray, xs: np.ndarray, t: int) -> np.ndarray:
        cx, cy = self.center(t)
        dx = xs - cx
        dy = ys - cy
        if self.kind == "rect":
            return (np.abs(dx) <= self.half_w) & (np.abs(dy) <= self.half_h)
        return (dx / self.half_w) ** 2 + (dy / self.half_h) ** 2 <= 1.0


def synth_clip(config: SynthConfig, seed: int) -> ClipSample:
    """Render one clip with exact backward/forward flow and occlusion masks.

    Deterministic in (config, seed). Brightness jitter multiplies odd
    frames by (1 + jitter); Gaussian pixel noise is added per frame.
    Flows and masks always describe the unperturbed scene.
    """
    rng = np.random.default_rng([seed, 0x5757])
    h, w = config.height, config.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    background = _SineTexture(rng)
    if config.camera_velocity is None:
        cam_v = rng.uniform(-config.camera_speed, config.camera_speed, size=2)
    else:
        cam_v = np.asarray(config.camera_velocity, dtype=np.float64)
    if config.integer_velocities:
        cam_v = np.round(cam_v)
    objects = [_ObjectTrack(rng, config) for _ in range(config.num_objects)]
    noise_rng = np.random.default_rng([seed, 0xA0A0])

    labels = []
    clean = []
    frames = []
    for t in range(config.num_frames):
        off = cam_v * float(t)
        label = np.zeros((h, w), dtype=np.int64)
        img = background.sample(ys + off[1], xs + off[0])
        for i, obj in enumerate(objects, start=1):
            hit = obj.inside(ys, xs, t)
            if not hit.any():
                continue
            cx, cy = obj.center(t)
            tex = obj.texture.sample(ys - cy, xs - cx)
            img = np.where(hit[None], tex, img)
            label[hit] = i
        labels.append(label)
        clean.append(img)
        out = img * (1.0 + config.brightness_jitter * (t % 2))
        if config.noise_sigma > 0:
            out = out + noise_rng.normal(0.0, config.noise_sigma, size=img.shape)
        frames.append(Tensor(np.clip(out, 0.0, 1.0)[None]))

    gt_flows = []
    gt_masks = []
    gt_fwd = []
    for t in range(1, config.num_frames):
        # per-surface displacements between frames t-1 and t
        back_by_label = np.empty((len(objects) + 1, 2))
        fwd_by_label = np.empty((len(objects) + 1, 2))
        back_by_label[0] = cam_v
        fwd_by_label[0] = -cam_v
        for i, obj in enumerate(objects, start=1):
            step = obj.center(t) - obj.center(t - 1)
            back_by_label[i] = -step
            fwd_by_label[i] = step

        flow = back_by_label[labels[t]].transpose(2, 0, 1)[None]
        fwd = fwd_by_label[labels[t - 1]].transpose(2, 0, 1)[None]
        gt_flows.append(FlowField(Tensor(np.ascontiguousarray(flow))))
        gt_fwd.append(FlowField(Tensor(np.ascontiguousarray(fwd))))
        gt_masks.append(_analytic_mask(labels[t - 1], labels[t], flow[0]))

    meta = asdict(config)
    meta["seed"] = seed
    meta["camera_velocity"] = (float(cam_v[0]), float(cam_v[1]))
    return ClipSample(
        frames=frames,
        gt_flows=gt_flows,
        gt_masks=gt_masks,
        gt_flows_forward=gt_fwd,
        metadata=meta,
    )


def _analytic_mask(label_prev: np.ndarray, label_cur: np.ndarray, flow: np.ndarray) -> MaskMap:
    """Exact traceability: every bilinear neighbour of the backward target
    must exist and belong to the same surface as the pixel does now."""
    h, w = label_cur.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    qx = xs + flow[0]
    qy = ys + flow[1]
    x0 = np.floor(qx)
    y0 = np.floor(qy)
    fx = qx - x0
    fy = qy - y0
    ok = np.ones((h, w), dtype=bool)
    for dy_i, wy in ((0, 1.0 - fy), (1, fy)):
        for dx_i, wx in ((0, 1.0 - fx), (1, fx)):
            weight = wy * wx
            active = weight > 0.0
            cx = (x0 + dx_i).astype(np.int64)
            cy = (y0 + dy_i).astype(np.int64)
            in_bounds = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            same = np.zeros((h, w), dtype=bool)
            idx = in_bounds
            same[idx] = label_prev[cy[idx], cx[idx]] == label_cur[idx]
            ok &= ~active | (in_bounds & same)
    return MaskMap(Tensor(ok.astype(np.float64)[None, None]))
