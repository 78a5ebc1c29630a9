"""Bit-exact persistence: flow files, PNM images, weight archives and
clip manifests.

Formats, all little-endian:

- flow: the Middlebury interchange layout. 4-byte magic ``PIEH``, then
  int32 width, int32 height, then width*height*2 float32 values,
  row-major, (u, v) interleaved per pixel.
- images: binary PGM (P5) for single-channel data, binary PPM (P6) for
  RGB, maxval 255. Values in [0,1] map to bytes by round-half-away-from-
  zero; quantization is the only loss.
- weight archive: magic ``SWB1``, uint32 version, uint32 JSON metadata
  length + metadata (specs and freeze flags), uint32 section count, then
  per section a component byte, name, dtype code, shape and raw float
  payload; a trailing CRC32 of everything after the magic guards the
  whole file. Weights are stored as float64 (dtype code 0) so a save/
  load round trip reproduces the exact training state; float32 payloads
  (code 1) are accepted on read.
- clip manifest: plain-text key=value lines naming generator metadata
  and the per-frame image/flow/mask files, all relative to the manifest.

Readers never read past declared sizes and always reject truncated or
corrupt input with an error naming the file and byte offset.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .coherence import FlowField, MaskMap
from .groundtruth import ClipSample
from .models import FlowNetSpec, MaskNetSpec, ModelBundle, StyleNetSpec
from .tensor import Tensor

FLO_MAGIC = b"PIEH"
ARCHIVE_MAGIC = b"SWB1"
ARCHIVE_VERSION = 1
_COMPONENTS = ("style", "flow", "mask")
_DTYPES = {0: "<f8", 1: "<f4"}


class FileFormatError(ValueError):
    """Structured parse/serialization failure: path, byte offset, reason."""

    def __init__(self, path, offset: int | None, reason: str):
        self.path = str(path)
        self.offset = offset
        at = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{path}{at}: {reason}")


# -- flow files ------------------------------------------------------------


def write_flo(flow: FlowField, path) -> None:
    """Write a single flow field (batch size 1) losslessly as float32."""
    data = flow.tensor.data
    if data.shape[0] != 1:
        raise ValueError(f"flow files hold one field, got batch size {data.shape[0]}")
    _, _, h, w = data.shape
    interleaved = np.empty((h, w, 2), dtype="<f4")
    interleaved[:, :, 0] = data[0, 0]
    interleaved[:, :, 1] = data[0, 1]
    if not np.isfinite(interleaved).all():
        raise FileFormatError(path, None, "refusing to write non-finite flow values")
    payload = FLO_MAGIC + struct.pack("<ii", w, h) + interleaved.tobytes()
    Path(path).write_bytes(payload)


def read_flo(path) -> FlowField:
    raw = _read_file(path)
    if len(raw) < 4 or raw[:4] != FLO_MAGIC:
        raise FileFormatError(path, 0, f"bad magic {raw[:4]!r}, expected {FLO_MAGIC!r}")
    if len(raw) < 12:
        raise FileFormatError(path, 4, "truncated header, expected width and height")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w < 1 or h < 1:
        raise FileFormatError(path, 4, f"invalid dimensions {w}x{h}")
    expected = 12 + w * h * 8
    if len(raw) != expected:
        raise FileFormatError(
            path, min(len(raw), expected), f"payload is {len(raw)} bytes, expected {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4", count=w * h * 2, offset=12)
    if not np.isfinite(values).all():
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise FileFormatError(path, 12 + bad * 4, "non-finite flow value")
    grid = values.reshape(h, w, 2)
    data = np.stack([grid[:, :, 0], grid[:, :, 1]])[None].astype(np.float64)
    return FlowField(Tensor(data))


# -- images ----------------------------------------------------------------


def _quantize(values: np.ndarray) -> np.ndarray:
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError(
            f"image values must lie in [0,1], got range [{values.min()}, {values.max()}]"
        )
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def write_image(image: Tensor, path) -> None:
    """Write (1,1,H,W) data as binary PGM or (1,3,H,W) as binary PPM."""
    data = image.data
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] not in (1, 3):
        raise ValueError(f"expected (1,1,H,W) or (1,3,H,W) image, got {data.shape}")
    _, c, h, w = data.shape
    quant = _quantize(data[0])
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode()
        body = quant[0].tobytes()
    else:
        header = f"P6\n{w} {h}\n255\n".encode()
        body = quant.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(header + body)


def read_image(path) -> Tensor:
    raw = _read_file(path)
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FileFormatError(path, 0, f"bad magic {magic!r}, expected P5 or P6")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError(path, start, "truncated header")
        token = raw[start:pos]
        if not token.isdigit():
            raise FileFormatError(path, start, f"malformed header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FileFormatError(path, None, f"unsupported maxval {maxval}, only 255")
    channels = 1 if magic == b"P5" else 3
    expected = w * h * channels
    body = raw[pos:]
    if len(body) != expected:
        raise FileFormatError(
            path, pos, f"payload is {len(body)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        data = pixels.reshape(1, 1, h, w)
    else:
        data = pixels.reshape(h, w, 3).transpose(2, 0, 1)[None]
    return Tensor(np.ascontiguousarray(data))


def write_mask(mask: MaskMap, path) -> None:
    write_image(mask.tensor, path)


def read_mask(path) -> MaskMap:
    t = read_image(path)
    if t.shape[1] != 1:
        raise FileFormatError(path, None, f"mask must be single-channel, got {t.shape[1]}")
    return MaskMap(t)


# -- weight archives ---------------------------------------------------------


def _spec_metadata(bundle: ModelBundle) -> dict:
    return {
        "style": {
            "widths": list(bundle.style_spec.widths),
            "num_res_blocks": bundle.style_spec.num_res_blocks,
            "split_layer": bundle.style_spec.split_layer,
        },
        "flow": {
            "contract_widths": list(bundle.flow_spec.contract_widths),
            "contract_strides": list(bundle.flow_spec.contract_strides),
            "expand_widths": list(bundle.flow_spec.expand_widths),
            "flow_scale": bundle.flow_spec.flow_scale,
        },
        "mask": {
            "in_channels": bundle.mask_spec.in_channels,
            "widths": list(bundle.mask_spec.widths),
            "kernel": bundle.mask_spec.kernel,
        },
        "freeze": {"style": True, "flow": bundle.freeze_flow, "mask": bundle.freeze_mask},
    }


def _specs_from_metadata(meta: dict):
    style = StyleNetSpec(
        widths=tuple(meta["style"]["widths"]),
        num_res_blocks=meta["style"]["num_res_blocks"],
        split_layer=meta["style"]["split_layer"],
    )
    flow = FlowNetSpec(
        contract_widths=tuple(meta["flow"]["contract_widths"]),
        contract_strides=tuple(meta["flow"]["contract_strides"]),
        expand_widths=tuple(meta["flow"]["expand_widths"]),
        flow_scale=meta["flow"]["flow_scale"],
    )
    mask = MaskNetSpec(
        in_channels=meta["mask"]["in_channels"],
        widths=tuple(meta["mask"]["widths"]),
        kernel=meta["mask"]["kernel"],
    )
    return style, flow, mask


def save_bundle(bundle: ModelBundle, path) -> None:
    """Serialize specs, freeze flags and float64 weights with a CRC32 guard."""
    meta = json.dumps(_spec_metadata(bundle), sort_keys=True).encode()
    sections = []
    for comp_idx, weights in (
        (0, bundle.style_weights),
        (1, bundle.flow_weights),
        (2, bundle.mask_weights),
    ):
        for name, tensor in weights.items():
            encoded = name.encode()
            payload = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
            sections.append(
                struct.pack("<BH", comp_idx, len(encoded))
                + encoded
                + struct.pack("<BB", 0, tensor.ndim)
                + struct.pack(f"<{tensor.ndim}I", *tensor.shape)
                + payload
            )
    body = (
        struct.pack("<I", ARCHIVE_VERSION)
        + struct.pack("<I", len(meta))
        + meta
        + struct.pack("<I", len(sections))
        + b"".join(sections)
    )
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(ARCHIVE_MAGIC + body + struct.pack("<I", crc))


def load_bundle(path) -> ModelBundle:
    raw = _read_file(path)
    if len(raw) < 4 or raw[:4] != ARCHIVE_MAGIC:
        raise FileFormatError(path, 0, f"bad magic {raw[:4]!r}, expected {ARCHIVE_MAGIC!r}")
    if len(raw) < 8:
        raise FileFormatError(path, 4, "truncated archive")
    body, stored = raw[4:-4], raw[-4:]
    crc = zlib.crc32(body) & 0xFFFFFFFF
    if struct.pack("<I", crc) != stored:
        raise FileFormatError(path, len(raw) - 4, "checksum mismatch, archive corrupt")

    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise FileFormatError(path, 4 + pos, f"truncated while reading {what}")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != ARCHIVE_VERSION:
        raise FileFormatError(path, 4, f"unsupported archive version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = json.loads(take(meta_len, "metadata"))
        style_spec, flow_spec, mask_spec = _specs_from_metadata(meta)
        freeze = meta["freeze"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(path, 8, f"malformed metadata: {exc}") from exc
    (n_sections,) = struct.unpack("<I", take(4, "section count"))

    weights: dict[str, dict[str, Tensor]] = {"style": {}, "flow": {}, "mask": {}}
    for _ in range(n_sections):
        comp_idx, name_len = struct.unpack("<BH", take(3, "section header"))
        if comp_idx >= len(_COMPONENTS):
            raise FileFormatError(path, 4 + pos - 3, f"unknown component code {comp_idx}")
        name = take(name_len, "section name").decode()
        dtype_code, ndim = struct.unpack("<BB", take(2, "section dtype"))
        if dtype_code not in _DTYPES:
            raise FileFormatError(path, 4 + pos - 2, f"unknown dtype code {dtype_code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "section shape"))
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(_DTYPES[dtype_code]).itemsize
        payload = take(count * itemsize, f"payload of {name}")
        values = np.frombuffer(payload, dtype=_DTYPES[dtype_code]).reshape(shape)
        weights[_COMPONENTS[comp_idx]][name] = Tensor(values.astype(np.float64))
    if pos != len(body):
        raise FileFormatError(path, 4 + pos, f"{len(body) - pos} trailing bytes after sections")

    try:
        return ModelBundle(
            style_spec=style_spec,
            flow_spec=flow_spec,
            mask_spec=mask_spec,
            style_weights=weights["style"],
            flow_weights=weights["flow"],
            mask_weights=weights["mask"],
            freeze_flow=bool(freeze["flow"]),
            freeze_mask=bool(freeze["mask"]),
        )
    except ValueError as exc:
        raise FileFormatError(path, None, f"weights inconsistent with specs: {exc}") from exc


# -- clip manifests ----------------------------------------------------------


def save_clip(clip: ClipSample, directory, include_forward: bool = False) -> Path:
    """Write frames, flows and masks plus a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(clip.metadata):
        lines.append(f"{key}={_encode_meta(clip.metadata[key])}")
    lines.append(f"frame_count={len(clip.frames)}")
    for t, frame in enumerate(clip.frames):
        name = f"frame_{t:04d}.ppm"
        write_image(frame, directory / name)
        lines.append(f"frame_{t:04d}={name}")
    for t, flow in enumerate(clip.gt_flows):
        name = f"flow_{t:04d}.flo"
        write_flo(flow, directory / name)
        lines.append(f"flow_{t:04d}={name}")
    for t, mask in enumerate(clip.gt_masks):
        name = f"mask_{t:04d}.pgm"
        write_mask(mask, directory / name)
        lines.append(f"mask_{t:04d}={name}")
    if include_forward:
        for t, flow in enumerate(clip.gt_flows_forward):
            name = f"fwdflow_{t:04d}.flo"
            write_flo(flow, directory / name)
            lines.append(f"fwdflow_{t:04d}={name}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_clip(directory) -> ClipSample:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileFormatError(manifest, None, "manifest not found")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FileFormatError(manifest, None, f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    if "frame_count" not in entries:
        raise FileFormatError(manifest, None, "missing frame_count")
    n = int(entries["frame_count"])
    if n < 1:
        raise FileFormatError(manifest, None, f"invalid frame_count {n}")

    def file_for(key: str) -> Path:
        if key not in entries:
            raise FileFormatError(manifest, None, f"missing entry {key}")
        p = directory / entries[key]
        if not p.exists():
            raise FileFormatError(manifest, None, f"referenced file {entries[key]} does not exist")
        return p

    frames = [read_image(file_for(f"frame_{t:04d}")) for t in range(n)]
    flows = [read_flo(file_for(f"flow_{t:04d}")) for t in range(n - 1)]
    masks = [read_mask(file_for(f"mask_{t:04d}")) for t in range(n - 1)]
    fwd = []
    if f"fwdflow_{0:04d}" in entries:
        fwd = [read_flo(file_for(f"fwdflow_{t:04d}")) for t in range(n - 1)]
    meta = {
        k: v
        for k, v in entries.items()
        if not k.startswith(("frame_", "flow_", "mask_", "fwdflow_"))
    }
    return ClipSample(
        frames=frames, gt_flows=flows, gt_masks=masks, gt_flows_forward=fwd, metadata=meta
    )


def _encode_meta(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def _read_file(path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise FileFormatError(path, None, "file not found")
    return p.read_bytes()
