"""Plain-text run configuration: key=value files with a typed registry.

A config file holds one ``key=value`` per line (``#`` comments and blank
lines ignored). Keys mirror the training schedule, loss weights,
occlusion thresholds, generator parameters and model specs; unknown keys
are rejected. Command-line flags override file values, and every command
echoes its effective configuration for reproducibility.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Callable

from .coherence import LossWeights
from .groundtruth import OcclusionParams, SynthConfig
from .models import SPLIT_LAYERS, FlowNetSpec, MaskNetSpec, ModelBundle, StyleNetSpec, make_bundle
from .pipeline import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration input."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_float_pair(text: str):
    if text.strip() == "":
        return None
    parts = [p for p in text.split(",") if p.strip() != ""]
    if len(parts) != 2:
        raise ConfigError(f"expected 'dx,dy' or empty, got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_split(text: str) -> str:
    if text not in SPLIT_LAYERS:
        raise ConfigError(f"split_layer must be one of {SPLIT_LAYERS}, got {text!r}")
    return text


# key -> (parser, default); defaults mirror the dataclass defaults
REGISTRY: dict[str, tuple[Callable[[str], Any], Any]] = {
    # schedule and loss
    "iterations": (int, TrainConfig.iterations),
    "batch": (int, TrainConfig.batch),
    "lr": (float, TrainConfig.lr),
    "lr_decay": (float, TrainConfig.lr_decay),
    "decay_every": (int, TrainConfig.decay_every),
    "alpha": (float, LossWeights.alpha),
    "beta": (float, LossWeights.beta),
    "lambda": (float, LossWeights.lam),
    "split_layer": (_parse_split, TrainConfig.split_layer),
    "seed": (int, TrainConfig.seed),
    "freeze_flow": (_parse_bool, TrainConfig.freeze_flow),
    "checkpoint_every": (int, TrainConfig.checkpoint_every),
    "flow_warmup_iters": (int, TrainConfig.flow_warmup_iters),
    # occlusion thresholds
    "cross_check_coeff": (float, OcclusionParams.cross_check_coeff),
    "cross_check_bias": (float, OcclusionParams.cross_check_bias),
    "boundary_coeff": (float, OcclusionParams.boundary_coeff),
    "boundary_bias": (float, OcclusionParams.boundary_bias),
    # generator
    "height": (int, SynthConfig.height),
    "width": (int, SynthConfig.width),
    "frames": (int, SynthConfig.num_frames),
    "objects": (int, SynthConfig.num_objects),
    "camera_velocity": (_parse_float_pair, SynthConfig.camera_velocity),
    "camera_speed": (float, SynthConfig.camera_speed),
    "velocity_mode": (str, SynthConfig.velocity_mode),
    "max_speed": (float, SynthConfig.max_speed),
    "min_object_size": (int, SynthConfig.min_object_size),
    "max_object_size": (int, SynthConfig.max_object_size),
    "brightness_jitter": (float, SynthConfig.brightness_jitter),
    "noise_sigma": (float, SynthConfig.noise_sigma),
    "integer_velocities": (_parse_bool, SynthConfig.integer_velocities),
    # model specs
    "style_widths": (_parse_int_tuple, StyleNetSpec.widths),
    "res_blocks": (int, StyleNetSpec.num_res_blocks),
    "flow_contract_widths": (_parse_int_tuple, FlowNetSpec.contract_widths),
    "flow_contract_strides": (_parse_int_tuple, FlowNetSpec.contract_strides),
    "flow_expand_widths": (_parse_int_tuple, FlowNetSpec.expand_widths),
    "flow_scale": (float, FlowNetSpec.flow_scale),
    "mask_widths": (_parse_int_tuple, MaskNetSpec.widths),
    "mask_kernel": (int, MaskNetSpec.kernel),
}


def defaults() -> dict[str, Any]:
    return {key: default for key, (_, default) in REGISTRY.items()}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse key=value lines against the registry; unknown keys rejected."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in REGISTRY:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser = REGISTRY[key][0]
        try:
            values[key] = parser(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def load_config(path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config_text(p.read_text(), source=str(p))


def resolve(file_values: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """defaults <- config file <- explicit command-line overrides."""
    merged = defaults()
    merged.update(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def format_effective(values: dict[str, Any]) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, tuple):
            encoded = ",".join(str(v) for v in value)
        elif value is None:
            encoded = ""
        elif isinstance(value, bool):
            encoded = "true" if value else "false"
        else:
            encoded = str(value)
        lines.append(f"{key}={encoded}")
    return "\n".join(lines) + "\n"


def train_config(values: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        iterations=values["iterations"],
        batch=values["batch"],
        lr=values["lr"],
        lr_decay=values["lr_decay"],
        decay_every=values["decay_every"],
        loss_weights=LossWeights(
            alpha=values["alpha"], beta=values["beta"], lam=values["lambda"]
        ),
        split_layer=values["split_layer"],
        seed=values["seed"],
        freeze_flow=values["freeze_flow"],
        checkpoint_every=values["checkpoint_every"],
        flow_warmup_iters=values["flow_warmup_iters"],
    )


def occlusion_params(values: dict[str, Any]) -> OcclusionParams:
    return OcclusionParams(
        cross_check_coeff=values["cross_check_coeff"],
        cross_check_bias=values["cross_check_bias"],
        boundary_coeff=values["boundary_coeff"],
        boundary_bias=values["boundary_bias"],
    )


def synth_config(values: dict[str, Any]) -> SynthConfig:
    return SynthConfig(
        height=values["height"],
        width=values["width"],
        num_frames=values["frames"],
        num_objects=values["objects"],
        camera_velocity=values["camera_velocity"],
        camera_speed=values["camera_speed"],
        velocity_mode=values["velocity_mode"],
        max_speed=values["max_speed"],
        min_object_size=values["min_object_size"],
        max_object_size=values["max_object_size"],
        brightness_jitter=values["brightness_jitter"],
        noise_sigma=values["noise_sigma"],
        integer_velocities=values["integer_velocities"],
    )


def build_bundle(values: dict[str, Any]) -> ModelBundle:
    style = StyleNetSpec(
        widths=values["style_widths"],
        num_res_blocks=values["res_blocks"],
        split_layer=values["split_layer"],
    )
    flow = FlowNetSpec(
        contract_widths=values["flow_contract_widths"],
        contract_strides=values["flow_contract_strides"],
        expand_widths=values["flow_expand_widths"],
        flow_scale=values["flow_scale"],
    )
    mask = MaskNetSpec(
        in_channels=style.feature_channels(),
        widths=values["mask_widths"],
        kernel=values["mask_kernel"],
    )
    return make_bundle(
        style_spec=style,
        flow_spec=flow,
        mask_spec=mask,
        seed=values["seed"],
        freeze_flow=values["freeze_flow"],
    )
