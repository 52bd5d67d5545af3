from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Dict

from .errors import DataError
from .synthdata import SceneConfig


@dataclass(frozen=True)
class MaterialPreset:
    """
    Imaging setup for one steel grade: the field of view a full-width
    micrograph covers, which fixes the pixel size used in morphometrics.
    """
    name: str
    field_width_um: float
    image_width_px: int
    description: str

    @property
    def pixel_size_nm(self) -> float:
        return self.field_width_um * 1000.0 / self.image_width_px


MATERIALS: Dict[str, MaterialPreset] = {
    "jfl": MaterialPreset(
        name="JFL",
        field_width_um=14.3,
        image_width_px=2048,
        description="Reference reactor-pressure-vessel steel, 14.3 um across 2048 px.",
    ),
    "anp-10": MaterialPreset(
        name="ANP-10",
        field_width_um=11.5,
        image_width_px=2048,
        description="Second RPV steel used to check generalization, 11.5 um across 2048 px.",
    ),
}


# Overrides applied on top of SceneConfig defaults.
SCENE_PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    # Carbides nearly invisible in SE, fine texture that survives the top-hat.
    "hard": {
        "se_contrast": 0.02,
        "inlens_contrast": 0.22,
        "contrast_jitter": 0.3,
        "texture_amplitude": 0.08,
        "texture_length": 3.0,
        "channel_correlation": 0.95,
        "noise_sigma": 0.03,
    },
    # A different "steel": brighter matrix, smaller carbides, stronger shading.
    "shifted": {
        "matrix_level": 0.45,
        "se_contrast": 0.25,
        "inlens_contrast": 0.40,
        "semi_axis_range": (4.0, 10.0),
        "texture_length": 16.0,
        "texture_amplitude": 0.03,
        "gradient_amplitude": 0.15,
    },
    # Full-size frames matching the real micrograph shape and carbide density.
    "fullframe": {
        "height": 1404,
        "width": 2048,
        "carbide_count": (220, 440),
    },
}


def _key(name: str) -> str:
    return (name or "").strip().lower()


def get_material(name: str) -> MaterialPreset:
    key = _key(name)
    if key not in MATERIALS:
        raise DataError(f"Unknown material '{name}'. Supported: {sorted(m.name for m in MATERIALS.values())}")
    return MATERIALS[key]


def get_scene_preset(name: str, **overrides: Any) -> SceneConfig:
    key = _key(name)
    if key not in SCENE_PRESETS:
        raise DataError(f"Unknown scene preset '{name}'. Supported: {sorted(SCENE_PRESETS)}")
    return replace(SceneConfig(**SCENE_PRESETS[key]), **overrides)
