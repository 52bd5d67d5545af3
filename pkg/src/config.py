from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .classical import BaselineConfig
from .errors import ConfigError, DataError
from .imagecore import AugmentationSpec
from .presets import get_scene_preset
from .synthdata import SceneConfig
from .tensornet import UNetConfig
from .training import SearchSpace, TrainConfig
from .validation import ValidationIssue, load_schema, validate_document, validate_ordered_ranges, validate_run_config


logger = logging.getLogger(__name__)

NULLISH = {"null", "none", ""}


# -----------------------------
# Run configuration sections
# -----------------------------

@dataclass(frozen=True)
class DataConfig:
    tile_dir: Optional[str] = None
    tile_size: int = 128
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    per_image_split: bool = False
    crop_top: int = 0
    crop_bottom: int = 0
    pixel_size_nm: Optional[float] = None


@dataclass(frozen=True)
class CalibrationConfig:
    bins: int = 10
    temperature_cap: float = 1000.0
    confidence_levels: Tuple[float, float] = (0.7, 0.9)
    mve_samples: int = 16


@dataclass(frozen=True)
class EvaluationConfig:
    alpha: float = 0.001
    exact_max_n: int = 25
    ecd_bin_nm: float = 50.0
    large_ecd_nm: float = 500.0
    connectivity: int = 8


@dataclass(frozen=True)
class RunConfig:
    """One experiment. Defaults are the full-scale settings."""
    data: DataConfig = field(default_factory=DataConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def train_config(self) -> TrainConfig:
        """Training section with the network and augmentation sections folded in."""
        return replace(self.training, unet=self.unet, augmentation=self.augmentation)

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["training"].pop("unet", None)
        doc["training"].pop("augmentation", None)
        doc["augmentation"]["rotations"] = sorted(self.augmentation.rotations)
        return doc


# -----------------------------
# Schema-driven coercion of CLI overrides
# -----------------------------

class SchemaCoercer:
    """
    Knows the property types of a JSON Schema (nested objects addressed by
    dotted keys) and coerces raw command-line strings into them.
    """

    def __init__(self, schema_name: str) -> None:
        self.schema_name = schema_name
        self.schema = load_schema(schema_name)

    def prop(self, dotted: str) -> Optional[Dict[str, Any]]:
        node: Dict[str, Any] = self.schema
        for part in dotted.split("."):
            props = node.get("properties", {})
            if part not in props:
                return None
            node = props[part]
        return node

    @staticmethod
    def _primary_type(prop: Dict[str, Any]) -> Optional[str]:
        types = prop.get("type")
        if isinstance(types, list):
            primary = [t for t in types if t != "null"]
            return primary[0] if primary else None
        return types

    def coerce_value(self, dotted: str, raw: Any) -> Tuple[Any, Optional[str]]:
        """Returns (value, error_message_or_None)."""
        prop = self.prop(dotted)
        if prop is None:
            return None, f"Unknown key '{dotted}' (not in {self.schema_name} schema)"
        if not isinstance(raw, str):
            return raw, None
        s = raw.strip()
        types = prop.get("type")
        if s.lower() in NULLISH and isinstance(types, list) and "null" in types:
            return None, None

        kind = self._primary_type(prop)
        if kind == "number":
            try:
                return float(s), None
            except ValueError:
                return None, f"Could not parse number for {dotted}: {raw!r}"
        if kind == "integer":
            try:
                f = float(s)
            except ValueError:
                return None, f"Could not parse integer for {dotted}: {raw!r}"
            if not f.is_integer():
                return None, f"Expected an integer for {dotted}, got {raw!r}"
            return int(f), None
        if kind == "boolean":
            low = s.lower()
            if low in {"true", "yes", "y", "1", "on"}:
                return True, None
            if low in {"false", "no", "n", "0", "off"}:
                return False, None
            return None, f"Could not parse boolean for {dotted}: {raw!r}"
        if kind == "array":
            if s.startswith("["):
                try:
                    return json.loads(s), None
                except json.JSONDecodeError as e:
                    return None, f"Could not parse array for {dotted}: {e}"
            item_kind = self._primary_type(prop.get("items", {}))
            parts = [p.strip() for p in s.split(",") if p.strip()]
            try:
                if item_kind == "integer":
                    return [int(float(p)) for p in parts], None
                if item_kind == "number":
                    return [float(p) for p in parts], None
            except ValueError:
                return None, f"Could not parse list for {dotted}: {raw!r}"
            return parts, None
        return s, None

    def apply_overrides(self, doc: Dict[str, Any], overrides: Sequence[str]) -> List[ValidationIssue]:
        """Apply `section.key=value` assignments in place; returns the problems found."""
        issues: List[ValidationIssue] = []
        for item in overrides:
            if "=" not in item:
                issues.append(ValidationIssue("error", "CFG_OVERRIDE_SYNTAX", f"Expected key=value, got {item!r}"))
                continue
            dotted, raw = (part.strip() for part in item.split("=", 1))
            value, err = self.coerce_value(dotted, raw)
            if err:
                issues.append(ValidationIssue("error", "CFG_OVERRIDE_VALUE", err, field=dotted))
                continue
            node = doc
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return issues


# -----------------------------
# Loading
# -----------------------------

def load_toml(path: str | Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with path.open("rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})") from e


def _resolve(doc: Dict[str, Any], schema_name: str, overrides: Sequence[str],
             extra_checks=None) -> Tuple[Dict[str, Any], List[ValidationIssue]]:
    """Overrides, schema validation, cross-field checks; raises on any error."""
    doc = json.loads(json.dumps(doc))
    issues = SchemaCoercer(schema_name).apply_overrides(doc, overrides)
    issues += validate_document(doc, schema_name)
    if extra_checks is not None and not any(i.severity == "error" for i in issues):
        issues += extra_checks(doc)
    errors = [i for i in issues if i.severity == "error"]
    for i in issues:
        if i.severity == "warning":
            logger.warning("%s: %s", i.code, i.message)
    if errors:
        raise ConfigError(f"{len(errors)} configuration error(s): " + "; ".join(e.message for e in errors[:5]), issues)
    return doc, issues


def _tuples(section: Dict[str, Any]) -> Dict[str, Any]:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}


def build_run_config(doc: Dict[str, Any], overrides: Sequence[str] = ()) -> RunConfig:
    doc, issues = _resolve(doc, "run_config", overrides, validate_run_config)
    try:
        aug = _tuples(doc.get("augmentation", {}))
        if "rotations" in aug:
            aug["rotations"] = frozenset(aug["rotations"])
        return RunConfig(
            data=DataConfig(**_tuples(doc.get("data", {}))),
            unet=UNetConfig(**doc.get("unet", {})),
            training=TrainConfig(**doc.get("training", {})),
            augmentation=AugmentationSpec(**aug),
            baseline=BaselineConfig(**doc.get("baseline", {})),
            calibration=CalibrationConfig(**_tuples(doc.get("calibration", {}))),
            evaluation=EvaluationConfig(**doc.get("evaluation", {})),
        )
    except DataError as e:
        issue = ValidationIssue("error", "CFG_INVALID_VALUE", str(e))
        raise ConfigError(str(e), issues + [issue]) from e


def load_run_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    doc = load_toml(path) if path else {}
    cfg = build_run_config(doc, overrides)
    logger.debug("Loaded run config from %s", path or "<defaults>")
    return cfg


def build_scene_config(doc: Dict[str, Any], overrides: Sequence[str] = (), preset: Optional[str] = None) -> SceneConfig:
    ranges = ["carbide_count", "semi_axis_range"]
    doc, issues = _resolve(doc, "scene_config", overrides, lambda d: validate_ordered_ranges(d, ranges))
    doc = dict(doc)
    name = preset or doc.pop("preset", "default")
    doc.pop("preset", None)
    try:
        return SceneConfig.from_dict(doc, base=get_scene_preset(name))
    except DataError as e:
        raise ConfigError(str(e), issues + [ValidationIssue("error", "CFG_INVALID_VALUE", str(e))]) from e


def load_scene_config(path: Optional[str | Path] = None, overrides: Sequence[str] = (), preset: Optional[str] = None) -> SceneConfig:
    return build_scene_config(load_toml(path) if path else {}, overrides, preset)


def build_search_space(doc: Dict[str, Any], overrides: Sequence[str] = ()) -> SearchSpace:
    ranges = ["lr0_range", "early_stop_patience_range"]
    doc, issues = _resolve(doc, "search_space", overrides, lambda d: validate_ordered_ranges(d, ranges))
    try:
        return SearchSpace(**_tuples(doc))
    except DataError as e:
        raise ConfigError(str(e), issues + [ValidationIssue("error", "CFG_INVALID_VALUE", str(e))]) from e


def load_search_space(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> SearchSpace:
    return build_search_space(load_toml(path) if path else {}, overrides)
