from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional

from jsonschema import Draft202012Validator


SCHEMA_DIR = Path(__file__).resolve().parents[1] / "schemas"


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # "error" | "warning" | "info"
    code: str
    message: str
    field: Optional[str] = None


@lru_cache(maxsize=None)
def _validator(schema_name: str) -> Draft202012Validator:
    path = SCHEMA_DIR / f"{schema_name}.schema.json"
    schema = json.loads(path.read_text(encoding="utf-8"))
    Draft202012Validator.check_schema(schema)
    return Draft202012Validator(schema)


def load_schema(schema_name: str) -> Dict[str, Any]:
    return _validator(schema_name).schema


def validate_document(doc: Any, schema_name: str) -> List[ValidationIssue]:
    """Structural validation against schemas/<schema_name>.schema.json."""
    issues: List[ValidationIssue] = []
    for err in sorted(_validator(schema_name).iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or None
        code = "CFG_UNKNOWN_KEY" if err.validator == "additionalProperties" else "CFG_SCHEMA"
        issues.append(ValidationIssue(severity="error", code=code, message=err.message, field=where))
    return issues


def _section(doc: Dict[str, Any], name: str) -> Dict[str, Any]:
    sec = doc.get(name, {})
    return sec if isinstance(sec, dict) else {}


def validate_run_config(doc: Dict[str, Any]) -> List[ValidationIssue]:
    """
    Cross-field checks on a (schema-valid) run configuration dict. Only keys
    that are present are checked; defaults are validated by the dataclasses.
    """
    issues: List[ValidationIssue] = []
    data = _section(doc, "data")
    unet = _section(doc, "unet")
    aug = _section(doc, "augmentation")
    base = _section(doc, "baseline")

    fractions = data.get("split_fractions")
    if isinstance(fractions, list) and len(fractions) == 3:
        if abs(sum(fractions) - 1.0) > 1e-9:
            issues.append(ValidationIssue(
                severity="error",
                code="CFG_SPLIT_SUM",
                message=f"split_fractions must sum to 1, got {sum(fractions)}",
                field="data.split_fractions",
            ))

    k = unet.get("kernel_size")
    if isinstance(k, int) and k % 2 == 0:
        issues.append(ValidationIssue(
            severity="error",
            code="CFG_KERNEL_EVEN",
            message=f"kernel_size must be odd, got {k}",
            field="unet.kernel_size",
        ))

    tile_size = data.get("tile_size", 128)
    blocks = unet.get("encoder_blocks", 3)
    if isinstance(tile_size, int) and isinstance(blocks, int) and blocks >= 1:
        if tile_size % (2 ** blocks) != 0:
            issues.append(ValidationIssue(
                severity="error",
                code="CFG_TILE_NOT_DIVISIBLE",
                message=f"tile_size {tile_size} is not divisible by 2**encoder_blocks = {2 ** blocks}",
                field="data.tile_size",
            ))

    blur = aug.get("blur_sigma_range")
    if isinstance(blur, list) and len(blur) == 2 and blur[1] < blur[0]:
        issues.append(ValidationIssue(
            severity="error",
            code="CFG_RANGE_ORDER",
            message=f"blur_sigma_range must be ordered, got {blur}",
            field="augmentation.blur_sigma_range",
        ))

    radius = base.get("tophat_radius", 30)
    if isinstance(radius, int) and isinstance(tile_size, int) and radius > tile_size / 2:
        issues.append(ValidationIssue(
            severity="warning",
            code="CFG_TOPHAT_RADIUS_LARGE",
            message=f"tophat_radius {radius} exceeds half the tile size {tile_size}",
            field="baseline.tophat_radius",
        ))
    return issues


def validate_ordered_ranges(doc: Dict[str, Any], keys: List[str], prefix: str = "") -> List[ValidationIssue]:
    """Every listed key, when present, must be a [lo, hi] pair with lo <= hi."""
    issues: List[ValidationIssue] = []
    for key in keys:
        v = doc.get(key)
        if isinstance(v, list) and len(v) == 2 and v[1] < v[0]:
            issues.append(ValidationIssue(
                severity="error",
                code="CFG_RANGE_ORDER",
                message=f"{key} must be ordered [lo, hi], got {v}",
                field=f"{prefix}{key}",
            ))
    return issues

