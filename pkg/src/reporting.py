from __future__ import annotations

import json
import os
import tempfile
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List

import numpy as np
import pandas as pd


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def to_json(obj: Any, indent: int | None = 2) -> str:
    return json.dumps(obj, indent=indent, ensure_ascii=False, sort_keys=True, default=_json_default)


def write_bytes_atomic(data: bytes, path: str | Path) -> Path:
    """
    Write to a temp file next to `path`, then rename over it. Readers only
    ever see the old or the new complete file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json_atomic(obj: Any, path: str | Path) -> Path:
    return write_bytes_atomic((to_json(obj) + "\n").encode("utf-8"), path)


def write_csv_atomic(frame: pd.DataFrame, path: str | Path) -> Path:
    return write_bytes_atomic(frame.to_csv(index=False, lineterminator="\n").encode("utf-8"), path)


def build_issue_report(issues: Iterable[Any]) -> Dict[str, Any]:
    """
    Compact summary of validation issues grouped by (severity, code), keeping
    the affected fields and up to three example messages per group.
    """
    grouped: Dict[tuple, Dict[str, Any]] = defaultdict(lambda: {"count": 0, "fields": set(), "messages": []})
    counts = {"error": 0, "warning": 0, "info": 0}
    for issue in issues:
        key = (issue.severity, issue.code)
        grouped[key]["count"] += 1
        counts[issue.severity] = counts.get(issue.severity, 0) + 1
        if issue.field:
            grouped[key]["fields"].add(issue.field)
        if issue.message and len(grouped[key]["messages"]) < 3:
            grouped[key]["messages"].append(issue.message)

    sev_order = {"error": 0, "warning": 1, "info": 2}
    by_code: List[Dict[str, Any]] = []
    for (severity, code), v in grouped.items():
        by_code.append({
            "severity": severity,
            "code": code,
            "count": v["count"],
            "fields": sorted(v["fields"]),
            "message_examples": v["messages"],
        })
    by_code.sort(key=lambda x: (sev_order.get(x["severity"], 99), x["code"]))

    return {
        "overall_status": "fail" if counts.get("error", 0) else "pass",
        "counts": {f"{k}_count": v for k, v in counts.items()},
        "by_code": by_code,
    }

