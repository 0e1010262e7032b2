"""Figure spec files: a small key = value format naming the figure kind, its
input CSVs, the output image, and styling knobs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

KINDS = (
    "heatmap_steps",
    "histogram",
    "layerhead",
    "step_pair",
    "trajectory_overview",
    "epsilon_curve",
)


class SpecError(ValueError):
    """Bad figure spec or input with the wrong schema."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    input: str
    output: str
    colormap: str = "viridis"
    log_scale: bool = False
    layer: int | None = None
    head: int | None = None
    step_a: int = 0
    step_b: int = 1
    dpi: int = 120
    title: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown figure kind {self.kind!r} (expected one of {KINDS})")
        if self.dpi < 10:
            raise SpecError("dpi must be >= 10")


_TYPES = {
    "kind": str,
    "input": str,
    "output": str,
    "colormap": str,
    "log_scale": bool,
    "layer": int,
    "head": int,
    "step_a": int,
    "step_b": int,
    "dpi": int,
    "title": str,
}


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise SpecError(f"key {key!r}: cannot parse {raw!r} as bool")
    try:
        return typ(raw)
    except ValueError:
        raise SpecError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_spec(path) -> FigureSpec:
    values: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SpecError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _TYPES:
            raise SpecError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    for required in ("kind", "input", "output"):
        if required not in values:
            raise SpecError(f"{path}: missing required key {required!r}")
    return FigureSpec(**values)
