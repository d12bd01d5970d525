"""Landmark templates: canonical points, semantic lines and the spring graph over them.

Coordinates are normalized to the image: x in [0, 1] left to right, y in [0, 1]
top to bottom. Pixel conversion happens in the renderer and the exporters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyTemplateError,
    LandmarkIndexError,
    PointRangeError,
    ShapeError,
    TemplateParseError,
)

FORMAT_VERSION = 1
_KNOWN_KEYS = {"version", "n_landmarks", "points", "lines", "springs", "spring_constant"}
_LINE_KEYS = {"name", "indices", "color"}


@dataclass(frozen=True)
class SemanticLine:
    name: str
    indices: tuple[int, ...]
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SpringEdge:
    i: int
    j: int
    rest_length: float


@dataclass(frozen=True, eq=False)
class Template:
    points: np.ndarray  # (N, 2) float64, read-only
    lines: tuple[SemanticLine, ...] = ()
    springs: tuple[SpringEdge, ...] = ()
    spring_constant: float = 1.0
    _edge_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"template points must be (N, 2), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "springs", tuple(self.springs))
        edges = np.array([(s.i, s.j) for s in self.springs], dtype=np.int64).reshape(-1, 2)
        edges.setflags(write=False)
        object.__setattr__(self, "_edge_index", edges)

    @classmethod
    def build(
        cls,
        points,
        lines: Sequence[SemanticLine] = (),
        springs: Iterable[tuple[int, int]] | None = None,
        spring_constant: float = 1.0,
    ) -> "Template":
        """Construct a template, deriving spring rest lengths from the points.

        Without an explicit ``springs`` list the edges are the consecutive pairs of
        every semantic line. Edges are undirected and de-duplicated either way.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if springs is None:
            pairs = [(a, b) for line in lines for a, b in zip(line.indices[:-1], line.indices[1:])]
        else:
            pairs = [(int(a), int(b)) for a, b in springs]
        seen = set()
        edges = []
        for a, b in pairs:
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            seen.add(key)
            edges.append(SpringEdge(a, b, _rest_length(pts, a, b)))
        return cls(pts, tuple(lines), tuple(edges), float(spring_constant))

    @property
    def n_landmarks(self) -> int:
        return self.points.shape[0]

    @property
    def edge_index(self) -> np.ndarray:
        """(E, 2) int array of spring endpoints."""
        return self._edge_index

    @property
    def rest_lengths(self) -> np.ndarray:
        return np.array([s.rest_length for s in self.springs], dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, Template):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and self.lines == other.lines
            and self.springs == other.springs
            and self.spring_constant == other.spring_constant
        )

    def __hash__(self):
        return hash((self.points.tobytes(), self.lines, self.springs, self.spring_constant))


def _rest_length(points: np.ndarray, i: int, j: int) -> float:
    if not (0 <= i < len(points) and 0 <= j < len(points)):
        return float("nan")
    # same operation order as the spring loss, so an undeformed template has exactly zero energy
    dx, dy = float(points[i][0] - points[j][0]), float(points[i][1] - points[j][1])
    return math.sqrt(dx * dx + dy * dy)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def validate_template(t: Template) -> list[Violation]:
    """Check every template invariant; an empty list means the template is valid."""
    out: list[Violation] = []
    n = t.n_landmarks
    if n < 2:
        out.append(Violation("E_EMPTY", f"template needs at least 2 landmarks, has {n}"))
    if not np.all(np.isfinite(t.points)):
        out.append(Violation("E_RANGE", "non-finite template point"))
    else:
        bad = np.nonzero(np.any((t.points < 0.0) | (t.points > 1.0), axis=1))[0]
        for k in bad:
            out.append(Violation("E_RANGE", f"point {k} = {t.points[k].tolist()} outside [0,1]^2"))

    for line in t.lines:
        if len(line.indices) < 2:
            out.append(Violation("E_LINE_LENGTH", f"line {line.name!r} has fewer than 2 indices"))
        for k in line.indices:
            if not 0 <= k < n:
                out.append(Violation("E_INDEX", f"line {line.name!r} index {k} out of range [0, {n})"))
        for a, b in zip(line.indices[:-1], line.indices[1:]):
            if a == b:
                out.append(Violation("E_REPEAT", f"line {line.name!r} repeats index {a}"))
        if len(line.color) != 3 or not all(0.0 <= c <= 1.0 for c in line.color):
            out.append(Violation("E_COLOR", f"line {line.name!r} color {line.color} outside [0,1]^3"))

    seen = set()
    for s in t.springs:
        if not (0 <= s.i < n and 0 <= s.j < n):
            out.append(Violation("E_INDEX", f"spring ({s.i}, {s.j}) out of range [0, {n})"))
            continue
        if s.i == s.j:
            out.append(Violation("E_SELF_EDGE", f"spring ({s.i}, {s.j}) connects a landmark to itself"))
        key = (min(s.i, s.j), max(s.i, s.j))
        if key in seen:
            out.append(Violation("E_DUP_EDGE", f"spring ({s.i}, {s.j}) duplicates an earlier edge"))
        seen.add(key)
        expected = _rest_length(t.points, s.i, s.j)
        if not math.isclose(s.rest_length, expected, rel_tol=1e-12, abs_tol=1e-12):
            out.append(Violation("E_REST", f"spring ({s.i}, {s.j}) rest length {s.rest_length} != {expected}"))

    if not (math.isfinite(t.spring_constant) and t.spring_constant >= 0):
        out.append(Violation("E_SPRING_CONSTANT", f"spring constant {t.spring_constant} must be >= 0"))
    return out


def apply_deformation(t: Template, delta):
    """Offset the template points by ``delta``.

    Works on numpy arrays and torch tensors; ``delta`` may carry leading batch
    dimensions. The result is not clamped to the unit square.
    """
    import torch

    if not isinstance(delta, (np.ndarray, torch.Tensor)):
        delta = np.asarray(delta, dtype=np.float64)
    n = t.n_landmarks
    if delta.ndim < 2 or tuple(delta.shape[-2:]) != (n, 2):
        raise ShapeError(f"delta must end in ({n}, 2), got {tuple(delta.shape)}")
    if isinstance(delta, torch.Tensor):
        return torch.tensor(t.points, dtype=delta.dtype, device=delta.device) + delta
    return t.points + delta


_EXCEPTIONS = {
    "E_INDEX": LandmarkIndexError,
    "E_RANGE": PointRangeError,
    "E_EMPTY": EmptyTemplateError,
}


def template_from_dict(doc: dict) -> Template:
    if not isinstance(doc, dict):
        raise TemplateParseError("template must be a JSON object")
    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        raise TemplateParseError(f"unknown keys {sorted(unknown)}")
    if doc.get("version") != FORMAT_VERSION:
        raise TemplateParseError(f"version must be {FORMAT_VERSION}, got {doc.get('version')!r}")
    try:
        n = int(doc["n_landmarks"])
        points = np.array(doc["points"], dtype=np.float64)
        lines = []
        for entry in doc.get("lines", []):
            if not isinstance(entry, dict) or set(entry) - _LINE_KEYS or "indices" not in entry:
                raise TemplateParseError(f"malformed line entry {entry!r}")
            color = tuple(float(c) for c in entry.get("color", (1.0, 1.0, 1.0)))
            lines.append(SemanticLine(str(entry.get("name", "")), tuple(int(k) for k in entry["indices"]), color))
        springs = doc.get("springs")
        if springs is not None:
            springs = [(int(a), int(b)) for a, b in springs]
        spring_constant = float(doc.get("spring_constant", 1.0))
    except TemplateParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise TemplateParseError(str(exc)) from exc
    if n < 2:
        raise EmptyTemplateError(f"n_landmarks = {n}")
    if points.shape != (n, 2):
        raise TemplateParseError(f"points must be {n} pairs, got shape {points.shape}")

    t = Template.build(points, lines, springs, spring_constant)
    violations = validate_template(t)
    if violations:
        first = violations[0]
        for v in violations:
            if v.code in _EXCEPTIONS:
                first = v
                break
        raise _EXCEPTIONS.get(first.code, TemplateParseError)(first.message)
    return t


def template_to_dict(t: Template) -> dict:
    return {
        "version": FORMAT_VERSION,
        "n_landmarks": t.n_landmarks,
        "points": t.points.tolist(),
        "lines": [{"name": l.name, "indices": list(l.indices), "color": list(l.color)} for l in t.lines],
        "springs": [[s.i, s.j] for s in t.springs],
        "spring_constant": t.spring_constant,
    }


def load_template(path) -> Template:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TemplateParseError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TemplateParseError(f"{path}: {exc}") from exc
    return template_from_dict(doc)


def save_template(t: Template, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(template_to_dict(t), indent=2) + "\n", encoding="utf-8")
