"""Procedural geometry for the three fungal growth stages.

A stage image is described by a :class:`StructureGraph`: filled circles
(spores, or the seed cell of a branching structure) plus straight branch
segments arranged as fan-out trees rooted at circle centers.  Segment
length and width shrink geometrically with depth (``L * alpha**d`` and
``W * beta**d``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .rng import make_rng

ANGLE_JITTER = math.pi / 5


class StageClass(enum.IntEnum):
    SPORE = 0
    HYPHAE = 1
    MYCELIUM = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "StageClass":
        if isinstance(value, StageClass):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigError(f"unknown stage class {value!r}") from None


@dataclass(frozen=True)
class StageParams:
    n_structures: int
    branch_depth: int = 0
    branch_length: float = 0.0
    branch_width: float = 0.0
    length_decay: float = 0.7
    width_decay: float = 0.8
    spore_radius: float = 3.0
    fanout: int = 1
    overlap_fraction: float = 0.0

    def __post_init__(self):
        if self.n_structures < 1:
            raise ParameterError(f"n_structures must be positive, got {self.n_structures}")
        if self.branch_depth < 0:
            raise ParameterError(f"branch_depth must be >= 0, got {self.branch_depth}")
        if not (0.0 < self.length_decay <= 1.0 and 0.0 < self.width_decay <= 1.0):
            raise ParameterError("length_decay and width_decay must lie in (0, 1]")
        if self.fanout < 1:
            raise ParameterError(f"fanout must be >= 1, got {self.fanout}")
        if self.spore_radius <= 0:
            raise ParameterError("spore_radius must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ParameterError("overlap_fraction must lie in [0, 1)")
        # branch length/width may be zero only when nothing branches
        if self.branch_depth > 0 and (self.branch_length <= 0 or self.branch_width <= 0):
            raise ParameterError("branching stages need positive branch_length and branch_width")

    def segment_length(self, depth: int) -> float:
        return self.branch_length * self.length_decay**depth

    def segment_width(self, depth: int) -> float:
        return self.branch_width * self.width_decay**depth

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def default_stage_params() -> dict[StageClass, StageParams]:
    return {
        StageClass.SPORE: StageParams(n_structures=30, spore_radius=3.0, overlap_fraction=0.15),
        StageClass.HYPHAE: StageParams(
            n_structures=8, branch_depth=2, branch_length=12.0, branch_width=3.0,
            fanout=2, overlap_fraction=0.15,
        ),
        StageClass.MYCELIUM: StageParams(
            n_structures=6, branch_depth=4, branch_length=16.0, branch_width=4.0,
            fanout=3, overlap_fraction=0.15,
        ),
    }


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float
    overlay: bool = False


@dataclass(frozen=True)
class BranchSegment:
    start: tuple[float, float]
    end: tuple[float, float]
    width: float
    depth: int
    angle: float
    root: int  # index of the circle this tree grows from
    parent: int = -1  # index of the parent segment, -1 at depth 1
    overlay: bool = False

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])


@dataclass
class StructureGraph:
    stage: StageClass
    circles: list[Circle]
    segments: list[BranchSegment]
    seed: int
    canvas: tuple[int, int]
    branch_depth: int = 0
    metadata: dict = field(default_factory=dict)

    def serialize(self) -> str:
        """Line-oriented record: one header, then one line per circle/segment."""
        w, h = self.canvas
        lines = [f"G {self.stage.label} {self.seed} {w} {h} {self.branch_depth}"]
        for c in self.circles:
            lines.append(f"C {c.center[0]:.6f} {c.center[1]:.6f} {c.radius:.6f} {int(c.overlay)}")
        for s in self.segments:
            lines.append(
                f"S {s.start[0]:.6f} {s.start[1]:.6f} {s.end[0]:.6f} {s.end[1]:.6f} "
                f"{s.width:.6f} {s.depth} {s.angle:.6f} {s.root} {s.parent} {int(s.overlay)}"
            )
        return "\n".join(lines) + "\n"


def _canvas(canvas) -> tuple[int, int]:
    if isinstance(canvas, int):
        return canvas, canvas
    w, h = canvas
    return int(w), int(h)


def _centers(n: int, radius: float, rng: np.random.Generator, canvas: tuple[int, int]) -> np.ndarray:
    w, h = canvas
    if w < 4 * radius or h < 4 * radius:
        raise DimensionError(f"canvas {w}x{h} too small for spores of radius {radius}")
    xs = rng.uniform(radius, w - radius, size=n)
    ys = rng.uniform(radius, h - radius, size=n)
    return np.stack([xs, ys], axis=1)


def _fit_angle(x: float, y: float, length: float, angle: float, w: int, h: int) -> tuple[float, bool]:
    """Mirror a direction back into the canvas so the segment keeps its length.

    Returns the (possibly mirrored) angle and whether the end point still
    falls outside and has to be clamped.
    """
    ex = x + length * math.cos(angle)
    if not 0.0 <= ex <= w:
        angle = math.pi - angle
    ey = y + length * math.sin(angle)
    if not 0.0 <= ey <= h:
        angle = -angle
    ex = x + length * math.cos(angle)
    ey = y + length * math.sin(angle)
    return math.remainder(angle, 2 * math.pi), not (0.0 <= ex <= w and 0.0 <= ey <= h)


def _grow_trees(
    params: StageParams,
    rng: np.random.Generator,
    canvas: tuple[int, int],
    n: int,
    circles: list[Circle],
    segments: list[BranchSegment],
    metadata: dict,
    overlay: bool = False,
) -> None:
    w, h = canvas
    r = params.spore_radius
    for center in _centers(n, r, rng, canvas):
        root = len(circles)
        circles.append(Circle((float(center[0]), float(center[1])), r, overlay))
        root_angle = rng.uniform(0.0, 2 * math.pi)
        # frontier entries: (segment index or -1, x, y, angle)
        frontier = [(-1, float(center[0]), float(center[1]), root_angle)]
        for depth in range(1, params.branch_depth + 1):
            length = params.segment_length(depth)
            width = params.segment_width(depth)
            nxt = []
            for parent, x, y, parent_angle in frontier:
                for k in range(params.fanout):
                    base = parent_angle
                    if depth == 1:
                        base += 2 * math.pi * k / params.fanout
                    angle = base + rng.uniform(-ANGLE_JITTER, ANGLE_JITTER)
                    angle, outside = _fit_angle(x, y, length, angle, w, h)
                    ex = x + length * math.cos(angle)
                    ey = y + length * math.sin(angle)
                    if outside:
                        ex = min(max(ex, 0.0), float(w))
                        ey = min(max(ey, 0.0), float(h))
                        metadata["clamped_segments"] = metadata.get("clamped_segments", 0) + 1
                    segments.append(BranchSegment((x, y), (ex, ey), width, depth, angle, root, parent, overlay))
                    nxt.append((len(segments) - 1, ex, ey, angle))
            frontier = nxt


def _degenerate_check(params: StageParams, metadata: dict) -> None:
    if params.branch_depth and params.segment_length(params.branch_depth) < 0.5:
        metadata.setdefault("warnings", []).append(
            f"degenerate-branch: depth {params.branch_depth} length "
            f"{params.segment_length(params.branch_depth):.4f} px < 0.5 px"
        )


def generate_spore(params: StageParams, seed: int, canvas=64, rng: np.random.Generator | None = None) -> StructureGraph:
    """Scatter ``n_structures`` spores uniformly inside the radius-inset canvas."""
    if params.branch_depth != 0:
        raise ParameterError("spore stage requires branch_depth = 0")
    canvas = _canvas(canvas)
    rng = make_rng(seed) if rng is None else rng
    r = params.spore_radius
    circles = [Circle((float(x), float(y)), r) for x, y in _centers(params.n_structures, r, rng, canvas)]
    return StructureGraph(StageClass.SPORE, circles, [], seed, canvas, 0)


def generate_branching(
    params: StageParams,
    stage: StageClass,
    seed: int,
    canvas=64,
    rng: np.random.Generator | None = None,
) -> StructureGraph:
    stage = StageClass.parse(stage)
    if stage == StageClass.SPORE:
        raise ParameterError("generate_branching handles hyphae and mycelium only")
    if params.branch_depth < 1:
        raise ParameterError(f"{stage.label} requires branch_depth >= 1")
    canvas = _canvas(canvas)
    rng = make_rng(seed) if rng is None else rng
    graph = StructureGraph(stage, [], [], seed, canvas, params.branch_depth)
    _grow_trees(params, rng, canvas, params.n_structures, graph.circles, graph.segments, graph.metadata)
    _degenerate_check(params, graph.metadata)
    return graph


def overlay_count(params: StageParams) -> int:
    # rounding guards against 0.15 * 20 == 3.0000000000000004
    return math.ceil(round(params.overlap_fraction * params.n_structures, 9))


def generate_stage(
    stage: StageClass,
    params_by_stage: Mapping[StageClass, StageParams],
    seed: int,
    canvas=64,
) -> StructureGraph:
    """Primary-stage structures plus a few structures of the preceding stage."""
    stage = StageClass.parse(stage)
    if stage not in params_by_stage:
        raise ConfigError(f"no parameters for stage {stage.label}")
    params = params_by_stage[stage]
    canvas = _canvas(canvas)
    rng = make_rng(seed)
    if stage == StageClass.SPORE:
        return generate_spore(params, seed, canvas, rng=rng)

    prev = StageClass(stage - 1)
    if prev not in params_by_stage:
        raise ConfigError(f"stage {stage.label} needs parameters for preceding stage {prev.label}")
    graph = generate_branching(params, stage, seed, canvas, rng=rng)
    extra = overlay_count(params)
    if extra:
        prev_params = replace(params_by_stage[prev], n_structures=extra)
        if prev == StageClass.SPORE:
            r = prev_params.spore_radius
            graph.circles.extend(Circle((float(x), float(y)), r, True) for x, y in _centers(extra, r, rng, canvas))
        else:
            _grow_trees(prev_params, rng, canvas, extra, graph.circles, graph.segments, graph.metadata, overlay=True)
    graph.metadata["overlay_structures"] = extra
    return graph
