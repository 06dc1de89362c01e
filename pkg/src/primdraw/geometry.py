"""Primitive shapes: construction inside patches, SVG paths, affine recovery.

A primitive is a constrained stroke (straight line, circle, or
semi-circle) carried by 2 to 4 on-curve control points and an opacity.
Construction samples integer coordinates inside a patch (coordinates are
stored as floats so they can be optimized continuously afterwards).
Every primitive keeps a frozen snapshot of its initial state, which is
what `fit_affine` uses to recover the linear transform the optimizer
applied to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DomainError, InputError

# Handle length for a cubic approximating a quarter arc of radius r is
# KAPPA * r; the chord of that arc is r * sqrt(2), so per unit chord the
# handle is KAPPA / sqrt(2).
KAPPA = 4.0 * (math.sqrt(2.0) - 1.0) / 3.0
HANDLE_PER_CHORD = KAPPA / math.sqrt(2.0)

# Coordinates this close to the ideal circle/semicircle pattern are still
# serialized with the exact arc templates.
EXACT_SHAPE_TOL = 1e-7

# Lines shorter than this at init are resampled (no gradient signal).
MIN_LINE_LENGTH = 1.0


@dataclass(frozen=True)
class Point2:
    """A canvas position in pixels."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DomainError(f"non-finite point ({self.x}, {self.y})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


class PrimitiveKind(Enum):
    LINE = "line"
    CIRCLE = "circle"
    SEMICIRCLE = "semicircle"

    @property
    def control_point_count(self) -> int:
        return _POINT_COUNT[self]


_POINT_COUNT = {
    PrimitiveKind.LINE: 2,
    PrimitiveKind.SEMICIRCLE: 3,
    PrimitiveKind.CIRCLE: 4,
}


@dataclass
class Primitive:
    """One stroke: kind, on-curve control points, opacity, frozen initial state.

    Circles store their points in N, E, S, W order; semi-circles store
    (left diameter end, apex, right diameter end). `initial_control_points`
    and `initial_opacity` never change after construction; `pruned` is set
    by opacity gating and is permanent.
    """

    id: int
    kind: PrimitiveKind
    control_points: list[Point2]
    opacity: float
    initial_control_points: tuple[Point2, ...] = field(default=())
    initial_opacity: float = -1.0
    pruned: bool = False

    def __post_init__(self):
        expected = self.kind.control_point_count
        if len(self.control_points) != expected:
            raise DomainError(
                f"{self.kind.value} needs {expected} control points, "
                f"got {len(self.control_points)}"
            )
        if not 0.0 <= self.opacity <= 1.0:
            raise DomainError(f"opacity {self.opacity} outside [0, 1]")
        if not self.initial_control_points:
            self.initial_control_points = tuple(self.control_points)
        if self.initial_opacity < 0.0:
            self.initial_opacity = self.opacity

    def points_array(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.control_points], dtype=np.float64)

    def initial_points_array(self) -> np.ndarray:
        return np.array(
            [(p.x, p.y) for p in self.initial_control_points], dtype=np.float64
        )

    def set_points(self, pts: np.ndarray) -> None:
        """Replace current control points (initial snapshot untouched)."""
        if pts.shape != (self.kind.control_point_count, 2):
            raise DomainError(f"bad point array shape {pts.shape} for {self.kind.value}")
        if not np.all(np.isfinite(pts)):
            raise DomainError(f"non-finite control points for primitive {self.id}")
        self.control_points = [Point2(float(x), float(y)) for x, y in pts]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "control_points": [[p.x, p.y] for p in self.control_points],
            "opacity": self.opacity,
            "pruned": self.pruned,
        }

    @classmethod
    def from_record(cls, rec: dict) -> Primitive:
        return cls(
            id=int(rec["id"]),
            kind=PrimitiveKind(rec["kind"]),
            control_points=[Point2(float(x), float(y)) for x, y in rec["control_points"]],
            opacity=float(rec["opacity"]),
            pruned=bool(rec.get("pruned", False)),
        )


@dataclass(frozen=True)
class Patch:
    """One tile of the canvas grid. `end` is exclusive; `size` is the nominal
    grid step (edge patches of a non-divisible canvas may be truncated)."""

    row: int
    col: int
    start: Point2
    end: Point2
    size: int

    def __post_init__(self):
        if self.row < 0 or self.col < 0 or self.size <= 0:
            raise DomainError(f"bad patch indices/size ({self.row}, {self.col}, {self.size})")
        w = self.end.x - self.start.x
        h = self.end.y - self.start.y
        if not (0 < w <= self.size and 0 < h <= self.size):
            raise DomainError(f"patch extent ({w} x {h}) inconsistent with size {self.size}")

    @property
    def width(self) -> float:
        return self.end.x - self.start.x

    @property
    def height(self) -> float:
        return self.end.y - self.start.y

    def contains(self, p: Point2) -> bool:
        """Closed containment: boundary-touching points count as inside."""
        return self.start.x <= p.x <= self.end.x and self.start.y <= p.y <= self.end.y


@dataclass
class AffineFit:
    """Recovered homogeneous transform from initial to current points."""

    matrix: np.ndarray  # 3x3, last row [0, 0, 1]
    residual: float  # RMS point distance after applying matrix
    degenerate: bool = False


# ---------------------------------------------------------------------------
# Patch arithmetic
# ---------------------------------------------------------------------------


def patch_of(p: Point2, patch_size: int, width: float | None = None,
             height: float | None = None) -> tuple[int, int]:
    """Map a canvas point to its (row, col) patch indices.

    Row comes from y, column from x. If canvas dimensions are given,
    points outside them are rejected.
    """
    if patch_size <= 0:
        raise DomainError(f"patch_size must be positive, got {patch_size}")
    if p.x < 0 or p.y < 0:
        raise DomainError(f"point ({p.x}, {p.y}) outside canvas")
    if width is not None and p.x >= width:
        raise DomainError(f"point x={p.x} outside canvas width {width}")
    if height is not None and p.y >= height:
        raise DomainError(f"point y={p.y} outside canvas height {height}")
    return (int(p.y // patch_size), int(p.x // patch_size))


def patch_at(row: int, col: int, patch_size: int, width: float,
             height: float) -> Patch:
    """Build the patch at grid position (row, col), truncated at canvas edges."""
    x0 = col * patch_size
    y0 = row * patch_size
    if x0 >= width or y0 >= height:
        raise DomainError(f"patch ({row}, {col}) outside canvas")
    x1 = min(x0 + patch_size, width)
    y1 = min(y0 + patch_size, height)
    return Patch(row=row, col=col, start=Point2(float(x0), float(y0)),
                 end=Point2(float(x1), float(y1)), size=patch_size)


def patch_grid(width: float, height: float, patch_size: int) -> list[Patch]:
    """All patches tiling the canvas, row-major."""
    rows = int(math.ceil(height / patch_size))
    cols = int(math.ceil(width / patch_size))
    return [
        patch_at(r, c, patch_size, width, height)
        for r in range(rows)
        for c in range(cols)
    ]


# ---------------------------------------------------------------------------
# Primitive construction
# ---------------------------------------------------------------------------


def _randint(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi], both ends inclusive."""
    return int(rng.integers(lo, hi + 1))


def line_length(prim: Primitive) -> float:
    if prim.kind is not PrimitiveKind.LINE:
        raise DomainError(f"line_length applies to lines, got {prim.kind.value}")
    p1, p2 = prim.control_points
    return math.hypot(p2.x - p1.x, p2.y - p1.y)


def make_line(patch: Patch, rng: np.random.Generator, *, prim_id: int = 0,
              opacity: float = 1.0) -> Primitive:
    """Sample a line with both endpoints strictly inside the patch.

    Endpoint pairs closer than one pixel carry no usable gradient and are
    resampled.
    """
    sx, sy = int(patch.start.x), int(patch.start.y)
    ex, ey = int(patch.end.x), int(patch.end.y)
    while True:
        x1 = _randint(rng, sx, ex - 1)
        y1 = _randint(rng, sy, ey - 1)
        x2 = _randint(rng, sx, ex - 1)
        y2 = _randint(rng, sy, ey - 1)
        if math.hypot(x2 - x1, y2 - y1) > MIN_LINE_LENGTH:
            break
    return Primitive(
        id=prim_id,
        kind=PrimitiveKind.LINE,
        control_points=[Point2(float(x1), float(y1)), Point2(float(x2), float(y2))],
        opacity=opacity,
    )


def max_circle_radius(xc: float, yc: float, patch: Patch) -> float:
    """Largest radius keeping a circle centred at (xc, yc) inside the patch.

    Per-axis: distance to the nearer wall, chosen by which half of the
    patch the centre falls in; the result is the min over both axes.
    """
    sx, sy = patch.start.x, patch.start.y
    ex, ey = patch.end.x, patch.end.y
    if xc < sx + patch.width / 2:
        max_radius_x = xc - sx
    else:
        max_radius_x = ex - xc
    if yc < sy + patch.height / 2:
        max_radius_y = yc - sy
    else:
        max_radius_y = ey - yc
    return min(max_radius_x, max_radius_y)


def _sample_center_radius(patch: Patch, rng: np.random.Generator) -> tuple[int, int, int]:
    if min(patch.width, patch.height) < 4:
        raise DomainError(
            f"patch ({patch.row}, {patch.col}) too small for circles "
            f"({patch.width} x {patch.height})"
        )
    sx, sy = int(patch.start.x), int(patch.start.y)
    ex, ey = int(patch.end.x), int(patch.end.y)
    while True:
        xc = _randint(rng, sx, ex - 1)
        yc = _randint(rng, sy, ey - 1)
        max_radius = int(max_circle_radius(xc, yc, patch))
        if max_radius >= 1:
            break
    r = _randint(rng, 1, max_radius)
    return xc, yc, r


def make_circle(patch: Patch, rng: np.random.Generator, *, prim_id: int = 0,
                opacity: float = 1.0) -> Primitive:
    """Sample a circle inside the patch, stored as N, E, S, W on-curve points."""
    xc, yc, r = _sample_center_radius(patch, rng)
    pts = [
        Point2(float(xc), float(yc - r)),  # N (y grows downward)
        Point2(float(xc + r), float(yc)),  # E
        Point2(float(xc), float(yc + r)),  # S
        Point2(float(xc - r), float(yc)),  # W
    ]
    return Primitive(id=prim_id, kind=PrimitiveKind.CIRCLE, control_points=pts,
                     opacity=opacity)


def make_semicircle(patch: Patch, rng: np.random.Generator, *, prim_id: int = 0,
                    opacity: float = 1.0) -> Primitive:
    """Sample a semi-circle: diameter endpoints plus an apex in a random
    vertical direction (up or down)."""
    xc, yc, r = _sample_center_radius(patch, rng)
    up = bool(rng.integers(0, 2))
    apex_y = yc - r if up else yc + r
    pts = [
        Point2(float(xc - r), float(yc)),
        Point2(float(xc), float(apex_y)),
        Point2(float(xc + r), float(yc)),
    ]
    return Primitive(id=prim_id, kind=PrimitiveKind.SEMICIRCLE,
                     control_points=pts, opacity=opacity)


# ---------------------------------------------------------------------------
# SVG serialization
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    """Format a coordinate: integers bare, floats trimmed to 8 decimals."""
    if v == int(v):
        return str(int(v))
    return f"{v:.8f}".rstrip("0").rstrip(".")


def exact_circle_params(prim: Primitive) -> tuple[float, float, float] | None:
    """(cx, cy, r) if the 4 points still sit exactly on the N/E/S/W pattern."""
    n, e, s, w = prim.control_points
    cx = (e.x + w.x) / 2.0
    cy = (n.y + s.y) / 2.0
    r = (e.x - w.x) / 2.0
    if r <= 0:
        return None
    ideal = [(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)]
    for p, (ix, iy) in zip(prim.control_points, ideal):
        if abs(p.x - ix) > EXACT_SHAPE_TOL or abs(p.y - iy) > EXACT_SHAPE_TOL:
            return None
    return (cx, cy, r)


def exact_semicircle_params(prim: Primitive) -> tuple[float, float, float, bool] | None:
    """(cx, cy, r, is_upper) if the 3 points form an exact half circle."""
    d1, apex, d2 = prim.control_points
    if abs(d1.y - d2.y) > EXACT_SHAPE_TOL:
        return None
    cx = (d1.x + d2.x) / 2.0
    cy = (d1.y + d2.y) / 2.0
    r = (d2.x - d1.x) / 2.0
    if r <= 0 or abs(apex.x - cx) > EXACT_SHAPE_TOL:
        return None
    if abs(apex.y - (cy - r)) <= EXACT_SHAPE_TOL:
        return (cx, cy, r, True)
    if abs(apex.y - (cy + r)) <= EXACT_SHAPE_TOL:
        return (cx, cy, r, False)
    return None


def _chain_tangents_closed(pts: np.ndarray) -> np.ndarray:
    """Central-difference tangents for a closed chain of on-curve points."""
    nxt = np.roll(pts, -1, axis=0)
    prv = np.roll(pts, 1, axis=0)
    t = nxt - prv
    norm = np.linalg.norm(t, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return t / norm


def _circumcenter(a: Point2, b: Point2, c: Point2) -> tuple[float, float] | None:
    d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y))
    if abs(d) < 1e-9:
        return None
    ux = ((a.x**2 + a.y**2) * (b.y - c.y) + (b.x**2 + b.y**2) * (c.y - a.y)
          + (c.x**2 + c.y**2) * (a.y - b.y)) / d
    uy = ((a.x**2 + a.y**2) * (c.x - b.x) + (b.x**2 + b.y**2) * (a.x - c.x)
          + (c.x**2 + c.y**2) * (b.x - a.x)) / d
    return (ux, uy)


def _semicircle_tangents(pts: np.ndarray) -> np.ndarray:
    """Tangents for the open 3-point chain.

    Endpoint tangents are taken perpendicular to the circumcenter radius
    (which reproduces a true arc when the points lie on one), oriented
    along the direction of travel; nearly collinear points fall back to
    chord directions.
    """
    p0, p1, p2 = (Point2(float(x), float(y)) for x, y in pts)
    center = _circumcenter(p0, p1, p2)
    tangents = np.zeros((3, 2), dtype=np.float64)
    travel = [pts[1] - pts[0], pts[2] - pts[0], pts[2] - pts[1]]
    if center is None:
        for i, d in enumerate(travel):
            n = np.linalg.norm(d)
            tangents[i] = d / n if n > 0 else (1.0, 0.0)
        return tangents
    cx, cy = center
    for i, p in enumerate((p0, p1, p2)):
        radial = np.array([p.x - cx, p.y - cy])
        perp = np.array([-radial[1], radial[0]])
        if np.dot(perp, travel[i]) < 0:
            perp = -perp
        n = np.linalg.norm(perp)
        tangents[i] = perp / n if n > 0 else (1.0, 0.0)
    return tangents


def cubic_chain(prim: Primitive) -> list[np.ndarray]:
    """Cubic Bezier segments through the primitive's on-curve points.

    Each segment is a (4, 2) array [p0, h0, h1, p1]. Handle lengths scale
    with the segment chord so an exact circle's points reproduce the
    standard 4-arc cubic circle. Lines yield a single degenerate segment.
    """
    pts = prim.points_array()
    if prim.kind is PrimitiveKind.LINE:
        p0, p1 = pts
        return [np.array([p0, p0 + (p1 - p0) / 3.0, p0 + 2.0 * (p1 - p0) / 3.0, p1])]
    if prim.kind is PrimitiveKind.CIRCLE:
        tangents = _chain_tangents_closed(pts)
        pairs = [(i, (i + 1) % 4) for i in range(4)]
    else:
        tangents = _semicircle_tangents(pts)
        pairs = [(0, 1), (1, 2)]
    segments = []
    for i, j in pairs:
        chord = float(np.linalg.norm(pts[j] - pts[i]))
        h = HANDLE_PER_CHORD * chord
        segments.append(np.array([
            pts[i], pts[i] + h * tangents[i], pts[j] - h * tangents[j], pts[j],
        ]))
    return segments


def _cubic_d(segments: list[np.ndarray], closed: bool) -> str:
    parts = [f"M {_fmt(segments[0][0, 0])},{_fmt(segments[0][0, 1])}"]
    for seg in segments:
        parts.append(
            "C "
            + " ".join(f"{_fmt(p[0])},{_fmt(p[1])}" for p in seg[1:])
        )
    if closed:
        parts.append("Z")
    return " ".join(parts)


def svg_path(prim: Primitive) -> str:
    """SVG path data for one primitive.

    Exact circles and semi-circles use the compact arc templates; anything
    the optimizer has bent off those shapes becomes a cubic chain through
    the on-curve points.
    """
    if prim.kind is PrimitiveKind.LINE:
        p1, p2 = prim.control_points
        return f"M {_fmt(p1.x)},{_fmt(p1.y)} L {_fmt(p2.x)},{_fmt(p2.y)}"
    if prim.kind is PrimitiveKind.CIRCLE:
        params = exact_circle_params(prim)
        if params is not None:
            cx, cy, r = params
            return (
                f"M {_fmt(cx - r)},{_fmt(cy)} "
                f"a {_fmt(r)},{_fmt(r)} 0 1,1 {_fmt(2 * r)},0 "
                f"a {_fmt(r)},{_fmt(r)} 0 1,1 {_fmt(-2 * r)},0"
            )
        return _cubic_d(cubic_chain(prim), closed=True)
    params = exact_semicircle_params(prim)
    if params is not None:
        cx, cy, r, upper = params
        if upper:
            # Clockwise from the west point sweeps through the apex above.
            return f"M {_fmt(cx - r)},{_fmt(cy)} a {_fmt(r)},{_fmt(r)} 0 1,1 {_fmt(2 * r)},0"
        return f"M {_fmt(cx + r)},{_fmt(cy)} a {_fmt(r)},{_fmt(r)} 0 1,1 {_fmt(-2 * r)},0"
    return _cubic_d(cubic_chain(prim), closed=False)


def parse_path_points(d: str) -> list[Point2]:
    """Recover the on-curve control points from a path emitted by svg_path.

    The inverse of serialization for all three primitive forms; raises
    InputError for anything it does not recognize.
    """
    tokens = d.replace(",", " ").split()
    if not tokens or tokens[0] != "M":
        raise InputError(f"unsupported path (no leading M): {d!r}")
    try:
        pos = 1
        x0, y0 = float(tokens[pos]), float(tokens[pos + 1])
        pos += 2
        points = [Point2(x0, y0)]
        arcs = []
        while pos < len(tokens):
            cmd = tokens[pos]
            pos += 1
            if cmd == "L":
                points.append(Point2(float(tokens[pos]), float(tokens[pos + 1])))
                pos += 2
            elif cmd == "C":
                # two handles then the on-curve endpoint
                points.append(Point2(float(tokens[pos + 4]), float(tokens[pos + 5])))
                pos += 6
            elif cmd == "a":
                r = float(tokens[pos])
                dx = float(tokens[pos + 5])
                arcs.append((r, dx))
                pos += 7
            elif cmd in ("Z", "z"):
                break
            else:
                raise InputError(f"unsupported path command {cmd!r} in {d!r}")
    except (ValueError, IndexError) as exc:
        raise InputError(f"malformed path data: {d!r}") from exc

    if arcs:
        r, dx = arcs[0]
        if len(arcs) == 2:  # full circle starting at the west point
            cx, cy = x0 + r, y0
            return [Point2(cx, cy - r), Point2(cx + r, cy), Point2(cx, cy + r),
                    Point2(cx - r, cy)]
        if dx > 0:  # upper half, west to east
            cx = x0 + r
            return [Point2(x0, y0), Point2(cx, y0 - r), Point2(x0 + dx, y0)]
        cx = x0 - r  # lower half, east to west
        return [Point2(x0 + dx, y0), Point2(cx, y0 + r), Point2(x0, y0)]

    if len(points) > 2 and (
        abs(points[-1].x - points[0].x) < 1e-9 and abs(points[-1].y - points[0].y) < 1e-9
    ):
        points = points[:-1]  # closed chain: drop the duplicated start
    return points


# ---------------------------------------------------------------------------
# Affine recovery
# ---------------------------------------------------------------------------


def apply_affine(matrix: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homogeneous transform to an (n, 2) point array."""
    homo = np.hstack([pts, np.ones((pts.shape[0], 1))])
    return (matrix @ homo.T).T[:, :2]


def _similarity_fit(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rotation+scale+translation mapping src to dst."""
    n = src.shape[0]
    a = np.zeros((2 * n, 4))
    b = np.zeros(2 * n)
    a[0::2, 0] = src[:, 0]
    a[0::2, 1] = -src[:, 1]
    a[0::2, 2] = 1.0
    a[1::2, 0] = src[:, 1]
    a[1::2, 1] = src[:, 0]
    a[1::2, 3] = 1.0
    b[0::2] = dst[:, 0]
    b[1::2] = dst[:, 1]
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    s, t, tx, ty = sol
    return np.array([[s, -t, tx], [t, s, ty], [0.0, 0.0, 1.0]])


def fit_affine(prim: Primitive) -> AffineFit:
    """Recover the transform mapping the initial control points to the
    current ones.

    Circles (4 points) get the least-squares affine, semi-circles (3
    points) the exact affine when their initial points are affinely
    independent. Two-point lines cannot pin down 6 affine parameters, so
    they are fitted within the similarity family, which is exactly
    determined by a pair of distinct points and reduces to the identity /
    pure translation in those cases. Degenerate (collinear) initial
    configurations are flagged and also fall back to the similarity fit.
    """
    src = prim.initial_points_array()
    dst = prim.points_array()
    c = src.shape[0]
    design = np.hstack([src, np.ones((c, 1))])

    degenerate = False
    if c == 2:
        matrix = _similarity_fit(src, dst)
    else:
        rank = np.linalg.matrix_rank(design, tol=1e-9)
        if rank < 3:
            degenerate = True
            matrix = _similarity_fit(src, dst)
        else:
            coef, *_ = np.linalg.lstsq(design, dst, rcond=None)
            matrix = np.vstack([coef.T, [0.0, 0.0, 1.0]])

    mapped = apply_affine(matrix, src)
    residual = float(np.sqrt(np.mean(np.sum((mapped - dst) ** 2, axis=1))))
    return AffineFit(matrix=matrix, residual=residual, degenerate=degenerate)
