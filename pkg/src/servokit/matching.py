"""Probabilistic patch matching and its grid-anchored representation.

A score matrix holds, for every patch of the current view, a distribution
over the patches of the desired view. This module provides the softmax
correlation that builds one from features, the explicit (weighted-mean)
reduction, mutual-confidence scoring, image gravity centers, and the
translation-equivariant transfer of score mass onto a fixed displacement
anchor grid.

Patch coordinates are in patch units on the coarse grid, ordered (x, y)
with row-major flattening (index = y * grid_width + x). Pixel conversion
happens only at reporting boundaries.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, IoFailure, SchemaMismatch, ZeroConfidence

_EMPTY_ANCHOR_EPS = 1e-12


def grid_coords(grid_height: int, grid_width: int) -> np.ndarray:
    """Patch center coordinates (N, 2) as (x, y) pairs in row-major order."""
    ys, xs = np.mgrid[0:grid_height, 0:grid_width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


@dataclass(frozen=True, eq=False)
class PatchFeatureMap:
    """Per-patch feature vectors on a regular coarse grid."""

    grid_height: int
    grid_width: int
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        if f.ndim != 2 or f.shape[0] != self.grid_height * self.grid_width:
            raise ValueError("features must be (grid_height * grid_width, C)")
        if f.shape[1] < 1:
            raise ValueError("feature dimension must be at least 1")
        object.__setattr__(self, "features", f)

    def coords(self) -> np.ndarray:
        return grid_coords(self.grid_height, self.grid_width)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Row-stochastic matching distribution between two patch grids."""

    values: np.ndarray
    source_shape: tuple  # (grid_height, grid_width) of the current view
    target_shape: tuple  # (grid_height, grid_width) of the desired view

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        hs, ws = self.source_shape
        ht, wt = self.target_shape
        if v.shape != (hs * ws, ht * wt):
            raise ValueError("score matrix shape does not match the grid dims")
        if np.any(v < 0):
            raise ValueError("score entries must be nonnegative")
        if np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("score rows must sum to one")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "source_shape", (int(hs), int(ws)))
        object.__setattr__(self, "target_shape", (int(ht), int(wt)))


@dataclass(frozen=True, eq=False)
class ExpectedMatch:
    """Explicit correspondences from the weighted-mean reduction of a score matrix."""

    source: np.ndarray   # (N, 2) current patch coordinates
    matched: np.ndarray  # (N, 2) expected desired patch coordinates

    @property
    def flow(self) -> np.ndarray:
        return self.matched - self.source


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Per-current-patch mutual matching confidence in [0, 1]."""

    values: np.ndarray
    grid_shape: tuple


@dataclass(frozen=True, eq=False)
class ProbMatchTensor:
    """Score mass transferred onto a fixed grid of displacement anchors.

    The channel dimension is anchors_per_axis squared regardless of the patch
    grid size, and shifting both matched patch sets by an integer offset
    shifts this tensor spatially without permuting channels.
    """

    values: np.ndarray       # (grid_height, grid_width, K * K)
    anchors_per_axis: int
    grid_size: tuple         # kernel normalization lengths (gx, gy), patch units

    @property
    def anchor_positions(self) -> tuple:
        h, w = self.values.shape[:2]
        k = self.anchors_per_axis
        return (np.linspace(-w, w, k), np.linspace(-h, h, k))


def score_matrix(features_current: PatchFeatureMap,
                 features_desired: PatchFeatureMap) -> ScoreMatrix:
    """Row-wise softmax of the scaled feature correlation."""
    fc = features_current.features
    fd = features_desired.features
    if fc.shape[1] != fd.shape[1]:
        raise DimensionMismatch("feature dimensions differ between the two maps")
    logits = fc @ fd.T / np.sqrt(fc.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    expv = np.exp(logits)
    values = expv / expv.sum(axis=1, keepdims=True)
    return ScoreMatrix(values,
                       (features_current.grid_height, features_current.grid_width),
                       (features_desired.grid_height, features_desired.grid_width))


def expected_match(score: ScoreMatrix) -> ExpectedMatch:
    """Per-patch expected desired coordinate (probability-weighted coordinate sum)."""
    target = grid_coords(*score.target_shape)
    source = grid_coords(*score.source_shape)
    return ExpectedMatch(source=source, matched=score.values @ target)


def dual_softmax_confidence(score_cd: ScoreMatrix, score_dc: ScoreMatrix) -> ConfidenceMap:
    """Mutual agreement of forward and backward matching distributions.

    The backward matrix is indexed through its transpose so both factors
    address the same (current, desired) pair; a mutually consistent one-hot
    match scores exactly one.
    """
    if score_dc.values.shape != score_cd.values.shape[::-1]:
        raise DimensionMismatch("backward score matrix must have the transposed shape")
    values = np.sum(score_cd.values * score_dc.values.T, axis=1)
    return ConfidenceMap(values, score_cd.source_shape)


def gravity_centers(confidence: ConfidenceMap, match: ExpectedMatch) -> tuple[np.ndarray, np.ndarray]:
    """Confidence-weighted mean patch coordinate of each view.

    The current center weights the current patch coordinates; the desired
    center weights their flow targets with the same weights.
    """
    c = confidence.values
    total = c.sum()
    if total <= 1e-9:
        raise ZeroConfidence("total confidence too small to normalize")
    cur = (c[:, None] * match.source).sum(axis=0) / total
    des = (c[:, None] * match.matched).sum(axis=0) / total
    return cur, des


def quadratic_bspline(a: np.ndarray) -> np.ndarray:
    """One-dimensional quadratic B-spline weight, supported on |a| < 1.5."""
    x = np.abs(np.asarray(a, dtype=float))
    return np.where(x < 0.5, 0.75 - x * x,
                    np.where(x < 1.5, 0.5 * (1.5 - x) ** 2, 0.0))


def bspline_kernel(offset: np.ndarray) -> np.ndarray:
    """Separable 2D quadratic B-spline weight of a grid-normalized offset (..., 2)."""
    w = quadratic_bspline(offset)
    return w[..., 0] * w[..., 1]


def particles_to_grid(score: ScoreMatrix, anchors_per_axis: int = 16) -> ProbMatchTensor:
    """Transfer score mass onto displacement anchors with the B-spline kernel.

    Every entry of the score matrix is treated as a particle located at the
    displacement between its desired and current patch, carrying the score as
    its quantity. Each anchor averages the quantities of the particles whose
    displacement falls within 1.5 kernel lengths per axis, weighting them by
    the B-spline kernel; anchors with no particles in range are exactly zero.

    Because the particles of one current patch occupy a contiguous block of
    the integer displacement lattice, the transfer is evaluated per patch as
    two small separable kernel contractions. This is the scatter of every
    particle onto its in-range anchor stencil, just grouped by displacement,
    and matches the direct per-anchor gather to rounding error.
    """
    k = int(anchors_per_axis)
    if k < 2:
        raise ValueError("need at least two anchors per axis")
    if score.source_shape != score.target_shape:
        raise DimensionMismatch("particle transfer requires equal source and target grids")
    h, w = score.source_shape
    gx = 2.0 * w / k
    gy = 2.0 * h / k
    anchors_x = np.linspace(-w, w, k)
    anchors_y = np.linspace(-h, h, k)
    # Kernel weight of every integer displacement against every anchor, per axis
    disp_x = np.arange(-(w - 1), w, dtype=float)
    disp_y = np.arange(-(h - 1), h, dtype=float)
    wx = quadratic_bspline((disp_x[:, None] - anchors_x[None, :]) / gx)  # (2w-1, k)
    wy = quadratic_bspline((disp_y[:, None] - anchors_y[None, :]) / gy)  # (2h-1, k)
    rows = score.values.reshape(h, w, h, w)
    out = np.zeros((h, w, k * k))
    for py in range(h):
        wy_slice = wy[h - 1 - py: 2 * h - 1 - py]  # rows of the displacement block
        den_y = wy_slice.sum(axis=0)
        for px in range(w):
            wx_slice = wx[w - 1 - px: 2 * w - 1 - px]
            num = wy_slice.T @ rows[py, px] @ wx_slice        # (k, k), (ay, ax)
            den = np.outer(den_y, wx_slice.sum(axis=0))
            cell = np.where(den > _EMPTY_ANCHOR_EPS, num / np.where(den > 0, den, 1.0), 0.0)
            out[py, px] = cell.ravel()
    return ProbMatchTensor(out, k, (gx, gy))


# ---------------------------------------------------------------------------
# Flat binary containers (little-endian float32, fixed header) for replaying
# score matrices and transferred tensors in benchmarks. The layout is
# documented in schemas/tensor_binary.md.

_MAGIC = b"SVKT"
_VERSION = 1
_KIND_SCORE = 1
_KIND_P2G = 2
_HEADER = struct.Struct("<4sHHIIII")


def _write_container(path, kind: int, dims: tuple, payload: np.ndarray) -> None:
    header = _HEADER.pack(_MAGIC, _VERSION, kind, *dims)
    data = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_container(path, kind: int) -> tuple[tuple, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise SchemaMismatch("file too short for a tensor container header")
    magic, version, file_kind, *dims = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise SchemaMismatch("not a tensor container (bad magic or version)")
    if file_kind != kind:
        raise SchemaMismatch(f"container holds kind {file_kind}, expected {kind}")
    payload = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(float)
    return tuple(dims), payload


def write_score_matrix(path, score: ScoreMatrix) -> None:
    hs, ws = score.source_shape
    ht, wt = score.target_shape
    _write_container(path, _KIND_SCORE, (hs, ws, ht, wt), score.values)


def read_score_matrix(path) -> ScoreMatrix:
    dims, payload = _read_container(path, _KIND_SCORE)
    hs, ws, ht, wt = dims
    expected = hs * ws * ht * wt
    if payload.shape[0] != expected:
        raise SchemaMismatch("payload size does not match header dims")
    values = payload.reshape(hs * ws, ht * wt)
    # float32 storage can leave rows a hair off stochastic; renormalize
    values = values / values.sum(axis=1, keepdims=True)
    return ScoreMatrix(values, (hs, ws), (ht, wt))


def write_probmatch(path, tensor: ProbMatchTensor) -> None:
    h, w, _ = tensor.values.shape
    _write_container(path, _KIND_P2G, (h, w, tensor.anchors_per_axis, 0), tensor.values)


def read_probmatch(path) -> ProbMatchTensor:
    dims, payload = _read_container(path, _KIND_P2G)
    h, w, k, _ = dims
    if payload.shape[0] != h * w * k * k:
        raise SchemaMismatch("payload size does not match header dims")
    values = payload.reshape(h, w, k * k)
    return ProbMatchTensor(values, k, (2.0 * w / k, 2.0 * h / k))
