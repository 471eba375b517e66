"""Scalp-topography images from multichannel EEG.

Electrodes are projected to the plane with an azimuthal equidistant
projection centred on the vertex, snapped onto a 32x32 pixel grid, and every
time sample is interpolated over the electrode convex hull with a
Clough-Tocher piecewise cubic. Pixels outside the hull are held at zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .signal_prep import ConfigurationError

GRID_SIZE = (32, 32)
MONTAGE_FILE = "montage_1020_32.txt"


def load_montage_table(path=None) -> tuple[list[str], np.ndarray]:
    """Read a ``name x y z`` table; ``#`` starts a comment."""
    if path is None:
        text = resources.files("eegsal.data").joinpath(MONTAGE_FILE).read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    names, xyz = [], []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"bad montage row: {line!r}")
        names.append(parts[0])
        xyz.append([float(v) for v in parts[1:]])
    return names, np.asarray(xyz)


def project_electrodes_azimuthal(positions_3d: np.ndarray) -> np.ndarray:
    """Azimuthal equidistant projection about the +z pole.

    A point at polar angle theta and azimuth phi lands on
    ``(theta cos phi, theta sin phi)``.
    """
    p = np.atleast_2d(np.asarray(positions_3d, dtype=float))
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    theta = np.arccos(np.clip(p[:, 2], -1.0, 1.0))
    phi = np.arctan2(p[:, 1], p[:, 0])
    if np.any(np.isclose(theta, np.pi)):
        warnings.warn("antipodal electrode: projection direction is arbitrary", stacklevel=2)
    return np.column_stack([theta * np.cos(phi), theta * np.sin(phi)])


class CloughTocherOperator:
    """Clough-Tocher macro-element interpolation as a fixed linear map.

    Each Delaunay triangle is split at its centroid into three cubic Bezier
    patches joined with C1 continuity; across triangle edges the normal
    derivative is linear, so neighbouring elements meet C1 as well. For
    given nodes and grid points the result is linear in the node values and
    node gradients: ``grid = values_op @ f + grad_op @ [gx; gy]``.
    """

    def __init__(self, nodes, simplices, points):
        nodes = np.asarray(nodes, dtype=float)
        points = np.asarray(points, dtype=float)
        self.nodes = nodes
        self.simplices = np.asarray(simplices)
        n = len(nodes)
        self.n_nodes = n
        # coefficient vectors over the unknowns [f (n), gx (n), gy (n)]
        basis = np.eye(3 * n)
        f, gx, gy = basis[:n], basis[n:2 * n], basis[2 * n:]
        ops = np.zeros((len(points), 3 * n))
        simplex_of = _find_simplex(nodes, self.simplices, points)
        self.inside = simplex_of >= 0
        for s_idx, simplex in enumerate(self.simplices):
            sel = np.flatnonzero(simplex_of == s_idx)
            if sel.size == 0:
                continue
            ops[sel] = _ct_element(nodes[simplex], f[simplex], gx[simplex], gy[simplex],
                                   points[sel])
        self.values_op = ops[:, :n]
        self.grad_op = ops[:, n:]

    def __call__(self, values, grads):
        """``values`` is [n, ...]; ``grads`` is [n, 2, ...]."""
        g = np.concatenate([grads[:, 0], grads[:, 1]], axis=0)
        flat_v = values.reshape(self.n_nodes, -1)
        flat_g = g.reshape(2 * self.n_nodes, -1)
        out = self.values_op @ flat_v + self.grad_op @ flat_g
        return out.reshape((len(self.values_op),) + values.shape[1:])


def _find_simplex(nodes, simplices, points, eps=1e-9):
    out = np.full(len(points), -1)
    for s_idx, simplex in enumerate(simplices):
        lam = _barycentric(nodes[simplex], points)
        hit = (out < 0) & np.all(lam >= -eps, axis=1)
        out[hit] = s_idx
    return out


def _barycentric(tri_xy, points):
    a, b, c = tri_xy
    t = np.column_stack([b - a, c - a])
    lb_lc = np.linalg.solve(t, (points - a).T).T
    return np.column_stack([1.0 - lb_lc.sum(axis=1), lb_lc])


def _ct_element(v, f, gx, gy, points):
    """Evaluation weights of one Clough-Tocher triangle at ``points``.

    ``v`` holds the 3 vertex coordinates; ``f``, ``gx``, ``gy`` are the
    vertex value/gradient coefficient rows (anything supporting + and *).
    """
    centroid = v.mean(axis=0)

    def toward(i, target):
        d = (target - v[i]) / 3.0
        return f[i] + d[0] * gx[i] + d[1] * gy[i]

    # edge control points b[i][j]: next to vertex i on edge i-j
    edge = {(i, j): toward(i, v[j]) for i in range(3) for j in range(3) if i != j}
    spoke = [toward(i, centroid) for i in range(3)]
    inner = {}
    for i, j in ((0, 1), (1, 2), (2, 0)):
        # direction normal to edge i-j, pointing inside, in barycentrics of (vi, vj, c)
        e = v[j] - v[i]
        normal = np.array([-e[1], e[0]])
        if normal @ (centroid - v[i]) < 0:
            normal = -normal
        ub, uc = np.linalg.solve(np.column_stack([e, centroid - v[i]]), normal)
        ua = -ub - uc
        d0 = ua * f[i] + ub * edge[i, j] + uc * spoke[i]
        d2 = ua * edge[j, i] + ub * f[j] + uc * spoke[j]
        # normal derivative linear along the edge
        inner[i, j] = ((d0 + d2) / 2.0 - ua * edge[i, j] - ub * edge[j, i]) / uc
        inner[j, i] = inner[i, j]
    k_of = {(0, 1): 2, (1, 2): 0, (2, 0): 1}
    mid = [None] * 3
    for i in range(3):
        j, k = [m for m in range(3) if m != i]
        mid[i] = (spoke[i] + inner[i, j] + inner[i, k]) / 3.0
    center = (mid[0] + mid[1] + mid[2]) / 3.0

    lam = _barycentric(v, points)
    out = np.zeros((len(points), np.shape(f)[1]))
    sub = np.argmin(lam, axis=1)  # opposite vertex of the containing sub-triangle
    for (i, j), k in k_of.items():
        sel = sub == k
        if not np.any(sel):
            continue
        a = lam[sel, i] - lam[sel, k]
        b = lam[sel, j] - lam[sel, k]
        c = 3.0 * lam[sel, k]
        terms = [
            (a ** 3, f[i]), (b ** 3, f[j]), (c ** 3, center),
            (3 * a * a * b, edge[i, j]), (3 * a * b * b, edge[j, i]),
            (3 * a * a * c, spoke[i]), (3 * b * b * c, spoke[j]),
            (3 * a * c * c, mid[i]), (3 * b * c * c, mid[j]),
            (6 * a * b * c, inner[i, j]),
        ]
        out[sel] = sum(w[:, None] * ctrl[None, :] for w, ctrl in terms)
    return out


def estimate_node_gradients(nodes, neighbours, values):
    """Least-squares plane slopes per node, zeroed at strict local extrema.

    Zero slope at extrema (the PCHIP rule) keeps peaks and troughs at the
    electrodes instead of overshooting between them.
    """
    values = np.asarray(values, dtype=float)
    flat = values.reshape(len(nodes), -1)
    grads = np.zeros((len(nodes), 2, flat.shape[1]))
    for i, nb in enumerate(neighbours):
        d = nodes[nb] - nodes[i]
        w = 1.0 / np.sum(d * d, axis=1)
        lhs = (d * w[:, None]).T @ d
        rhs = (d * w[:, None]).T @ (flat[nb] - flat[i])
        g = np.linalg.solve(lhs, rhs)
        extremum = np.all(flat[nb] < flat[i], axis=0) | np.all(flat[nb] > flat[i], axis=0)
        g[:, extremum] = 0.0
        grads[i] = g
    return grads.reshape((len(nodes), 2) + values.shape[1:])


@dataclass(frozen=True, eq=False)
class MontageGeometry:
    electrode_names: tuple
    positions_3d: np.ndarray
    positions_2d: np.ndarray  # projected plane coordinates
    grid_size: tuple = GRID_SIZE
    pixels: np.ndarray = field(init=False)  # (row, col) per electrode
    zero_mask: np.ndarray = field(init=False)  # True outside the hull
    _op: CloughTocherOperator = field(init=False, repr=False)
    _neighbours: list = field(init=False, repr=False)

    def __post_init__(self):
        names = tuple(self.electrode_names)
        if len(set(names)) != len(names):
            raise ConfigurationError("electrode names must be unique")
        object.__setattr__(self, "electrode_names", names)
        norms = np.linalg.norm(self.positions_3d, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ConfigurationError("3-D electrode positions must lie on the unit sphere")
        pixels = _snap_to_grid(self.positions_2d, self.grid_size)
        if len({tuple(p) for p in pixels}) != len(pixels):
            raise ConfigurationError("two electrodes map to the same pixel; enlarge the grid")
        nodes = pixels[:, ::-1].astype(float)  # (x=col, y=row)
        # triangulate in a canonical node order so ties between co-circular
        # grid points never depend on the electrode order
        order = np.lexsort((pixels[:, 1], pixels[:, 0]))
        try:
            tri = Delaunay(nodes[order])
        except QhullError as exc:
            raise ConfigurationError(f"degenerate electrode geometry: {exc}") from None
        simplices = order[tri.simplices]
        indptr, indices = tri.vertex_neighbor_vertices
        neighbours = [order[indices[indptr[k]:indptr[k + 1]]] for k in range(len(order))]
        by_node = [None] * len(order)
        for k, node in enumerate(order):
            by_node[node] = neighbours[k]
        h, w = self.grid_size
        rr, cc = np.mgrid[0:h, 0:w]
        op = CloughTocherOperator(nodes, simplices, np.column_stack([cc.ravel(), rr.ravel()]))
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "zero_mask", ~op.inside.reshape(h, w))
        object.__setattr__(self, "_op", op)
        object.__setattr__(self, "_neighbours", by_node)

    @classmethod
    def from_positions(cls, names, positions_3d, grid_size=GRID_SIZE):
        positions_3d = np.asarray(positions_3d, dtype=float)
        return cls(tuple(names), positions_3d, project_electrodes_azimuthal(positions_3d),
                   tuple(grid_size))

    @classmethod
    def standard(cls, path=None):
        names, xyz = load_montage_table(path)
        return cls.from_positions(names, xyz)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_names)

    @property
    def nodes(self) -> np.ndarray:
        return self._op.nodes

    def reorder(self, names) -> MontageGeometry:
        """Geometry with electrodes in the order of ``names``."""
        idx = [self.electrode_names.index(n) for n in names]
        return MontageGeometry.from_positions(names, self.positions_3d[idx], self.grid_size)


def _snap_to_grid(xy: np.ndarray, grid_size) -> np.ndarray:
    # the electrode bounding box fills the central (h-2)x(w-2) block,
    # aspect ratio kept; y grows toward the nose, so rows are flipped
    h, w = grid_size
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = float(np.max(hi - lo))
    if span <= 0:
        raise ConfigurationError("degenerate electrode geometry: all electrodes coincide")
    scale = min(h - 3, w - 3) / span
    center = (lo + hi) / 2.0
    col = (w - 1) / 2.0 + (xy[:, 0] - center[0]) * scale
    row = (h - 1) / 2.0 - (xy[:, 1] - center[1]) * scale
    return np.column_stack([np.rint(row), np.rint(col)]).astype(int)


def rasterize_frame(values, geometry: MontageGeometry) -> np.ndarray:
    """Interpolate one scalar per electrode (or a stack of them) onto the grid.

    ``values`` is ``[n_electrodes]`` or ``[n_electrodes, n_frames]``; the
    result is ``[h, w]`` or ``[n_frames, h, w]``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != geometry.n_electrodes:
        raise ValueError(f"expected {geometry.n_electrodes} electrode values, got {values.shape[0]}")
    grads = estimate_node_gradients(geometry.nodes, geometry._neighbours, values)
    flat = geometry._op(values, grads)  # [h*w, ...]
    flat[geometry.zero_mask.ravel()] = 0.0
    out = flat.reshape(geometry.grid_size + values.shape[1:])
    return np.moveaxis(out, (0, 1), (-2, -1))


@dataclass
class EEGImage:
    frames: np.ndarray  # [n_frames, h, w]
    zero_mask: np.ndarray  # [h, w], True where no electrode coverage
    trial_id: str = ""


def build_eeg_image(trial_eeg: np.ndarray, geometry: MontageGeometry, trial_id: str = "") -> EEGImage:
    """Rasterize every row of a ``[n_frames, n_electrodes]`` trial."""
    trial_eeg = np.asarray(trial_eeg, dtype=np.float64)
    if trial_eeg.ndim != 2 or trial_eeg.shape[1] != geometry.n_electrodes:
        raise ValueError(
            f"trial shape {trial_eeg.shape} does not match {geometry.n_electrodes} electrodes"
        )
    frames = rasterize_frame(trial_eeg.T, geometry).astype(np.float32)
    return EEGImage(frames, geometry.zero_mask.copy(), trial_id)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def apply(self, frames, zero_mask):
        out = (np.asarray(frames, dtype=np.float32) - self.mean) / self.std
        out[..., zero_mask] = 0.0
        return out

    def to_dict(self):
        return {"mean": float(self.mean), "std": float(self.std)}


def fit_norm_stats(frames: np.ndarray, zero_mask: np.ndarray) -> NormStats:
    """Mean and population std over unmasked pixels of ``[..., h, w]`` frames."""
    vals = np.asarray(frames)[..., ~zero_mask].astype(np.float64)
    if vals.size == 0:
        raise ValueError("no unmasked pixels to normalize")
    std = float(vals.std())
    if not std > 0:
        raise ValueError("zero variance over unmasked pixels: degenerate dataset")
    return NormStats(float(vals.mean()), std)


def normalize_dataset(images: list[EEGImage], train_ids=None) -> tuple[list[EEGImage], NormStats]:
    """Z-normalize with statistics from the training images only.

    ``train_ids`` selects the training split by trial id; by default every
    image is treated as training data.
    """
    if not images:
        raise ValueError("normalize_dataset needs at least one image")
    train = images if train_ids is None else [im for im in images if im.trial_id in set(train_ids)]
    if not train:
        raise ValueError("training split is empty")
    mask = train[0].zero_mask
    stats = fit_norm_stats(np.stack([im.frames for im in train]), mask)
    out = [EEGImage(stats.apply(im.frames, im.zero_mask), im.zero_mask, im.trial_id) for im in images]
    return out, stats


def add_training_noise(img: EEGImage, std: float = 0.25, rng=None) -> EEGImage:
    if std < 0:
        raise ConfigurationError("noise std must be non-negative")
    rng = np.random.default_rng(rng)
    noise = rng.normal(0.0, std, size=img.frames.shape).astype(img.frames.dtype)
    frames = img.frames + noise
    frames[..., img.zero_mask] = 0.0
    return EEGImage(frames, img.zero_mask, img.trial_id)


def check_zero_regions(img: EEGImage) -> bool:
    return bool(np.all(img.frames[..., img.zero_mask] == 0))
