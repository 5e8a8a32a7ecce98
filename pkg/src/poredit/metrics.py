"""Validation stack: porosity, two-point correlation, lineal path, surface
area, Euler characteristic with morphological cleaning, connectivity, Otsu
binarization, and nearest-neighbor novelty.

Two S2 estimators are exposed on purpose: the FFT form uses the periodic
convention (analysis path); the shift form averages over the non-wrapping
overlap region (the differentiable loss-path definition lives in training,
this one matches it numerically on plain arrays).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# 6-connectivity (face neighbors): what permits flow, matching the LBM stencil.
STRUCT_6 = ndimage.generate_binary_structure(3, 1)

CLEAN_MIN_VOLUME = 34  # isolated pore clusters below this voxel count are noise


def porosity(v: np.ndarray) -> float:
    return float(np.asarray(v, dtype=np.float64).mean())


# ---------------------------------------------------------------------------
# two-point correlation


def s2_radial(v: np.ndarray, r_max: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Autocorrelation of the pore indicator via FFT (periodic convention),
    radially binned with 1-voxel bins. Returns (r, S2(r))."""
    ind = np.asarray(v, dtype=np.float64)
    n = ind.size
    ft = np.fft.fftn(ind)
    auto = np.fft.ifftn(ft * np.conj(ft)).real / n
    dims = ind.shape
    # minimum-image lag distance per FFT bin
    axes = [np.minimum(np.arange(s), s - np.arange(s)) for s in dims]
    dd, hh, ww = np.meshgrid(*axes, indexing="ij", sparse=True)
    dist = np.sqrt(dd.astype(np.float64) ** 2 + hh**2 + ww**2)
    bins = np.rint(dist).astype(np.int64)
    if r_max is None:
        r_max = min(dims) // 2
    sums = np.bincount(bins.ravel(), weights=auto.ravel(), minlength=r_max + 1)
    counts = np.bincount(bins.ravel(), minlength=r_max + 1)
    r = np.arange(r_max + 1)
    return r, sums[: r_max + 1] / counts[: r_max + 1]


def s2_shift(p: np.ndarray, r: int, axis: int) -> float:
    """Mean of P(x)P(x+r) over the non-wrapping overlap region along `axis`."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= r < p.shape[axis]:
        raise ValueError(f"lag {r} out of range for axis extent {p.shape[axis]}")
    if r == 0:
        return float((p * p).mean())
    lead = [slice(None)] * p.ndim
    trail = [slice(None)] * p.ndim
    lead[axis] = slice(0, p.shape[axis] - r)
    trail[axis] = slice(r, None)
    return float((p[tuple(lead)] * p[tuple(trail)]).mean())


def s2_axis_averaged(p: np.ndarray, lags) -> np.ndarray:
    """Shift-form S2 averaged over the three Cartesian axes at each lag."""
    return np.array([np.mean([s2_shift(p, int(r), ax) for ax in range(3)]) for r in lags])


def s2_slope_surface(v: np.ndarray) -> dict:
    """Specific surface area two ways: -4 * dS2/dr at r=0 (one-voxel forward
    difference of the axis-averaged shift-form curve, the Debye estimator)
    and a direct pore/solid face count (digital surface; ~3/2 of the Debye
    value for smooth isotropic interfaces)."""
    s2 = s2_axis_averaged(v, [0, 1])
    slope_sv = -4.0 * (s2[1] - s2[0])
    ind = np.asarray(v, dtype=np.int8)
    faces = 0
    for ax in range(3):
        a = ind.take(range(ind.shape[ax] - 1), axis=ax)
        b = ind.take(range(1, ind.shape[ax]), axis=ax)
        faces += int(np.count_nonzero(a != b))
    return {"sv_slope": float(slope_sv), "sv_face_count": faces / ind.size}


# ---------------------------------------------------------------------------
# lineal path


def lineal_path(v: np.ndarray, axis: int, r_max: int | None = None) -> np.ndarray:
    """L(r) = probability a straight (r+1)-voxel segment along `axis` lies
    entirely in pore, via run-length decomposition (runs of length k
    contribute k-r segments)."""
    ind = np.asarray(v, dtype=np.uint8)
    n = ind.shape[axis]
    if r_max is None:
        r_max = n - 1
    moved = np.moveaxis(ind, axis, -1).reshape(-1, n)
    # run lengths per line: pad with zeros, diff marks run boundaries
    padded = np.zeros((moved.shape[0], n + 2), dtype=np.int8)
    padded[:, 1:-1] = moved
    diff = np.diff(padded, axis=1)
    starts = np.argwhere(diff == 1)
    ends = np.argwhere(diff == -1)
    run_lengths = ends[:, 1] - starts[:, 1]
    hist = np.bincount(run_lengths, minlength=n + 1)
    lengths = np.arange(n + 1)
    curve = np.empty(r_max + 1)
    n_lines = moved.shape[0]
    for r in range(r_max + 1):
        contrib = np.maximum(lengths - r, 0) * hist
        valid = (n - r) * n_lines
        curve[r] = contrib.sum() / valid
    return curve


# ---------------------------------------------------------------------------
# topology


def clean_isolated(v: np.ndarray, min_volume: int = CLEAN_MIN_VOLUME) -> tuple[np.ndarray, int]:
    """Remove 6-connected pore clusters with fewer than `min_volume` voxels.

    Returns (cleaned volume, number of voxels removed).
    """
    ind = np.asarray(v, dtype=np.uint8)
    labels, n = ndimage.label(ind, structure=STRUCT_6)
    if n == 0:
        return ind.copy(), 0
    counts = np.bincount(labels.ravel())
    small = np.flatnonzero(counts < min_volume)
    small = small[small != 0]
    if small.size == 0:
        return ind.copy(), 0
    kill = np.isin(labels, small)
    out = ind.copy()
    out[kill] = 0
    return out, int(kill.sum())


def euler_characteristic(v: np.ndarray) -> int:
    """Euler characteristic chi = V - E + F - C of the cubical complex formed
    by the union of unit cubes of pore voxels."""
    ind = np.asarray(v, dtype=bool)
    c = int(ind.sum())

    def count_or(shifts: list[tuple[int, int, int]]) -> int:
        # pad by 1 so every cell of the complex is interior to the grid
        padded = np.pad(ind, 1)
        acc = np.zeros_like(padded)
        for dz, dy, dx in shifts:
            acc |= np.roll(padded, (dz, dy, dx), axis=(0, 1, 2))
        return int(acc.sum())

    # faces: shared by up to 2 voxels along one axis
    f = 0
    for ax in range(3):
        s0 = [0, 0, 0]
        s1 = [0, 0, 0]
        s1[ax] = 1
        f += count_or([tuple(s0), tuple(s1)])
    # edges: shared by up to 4 voxels in the orthogonal plane
    e = 0
    for ax in range(3):
        others = [a for a in range(3) if a != ax]
        shifts = []
        for da in (0, 1):
            for db in (0, 1):
                s = [0, 0, 0]
                s[others[0]] = da
                s[others[1]] = db
                shifts.append(tuple(s))
        e += count_or(shifts)
    # vertices: shared by up to 8 voxels
    shifts = [(dz, dy, dx) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]
    vtx = count_or(shifts)
    return vtx - e + f - c


def connectivity_fraction(v: np.ndarray) -> float:
    """|largest 6-connected pore component| / |pore|; 0 with a warning if the
    pore phase is empty."""
    ind = np.asarray(v, dtype=np.uint8)
    total = int(ind.sum())
    if total == 0:
        warnings.warn("connectivity_fraction: empty pore phase", stacklevel=2)
        return 0.0
    labels, n = ndimage.label(ind, structure=STRUCT_6)
    counts = np.bincount(labels.ravel())
    return float(counts[1:].max() / total)


# ---------------------------------------------------------------------------
# binarization and novelty


def otsu_threshold(fieldvals: np.ndarray, bins: int = 256) -> tuple[np.ndarray, float]:
    """Binarize a real field with Otsu's method on a 256-bin histogram.

    Returns (binary volume, threshold value). Threshold maximizes
    inter-class variance; ties resolve to the lowest threshold. A constant
    field yields all-solid with a warning.
    """
    x = np.asarray(fieldvals, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("otsu_threshold: field contains non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        warnings.warn("otsu_threshold: constant field, returning all-solid", stacklevel=2)
        return np.zeros(x.shape, dtype=np.uint8), lo
    hist, edges = np.histogram(x, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / hist.sum()
    omega = np.cumsum(p)
    centers = (edges[:-1] + edges[1:]) / 2
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b = np.nan_to_num(sigma_b[:-1], nan=-1.0, posinf=-1.0)
    k = int(np.argmax(sigma_b))  # first max -> lowest threshold on ties
    thr = float(edges[k + 1])
    binary = (x > thr).astype(np.uint8)
    return binary, thr


def novelty_dmin(gen: np.ndarray, training: list[np.ndarray]) -> float:
    """min over the training set of the mean absolute voxel difference."""
    g = np.asarray(gen, dtype=np.float64)
    if not training:
        raise ValueError("novelty_dmin: empty training set")
    best = np.inf
    for ref in training:
        ref = np.asarray(ref, dtype=np.float64)
        if ref.shape != g.shape:
            raise ValueError(f"novelty_dmin: dim mismatch {ref.shape} vs {g.shape}")
        best = min(best, float(np.abs(g - ref).mean()))
    return best


# ---------------------------------------------------------------------------
# aggregate report


@dataclass
class MetricsReport:
    porosity: float
    s2_r: list = field(default_factory=list)
    s2_radial: list = field(default_factory=list)
    s2_axis_lags: list = field(default_factory=list)
    s2_axis: list = field(default_factory=list)
    lineal_r: list = field(default_factory=list)
    lineal: list = field(default_factory=list)
    sv_slope: float = 0.0
    sv_face_count: float = 0.0
    euler_chi: int = 0
    largest_cluster_fraction: float = 0.0
    cleaned_voxel_count: int = 0

    def to_dict(self) -> dict:
        return {
            "porosity": self.porosity,
            "s2_radial": {"r": list(map(int, self.s2_r)), "value": list(map(float, self.s2_radial))},
            "s2_axis": {"r": list(map(int, self.s2_axis_lags)), "value": list(map(float, self.s2_axis))},
            "lineal_path": {"r": list(map(int, self.lineal_r)), "value": list(map(float, self.lineal))},
            "specific_surface": {"slope": self.sv_slope, "face_count": self.sv_face_count},
            "euler_chi": int(self.euler_chi),
            "largest_cluster_fraction": self.largest_cluster_fraction,
            "cleaned_voxel_count": int(self.cleaned_voxel_count),
        }


def analyze_volume(v: np.ndarray, clean: bool = False, lags=(8, 16, 32, 64, 96, 128)) -> MetricsReport:
    v = np.asarray(v, dtype=np.uint8)
    removed = 0
    if clean:
        v, removed = clean_isolated(v)
    r, s2 = s2_radial(v)
    edge = min(v.shape)
    axis_lags = [int(x) for x in lags if x < edge]
    s2a = s2_axis_averaged(v, axis_lags)
    lmax = min(edge - 1, 64)
    lin = lineal_path(v, axis=0, r_max=lmax)
    surf = s2_slope_surface(v)
    return MetricsReport(
        porosity=porosity(v),
        s2_r=list(r),
        s2_radial=list(s2),
        s2_axis_lags=axis_lags,
        s2_axis=list(s2a),
        lineal_r=list(range(lmax + 1)),
        lineal=list(lin),
        sv_slope=surf["sv_slope"],
        sv_face_count=surf["sv_face_count"],
        euler_chi=euler_characteristic(v),
        largest_cluster_fraction=connectivity_fraction(v) if v.sum() else 0.0,
        cleaned_voxel_count=removed,
    )
