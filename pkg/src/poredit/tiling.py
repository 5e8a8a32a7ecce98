"""Tiled reverse sampling for volumes larger than the model's native shape.

Each reverse step denoises every tile deterministically, fuses the tile
means with pre-normalized per-voxel weights, and then injects noise. In
"coherent" mode one global noise field is added after fusion, so the step
noise has unit variance everywhere by construction and a single-tile run
reproduces the monolithic sampler bit for bit. In "independent" mode each
tile draws its own noise before fusion, which collapses the noise variance
in overlap regions (1/N for N equally weighted overlapping tiles).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion, metrics, rng

WEIGHT_FLOOR = 1e-3
NOISE_MODES = ("coherent", "independent")
WEIGHTINGS = ("hann", "uniform")


def plan_starts(dim: int, size: int, overlap: int) -> list[int]:
    """Tile start offsets along one axis: stride size-overlap, last tile
    clamped so it ends at the boundary."""
    if size > dim:
        raise ValueError(f"tile size {size} exceeds volume extent {dim}")
    if not 0 <= overlap < size:
        raise ValueError(f"overlap {overlap} must be in [0, {size})")
    stride = size - overlap
    starts = list(range(0, dim - size, stride))
    starts.append(dim - size)
    return sorted(set(starts))


@dataclass(frozen=True)
class TilePlan:
    dims: tuple
    size: int
    overlap: int
    starts: tuple  # per-axis tuples of start offsets

    @classmethod
    def build(cls, dims, size: int, overlap: int) -> "TilePlan":
        dims = tuple(int(d) for d in dims)
        starts = tuple(tuple(plan_starts(d, size, overlap)) for d in dims)
        return cls(dims, int(size), int(overlap), starts)

    def tiles(self) -> list[tuple]:
        """All tile origins in lexicographic order."""
        out = []
        for a in self.starts[0]:
            for b in self.starts[1]:
                for c in self.starts[2]:
                    out.append((a, b, c))
        return out

    def slices(self, origin) -> tuple:
        return tuple(slice(o, o + self.size) for o in origin)


def hann_profile(size: int) -> np.ndarray:
    n = np.arange(size)
    h = 0.5 - 0.5 * np.cos(2.0 * np.pi * (n + 0.5) / size)
    return np.maximum(h, WEIGHT_FLOOR)


def tile_weight(plan: TilePlan, origin, weighting: str) -> np.ndarray:
    """Raw fusion weight field for one tile. Hann tapering is suppressed on
    faces that lie on the global boundary: the outermost overlap-thick slab
    there gets full weight so the fused field is not attenuated at edges."""
    s = plan.size
    if weighting == "uniform":
        return np.ones((s, s, s))
    if weighting != "hann":
        raise ValueError(f"unknown weighting {weighting!r}")
    profiles = []
    for axis in range(3):
        h = hann_profile(s).copy()
        guard = max(plan.overlap, 1)
        if origin[axis] == 0:
            h[:guard] = 1.0
        if origin[axis] + s == plan.dims[axis]:
            h[-guard:] = 1.0
        profiles.append(h)
    return profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]


def normalized_weights(plan: TilePlan, weighting: str) -> list[np.ndarray]:
    """Per-tile per-voxel weights that sum to one across tiles at every
    voxel. A voxel covered by a single tile gets exactly 1.0."""
    raw = [tile_weight(plan, o, weighting) for o in plan.tiles()]
    total = np.zeros(plan.dims)
    for o, w in zip(plan.tiles(), raw):
        total[plan.slices(o)] += w
    return [w / total[plan.slices(o)] for o, w in zip(plan.tiles(), raw)]


def noise_scale(t: int, sched: diffusion.NoiseSchedule, mode: str, eta: float) -> float:
    """Standard deviation of the injected noise at reverse step t."""
    if t <= 1:
        return 0.0
    if mode == "ddim":
        return eta * float(sched.noise_coeff[t - 1])
    if mode == "ancestral":
        ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
        var = (1.0 - ab_prev) / (1.0 - ab_t) * sched.beta[t]
        return float(np.sqrt(var))
    raise ValueError(f"unknown sampler mode {mode!r}")


def tiled_step(
    x: np.ndarray,
    model,
    t: int,
    phi: float,
    sched: diffusion.NoiseSchedule,
    plan: TilePlan,
    weights: list[np.ndarray],
    seed: int,
    mode: str,
    eta: float,
    guidance: diffusion.GuidanceSpec,
    noise: str,
    s2_feats=None,
) -> np.ndarray:
    scale = noise_scale(t, sched, mode, eta)
    fused = np.zeros(plan.dims)
    for origin, w in zip(plan.tiles(), weights):
        sl = plan.slices(origin)
        x_tile = x[sl]
        x0_hat = diffusion.predict_x0(model, x_tile, t, phi, s2_feats, guidance)
        part = diffusion.reverse_step(x_tile, x0_hat, t, sched, mode, eta, None)
        if noise == "independent" and scale != 0.0:
            part = part + scale * rng.normal_field(seed, f"tile-ind:{origin}", t, part.shape)
        fused[sl] += w * part
    if noise == "coherent" and scale != 0.0:
        fused = fused + scale * rng.normal_field(seed, "step", t, plan.dims)
    return fused


def sample_tiled(
    model,
    phi: float,
    sched: diffusion.NoiseSchedule,
    dims,
    overlap: int,
    seed: int,
    mode: str = "ancestral",
    eta: float = 1.0,
    guidance: diffusion.GuidanceSpec = diffusion.GuidanceSpec(),
    noise: str = "coherent",
    weighting: str = "hann",
    s2_feats=None,
    return_field: bool = False,
):
    """Full tiled reverse loop followed by Otsu binarization. Uses the same
    (seed, "init"/"step", t) noise keys as the monolithic sampler."""
    if noise not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {noise!r}")
    plan = TilePlan.build(dims, model.config.input_size, overlap)
    weights = normalized_weights(plan, weighting)
    x = rng.normal_field(seed, "init", sched.T, plan.dims)
    for t in range(sched.T, 0, -1):
        x = tiled_step(x, model, t, phi, sched, plan, weights, seed, mode, eta, guidance, noise, s2_feats)
    binary, _ = metrics.otsu_threshold(x)
    if return_field:
        return binary, x
    return binary
