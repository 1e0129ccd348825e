"""Latent-space geometry: deterministic 2-D projection, kernel density
estimation on a grid, and uniformity statistics (density CV, Gini
coefficient, normalized entropy). Also the decode/downsample commutation
residual and the "HLAT" latent dump format.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, area_pool, as_tensor, reshape


class UndefinedMetricsError(ValueError):
    """Uniformity metrics are undefined (e.g. all-zero densities)."""


@dataclass(frozen=True)
class LatentStats:
    density_cv: float
    gini: float
    norm_entropy: float
    n_points: int
    grid_size: int
    bandwidth: float

    def to_dict(self) -> dict:
        return {
            "density_cv": self.density_cv,
            "gini": self.gini,
            "norm_entropy": self.norm_entropy,
            "n_points": self.n_points,
            "grid_size": self.grid_size,
            "bandwidth": self.bandwidth,
        }


def project2d(latents) -> np.ndarray:
    """Deterministic 2-component principal projection of flattened latents.

    Centers the data, projects onto the top-2 covariance eigenvectors, and
    fixes each axis sign so its largest-magnitude coordinate is positive.
    Rank-deficient inputs fill the missing axis with zeros and warn.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"project2d: need at least 3 flattened vectors, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    # Right singular vectors of the centered matrix are the covariance
    # eigenvectors; SVD avoids forming the d x d covariance.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    out = np.zeros((x.shape[0], 2))
    for axis in range(2):
        if axis >= s.size or s[axis] <= tol:
            warnings.warn("project2d: rank-deficient input, filling degenerate axis with zeros")
            continue
        v = vt[axis]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, axis] = centered @ v
    return out


def scott_bandwidth(points: np.ndarray) -> float:
    """Scott's rule for 2-D data: n^(-1/6) times the mean per-axis std."""
    pts = np.asarray(points, dtype=np.float64)
    spread = float(pts.std(axis=0).mean())
    if spread <= 0.0:
        return 1.0
    return float(pts.shape[0] ** (-1.0 / 6.0) * spread)


def kde_grid(points: np.ndarray, grid_size: int, bandwidth: float, pad_bandwidths: float = 3.0):
    """Cell-center coordinates of the evaluation grid over the padded box."""
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0) - pad_bandwidths * bandwidth
    hi = pts.max(axis=0) + pad_bandwidths * bandwidth
    xs = np.linspace(lo[0], hi[0], grid_size)
    ys = np.linspace(lo[1], hi[1], grid_size)
    return xs, ys


def kde_density(points, grid_size: int = 64, bandwidth: float | None = None,
                pad_bandwidths: float = 3.0) -> np.ndarray:
    """Isotropic Gaussian KDE evaluated at grid centers, normalized to sum 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"kde_density: expected n x 2 points, got shape {pts.shape}")
    if bandwidth is None:
        bandwidth = scott_bandwidth(pts)
    if bandwidth <= 0:
        raise ValueError(f"kde_density: bandwidth must be positive, got {bandwidth}")
    xs, ys = kde_grid(pts, grid_size, bandwidth, pad_bandwidths)
    inv = -0.5 / (bandwidth * bandwidth)
    density = np.zeros((grid_size, grid_size))
    # Chunk over grid rows to bound the n_points x grid memory footprint.
    for i in range(grid_size):
        dx2 = (xs[i] - pts[:, 0]) ** 2
        dy2 = (ys[None, :] - pts[:, 1, None]) ** 2
        density[i] = np.exp(inv * (dx2[:, None] + dy2)).sum(axis=0)
    total = density.sum()
    if total <= 0:
        raise UndefinedMetricsError("kde_density: all densities underflowed to zero")
    return density / total


def uniformity_metrics(densities, n_points: int = 0, grid_size: int | None = None,
                       bandwidth: float = float("nan")) -> LatentStats:
    """Density CV, Gini coefficient, and normalized entropy of a density grid."""
    d = np.asarray(densities, dtype=np.float64).reshape(-1)
    if d.size == 0 or (d < 0).any():
        raise UndefinedMetricsError("uniformity metrics need a nonempty, nonnegative density grid")
    total = d.sum()
    if total <= 0:
        raise UndefinedMetricsError("uniformity metrics are undefined for all-zero densities")
    n = d.size

    mean = total / n
    cv = float(d.std() / mean)

    srt = np.sort(d)
    index = np.arange(1, n + 1)
    gini = float(((2 * index - n - 1) * srt).sum() / (n * total))

    p = d / total
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    norm_entropy = 1.0 if n == 1 else float(entropy / np.log(n))

    side = grid_size if grid_size is not None else int(round(np.sqrt(n)))
    return LatentStats(density_cv=cv, gini=gini, norm_entropy=norm_entropy,
                       n_points=n_points, grid_size=side, bandwidth=float(bandwidth))


def analyze_latents(vectors, grid_size: int = 64, bandwidth: float | None = None,
                    pad_bandwidths: float = 3.0) -> LatentStats:
    """Full pipeline: project to 2-D, estimate density, compute uniformity."""
    points = project2d(vectors)
    if bandwidth is None:
        bandwidth = scott_bandwidth(points)
    densities = kde_density(points, grid_size=grid_size, bandwidth=bandwidth,
                            pad_bandwidths=pad_bandwidths)
    return uniformity_metrics(densities, n_points=points.shape[0], grid_size=grid_size,
                              bandwidth=bandwidth)


def commutation_residual(model, x, level_index: int) -> float:
    """Relative gap between decoding at a scale and downsampling the top
    decode: ||out_s - pool(out_top)|| / (||pool(out_top)|| + eps), eval mode."""
    images, _ = model.reconstruct(x, deterministic=True)
    if not 0 <= level_index < len(images):
        raise IndexError(f"level {level_index} out of range for {len(images)} scales")
    top = images[-1]
    level = images[level_index]
    side = level.shape[-1]
    top_b = reshape(top, (1,) + top.shape) if top.ndim == 3 else top
    pooled = area_pool(top_b, side, side).data
    lvl = level.data.reshape(pooled.shape)
    diff = np.linalg.norm((lvl - pooled).ravel())
    ref = np.linalg.norm(pooled.ravel())
    return float(diff / (ref + 1e-8))


# ---------------------------------------------------------------------------
# Latent dump format: magic "HLAT", count u32, dim u32, f32 LE vectors
# ---------------------------------------------------------------------------

LATENT_MAGIC = b"HLAT"


class LatentFormatError(ValueError):
    """Latent dump bytes do not follow the HLAT layout."""


def write_latents(vectors, path: str) -> None:
    arr = np.ascontiguousarray(np.asarray(vectors, dtype="<f4"))
    if arr.ndim != 2:
        raise ValueError(f"write_latents: expected n x dim array, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_latents(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LATENT_MAGIC:
            raise LatentFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {LATENT_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise LatentFormatError(f"{path}: truncated header at offset {4 + len(header)}")
        count, dim = struct.unpack("<II", header)
        payload = fh.read(4 * count * dim)
        if len(payload) != 4 * count * dim:
            raise LatentFormatError(f"{path}: truncated payload at offset {12 + len(payload)}")
        if fh.read(1):
            raise LatentFormatError(f"{path}: trailing bytes after {count} vectors")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
