"""Hash-grid radiance field and the occupancy grid that accelerates it.

The field maps 3D points inside a cube [-bound, bound]^3 to (density, rgb).
Multi-resolution hash encoding feeds a small MLP; density uses an
exponential activation with an additive analytic Gaussian bias so that the
untrained field is exactly the Gaussian-sphere initialization
``d * exp(-|x|^2 / (2 mu^2))`` (the decoder's last layer starts at zero).
Color is view-independent: a point has one rgb, which is what the stage-2
point-cloud export relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ValidationError

_HASH_PRIMES = (1, 2654435761, 805459861)
_DENSITY_CLAMP = 11.0  # exp(11) ~ 6e4, beyond saturation for any slab


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    finest_resolution: int = 2048
    hidden_dim: int = 64
    density_bias: float = 5.0
    density_mu: float = 0.2
    bound: float = 1.0

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise ValidationError("levels and features_per_level must be >= 1")
        if self.finest_resolution < self.base_resolution:
            raise ValidationError("finest_resolution must be >= base_resolution")
        if self.bound <= 0:
            raise ValidationError("bound must be positive")

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_resolutions(self) -> list[int]:
        if self.levels == 1:
            return [self.base_resolution]
        growth = math.exp(
            (math.log(self.finest_resolution) - math.log(self.base_resolution))
            / (self.levels - 1)
        )
        return [int(math.floor(self.base_resolution * growth**i)) for i in range(self.levels)]


class HashGridEncoding(nn.Module):
    """Multi-resolution feature grid with hashed tables at fine levels.

    Levels whose dense corner count fits the table are indexed injectively;
    finer levels fall back to the xor-of-primes spatial hash.  Input is
    assumed pre-normalized to [0, 1]^3.
    """

    def __init__(self, config: FieldConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.resolutions = config.level_resolutions()
        table_cap = 2**config.table_size_log2
        self.tables = nn.ParameterList()
        self.dense = []
        for res in self.resolutions:
            n_dense = (res + 1) ** 3
            size = min(n_dense, table_cap)
            self.dense.append(n_dense <= table_cap)
            t = torch.empty(size, config.features_per_level)
            t.uniform_(-1e-4, 1e-4, generator=generator)
            self.tables.append(nn.Parameter(t))
        corners = torch.tensor(
            [[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=torch.long
        )
        self.register_buffer("corners", corners, persistent=False)  # (8, 3)

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        # one clamp keeps every per-level floor() inside [0, res-1]
        x01 = x01.clamp(0.0, 1.0 - 1e-6)
        feats = []
        for level, res in enumerate(self.resolutions):
            scaled = x01 * res
            base = scaled.floor()
            frac = scaled - base
            base = base.long()
            bx, by, bz = base.unbind(-1)
            table = self.tables[level]
            # Corner indices decompose per axis, so the 8 corners cost 8
            # cheap (N,) combinations instead of (N, 8, 3) integer math.
            if self.dense[level]:
                stride = res + 1
                x0 = bx * (stride * stride)
                y0 = by * stride
                z0 = bz
                x1, y1, z1 = x0 + stride * stride, y0 + stride, z0 + 1
                flat = torch.stack(
                    [x0 + y0 + z0, x0 + y0 + z1, x0 + y1 + z0, x0 + y1 + z1,
                     x1 + y0 + z0, x1 + y0 + z1, x1 + y1 + z0, x1 + y1 + z1],
                    dim=1,
                )
            else:
                x0 = bx * _HASH_PRIMES[0]
                y0 = by * _HASH_PRIMES[1]
                z0 = bz * _HASH_PRIMES[2]
                x1, y1, z1 = x0 + _HASH_PRIMES[0], y0 + _HASH_PRIMES[1], z0 + _HASH_PRIMES[2]
                flat = torch.remainder(
                    torch.stack(
                        [x0 ^ y0 ^ z0, x0 ^ y0 ^ z1, x0 ^ y1 ^ z0, x0 ^ y1 ^ z1,
                         x1 ^ y0 ^ z0, x1 ^ y0 ^ z1, x1 ^ y1 ^ z0, x1 ^ y1 ^ z1],
                        dim=1,
                    ),
                    table.shape[0],
                )
            fx, fy, fz = frac.unbind(-1)
            gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
            w = torch.stack(
                [gx * gy * gz, gx * gy * fz, gx * fy * gz, gx * fy * fz,
                 fx * gy * gz, fx * gy * fz, fx * fy * gz, fx * fy * fz],
                dim=1,
            )  # (N, 8), corner order matches flat
            corner_feats = table.index_select(0, flat.reshape(-1)).reshape(
                flat.shape[0], 8, -1
            )
            feats.append((corner_feats * w.unsqueeze(-1)).sum(dim=1))
        return torch.cat(feats, dim=-1)


class RadianceField(nn.Module):
    """Density + view-independent color over the scene cube."""

    def __init__(self, config: FieldConfig = FieldConfig(), seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.config = config
        self.encoding = HashGridEncoding(config, generator)
        h = config.hidden_dim
        self.mlp = nn.Sequential(
            nn.Linear(config.feature_dim, h),
            nn.ReLU(),
            nn.Linear(h, h),
            nn.ReLU(),
            nn.Linear(h, 4),
        )
        for layer in self.mlp[:-1]:
            if isinstance(layer, nn.Linear):
                fan_in = layer.weight.shape[1]
                bnd = 1.0 / math.sqrt(fan_in)
                layer.weight.data.uniform_(-bnd, bnd, generator=generator)
                layer.bias.data.uniform_(-bnd, bnd, generator=generator)
        # Zero last layer: untrained density is exactly the Gaussian bias,
        # untrained color is 0.5 gray.
        last = self.mlp[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    @property
    def bound(self) -> float:
        return self.config.bound

    def density_log_bias(self, points: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        r2 = (points * points).sum(dim=-1)
        return math.log(cfg.density_bias) - r2 / (2.0 * cfg.density_mu**2)

    def query(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(density (N,), rgb (N, 3)) at world points.

        Points outside the scene cube get zero density (documented, not an
        error) and gray color.
        """
        if points.ndim != 2 or points.shape[-1] != 3:
            raise ValidationError(f"expected (N, 3) points, got {tuple(points.shape)}")
        b = self.bound
        inside = (points.abs() <= b).all(dim=-1)
        x01 = (points.clamp(-b, b) + b) / (2.0 * b)
        raw = self.mlp(self.encoding(x01))
        log_sigma = (raw[:, 0] + self.density_log_bias(points)).clamp(max=_DENSITY_CLAMP)
        sigma = torch.where(inside, torch.exp(log_sigma), torch.zeros_like(log_sigma))
        rgb = torch.sigmoid(raw[:, 1:4])
        return sigma, rgb

    def query_chunked(self, points: torch.Tensor, chunk: int = 400_000):
        if points.shape[0] <= chunk:
            return self.query(points)
        sigmas, rgbs = [], []
        for start in range(0, points.shape[0], chunk):
            s, c = self.query(points[start : start + chunk])
            sigmas.append(s)
            rgbs.append(c)
        return torch.cat(sigmas), torch.cat(rgbs)

    def validate_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite values in field parameter {name}")


@dataclass
class OccupancyGrid:
    """Coarse binary grid marking non-empty space for sample culling.

    Freshly constructed grids are fully occupied (no culling) until the
    first refresh.  Refreshes probe several points per cell and dilate the
    result so interpolation spill never gets culled.
    """

    resolution: int = 32
    threshold: float = 0.01
    bound: float = 1.0
    dilation: int = 1
    occupied: torch.Tensor = dc_field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.occupied is None:
            r = self.resolution
            self.occupied = torch.ones(r, r, r, dtype=torch.bool)

    def lookup(self, points: torch.Tensor) -> torch.Tensor:
        """Occupancy bit for each point; outside the box counts as empty."""
        r = self.resolution
        idx = ((points + self.bound) / (2.0 * self.bound) * r).floor().long()
        inside = ((idx >= 0) & (idx < r)).all(dim=-1)
        idx = idx.clamp(0, r - 1)
        hit = self.occupied[idx[:, 0], idx[:, 1], idx[:, 2]]
        return hit & inside

    def occupied_aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """Tight world-space box around occupied cells, padded one cell.

        Rays only need samples inside this box; everything outside is
        empty by construction.  A fully empty grid returns the scene box.
        """
        occ = self.occupied
        if not bool(occ.any()):
            b = self.bound
            return np.array([-b, -b, -b]), np.array([b, b, b])
        r = self.resolution
        cell = 2.0 * self.bound / r
        lo = np.empty(3)
        hi = np.empty(3)
        for axis in range(3):
            flat = occ  # collapse the other two axes
            for other in sorted({0, 1, 2} - {axis}, reverse=True):
                flat = flat.any(dim=other)
            nz = flat.nonzero(as_tuple=True)[0]
            lo[axis] = -self.bound + (float(nz.min()) - 1.0) * cell
            hi[axis] = -self.bound + (float(nz.max()) + 2.0) * cell
        return np.maximum(lo, -self.bound), np.minimum(hi, self.bound)

    def occupancy_fraction(self) -> float:
        return float(self.occupied.float().mean())


def update_occupancy(field: RadianceField, grid: OccupancyGrid) -> OccupancyGrid:
    """Re-evaluate the grid from the current field (in place, also returned)."""
    r = grid.resolution
    b = grid.bound
    centers = (torch.arange(r, dtype=torch.float64) + 0.5) / r * (2 * b) - b
    gx, gy, gz = torch.meshgrid(centers, centers, centers, indexing="ij")
    cells = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)
    # Probe the center plus the 8 half-offset corners of each cell.
    cell = 2 * b / r
    offsets = torch.tensor(
        [[0, 0, 0]] + [[(i >> 2 & 1) - 0.5, (i >> 1 & 1) - 0.5, (i & 1) - 0.5] for i in range(8)],
        dtype=torch.float64,
    ) * cell
    dtype = next(field.parameters()).dtype
    max_sigma = torch.full((cells.shape[0],), -1.0)
    with torch.no_grad():
        for off in offsets:
            pts = (cells + off).clamp(-b, b).to(dtype)
            sigma, _ = field.query_chunked(pts)
            max_sigma = torch.maximum(max_sigma, sigma.double())
    occ = (max_sigma > grid.threshold).reshape(r, r, r)
    for _ in range(grid.dilation):
        occ = (
            F.max_pool3d(occ.float()[None, None], kernel_size=3, stride=1, padding=1)[0, 0] > 0
        )
    grid.occupied = occ
    return grid
