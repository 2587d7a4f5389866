import math

import numpy as np
import pytest
import torch

from lift3d.errors import ValidationError
from lift3d.field import FieldConfig, OccupancyGrid, RadianceField, update_occupancy

TINY = FieldConfig(
    levels=4,
    features_per_level=2,
    table_size_log2=8,
    base_resolution=4,
    finest_resolution=16,
    hidden_dim=16,
)


@pytest.fixture(scope="module")
def fresh_field():
    return RadianceField(FieldConfig(levels=8, table_size_log2=15, finest_resolution=256), seed=0)


class TestDensityInit:
    def test_density_at_origin_is_bias(self, fresh_field):
        sigma, _ = fresh_field.query(torch.zeros(1, 3))
        assert float(sigma.detach()) == pytest.approx(5.0, abs=1e-5)

    def test_density_at_mu_radius(self, fresh_field):
        pts = torch.tensor([[0.2, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, -0.2]])
        sigma, _ = fresh_field.query(pts)
        expected = 5.0 * math.exp(-0.5)
        assert np.allclose(sigma.detach().numpy(), expected, atol=1e-4)

    def test_gaussian_profile_everywhere(self, fresh_field):
        rng = np.random.default_rng(0)
        pts = torch.from_numpy(rng.uniform(-0.9, 0.9, size=(64, 3))).float()
        sigma, _ = fresh_field.query(pts)
        r2 = (pts * pts).sum(dim=-1)
        expected = 5.0 * torch.exp(-r2 / (2 * 0.2**2))
        assert torch.allclose(sigma, expected, rtol=1e-4, atol=1e-6)

    def test_untrained_color_is_gray(self, fresh_field):
        _, rgb = fresh_field.query(torch.zeros(3, 3))
        assert torch.allclose(rgb, torch.full((3, 3), 0.5))


class TestQueryContract:
    def test_rgb_in_unit_interval_after_training_noise(self):
        field = RadianceField(TINY, seed=3)
        with torch.no_grad():
            for p in field.parameters():
                p.add_(torch.randn_like(p) * 0.5)
        pts = torch.from_numpy(np.random.default_rng(1).uniform(-1, 1, (256, 3))).float()
        sigma, rgb = field.query(pts)
        assert (rgb >= 0).all() and (rgb <= 1).all()
        assert (sigma >= 0).all()

    def test_out_of_bounds_returns_zero_density(self, fresh_field):
        sigma, _ = fresh_field.query(torch.tensor([[1.5, 0.0, 0.0], [0.0, -2.0, 0.3]]))
        assert torch.equal(sigma, torch.zeros(2))

    def test_deterministic(self, fresh_field):
        pts = torch.rand(16, 3, generator=torch.Generator().manual_seed(5)) * 2 - 1
        s1, c1 = fresh_field.query(pts)
        s2, c2 = fresh_field.query(pts)
        assert torch.equal(s1, s2) and torch.equal(c1, c2)

    def test_bad_shape_rejected(self, fresh_field):
        with pytest.raises(ValidationError):
            fresh_field.query(torch.zeros(3))


class TestOccupancyGrid:
    def test_fresh_grid_fully_occupied(self):
        grid = OccupancyGrid(resolution=8)
        assert grid.occupancy_fraction() == 1.0

    def test_zero_density_field_empties_grid(self):
        field = RadianceField(
            FieldConfig(
                levels=4,
                table_size_log2=8,
                base_resolution=4,
                finest_resolution=16,
                hidden_dim=16,
                density_bias=1e-20,
            ),
            seed=0,
        )
        grid = update_occupancy(field, OccupancyGrid(resolution=16))
        assert grid.occupancy_fraction() == 0.0

    def test_gaussian_ball_radius(self, fresh_field):
        grid = update_occupancy(fresh_field, OccupancyGrid(resolution=32, threshold=0.01))
        r = grid.resolution
        centers = (np.arange(r) + 0.5) / r * 2.0 - 1.0
        gx, gy, gz = np.meshgrid(centers, centers, centers, indexing="ij")
        norms = np.sqrt(gx**2 + gy**2 + gz**2)
        occ = grid.occupied.numpy()
        ball = 0.2 * math.sqrt(2.0 * math.log(5.0 / 0.01))  # analytic 0.7051
        cell = 2.0 / r
        # everything safely inside the analytic ball is marked occupied
        inside = norms < ball - cell * math.sqrt(3)
        assert occ[inside].all()
        # nothing far outside it survives (half-cell probing + 1 dilation ring)
        assert norms[occ].max() <= ball + 3 * cell

    def test_lookup_matches_grid(self, fresh_field):
        grid = update_occupancy(fresh_field, OccupancyGrid(resolution=16))
        assert bool(grid.lookup(torch.zeros(1, 3))[0])
        assert not bool(grid.lookup(torch.tensor([[0.95, 0.95, 0.95]]))[0])
        assert not bool(grid.lookup(torch.tensor([[3.0, 0.0, 0.0]]))[0])

    def test_refresh_keeps_dense_cells(self, fresh_field):
        """A refresh never empties a cell whose density still exceeds the
        threshold (checked against direct field evaluation)."""
        grid = update_occupancy(fresh_field, OccupancyGrid(resolution=16, dilation=0))
        r = grid.resolution
        centers = (torch.arange(r, dtype=torch.float32) + 0.5) / r * 2 - 1
        gx, gy, gz = torch.meshgrid(centers, centers, centers, indexing="ij")
        pts = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)
        sigma, _ = fresh_field.query(pts)
        dense = (sigma > grid.threshold).reshape(r, r, r)
        assert grid.occupied[dense].all()
