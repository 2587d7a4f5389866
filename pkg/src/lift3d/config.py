"""Declarative run configuration: one TOML document covering every stage.

Every field has a documented default; unknown keys are rejected so typos
fail fast.  The effective (defaulted) config is written back into the run
directory as JSON for reproducibility.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ValidationError


@dataclass
class CameraConfig:
    reference_azimuth_deg: float = 0.0
    reference_elevation_deg: float = 0.0
    reference_distance: float = 1.0
    reference_fov_deg: float = 60.0
    azimuth_range_deg: list = field(default_factory=lambda: [15.0, 180.0])
    elevation_range_deg: list = field(default_factory=lambda: [10.0, 45.0])
    distance_range: list = field(default_factory=lambda: [0.8, 1.2])
    fov_range_deg: list = field(default_factory=lambda: [40.0, 80.0])
    reference_prob: float = 0.25
    expand_fraction: float = 0.6


@dataclass
class FieldSection:
    levels: int = 16
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    finest_resolution: int = 2048
    hidden_dim: int = 64
    density_bias: float = 5.0
    density_mu: float = 0.2
    bound: float = 1.0


@dataclass
class RenderSection:
    n_uniform: int = 64
    n_importance: int = 32
    near: float = 0.05
    ambient: float = 0.1


@dataclass
class ScheduleSection:
    t_max: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass
class GuidanceSection:
    omega: float = 10.0
    t_min: int = 200
    t_max: int = 600
    t_star: int = 400
    w_mode: str = "sigma2"


@dataclass
class LossSection:
    l_ref: float = 5.0
    l_depth: float = 1.0
    l_sds: float = 1.0
    l_clipd: float = 10.0
    sparsity: float = 5e-4
    opacity: float = 1e-3
    smoothness: float = 1e-2


@dataclass
class CoarseSection:
    iterations: int = 5000
    resolution: int = 100
    lr: float = 1e-3
    occupancy_period: int = 100
    occupancy_resolution: int = 32
    occupancy_threshold: float = 0.01
    snapshot_every: int = 500
    shading_probs: list = field(default_factory=lambda: [0.75, 0.15, 0.10])
    jitter_background: bool = True
    max_consecutive_skips: int = 5

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.resolution < 32:
            raise ValidationError("render resolution must be >= 32")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if len(self.shading_probs) != 3 or abs(sum(self.shading_probs) - 1.0) > 1e-6:
            raise ValidationError("shading_probs must be 3 values summing to 1")


@dataclass
class CloudSection:
    resolution: int = 0  # 0 = use the coarse render resolution
    ring_azimuth_steps: int = 36
    ring_elevations_deg: list = field(default_factory=lambda: [-30.0, 0.0, 30.0])
    alpha_threshold: float = 0.5
    merge_tolerance_frac: float = 0.01  # of scene diameter
    splat_radius_px: float = 1.0


@dataclass
class RefineSection:
    iterations: int = 5000
    resolution: int = 800
    lr: float = 1e-3
    lambda_init: float = 0.1
    lambda_bg: float = 1.0
    base_channels: int = 24
    snapshot_every: int = 500
    max_consecutive_skips: int = 5

    def __post_init__(self):
        if self.resolution % 4 != 0:
            raise ValidationError("refine resolution must be divisible by 4")


@dataclass
class PriorSection:
    backend: str = "oracle"
    endpoint: str = "http://127.0.0.1:8484"
    oracle_fixture: str = ""
    timeout_s: float = 30.0
    retries: int = 3

    def __post_init__(self):
        if self.backend not in ("oracle", "remote"):
            raise ValidationError(f"prior.backend must be oracle or remote, got {self.backend!r}")


_SECTIONS = {
    "camera": CameraConfig,
    "field": FieldSection,
    "render": RenderSection,
    "schedule": ScheduleSection,
    "guidance": GuidanceSection,
    "losses": LossSection,
    "coarse": CoarseSection,
    "cloud": CloudSection,
    "refine": RefineSection,
    "prior": PriorSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    camera: CameraConfig = field(default_factory=CameraConfig)
    field_: FieldSection = field(default_factory=FieldSection)
    render: RenderSection = field(default_factory=RenderSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    losses: LossSection = field(default_factory=LossSection)
    coarse: CoarseSection = field(default_factory=CoarseSection)
    cloud: CloudSection = field(default_factory=CloudSection)
    refine: RefineSection = field(default_factory=RefineSection)
    prior: PriorSection = field(default_factory=PriorSection)

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        doc = dict(doc)
        kwargs = {}
        if "seed" in doc:
            kwargs["seed"] = int(doc.pop("seed"))
        for name, cls in _SECTIONS.items():
            if name not in doc:
                continue
            section = doc.pop(name)
            if not isinstance(section, dict):
                raise ValidationError(f"config section [{name}] must be a table")
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(section) - known
            if unknown:
                raise ValidationError(
                    f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}"
                )
            attr = "field_" if name == "field" else name
            kwargs[attr] = cls(**section)
        if doc:
            raise ValidationError(f"unknown top-level config key(s): {', '.join(sorted(doc))}")
        return RunConfig(**kwargs)

    @staticmethod
    def load(path=None) -> "RunConfig":
        if path is None:
            return RunConfig()
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}", code="missing-file")
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ValidationError(f"cannot parse config {path}: {exc}") from exc
        return RunConfig.from_dict(doc)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            attr = "field_" if name == "field" else name
            out[name] = dataclasses.asdict(getattr(self, attr))
        return out

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def write_effective(self, run_dir):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "config.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
