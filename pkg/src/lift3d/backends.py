"""Prior-backend construction from the run configuration."""

from __future__ import annotations

import numpy as np

from .bundle import ReferenceBundle
from .config import RunConfig
from .prior import AnalyticOracleBackend, PriorBackend
from .schedule import NoiseSchedule


def backend_from_config(
    config: RunConfig,
    schedule: NoiseSchedule,
    bundle: ReferenceBundle | None = None,
    resolution: int | None = None,
) -> PriorBackend:
    """oracle or remote, per ``prior.backend``.

    Without a fixture file the oracle defaults to a single Gaussian
    centered on the white-composited reference image at the working
    resolution: the prior then pulls novel views toward the reference's
    appearance, a reasonable standalone behavior and a deterministic one.
    """
    p = config.prior
    if p.backend == "remote":
        from .remote import RemoteBackend

        backend = RemoteBackend(p.endpoint, timeout_s=p.timeout_s, retries=p.retries)
        backend.validate_schedule(schedule)
        return backend
    if p.oracle_fixture:
        return AnalyticOracleBackend.from_json_file(p.oracle_fixture, schedule)
    if bundle is None:
        raise ValueError("default oracle backend needs the reference bundle")
    res = resolution or config.coarse.resolution
    work = bundle.resized(res, res)
    mean = work.image * work.mask[..., None] + (1.0 - work.mask[..., None])
    return AnalyticOracleBackend(schedule, mean[None], 0.05**2)
