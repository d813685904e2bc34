import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bilineq.channel_model import Scenario  # noqa: E402


def random_psd(rng, M, rank=None, scale=1.0):
    rank = M if rank is None else rank
    a = rng.standard_normal((M, rank)) + 1j * rng.standard_normal((M, rank))
    return scale * (a @ a.conj().T) / rank


def random_scenario(rng, M, group_sizes=(2,), rho_tr=None, extra_users=0):
    """Single-BS scenario with random PSD covariances; pilot groups of the given sizes."""
    pilots = np.concatenate([np.full(n, p) for p, n in enumerate(group_sizes)])
    pilots = np.concatenate([pilots, np.arange(len(group_sizes), len(group_sizes) + extra_users)])
    K = len(pilots)
    covs = np.stack([random_psd(rng, M, scale=rng.uniform(0.5, 2.0)) for _ in range(K)])
    powers = rng.uniform(0.5, 2.0, K)
    rho_tr = rng.uniform(0.5, 2.0) if rho_tr is None else rho_tr
    return Scenario.synthetic(covs, powers, pilots, rho_tr)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"
