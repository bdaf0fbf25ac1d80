"""Canonical synthetic calibration problems used by benchmarks and examples.

The dipole problem calibrates three parameters (an elastic amplitude, a
contraction ratio, a core-spreading length) of the analytic dipole
surrogate over a separation-distance domain; the drifted variant injects
decaying drift into the first two parameters and leaves the third alone,
concentrating discrepancy at small separations.
"""

from __future__ import annotations

import numpy as np

from .design import DesignSpec, Prior
from .simulators import (
    AnalyticDipole,
    CalibrationDataset,
    DriftFunction,
    DriftTruth,
    generate_dataset,
)

__all__ = ["dipole_problem", "dipole_dataset", "DIPOLE_PARAM_NAMES"]

DIPOLE_PARAM_NAMES = ("mu", "nu", "l_c")

_DOMAIN = ((5.0, 40.0),)
_PRIORS = (
    Prior.uniform(35.0, 55.0),   # elastic amplitude
    Prior.uniform(0.28, 0.38),   # contraction ratio
    Prior.uniform(0.56, 2.88),   # core-spreading length
)
_THETA0 = (45.0, 0.33, 1.72)


def dipole_problem(n_sim: int = 43, seed: int = 0, drift: bool = True):
    """Simulator, design spec, and ground truth for the dipole testbed.

    With ``drift=True`` the first two parameters drift downward toward the
    small-separation end of the domain (amplitudes -0.30 and -0.20 of their
    normalization boxes, decay lengths 0.20 and 0.25 of the unit domain);
    the spreading length never drifts.
    """
    sim = AnalyticDipole(amplitude=1.0, spread_weight=0.5, spread_length=8.0)
    spec = DesignSpec(domain_bounds=_DOMAIN, theta_priors=_PRIORS, n_samples=n_sim, seed=seed)
    if drift:
        drifts = (
            DriftFunction.exp_decay(-0.30, 0.20),
            DriftFunction.exp_decay(-0.20, 0.25),
            DriftFunction.zero(),
        )
    else:
        drifts = (DriftFunction.zero(), DriftFunction.zero(), DriftFunction.zero())
    truth = DriftTruth(theta0=np.asarray(_THETA0), drifts=drifts)
    return sim, spec, truth


def dipole_dataset(
    n_sim: int = 43,
    n_obs: int = 5,
    noise_sd: float = 0.08,
    seed: int = 0,
    drift: bool = True,
) -> CalibrationDataset:
    """Synthetic dipole dataset with the default 43-run / 5-observation budget."""
    sim, spec, truth = dipole_problem(n_sim=n_sim, seed=seed, drift=drift)
    return generate_dataset(
        sim, spec, truth, noise_sd=noise_sd, seed=seed, n_obs=n_obs,
        param_names=DIPOLE_PARAM_NAMES,
    )
