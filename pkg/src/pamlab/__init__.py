"""Simulation lab for the parabolic Anderson model with Pareto potential."""
from .errors import (
    CertificationError,
    ConvergenceError,
    CoordinateRangeError,
    DomainError,
    NotApplicable,
    PamError,
)
from .evolution import LatticeBox, decompose, dense_reference, evolve, feynman_kac_estimate
from .lattice import PotentialField, box_order_stats, site_value
from .laws import LawsContext, cdf_Y, density_p, joint_cdf_Y1Y2, normalization, radial_cdf_X, shell_integral
from .spectral import decay_bound_check, principal_pair, u3_domination_check
from .variational import argmax_top2, penalty, psi, radius_policy, scaling, tail_bound

__version__ = "0.1.0"
