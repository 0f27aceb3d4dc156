"""Container bundling everything a control computation needs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractViolation
from .geometry import Mesh, RegionSet
from .pdecore import ThetaIntegrator, TimeGrid, control_pairing, state_pairing

__all__ = ["Follower", "ControlProblem"]


@dataclass(frozen=True, eq=False)
class Follower:
    """Parameters of one follower's cost functional.

    ``target`` holds ``y_{i,d}`` sampled at all bulk nodes and time levels;
    only its restriction to ``omega_d`` matters.
    """

    alpha: float
    mu: float
    target: np.ndarray

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"follower weight alpha must be positive, got {self.alpha}")
        if not self.mu > 0:
            raise ConfigError(f"follower penalty mu must be positive, got {self.mu}")


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Mesh, time grid, coefficients, regions, followers and initial data.

    Attributes
    ----------
    integrator : ThetaIntegrator
        Shared forward/backward solver (carries mesh, grid and coefficients).
    regions : RegionSet
    followers : tuple of Follower
        Exactly two followers.
    Y0 : ndarray
        Stacked initial state.
    picard_tol, picard_max_iter :
        Inner fixed-point settings of the cascade and optimality solves.
    """

    integrator: ThetaIntegrator
    regions: RegionSet
    followers: tuple
    Y0: np.ndarray
    picard_tol: float = 1e-12
    picard_max_iter: int = 200
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.followers) != 2:
            raise ConfigError("exactly two followers are required")
        shape = (self.timegrid.M + 1, self.mesh.n_bulk)
        for fol in self.followers:
            if fol.target.shape != shape:
                raise ContractViolation(f"follower target must have shape {shape}")
        if np.shape(self.Y0) != (self.mesh.size,):
            raise ContractViolation(f"Y0 must have length {self.mesh.size}")

    @property
    def mesh(self) -> Mesh:
        return self.integrator.mesh

    @property
    def timegrid(self) -> TimeGrid:
        return self.integrator.timegrid

    @property
    def coeffs(self):
        return self.integrator.coeffs

    @property
    def alphas(self):
        return tuple(f.alpha for f in self.followers)

    @property
    def mus(self):
        return tuple(f.mu for f in self.followers)

    @property
    def targets(self):
        return tuple(f.target for f in self.followers)

    def follower(self, i: int) -> Follower:
        return self.followers[i - 1]

    def control_shape(self):
        return (self.timegrid.M + 1, self.mesh.n_bulk)

    def zeros_control(self):
        return np.zeros(self.control_shape())

    # inner products -----------------------------------------------------

    def control_inner(self, u, v) -> float:
        """Space-time L^2 pairing of bulk control fields (left time rule)."""
        return control_pairing(u, v, self.timegrid, self.mesh.bulk_weights)

    def observation_inner(self, u, v) -> float:
        """Space-time L^2 pairing of bulk state fields (right time rule)."""
        return state_pairing(u, v, self.timegrid, self.mesh.bulk_weights)

    def state_inner(self, u, v) -> float:
        return float(np.dot(self.mesh.weights * u, v))

    def state_norm(self, u) -> float:
        return float(np.sqrt(max(self.state_inner(u, u), 0.0)))

    # derived problems ----------------------------------------------------

    def with_data(self, Y0=None, targets=None) -> "ControlProblem":
        """Copy with new initial state and/or follower targets."""
        changes = {}
        if Y0 is not None:
            changes["Y0"] = np.asarray(Y0, dtype=float)
        if targets is not None:
            changes["followers"] = tuple(
                replace(f, target=np.asarray(t, dtype=float))
                for f, t in zip(self.followers, targets)
            )
        return replace(self, **changes)

    def with_followers(self, **params) -> "ControlProblem":
        """Copy with follower parameters changed, e.g. ``mu=(1e3, 1e3)``."""
        fols = list(self.followers)
        for key, values in params.items():
            fols = [replace(f, **{key: v}) for f, v in zip(fols, values)]
        return replace(self, followers=tuple(fols))

    def with_coefficients(self, coeffs) -> "ControlProblem":
        return replace(self, integrator=self.integrator.with_coefficients(coeffs))

    def with_integrator(self, integrator) -> "ControlProblem":
        return replace(self, integrator=integrator)

    def with_tolerances(self, picard_tol=None, picard_max_iter=None) -> "ControlProblem":
        changes = {}
        if picard_tol is not None:
            changes["picard_tol"] = picard_tol
        if picard_max_iter is not None:
            changes["picard_max_iter"] = picard_max_iter
        return replace(self, **changes)
