"""Covariance matrix adaptation evolution strategy (minimization).

Standard parameterization: positive log-rank recombination weights,
cumulative step-size adaptation, rank-1 plus rank-mu covariance update, with
the eigendecomposition refreshed every generation (cheap at the dimensions
used here).
"""

from __future__ import annotations

import base64
import math

import numpy as np

from .errors import FitnessError, ShapeError, StateError
from .formats import tsr_bytes, tsr_from_bytes


def population_size(dim: int) -> int:
    """Default population heuristic 4 + 3*ln(d), rounded to nearest."""
    return int(math.floor(4.0 + 3.0 * math.log(dim) + 0.5))


class CmaState:
    """Full strategy state; evolves via :meth:`ask` / :meth:`tell`."""

    def __init__(
        self,
        mean: np.ndarray,
        sigma: float = 1.0,
        seed: int = 0,
        popsize: int | None = None,
    ):
        mean = np.asarray(mean, dtype=np.float64)
        if mean.ndim != 1:
            raise ShapeError("mean must be a vector")
        d = mean.size
        self.dim = d
        self.mean = mean.copy()
        self.sigma = float(sigma)
        self.lam = popsize if popsize is not None else population_size(d)
        self.mu = self.lam // 2

        w = np.log(self.lam / 2.0 + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights**2)

        self.c_sigma = (self.mueff + 2.0) / (d + self.mueff + 5.0)
        self.d_sigma = (
            1.0
            + 2.0 * max(0.0, math.sqrt((self.mueff - 1.0) / (d + 1.0)) - 1.0)
            + self.c_sigma
        )
        self.c_c = (4.0 + self.mueff / d) / (d + 4.0 + 2.0 * self.mueff / d)
        self.c_1 = 2.0 / ((d + 1.3) ** 2 + self.mueff)
        self.c_mu = min(
            1.0 - self.c_1,
            2.0 * (self.mueff - 2.0 + 1.0 / self.mueff) / ((d + 2.0) ** 2 + self.mueff),
        )
        self.chi_n = math.sqrt(d) * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d))

        self.p_sigma = np.zeros(d)
        self.p_c = np.zeros(d)
        self.cov = np.eye(d)
        self.generation = 0
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self._decompose()
        self.initialized = True

    # -- eigensystem ---------------------------------------------------------

    def _decompose(self) -> None:
        self.cov = (self.cov + self.cov.T) / 2.0
        vals, vecs = np.linalg.eigh(self.cov)
        floor = vals.max() * 1e-14
        if vals.min() < floor:
            vals = np.maximum(vals, floor)
            self.cov = (vecs * vals) @ vecs.T
            self.cov = (self.cov + self.cov.T) / 2.0
        self._eigvals = vals
        self._eigvecs = vecs
        self._inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T

    def min_eigenvalue(self) -> float:
        return float(self._eigvals.min())

    # -- ask/tell -------------------------------------------------------------

    def ask(self) -> np.ndarray:
        """Sample lam candidates ~ mean + sigma * N(0, C)."""
        if not getattr(self, "initialized", False):
            raise StateError("CMA-ES state is not initialized")
        z = self.rng.standard_normal((self.lam, self.dim))
        y = (z * np.sqrt(self._eigvals)) @ self._eigvecs.T
        return self.mean[None, :] + self.sigma * y

    def tell(self, candidates: np.ndarray, fitnesses) -> None:
        """Rank candidates (minimization) and update mean, paths, C, sigma."""
        if not getattr(self, "initialized", False):
            raise StateError("CMA-ES state is not initialized")
        candidates = np.asarray(candidates, dtype=np.float64)
        fit = np.asarray(fitnesses, dtype=np.float64)
        if candidates.shape != (self.lam, self.dim) or fit.shape != (self.lam,):
            raise ShapeError(
                f"expected {self.lam} candidates of dim {self.dim}, got "
                f"{candidates.shape} / {fit.shape}"
            )
        if not np.all(np.isfinite(fit)):
            raise FitnessError("non-finite fitness")

        order = np.argsort(fit, kind="stable")
        parents = candidates[order[: self.mu]]

        xold = self.mean
        self.mean = self.weights @ parents
        y_w = (self.mean - xold) / self.sigma

        self.p_sigma = (1.0 - self.c_sigma) * self.p_sigma + math.sqrt(
            self.c_sigma * (2.0 - self.c_sigma) * self.mueff
        ) * (self._inv_sqrt @ y_w)
        norm_ps = float(np.linalg.norm(self.p_sigma))
        expected = math.sqrt(
            1.0 - (1.0 - self.c_sigma) ** (2.0 * (self.generation + 1))
        )
        h_sigma = 1.0 if norm_ps / expected < (1.4 + 2.0 / (self.dim + 1)) * self.chi_n else 0.0

        self.p_c = (1.0 - self.c_c) * self.p_c + h_sigma * math.sqrt(
            self.c_c * (2.0 - self.c_c) * self.mueff
        ) * y_w

        ys = (parents - xold) / self.sigma
        rank_mu = (ys.T * self.weights) @ ys
        delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c)
        self.cov = (
            (1.0 - self.c_1 - self.c_mu) * self.cov
            + self.c_1 * (np.outer(self.p_c, self.p_c) + delta_h * self.cov)
            + self.c_mu * rank_mu
        )
        self.sigma *= math.exp(
            (self.c_sigma / self.d_sigma) * (norm_ps / self.chi_n - 1.0)
        )
        self.generation += 1
        self._decompose()

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        def b64(arr):
            return base64.b64encode(tsr_bytes(np.asarray(arr))).decode("ascii")

        return {
            "dim": self.dim,
            "sigma": self.sigma,
            "lam": self.lam,
            "generation": self.generation,
            "mean": b64(self.mean),
            "cov": b64(self.cov),
            "p_sigma": b64(self.p_sigma),
            "p_c": b64(self.p_c),
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CmaState":
        def arr(key):
            return tsr_from_bytes(base64.b64decode(d[key]))

        state = cls(arr("mean"), sigma=d["sigma"], popsize=d["lam"])
        state.cov = arr("cov")
        state.p_sigma = arr("p_sigma")
        state.p_c = arr("p_c")
        state.generation = d["generation"]
        rng_state = dict(d["rng_state"])
        # JSON round-trips the inner PCG64 state ints losslessly
        if isinstance(rng_state.get("state"), dict):
            rng_state["state"] = {k: int(v) for k, v in rng_state["state"].items()}
        state.rng.bit_generator.state = rng_state
        state._decompose()
        return state


def cma_ask(state: CmaState) -> np.ndarray:
    return state.ask()


def cma_tell(state: CmaState, candidates: np.ndarray, fitnesses) -> None:
    state.tell(candidates, fitnesses)
