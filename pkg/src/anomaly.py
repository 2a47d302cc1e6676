import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from src.data_processor import Sample
from src.inference import Observation, estimate
from src.iteropt import IterConfig
from src.model import GeMuCoModel, PBLike

logger = logging.getLogger(__name__)

REGULARIZATION = 1e-6
N_SIGMA = 3.0


class CalibrationError(ValueError):
    """Raised when a detector cannot be calibrated from the given residuals."""


def _as_residuals(residuals) -> np.ndarray:
    data = np.asarray(residuals, dtype=float)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    if data.ndim != 2 or not np.all(np.isfinite(data)):
        raise CalibrationError(f"Residuals must be a finite (n, dim) array, got shape {data.shape}")
    return data


@dataclass(frozen=True, eq=False)
class AnomalyModel:
    """
    Mahalanobis-distance detector over estimation residuals.

    Sigma carries the 1e-6 ridge, so it is always positive definite.
    """

    mu: np.ndarray
    sigma: np.ndarray
    threshold: float

    @classmethod
    def calibrate(cls, residuals, n_sigma: float = N_SIGMA) -> "AnomalyModel":
        """
        Fit mean, covariance and a mean + n_sigma * std threshold on normal residuals.

        Raises:
            CalibrationError: With fewer than dim + 2 samples.
        """
        data = _as_residuals(residuals)
        n, dim = data.shape
        if n < dim + 2:
            raise CalibrationError(f"Need at least {dim + 2} residuals of dimension {dim}, got {n}")
        mu = data.mean(axis=0)
        centered = data - mu
        sigma = centered.T @ centered / n + REGULARIZATION * np.eye(dim)
        model = cls(mu, sigma, 0.0)
        distances = model.score_many(data)
        threshold = float(distances.mean() + n_sigma * distances.std())
        logger.info(f"Calibrated Mahalanobis detector on {n} residuals of dim {dim}, threshold {threshold:.4f}")
        return cls(mu, sigma, threshold)

    def score_many(self, residuals) -> np.ndarray:
        data = _as_residuals(residuals)
        if data.shape[1] != self.mu.size:
            raise CalibrationError(f"Residual dimension {data.shape[1]} != detector dimension {self.mu.size}")
        diff = data - self.mu
        try:
            factor = cho_factor(self.sigma)
        except LinAlgError as e:
            logger.error(f"Covariance is not positive definite: {e}")
            raise CalibrationError(f"Covariance is not positive definite: {e}")
        solved = cho_solve(factor, diff.T).T
        return np.sqrt(np.maximum((diff * solved).sum(axis=1), 0.0))

    def score(self, e: Sequence[float]) -> float:
        return float(self.score_many(np.asarray(e, dtype=float).reshape(1, -1))[0])

    def is_anomalous(self, d: float) -> bool:
        return bool(d > self.threshold)

    def scan(self, residuals) -> pd.DataFrame:
        """Distance and flag for each residual row."""
        d = self.score_many(residuals)
        return pd.DataFrame({"d": d, "anomalous": d > self.threshold})


@dataclass(frozen=True, eq=False)
class NormThresholdDetector:
    """Flags residuals whose Euclidean norm exceeds mean + n_sigma * std of normal norms."""

    threshold: float

    @classmethod
    def calibrate(cls, residuals, n_sigma: float = N_SIGMA) -> "NormThresholdDetector":
        data = _as_residuals(residuals)
        if data.shape[0] < 2:
            raise CalibrationError(f"Need at least 2 residuals, got {data.shape[0]}")
        norms = np.linalg.norm(data, axis=1)
        return cls(float(norms.mean() + n_sigma * norms.std()))

    def score_many(self, residuals) -> np.ndarray:
        return np.linalg.norm(_as_residuals(residuals), axis=1)

    def score(self, e: Sequence[float]) -> float:
        return float(np.linalg.norm(np.asarray(e, dtype=float)))

    def is_anomalous(self, d: float) -> bool:
        return bool(d > self.threshold)

    def scan(self, residuals) -> pd.DataFrame:
        d = self.score_many(residuals)
        return pd.DataFrame({"d": d, "anomalous": d > self.threshold})


def estimation_residuals(
    model: GeMuCoModel,
    samples: Sequence[Sample],
    hidden: Sequence[str],
    p: PBLike = None,
    cfg: Optional[IterConfig] = None,
) -> np.ndarray:
    """
    Normalized residuals (estimate - measurement) of the `hidden` groups.

    Each sample is estimated with the hidden groups removed from the observation,
    then compared with what was actually measured.
    """
    layout = model.data_layout
    hidden_layout = layout.subset(hidden)
    rows = []
    for sample in samples:
        shown = {
            name: sample.values[layout.slice(name)]
            for name, flag in zip(layout.names, sample.available)
            if flag and name not in hidden
        }
        est = estimate(model, Observation.from_groups(layout, shown), p, cfg)
        predicted = np.concatenate([est[name] for name in hidden_layout.names])
        measured = sample.values[layout.channels(hidden_layout.names)]
        rows.append(
            model.normalizer.normalize(hidden_layout, predicted) - model.normalizer.normalize(hidden_layout, measured)
        )
    return np.array(rows)
