"""Constant-velocity Kalman filter over (cx, cy, aspect, height).

SORT-lineage parameterization: the state is the box center, width/height
aspect ratio, height, and their velocities; process and measurement noise
scale with the box height.
"""

from __future__ import annotations

import numpy as np


class KalmanFilter:
    """Shared, stateless filter; tracks carry their own (mean, covariance)."""

    def __init__(self) -> None:
        ndim, dt = 4, 1.0
        self._motion = np.eye(2 * ndim)
        for i in range(ndim):
            self._motion[i, ndim + i] = dt
        self._project = np.eye(ndim, 2 * ndim)
        self._std_pos = 1.0 / 20
        self._std_vel = 1.0 / 160

    def initiate(self, measurement: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """New track state from an (cx, cy, aspect, height) measurement."""
        mean = np.zeros(8)
        mean[:4] = measurement
        h = measurement[3]
        std = np.array(
            [
                2 * self._std_pos * h,
                2 * self._std_pos * h,
                1e-2,
                2 * self._std_pos * h,
                10 * self._std_vel * h,
                10 * self._std_vel * h,
                1e-5,
                10 * self._std_vel * h,
            ]
        )
        return mean, np.diag(std**2)

    def predict(self, mean: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = mean[3]
        std = np.array(
            [
                self._std_pos * h,
                self._std_pos * h,
                1e-2,
                self._std_pos * h,
                self._std_vel * h,
                self._std_vel * h,
                1e-5,
                self._std_vel * h,
            ]
        )
        q = np.diag(std**2)
        mean = self._motion @ mean
        cov = self._motion @ cov @ self._motion.T + q
        return mean, 0.5 * (cov + cov.T)

    def _measurement_noise(self, mean: np.ndarray) -> np.ndarray:
        h = mean[3]
        std = np.array([self._std_pos * h, self._std_pos * h, 1e-1, self._std_pos * h])
        return np.diag(std**2)

    def update(
        self, mean: np.ndarray, cov: np.ndarray, measurement: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        r = self._measurement_noise(mean)
        projected = self._project @ mean
        s = self._project @ cov @ self._project.T + r
        gain = np.linalg.solve(s, self._project @ cov).T
        innovation = measurement - projected
        new_mean = mean + gain @ innovation
        new_cov = cov - gain @ s @ gain.T
        return new_mean, 0.5 * (new_cov + new_cov.T)


def tlwh_to_xyah(tlwh: np.ndarray) -> np.ndarray:
    x, y, w, h = tlwh
    return np.array([x + w / 2.0, y + h / 2.0, w / h, h])


def xyah_to_tlwh(xyah: np.ndarray) -> np.ndarray:
    cx, cy, a, h = xyah
    w = a * h
    return np.array([cx - w / 2.0, cy - h / 2.0, w, h])
