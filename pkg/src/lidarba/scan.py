from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LabeledScan:
    """Pre-labelled feature points of one sweep, in the sensor frame."""

    scan_id: int
    timestamp: float
    plane_points: np.ndarray
    edge_points: np.ndarray

    def __post_init__(self):
        self.plane_points = np.asarray(self.plane_points, dtype=float).reshape(-1, 3)
        self.edge_points = np.asarray(self.edge_points, dtype=float).reshape(-1, 3)
        if len(self.plane_points) + len(self.edge_points) == 0:
            raise ValueError("no features")
        if not (np.all(np.isfinite(self.plane_points)) and np.all(np.isfinite(self.edge_points))):
            raise ValueError("non-finite feature point")

    @property
    def n_points(self) -> int:
        return len(self.plane_points) + len(self.edge_points)
