"""Timestamped camera trajectories and TUM-format I/O.

TUM lines are ``timestamp_s tx ty tz qx qy qz qw`` (camera-to-world,
quaternion x/y/z/w), space separated, written with 9 significant digits.
Lines starting with ``#`` are comments.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError


@dataclass
class Trajectory:
    """Ordered camera-to-world poses; timestamps strictly increasing."""

    timestamps: np.ndarray   # (N,) seconds
    positions: np.ndarray    # (N, 3)
    quaternions: np.ndarray  # (N, 4) [x, y, z, w], unit

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.positions) != n or len(self.quaternions) != n:
            raise ValidationError("trajectory arrays must have equal length")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValidationError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))

    def path_length(self):
        if len(self) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    def slice(self, mask):
        return Trajectory(self.timestamps[mask], self.positions[mask],
                          self.quaternions[mask])

    def to_tum_lines(self):
        lines = []
        for t, p, q in zip(self.timestamps, self.positions, self.quaternions):
            fields = [t, p[0], p[1], p[2], q[0], q[1], q[2], q[3]]
            lines.append(" ".join(f"{v:.9g}" for v in fields))
        return lines

    def save_tum(self, path):
        with open(path, "w") as fp:
            for line in self.to_tum_lines():
                fp.write(line + "\n")


def load_tum(path):
    """Parse a TUM trajectory file; tolerates comments and blank lines."""
    stamps, positions, quats = [], [], []
    with open(path) as fp:
        for lineno, raw in enumerate(fp, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                values = [float(v) for v in parts]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
            stamps.append(values[0])
            positions.append(values[1:4])
            quats.append(values[4:8])
    if not stamps:
        return Trajectory.empty()
    return Trajectory(np.array(stamps), np.array(positions), np.array(quats))
