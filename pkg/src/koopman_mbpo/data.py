"""Append-only store of real-environment transitions in scaled units."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .cstr import ConfigurationError

COLUMNS = ("x_c", "x_T", "u_rho", "u_F", "xn_c", "xn_T", "episode", "iteration", "split")


@dataclass
class Split:
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray

    def __len__(self):
        return len(self.x)

    def require(self, name: str) -> "Split":
        if len(self) == 0:
            raise ConfigurationError(f"{name} partition is empty")
        return self


@dataclass
class TransitionDataset:
    """Each row is one real step: scaled state, scaled action, scaled next state."""
    x: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    u: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    x_next: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    episode: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    iteration: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    is_val: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.x)

    def append(self, x, u, x_next, episode: int, iteration: int, is_val: bool):
        self.x = np.vstack([self.x, np.reshape(x, (1, 2))])
        self.u = np.vstack([self.u, np.reshape(u, (1, 2))])
        self.x_next = np.vstack([self.x_next, np.reshape(x_next, (1, 2))])
        self.episode = np.append(self.episode, episode)
        self.iteration = np.append(self.iteration, iteration)
        self.is_val = np.append(self.is_val, bool(is_val))

    def _subset(self, mask) -> Split:
        return Split(self.x[mask], self.u[mask], self.x_next[mask])

    def train(self) -> Split:
        return self._subset(~self.is_val)

    def val(self) -> Split:
        return self._subset(self.is_val)

    def train_states(self) -> np.ndarray:
        return self.x[~self.is_val]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("x", "u", "x_next", "episode", "iteration", "is_val")}

    @classmethod
    def from_dict(cls, doc: dict) -> "TransitionDataset":
        return cls(np.asarray(doc["x"], dtype=np.float64).reshape(-1, 2),
                   np.asarray(doc["u"], dtype=np.float64).reshape(-1, 2),
                   np.asarray(doc["x_next"], dtype=np.float64).reshape(-1, 2),
                   np.asarray(doc["episode"], dtype=np.int64),
                   np.asarray(doc["iteration"], dtype=np.int64),
                   np.asarray(doc["is_val"], dtype=bool))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for i in range(len(self)):
                w.writerow([repr(float(v)) for v in (*self.x[i], *self.u[i], *self.x_next[i])]
                           + [int(self.episode[i]), int(self.iteration[i]),
                              "val" if self.is_val[i] else "train"])

    @classmethod
    def from_csv(cls, path) -> "TransitionDataset":
        ds = cls()
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ConfigurationError(f"transitions CSV lacks columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    rows.append(([float(row[c]) for c in COLUMNS[:6]],
                                 int(row["episode"]), int(row["iteration"]),
                                 row["split"].strip() == "val"))
                except ValueError as exc:
                    raise ConfigurationError(f"line {lineno}: {exc}") from None
        if rows:
            num = np.array([r[0] for r in rows])
            ds = cls(num[:, 0:2], num[:, 2:4], num[:, 4:6],
                     np.array([r[1] for r in rows], dtype=np.int64),
                     np.array([r[2] for r in rows], dtype=np.int64),
                     np.array([r[3] for r in rows], dtype=bool))
        return ds


def minibatches(n: int, batch_size: int, rng) -> list:
    """Shuffled index batches covering ``range(n)`` once."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
