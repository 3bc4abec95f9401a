"""Synthetic push-the-ball task: a star-shaped 2D action region, a swirl
warp from actions to resulting ball positions, and CSV + JSON persistence.
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence"
DATASET_FORMAT_VERSION = 1
COLUMNS = ("s_t_x", "s_t_y", "a_x", "a_y", "s_next_x", "s_next_y")
REJECTION_CAP = 10000


class SamplingError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StarSpec:
    arms: int = 5
    r_inner: float = 0.35
    r_outer: float = 1.0
    center: tuple = (0.0, 0.0)
    rotation: float = 0.0

    def __post_init__(self):
        if int(self.arms) != self.arms or self.arms < 3:
            raise ValueError(f"arms must be an integer >= 3, got {self.arms}")
        if not 0.0 < self.r_inner < self.r_outer:
            raise ValueError(
                f"need 0 < r_inner < r_outer, got r_inner={self.r_inner}, r_outer={self.r_outer}"
            )
        object.__setattr__(self, "arms", int(self.arms))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def to_dict(self):
        d = asdict(self)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "center": tuple(d.get("center", (0.0, 0.0)))})

    def area(self):
        """Area of the star region, 1/2 * integral of R(theta)^2 (closed form)."""
        mid = 0.5 * (self.r_inner + self.r_outer)
        amp = 0.5 * (self.r_outer - self.r_inner)
        return np.pi * (mid * mid + 0.5 * amp * amp)


def star_boundary_radius(spec, theta):
    """R(theta) = r_inner + (r_outer - r_inner) * (1 + cos(arms * (theta - rotation))) / 2."""
    theta = np.asarray(theta, dtype=np.float64)
    wave = 0.5 + 0.5 * np.cos(spec.arms * (theta - spec.rotation))
    return spec.r_inner + (spec.r_outer - spec.r_inner) * wave


def star_membership(spec, points):
    """Inside flags and lobe index (sector centered on each arm) per point."""
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    cx, cy = spec.center
    return kernels.star_membership(
        points, cx, cy, spec.arms, spec.r_inner, spec.r_outer, spec.rotation
    )


def inside_star(spec, points):
    return star_membership(spec, points)[0]


def _propose(spec, rng, n):
    radius = spec.r_outer * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return pts + np.asarray(spec.center), radius <= star_boundary_radius(spec, theta)


def sample_star_action(spec, rng):
    """One action drawn uniformly from the star by rejection from its disk."""
    for _ in range(REJECTION_CAP):
        pts, ok = _propose(spec, rng, 1)
        if ok[0]:
            return pts[0]
    raise SamplingError(f"no acceptance in {REJECTION_CAP} proposals for {spec}")


def sample_star_actions(spec, n, rng):
    """``n`` actions drawn uniformly from the star (vectorized rejection)."""
    accepted = []
    have = 0
    chunk = max(2 * n, 1024)
    while have < n:
        pts, ok = _propose(spec, rng, chunk)
        if not ok.any() and chunk >= REJECTION_CAP:
            raise SamplingError(f"no acceptance in {chunk} proposals for {spec}")
        accepted.append(pts[ok])
        have += int(ok.sum())
    return np.concatenate(accepted)[:n]


def warp_to_state(a, gamma=1.5, stretch=0.5):
    """Swirl map: rotate each action by gamma * |a| and scale by (1 + stretch * |a|)."""
    a = np.asarray(a, dtype=np.float64)
    r = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    phi = gamma * r
    c, s = np.cos(phi), np.sin(phi)
    x, y = a[..., :1], a[..., 1:2]
    rotated = np.concatenate([c * x - s * y, s * x + c * y], axis=-1)
    return rotated * (1.0 + stretch * r)


class Transition(NamedTuple):
    s_t: np.ndarray
    a_t: np.ndarray
    s_next: np.ndarray


@dataclass
class Dataset:
    """Transitions stored column-wise as (n, 2) arrays."""

    s_t: np.ndarray
    actions: np.ndarray
    s_next: np.ndarray
    spec: StarSpec
    seed: int
    split: str = "train"
    rng_algorithm: str = RNG_ALGORITHM

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, i):
        return Transition(self.s_t[i], self.actions[i], self.s_next[i])

    @property
    def transitions(self):
        return [self[i] for i in range(len(self))]

    def fixed_state(self):
        """True when every transition starts from the same state."""
        return bool(np.all(self.s_t == self.s_t[0]))

    def sidecar(self):
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "columns": list(COLUMNS),
            "n": len(self),
            "rng_algorithm": self.rng_algorithm,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "split": self.split,
        }


def _make_split(spec, n, rng, seed, split):
    actions = sample_star_actions(spec, n, rng)
    s_t = np.zeros_like(actions) + np.asarray(spec.center)
    return Dataset(s_t, actions, warp_to_state(actions), spec, seed, split)


def generate_dataset(spec=StarSpec(), n_train=600, n_test=1000, seed=0):
    """Independent train and test splits, deterministic in ``seed``."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    train = _make_split(spec, n_train, np.random.default_rng(train_ss), seed, "train")
    test = _make_split(spec, n_test, np.random.default_rng(test_ss), seed, "test")
    return train, test


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def save_dataset(d, path):
    """Write ``path`` (CSV, one transition per row) and its JSON sidecar."""
    path = Path(path)
    table = np.concatenate([d.s_t, d.actions, d.s_next], axis=1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    sidecar_path(path).write_text(json.dumps(d.sidecar(), indent=2, sort_keys=True) + "\n")
    return path


def read_table(path, columns):
    """Parse a headed numeric CSV into an (n, len(columns)) array."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != tuple(columns):
            raise DatasetFormatError(f"{path}:1: expected header {','.join(columns)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DatasetFormatError(
                    f"{path}:{line_no}: expected {len(columns)} fields, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{line_no}: {exc}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, len(columns))


def load_dataset(path):
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{sidecar_path(path)}:{exc.lineno}: {exc.msg}") from None
    table = read_table(path, COLUMNS)
    return Dataset(
        s_t=table[:, 0:2],
        actions=table[:, 2:4],
        s_next=table[:, 4:6],
        spec=StarSpec.from_dict(meta["spec"]),
        seed=meta["seed"],
        split=meta.get("split", "train"),
        rng_algorithm=meta.get("rng_algorithm", RNG_ALGORITHM),
    )
