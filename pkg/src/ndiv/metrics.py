"""Distribution-similarity metrics between generated and real action sets."""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .data import star_membership

LN2 = math.log(2.0)
DEFAULT_BINS = 64
SMOOTHING = 1e-10

CSV_COLUMNS = (
    "model",
    "frechet_distance",
    "frechet_distance_std",
    "js_divergence",
    "js_divergence_std",
    "inside_fraction",
    "inside_fraction_std",
    "min_arm_mass",
    "per_arm_mass",
    "n_seeds",
    "bins",
    "smoothing",
)


class MetricError(ArithmeticError):
    pass


@dataclass
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray


def fit_gaussian(samples):
    """Sample mean and unbiased covariance of an (N, d) array."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"fit_gaussian needs N >= d + 1 = {d + 1} samples, got {n}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (n - 1)
    return GaussianFit(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(m):
    """Square root of a symmetric PSD matrix by eigendecomposition."""
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -1e-10 * scale:
        raise MetricError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(sigma_a, sigma_b):
    """trace((sigma_a sigma_b)^(1/2)) for PSD covariances.

    For 2x2 inputs uses tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)), valid because
    M = sigma_a sigma_b is similar to the PSD matrix
    sigma_a^(1/2) sigma_b sigma_a^(1/2). Other sizes go through that
    symmetrized product and an eigendecomposition.
    """
    if sigma_a.shape == (2, 2):
        m = sigma_a @ sigma_b
        tr = m[0, 0] + m[1, 1]
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        return math.sqrt(max(tr + 2.0 * math.sqrt(max(det, 0.0)), 0.0))
    root_a = _psd_sqrt(sigma_a)
    inner = _psd_sqrt(root_a @ sigma_b @ root_a)
    return float(np.trace(inner))


def frechet_distance(a, b):
    """Squared 2-Wasserstein distance between two Gaussian fits."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    for cov in (a.covariance, b.covariance):
        w = np.linalg.eigvalsh(cov)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise MetricError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    diff = a.mean - b.mean
    value = (
        float(diff @ diff)
        + float(np.trace(a.covariance) + np.trace(b.covariance))
        - 2.0 * trace_sqrt_product(a.covariance, b.covariance)
    )
    return max(value, 0.0)


def frechet_distance_samples(p, q):
    return frechet_distance(fit_gaussian(p), fit_gaussian(q))


@dataclass
class Histogram2D:
    x_range: tuple
    y_range: tuple
    bins: np.ndarray  # (B, B) probability mass

    @property
    def n_bins(self):
        return self.bins.shape[0]


def histogram2d(samples, x_range, y_range, bins=DEFAULT_BINS):
    """Normalized 2D histogram; mass is zero everywhere if nothing fell in range."""
    pts = np.ascontiguousarray(np.asarray(samples, dtype=np.float64).reshape(-1, 2))
    counts = kernels.histogram2d(pts, x_range[0], x_range[1], y_range[0], y_range[1], bins)
    total = counts.sum()
    return Histogram2D(tuple(x_range), tuple(y_range), counts / total if total > 0 else counts)


def _common_range(p, q, pad=0.05):
    both = np.concatenate([p, q])
    lo, hi = both.min(axis=0), both.max(axis=0)
    width = hi - lo
    ranges = []
    for k in range(2):
        if width[k] > 0.0:
            ranges.append((lo[k] - pad * width[k], hi[k] + pad * width[k]))
        else:
            ranges.append((lo[k] - 0.5, hi[k] + 0.5))
    return ranges


def _kl(p, m):
    return float(np.sum(p * np.log(p / m)))


def js_divergence(p_samples, q_samples, bins=DEFAULT_BINS, range=None, eps=SMOOTHING):
    """Jensen-Shannon divergence (natural log) between histograms of two 2D
    sample sets over their common bounding box padded by 5%."""
    p_samples = np.asarray(p_samples, dtype=np.float64).reshape(-1, 2)
    q_samples = np.asarray(q_samples, dtype=np.float64).reshape(-1, 2)
    if len(p_samples) < 1 or len(q_samples) < 1:
        raise ValueError("js_divergence needs at least one sample in each set")
    if range is None:
        both = np.concatenate([p_samples, q_samples])
        if np.all(both == both[0]):
            return 0.0
        range = _common_range(p_samples, q_samples)
    x_range, y_range = range
    p = histogram2d(p_samples, x_range, y_range, bins).bins + eps
    q = histogram2d(q_samples, x_range, y_range, bins).bins + eps
    p /= p.sum()
    q /= q.sum()
    m = 0.5 * (p + q)
    value = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    return min(max(value, 0.0), LN2)


def star_coverage(samples, spec):
    """Share of samples inside the star, and share of all samples that are
    inside and fall in each lobe's angular sector (sums to inside_fraction)."""
    inside, sector = star_membership(spec, samples)
    n = len(inside)
    if n == 0:
        raise ValueError("star_coverage needs at least one sample")
    per_arm = np.bincount(sector[inside], minlength=spec.arms) / n
    return float(inside.mean()), [float(v) for v in per_arm]


@dataclass
class MetricsReport:
    frechet_distance: float
    js_divergence: float
    inside_fraction: float
    per_arm_mass: list
    model: str = ""
    frechet_distance_std: float = 0.0
    js_divergence_std: float = 0.0
    inside_fraction_std: float = 0.0
    n_seeds: int = 1
    bins: int = DEFAULT_BINS
    smoothing: float = SMOOTHING
    per_seed: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def min_arm_mass(self):
        return min(self.per_arm_mass) if self.per_arm_mass else 0.0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_seed"] = [cls.from_dict(s) for s in d.get("per_seed", [])]
        return cls(**d)

    def csv_row(self):
        """Values in ``CSV_COLUMNS`` order; per-arm masses joined by ';'."""
        values = {
            **{k: getattr(self, k) for k in CSV_COLUMNS if hasattr(self, k)},
            "min_arm_mass": self.min_arm_mass,
            "per_arm_mass": ";".join(repr(float(v)) for v in self.per_arm_mass),
        }
        out = []
        for k in CSV_COLUMNS:
            v = values[k]
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out


def aggregate_reports(reports, model=None):
    """Mean and sample standard deviation over per-seed reports."""
    if not reports:
        raise ValueError("no reports to aggregate")

    def stats(name):
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), std

    fd, fd_std = stats("frechet_distance")
    jsd, jsd_std = stats("js_divergence")
    inside, inside_std = stats("inside_fraction")
    per_arm = np.mean([r.per_arm_mass for r in reports], axis=0)
    return MetricsReport(
        frechet_distance=fd,
        js_divergence=jsd,
        inside_fraction=inside,
        per_arm_mass=[float(v) for v in per_arm],
        model=model if model is not None else reports[0].model,
        frechet_distance_std=fd_std,
        js_divergence_std=jsd_std,
        inside_fraction_std=inside_std,
        n_seeds=len(reports),
        bins=reports[0].bins,
        smoothing=reports[0].smoothing,
        per_seed=list(reports),
    )
