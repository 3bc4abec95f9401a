"""Training objectives: normalized diversity, hinge adversarial losses,
forward-model reconstruction and the VAE baseline ELBO."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DimensionError


@dataclass(frozen=True)
class NdivConfig:
    alpha: float = 0.8
    n_samples: int = 10

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        if self.n_samples < 2:
            raise ContractError(f"n_samples must be >= 2, got {self.n_samples}")


class NormalizedDistances(NamedTuple):
    matrix: dc.Tensor
    degenerate: np.ndarray  # bool per row: all distances in the row were zero


def pairwise_distances(samples):
    """(N, N) Euclidean distances between the rows of an (N, d) sample matrix."""
    samples = dc.as_tensor(samples)
    if samples.ndim == 1:
        samples = dc.reshape(samples, (-1, 1))
    if samples.shape[0] < 2:
        raise ContractError(f"pairwise_distances needs N >= 2 samples, got {samples.shape[0]}")
    return dc.pairwise_distances(samples)


def normalize_rows(d, stop_gradient_normalizer=True):
    """Divide each row by its sum.

    With ``stop_gradient_normalizer`` the row sums are detached, so gradients
    move the absolute distances rather than the normalizer. Rows whose
    distances are all zero stay zero and are flagged in ``degenerate``.
    """
    d = dc.as_tensor(d)
    row_sum = dc.sum(d, axis=1, keepdims=True)
    degenerate = row_sum.data[:, 0] <= 0.0
    if stop_gradient_normalizer:
        row_sum = dc.detach(row_sum)
    if degenerate.any():
        row_sum = row_sum + degenerate[:, None].astype(np.float64)
    return NormalizedDistances(d / row_sum, degenerate)


def _as_normalized(x):
    if isinstance(x, NormalizedDistances):
        return x
    x = dc.as_tensor(x)
    return NormalizedDistances(x, np.zeros(x.shape[0], dtype=bool))


def ndiv_loss(dz, da, cfg=NdivConfig()):
    """Mean over off-diagonal pairs of max(0, alpha * Dz - Da).

    Terms in rows that are degenerate in either matrix are dropped; the
    1 / (N^2 - N) scale is kept.
    """
    dz, da = _as_normalized(dz), _as_normalized(da)
    n = dz.matrix.shape[0]
    if dz.matrix.shape != da.matrix.shape or dz.matrix.shape != (n, n):
        raise DimensionError(
            f"ndiv_loss: latent matrix {dz.matrix.shape} vs action matrix {da.matrix.shape}"
        )
    if n < 2:
        raise ContractError("ndiv_loss needs n >= 2")
    mask = 1.0 - np.eye(n)
    skip = dz.degenerate | da.degenerate
    if skip.any():
        mask[skip, :] = 0.0
    hinge = dc.max0(cfg.alpha * dz.matrix - da.matrix) * mask
    return dc.sum(hinge) * (1.0 / (n * n - n))


def ndiv_from_samples(z, actions, cfg=NdivConfig(), stop_gradient_normalizer=True):
    """Normalized diversity loss straight from latent and action samples.

    Returns the loss and the number of degenerate action rows.
    """
    dz = normalize_rows(pairwise_distances(dc.detach(z)), stop_gradient_normalizer)
    da = normalize_rows(pairwise_distances(actions), stop_gradient_normalizer)
    return ndiv_loss(dz, da, cfg), int(da.degenerate.sum())


def _scores(x, what):
    x = dc.as_tensor(x)
    if x.size == 0:
        raise ContractError(f"{what}: empty score vector")
    return x


def hinge_discriminator_loss(real_scores, fake_scores):
    real = _scores(real_scores, "hinge_discriminator_loss")
    fake = _scores(fake_scores, "hinge_discriminator_loss")
    return dc.mean(dc.max0(1.0 - real)) + dc.mean(dc.max0(1.0 + fake))


def hinge_generator_loss(fake_scores):
    return -dc.mean(_scores(fake_scores, "hinge_generator_loss"))


def reconstruction_loss(predicted, target, squared=False):
    """Euclidean distance between prediction and target.

    Batches of row vectors are averaged over rows. ``squared`` switches to
    the squared norm.
    """
    predicted, target = dc.as_tensor(predicted), dc.as_tensor(target)
    if predicted.shape != target.shape:
        raise DimensionError(
            f"reconstruction_loss: predicted {predicted.shape} vs target {target.shape}"
        )
    diff = target - predicted
    if squared:
        per_row = dc.sum(dc.square(diff), axis=-1)
    else:
        per_row = dc.euclidean_norm(diff, axis=-1)
    return dc.mean(per_row) if per_row.ndim else per_row


def gaussian_kl(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    mu, logvar = dc.as_tensor(mu), dc.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise DimensionError(f"gaussian_kl: mu {mu.shape} vs logvar {logvar.shape}")
    inner = dc.exp(logvar) + dc.square(mu) - 1.0 - logvar
    return 0.5 * dc.sum(inner, axis=-1)


def vae_elbo_loss(recon, target, mu, logvar, beta=1.0):
    """Squared-error reconstruction plus ``beta`` times the Gaussian KL, per
    sample, averaged over the batch."""
    recon, target = dc.as_tensor(recon), dc.as_tensor(target)
    mu = dc.as_tensor(mu)
    if recon.shape != target.shape:
        raise DimensionError(f"vae_elbo_loss: recon {recon.shape} vs target {target.shape}")
    if recon.shape[:-1] != mu.shape[:-1]:
        raise DimensionError(f"vae_elbo_loss: batch of recon {recon.shape} vs mu {mu.shape}")
    rec = dc.sum(dc.square(target - recon), axis=-1)
    per_sample = rec + beta * gaussian_kl(mu, logvar)
    return dc.mean(per_sample) if per_sample.ndim else per_sample
