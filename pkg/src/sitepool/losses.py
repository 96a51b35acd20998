"""Objective terms for both training stages and the MMD criterion.

Stage one couples the sphere encoder with the rotation-valued map through
paired covariate transports; stage two builds the invariance code through
the equivariance-preserving composition and penalizes site discrepancy with
a kernel MMD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .liegroup import ConfigError, LatentPoint, group_elem
from .nn import Mlp


class ContractError(ValueError):
    """A precondition on batch contents was violated."""


@dataclass(frozen=True)
class PairBatch:
    """Paired samples (features, covariate) for the equivariance loss."""

    xi: np.ndarray  # (B, d)
    ci: np.ndarray  # (B,), normalized covariates in [0, 1]
    xj: np.ndarray  # (B, d)
    cj: np.ndarray  # (B,)

    def __post_init__(self):
        for name in ("xi", "ci", "xj", "cj"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if len(self.xi) == 0:
            raise ContractError("empty pair batch")
        if self.xi.shape != self.xj.shape or self.ci.shape != self.cj.shape \
                or self.ci.shape != (self.xi.shape[0],):
            raise ContractError("pair batch arrays have inconsistent shapes")
        for c in (self.ci, self.cj):
            if c.min() < -1e-9 or c.max() > 1.0 + 1e-9:
                raise ContractError("covariates must be normalized to [0, 1]")

    def __len__(self):
        return self.xi.shape[0]


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel settings for the MMD estimator."""

    sigma: float | None = None      # explicit bandwidth; None => median heuristic
    estimator: str = "biased"
    family: str = "rbf"

    def __post_init__(self):
        if self.family != "rbf":
            raise ConfigError(f"unsupported kernel family {self.family!r}")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.estimator not in ("biased", "unbiased"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")


def group_stack(ci: np.ndarray, cj: np.ndarray, kappa: float, param: str,
                n: int) -> np.ndarray:
    """Constant (B, n, n) stack of covariate-transport rotations."""
    return np.stack([group_elem(a, b, kappa, param, n).matrix
                     for a, b in zip(ci, cj)])


def stage1_loss(pairs: PairBatch, encoder: Mlp, tau_net: Mlp, kappa: float = 1.0,
                param: str = "expm") -> ad.Node:
    """Average two-sided transport mismatch of the rotation map over pairs.

    For each pair the covariate rotation is a constant; gradients flow into
    the encoder and the rotation-valued network only.
    """
    n = encoder.spec.widths[-1]
    li = encoder(ad.constant(pairs.xi))
    lj = encoder(ad.constant(pairs.xj))
    ti = tau_net(li)
    tj = tau_net(lj)
    fwd = group_stack(pairs.ci, pairs.cj, kappa, param, n)
    # G(j, i) equals G(i, j)^{-1} = G(i, j)^T for both parameterizations.
    bwd = np.ascontiguousarray(fwd.transpose(0, 2, 1))
    term1 = ad.frobenius_sq(ad.sub(ad.left_apply(fwd, ti), tj))
    term2 = ad.frobenius_sq(ad.sub(ad.left_apply(bwd, tj), ti))
    return ad.scale(ad.add(term1, term2), 1.0 / len(pairs))


def recon_x_loss(batch: np.ndarray, encoder: Mlp, decoder: Mlp) -> ad.Node:
    """Mean squared reconstruction error in input space."""
    batch = np.asarray(batch, dtype=np.float64)
    if len(batch) == 0:
        raise ContractError("empty batch")
    recon = decoder(encoder(ad.constant(batch)))
    return ad.scale(ad.frobenius_sq(ad.sub(recon, ad.constant(batch))), 1.0 / len(batch))


def phi_batch(latents: ad.Node, tau_net: Mlp, b_net: Mlp) -> ad.Node:
    """Equivariance-preserving codes for a batch of sphere points.

    Computes R b(R^T l) row-wise with R the rotation assigned to each point;
    the inverse is taken as the transpose, never a matrix inverse.
    """
    rots = tau_net(latents)
    pulled = ad.rowwise_matvec(rots, latents, transpose_mat=True)
    return ad.rowwise_matvec(rots, b_net(pulled), transpose_mat=False)


def phi(point: LatentPoint, tau_net: Mlp, b_net: Mlp) -> np.ndarray:
    """Invariant code of a single sphere point (no gradients)."""
    out = phi_batch(ad.constant(point.vec.reshape(1, -1)), tau_net, b_net)
    return out.value[0]


def phi_frozen(rot_flats: np.ndarray, latents: np.ndarray, b_net: Mlp) -> ad.Node:
    """phi with precomputed (frozen) rotations; only b receives gradients."""
    rot_node = ad.constant(rot_flats)
    lat_node = ad.constant(latents)
    pulled = ad.rowwise_matvec(rot_node, lat_node, transpose_mat=True)
    return ad.rowwise_matvec(rot_node, b_net(pulled), transpose_mat=False)


def stage2_terms(latents: np.ndarray, rot_flats: np.ndarray, labels: np.ndarray,
                 b_net: Mlp, psi: Mlp, head: Mlp):
    """Reconstruction and prediction terms of the stage-two loss.

    latents and rot_flats come from the frozen stage-one networks. Returns
    (recon, pred, codes) where codes is the differentiable batch of
    invariant codes feeding the MMD criterion.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    batch = len(latents)
    if batch == 0:
        raise ContractError("empty batch")
    codes = phi_frozen(rot_flats, latents, b_net)
    recon = ad.scale(
        ad.frobenius_sq(ad.sub(psi(codes), ad.constant(latents))), 1.0 / batch)
    pred = ad.scale(
        ad.frobenius_sq(ad.sub(head(codes), ad.constant(labels))), 1.0 / batch)
    return recon, pred, codes


def stage2_loss(latents, rot_flats, labels, b_net: Mlp, psi: Mlp, head: Mlp) -> ad.Node:
    """Combined mean of the stage-two reconstruction and prediction terms."""
    recon, pred, _ = stage2_terms(latents, rot_flats, labels, b_net, psi, head)
    return ad.add(recon, pred)


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median of pairwise euclidean distances over a pooled sample."""
    pooled = np.asarray(pooled, dtype=np.float64)
    diffs = pooled[:, None, :] - pooled[None, :, :]
    dists = np.sqrt(np.einsum("abd,abd->ab", diffs, diffs))
    upper = dists[np.triu_indices(len(pooled), k=1)]
    if upper.size == 0 or np.all(upper == 0):
        return 1.0
    return float(np.median(upper[upper > 0]))


def _resolve_sigma(cfg: KernelConfig, z1: np.ndarray, z2: np.ndarray) -> float:
    if cfg.sigma is not None:
        return cfg.sigma
    return median_bandwidth(np.vstack([z1, z2]))


def _kernel_mean(a, b, sigma: float) -> ad.Node:
    return ad.mean_all(ad.exp(ad.scale(ad.pairwise_sqdist(a, b), -0.5 / sigma ** 2)))


def mmd2(z1, z2, cfg: KernelConfig = KernelConfig()) -> ad.Node:
    """Squared MMD between two code batches under an RBF kernel.

    Biased V-statistic by default (non-negative, smooth); the unbiased
    U-statistic removes the diagonal terms and needs two samples per batch.
    """
    z1n = z1 if isinstance(z1, ad.Node) else ad.constant(np.atleast_2d(z1))
    z2n = z2 if isinstance(z2, ad.Node) else ad.constant(np.atleast_2d(z2))
    a, b = len(z1n.value), len(z2n.value)
    if cfg.estimator == "unbiased" and (a < 2 or b < 2):
        raise ContractError("unbiased MMD needs at least two samples per batch")
    if a < 1 or b < 1:
        raise ContractError("MMD needs nonempty batches")
    sigma = _resolve_sigma(cfg, z1n.value, z2n.value)
    kxy = _kernel_mean(z1n, z2n, sigma)
    if cfg.estimator == "biased":
        kxx = _kernel_mean(z1n, z1n, sigma)
        kyy = _kernel_mean(z2n, z2n, sigma)
        return ad.add(ad.sub(kxx, ad.scale(kxy, 2.0)), kyy)
    # Diagonal kernel entries are exactly 1 and carry no gradient.
    kxx = ad.scale(ad.add(ad.sum_all(
        ad.exp(ad.scale(ad.pairwise_sqdist(z1n, z1n), -0.5 / sigma ** 2))),
        ad.constant(-float(a))), 1.0 / (a * (a - 1)))
    kyy = ad.scale(ad.add(ad.sum_all(
        ad.exp(ad.scale(ad.pairwise_sqdist(z2n, z2n), -0.5 / sigma ** 2))),
        ad.constant(-float(b))), 1.0 / (b * (b - 1)))
    return ad.add(ad.sub(kxx, ad.scale(kxy, 2.0)), kyy)


def mmd_multisite(codes_by_site, cfg: KernelConfig = KernelConfig()) -> ad.Node:
    """Mean of pairwise MMD^2 over all unordered site pairs.

    With the median heuristic, one bandwidth is computed from the pooled
    codes and shared across all pairs.
    """
    batches = list(codes_by_site)
    if len(batches) < 2:
        raise ContractError("need at least two sites for the MMD criterion")
    nodes = [z if isinstance(z, ad.Node) else ad.constant(np.atleast_2d(z))
             for z in batches]
    if cfg.sigma is None:
        pooled = np.vstack([z.value for z in nodes])
        cfg = KernelConfig(sigma=median_bandwidth(pooled), estimator=cfg.estimator)
    total = None
    count = 0
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            term = mmd2(nodes[i], nodes[j], cfg)
            total = term if total is None else ad.add(total, term)
            count += 1
    return ad.scale(total, 1.0 / count)
