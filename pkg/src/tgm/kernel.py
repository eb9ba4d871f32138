"""Gaussian-mixture temporal kernels and their exact gradients.

A bank holds ``G`` groups of ``M`` Gaussians (``G == 1`` when all mixtures
share one set of Gaussians, ``G == n_mix`` when every mixed kernel owns its
own set) and ``n_mix`` rows of attention logits.  Mixed kernel ``i`` is the
softmax-weighted sum of the ``M`` normalized Gaussian rows of its group.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, UsageError

SIGMA_HAT_MIN = -8.0
SIGMA_HAT_MAX = 8.0
_TINY = np.finfo(np.float64).tiny


def reparam_center(mu_hat, L: int):
    """Map unconstrained centers into ``[0, L-1]``."""
    if L < 1:
        raise ConfigError(f"kernel length must be >= 1, got {L}")
    return (L - 1) * (np.tanh(mu_hat) + 1.0) / 2.0


def reparam_variance(sigma_hat):
    return np.exp(np.clip(sigma_hat, SIGMA_HAT_MIN, SIGMA_HAT_MAX))


def gaussian_kernel_rows(mu, sigma2, L: int):
    """Normalized Gaussian rows over taps ``0..L-1``.

    ``mu`` and ``sigma2`` share a shape ``S``; the result has shape
    ``S + (L,)`` and every row sums to one.  Returns ``(k_hat, z)`` where
    ``z`` is the per-row normalizer.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    taps = np.arange(L, dtype=np.float64)
    diff = taps - mu[..., None]
    # far taps of very narrow Gaussians underflow; the floor keeps rows strictly positive
    g = np.maximum(np.exp(-(diff * diff) / (2.0 * sigma2[..., None])), _TINY)
    z = g.sum(axis=-1)
    return g / z[..., None], z


def attention_weights(omega):
    """Row-wise softmax with max subtraction."""
    omega = np.asarray(omega, dtype=np.float64)
    e = np.exp(omega - omega.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _group_index(n_mix: int, n_groups: int):
    if n_groups == 1:
        return np.zeros(n_mix, dtype=np.intp)
    if n_groups == n_mix:
        return np.arange(n_mix)
    raise ConfigError(
        f"{n_groups} Gaussian groups cannot feed {n_mix} mixtures; "
        "use one shared group or one group per mixture")


def mix_kernels(a, k_hat):
    """Convex combination of kernel rows.

    ``a`` is ``(n_mix, M)``; ``k_hat`` is ``(M, L)`` (shared rows) or
    ``(G, M, L)`` with ``G`` equal to 1 or ``n_mix``.
    """
    a = np.asarray(a, dtype=np.float64)
    k_hat = np.asarray(k_hat, dtype=np.float64)
    if k_hat.ndim == 2:
        k_hat = k_hat[None]
    if a.ndim != 2 or k_hat.ndim != 3 or a.shape[1] != k_hat.shape[1]:
        raise ConfigError(
            f"cannot mix weights of shape {a.shape} with rows of shape {k_hat.shape}")
    rows = k_hat[_group_index(a.shape[0], k_hat.shape[0])]
    return np.einsum("im,iml->il", a, rows)


@dataclass
class KernelBank:
    """Materialized mixed kernels plus whatever the backward pass needs.

    ``k_hat`` has shape ``(G, M, L)`` and ``k`` has shape ``(n_mix, L)``.
    ``mu_hat``/``sigma_hat``/``mu``/``sigma2`` are ``None`` for banks built
    from fixed filters, in which case only the attention logits get gradients.
    """

    k_hat: np.ndarray
    k: np.ndarray
    a: np.ndarray
    mu_hat: Optional[np.ndarray] = None
    sigma_hat: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    sigma2: Optional[np.ndarray] = None

    @property
    def L(self) -> int:
        return self.k.shape[-1]

    @property
    def gaussian(self) -> bool:
        return self.mu is not None


def build_kernel_bank(mu_hat, sigma_hat, omega, L: int) -> KernelBank:
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    if mu_hat.shape != sigma_hat.shape or mu_hat.ndim != 2:
        raise ConfigError(
            f"centers {mu_hat.shape} and log-variances {sigma_hat.shape} must be "
            "matching (groups, M) arrays")
    mu = reparam_center(mu_hat, L)
    sigma2 = reparam_variance(sigma_hat)
    k_hat, _ = gaussian_kernel_rows(mu, sigma2, L)
    a = attention_weights(omega)
    return KernelBank(k_hat=k_hat, k=mix_kernels(a, k_hat), a=a,
                      mu_hat=mu_hat, sigma_hat=sigma_hat, mu=mu, sigma2=sigma2)


def bank_from_filters(filters, omega) -> KernelBank:
    """Bank whose rows are given filters (e.g. frozen random ones)."""
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim == 2:
        filters = filters[None]
    a = attention_weights(omega)
    return KernelBank(k_hat=filters, k=mix_kernels(a, filters), a=a)


def kernel_backward(d_k, bank: Optional[KernelBank]):
    """Pull a gradient on the mixed kernels back to the raw parameters.

    Returns ``(d_mu_hat, d_sigma_hat, d_omega)``; the first two are ``None``
    for filter-backed banks.  The normalizer of each Gaussian row is a
    function of its center and variance and is differentiated as such.
    """
    if bank is None:
        raise UsageError("kernel_backward needs the bank from a forward pass")
    d_k = np.asarray(d_k, dtype=np.float64)
    if d_k.shape != bank.k.shape:
        raise ConfigError(f"kernel gradient {d_k.shape} != kernels {bank.k.shape}")
    n_mix = bank.k.shape[0]
    n_groups, M, L = bank.k_hat.shape
    group = _group_index(n_mix, n_groups)

    # softmax backward
    d_a = np.einsum("il,iml->im", d_k, bank.k_hat[group])
    d_omega = bank.a * (d_a - (bank.a * d_a).sum(axis=1, keepdims=True))
    if not bank.gaussian:
        return None, None, d_omega

    d_khat = np.zeros_like(bank.k_hat)
    np.add.at(d_khat, group, bank.a[:, :, None] * d_k[:, None, :])

    # k_hat = g / sum(g): d(log g_l) projected onto the simplex tangent
    k_hat = bank.k_hat
    centered = d_khat - (d_khat * k_hat).sum(axis=-1, keepdims=True)
    diff = np.arange(L, dtype=np.float64) - bank.mu[..., None]
    s = bank.sigma2[..., None]
    d_mu = (k_hat * centered * diff / s).sum(axis=-1)
    d_sigma2 = (k_hat * centered * diff * diff / (2.0 * s * s)).sum(axis=-1)

    d_mu_hat = d_mu * (L - 1) / 2.0 * (1.0 - np.tanh(bank.mu_hat) ** 2)
    inside = (bank.sigma_hat >= SIGMA_HAT_MIN) & (bank.sigma_hat <= SIGMA_HAT_MAX)
    d_sigma_hat = np.where(inside, d_sigma2 * bank.sigma2, 0.0)
    return d_mu_hat, d_sigma_hat, d_omega


def init_gaussian_params(rng: np.random.Generator, n_groups: int, M: int):
    """Centers evenly tiling the kernel, unit variance.

    ``rng`` is accepted for interface symmetry; the grid is deterministic so
    frozen and learned mixtures start from the same basis.
    """
    u = np.broadcast_to((np.arange(M) + 0.5) / M * 0.9 + 0.05, (n_groups, M))
    return np.arctanh(2.0 * u - 1.0), np.zeros((n_groups, M))


def init_attention_logits(rng: np.random.Generator, n_mix: int, M: int):
    return rng.normal(0.0, 0.01, size=(n_mix, M))


def random_filters(rng: np.random.Generator, n_groups: int, M: int, L: int):
    f = rng.uniform(0.0, 1.0, size=(n_groups, M, L))
    # uniform() is [0, 1); keep every tap strictly positive
    f = np.maximum(f, np.finfo(np.float64).tiny)
    return f / f.sum(axis=-1, keepdims=True)


def write_kernel_csv(path, kernels) -> int:
    """Write kernels as ``out_channel,in_channel,tap,value`` CSV rows.

    ``kernels`` is a list of ``(C_out, C_in, L)`` arrays, one per layer,
    written back to back; channel indices restart at each layer.  Returns the
    number of kernels (not CSV lines) written.
    """
    n_rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["out_channel", "in_channel", "tap", "value"])
        for k in kernels:
            c_out, c_in, L = k.shape
            for i in range(c_out):
                for j in range(c_in):
                    for tap in range(L):
                        writer.writerow([i, j, tap, f"{k[i, j, tap]:.9g}"])
                    n_rows += 1
    return n_rows
