"""Temporal layer forms over ``C x D x T`` feature tensors.

All convolutions are cross-correlations with "same" zero padding: output
frame ``t`` reads input frames ``t + l - L // 2`` for taps ``l = 0..L-1``,
so every layer preserves the number of frames.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernel as K
from .errors import ConfigError, UsageError


class LayerForm(str, enum.Enum):
    CONV1D_STANDARD = "conv1d_standard"
    CONV1D_SHARED_GAUSSIAN = "conv1d_shared_gaussian"
    CONV1D_PER_CHANNEL_GAUSSIAN = "conv1d_per_channel_gaussian"
    TGM_SINGLE = "tgm_single"
    TGM_GROUPED = "tgm_grouped"
    TGM_COMBINE_1X1 = "tgm_channel_combine_1x1"
    TGM_COMBINE_SOFT = "tgm_channel_combine_soft"
    TC_UNCONSTRAINED = "tc_unconstrained"


class KernelSource(str, enum.Enum):
    LEARNED = "learned_gaussian_mixture"
    FIXED_GAUSSIAN = "fixed_gaussian_mixture"
    FIXED_RANDOM = "fixed_random_filters"
    FREE = "unconstrained_free"


class Combine(str, enum.Enum):
    ONE_BY_ONE_RELU = "1x1_relu"
    SOFT_ATTENTION = "soft_attention"


# forms that flatten C x D into the 1-D conv input channels and emit C_out x 1 x T
DENSE_FORMS = frozenset({
    LayerForm.CONV1D_STANDARD,
    LayerForm.CONV1D_SHARED_GAUSSIAN,
    LayerForm.CONV1D_PER_CHANNEL_GAUSSIAN,
})
COMBINE_FORMS = frozenset({
    LayerForm.TGM_COMBINE_1X1,
    LayerForm.TGM_COMBINE_SOFT,
    LayerForm.TC_UNCONSTRAINED,
})
RAW_TAP_FORMS = frozenset({LayerForm.CONV1D_STANDARD, LayerForm.TC_UNCONSTRAINED})
MIXTURE_SOURCES = (KernelSource.LEARNED, KernelSource.FIXED_GAUSSIAN, KernelSource.FIXED_RANDOM)


def valid_sources(form: LayerForm):
    """Kernel sources a layer form accepts."""
    return (KernelSource.FREE,) if form in RAW_TAP_FORMS else MIXTURE_SOURCES


@dataclass
class LayerConfig:
    form: LayerForm
    source: KernelSource = KernelSource.LEARNED
    c_in: int = 1
    c_out: int = 1
    L: int = 3
    M: int = 1
    d: int = 1
    shared_gaussians: bool = True

    def __post_init__(self):
        self.form = LayerForm(self.form)
        self.source = KernelSource(self.source)

    def validate(self) -> None:
        for name in ("c_in", "c_out", "L", "M", "d"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.form is LayerForm.TGM_SINGLE and self.c_in != 1:
            raise ConfigError(f"tgm_single needs c_in == 1, got {self.c_in}")
        if self.form is LayerForm.TGM_GROUPED and self.c_in != self.c_out:
            raise ConfigError(
                f"tgm_grouped needs c_in == c_out, got {self.c_in} and {self.c_out}")
        if self.source not in valid_sources(self.form):
            raise ConfigError(
                f"{self.form.value} cannot use kernel source {self.source.value}")

    @property
    def conv_inputs(self) -> int:
        """Input rows seen by a dense 1-D conv (``c_in * d``)."""
        return self.c_in * self.d

    @property
    def n_kernels(self) -> int:
        """Number of distinct 1 x L kernels the layer materializes."""
        if self.form in (LayerForm.CONV1D_STANDARD, LayerForm.CONV1D_PER_CHANNEL_GAUSSIAN):
            return self.c_out * self.conv_inputs
        if self.form in COMBINE_FORMS:
            return self.c_out * self.c_in
        return self.c_out

    @property
    def n_gaussian_groups(self) -> int:
        return 1 if self.shared_gaussians else self.n_kernels

    @property
    def d_out(self) -> int:
        return 1 if self.form in DENSE_FORMS else self.d

    @property
    def combine(self) -> Optional[Combine]:
        if self.form is LayerForm.TGM_COMBINE_SOFT:
            return Combine.SOFT_ATTENTION
        if self.form in COMBINE_FORMS:
            return Combine.ONE_BY_ONE_RELU
        return None


def param_count(config: LayerConfig) -> int:
    """Learnable parameters of one layer (frozen tensors excluded)."""
    config.validate()
    n = config.n_kernels
    M, G = config.M, config.n_gaussian_groups
    if config.source is KernelSource.FREE:
        count = n * config.L
    elif config.source is KernelSource.LEARNED:
        count = 2 * M * G + n * M
    else:
        count = n * M
    if config.combine is not None:
        count += config.c_out * config.c_in
    return count


# ---------------------------------------------------------------------------
# functional forward ops


def _windows(x, L: int):
    """Zero-padded sliding windows along the last axis: ``(..., T) -> (..., T, L)``."""
    h = L // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(h, L - 1 - h)]
    return sliding_window_view(np.pad(x, pad), L, axis=-1)


def _fold_windows(d_windows, L: int):
    """Adjoint of :func:`_windows`."""
    T = d_windows.shape[-2]
    h = L // 2
    out = np.zeros(d_windows.shape[:-2] + (T + L - 1,))
    for tap in range(L):
        out[..., tap:tap + T] += d_windows[..., tap]
    return out[..., h:h + T]


def _check_time(x):
    if x.shape[-1] < 1:
        raise ConfigError("input must have at least one frame")


def conv1d_forward(x, kernels):
    """Standard 1-D convolution of a ``D x T`` input with ``C x D x L`` kernels."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if x.ndim != 2 or kernels.ndim != 3 or kernels.shape[1] != x.shape[0]:
        raise ConfigError(f"input {x.shape} does not match kernels {kernels.shape}")
    _check_time(x)
    return np.einsum("dtl,cdl->ct", _windows(x, kernels.shape[2]), kernels, optimize=True)


def tgm_single_forward(v, kernels):
    """Apply each ``1 x L`` kernel along time for every feature row of ``v``."""
    v = np.asarray(v, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if v.ndim != 2 or kernels.ndim != 2:
        raise ConfigError(f"expected D x T input and C x L kernels, got {v.shape}, {kernels.shape}")
    _check_time(v)
    return np.einsum("dtl,il->idt", _windows(v, kernels.shape[1]), kernels, optimize=True)


def tgm_grouped_forward(f, kernels):
    """Channel ``i`` of ``f`` convolved with kernel ``i`` (groups = channels)."""
    f = np.asarray(f, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if f.ndim != 3 or kernels.ndim != 2 or kernels.shape[0] != f.shape[0]:
        raise ConfigError(
            f"grouped conv needs one kernel per channel: input {f.shape}, kernels {kernels.shape}")
    _check_time(f)
    return np.einsum("idtl,il->idt", _windows(f, kernels.shape[1]), kernels, optimize=True)


def _combine_coefficients(w, combine: Combine):
    w = np.asarray(w, dtype=np.float64)
    if combine is Combine.SOFT_ATTENTION:
        return K.attention_weights(w)
    return w


def tgm_channel_combine_forward(f, kernels, w, combine=Combine.ONE_BY_ONE_RELU):
    """Per-(output, input) kernels followed by a learned channel combination.

    ``kernels`` is ``C_out x C_in x L`` and ``w`` is ``C_out x C_in``.  With
    ``1x1_relu`` the combination is a bias-free 1x1 conv and a ReLU; with
    ``soft_attention`` the rows of ``w`` are softmaxed and no ReLU follows.
    """
    f = np.asarray(f, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    combine = Combine(combine)
    c_in = f.shape[0]
    if f.ndim != 3 or kernels.ndim != 3 or kernels.shape[1] != c_in or \
            np.shape(w) != kernels.shape[:2]:
        raise ConfigError(
            f"input {f.shape}, kernels {kernels.shape} and weights {np.shape(w)} disagree")
    _check_time(f)
    coef = _combine_coefficients(w, combine)
    pre = np.einsum("jdtl,ijl->idt", _windows(f, kernels.shape[2]),
                    coef[:, :, None] * kernels, optimize=True)
    if combine is Combine.ONE_BY_ONE_RELU:
        return np.maximum(pre, 0.0)
    return pre


# ---------------------------------------------------------------------------
# stateful layer


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_params: dict = field(default_factory=dict)


class TemporalLayer:
    """One temporal layer: its parameters, forward pass and backward pass.

    ``params`` maps tensor names to arrays in declaration order; names listed
    in ``frozen`` are never updated and receive zero gradients.
    """

    def __init__(self, config: LayerConfig, rng: Optional[np.random.Generator] = None,
                 params: Optional[dict] = None):
        config.validate()
        self.config = config
        if params is None:
            params = self._init_params(rng if rng is not None else np.random.default_rng(0))
        expected = self.param_shapes()
        if list(params) != list(expected):
            raise ConfigError(f"layer expects tensors {list(expected)}, got {list(params)}")
        for name, shape in expected.items():
            if np.shape(params[name]) != shape:
                raise ConfigError(f"tensor {name} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @property
    def frozen(self) -> frozenset:
        src = self.config.source
        if src is KernelSource.FIXED_GAUSSIAN:
            return frozenset({"mu_hat", "sigma_hat"})
        if src is KernelSource.FIXED_RANDOM:
            return frozenset({"filters"})
        return frozenset()

    def param_shapes(self) -> dict:
        cfg = self.config
        n, M, G, L = cfg.n_kernels, cfg.M, cfg.n_gaussian_groups, cfg.L
        shapes = {}
        if cfg.source is KernelSource.FREE:
            shapes["kernel"] = (n, L)
        elif cfg.source is KernelSource.FIXED_RANDOM:
            shapes["filters"] = (G, M, L)
            shapes["omega"] = (n, M)
        else:
            shapes["mu_hat"] = (G, M)
            shapes["sigma_hat"] = (G, M)
            shapes["omega"] = (n, M)
        if cfg.combine is not None:
            shapes["w"] = (cfg.c_out, cfg.c_in)
        return shapes

    def _init_params(self, rng):
        cfg = self.config
        n, M, G, L = cfg.n_kernels, cfg.M, cfg.n_gaussian_groups, cfg.L
        params = {}
        if cfg.source is KernelSource.FREE:
            fan_in = L * (cfg.conv_inputs if cfg.form in DENSE_FORMS else 1)
            params["kernel"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(n, L))
        elif cfg.source is KernelSource.FIXED_RANDOM:
            params["filters"] = K.random_filters(rng, G, M, L)
            params["omega"] = K.init_attention_logits(rng, n, M)
        else:
            params["mu_hat"], params["sigma_hat"] = K.init_gaussian_params(rng, G, M)
            params["omega"] = K.init_attention_logits(rng, n, M)
        if cfg.combine is Combine.SOFT_ATTENTION:
            params["w"] = rng.normal(0.0, 0.01, size=(cfg.c_out, cfg.c_in))
        elif cfg.combine is not None:
            # inputs past the first layer are ReLU outputs; signed weights would start
            # about half the channels dead, so draw magnitudes only
            params["w"] = np.abs(rng.normal(0.0, np.sqrt(2.0 / cfg.c_in), size=(cfg.c_out, cfg.c_in)))
        return params

    def kernel_bank(self) -> Optional[K.KernelBank]:
        p = self.params
        if self.config.source is KernelSource.FREE:
            return None
        if self.config.source is KernelSource.FIXED_RANDOM:
            return K.bank_from_filters(p["filters"], p["omega"])
        return K.build_kernel_bank(p["mu_hat"], p["sigma_hat"], p["omega"], self.config.L)

    def mixed_kernels(self, bank=None):
        """``(n_kernels, L)`` kernels currently in effect."""
        if self.config.source is KernelSource.FREE:
            return self.params["kernel"]
        return (bank or self.kernel_bank()).k

    def full_kernels(self):
        """Kernels arranged as ``C_out x C_in' x L`` for export.

        ``C_in'`` is ``c_in * d`` for dense 1-D forms, ``c_in`` for the
        channel-combination forms and 1 for single/grouped TGM layers.
        """
        cfg = self.config
        k = self.mixed_kernels()
        if cfg.form in DENSE_FORMS:
            return np.array(self.full_kernels_from(k))
        if cfg.form in COMBINE_FORMS:
            return k.reshape(cfg.c_out, cfg.c_in, cfg.L)
        return k[:, None, :]

    def forward(self, x):
        """Return ``(output, cache)`` for a ``c_in x d x T`` input."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[:2] != (cfg.c_in, cfg.d):
            raise ConfigError(
                f"{cfg.form.value} expects input ({cfg.c_in}, {cfg.d}, T), got {x.shape}")
        _check_time(x)
        bank = self.kernel_bank()
        k = self.mixed_kernels(bank)
        cache = {"x": x, "bank": bank, "k": k}
        if cfg.form in DENSE_FORMS:
            out = conv1d_forward(x.reshape(cfg.conv_inputs, -1), self.full_kernels_from(k))
            out = out[:, None, :]
        elif cfg.form is LayerForm.TGM_SINGLE:
            out = tgm_single_forward(x[0], k)
        elif cfg.form is LayerForm.TGM_GROUPED:
            out = tgm_grouped_forward(x, k)
        else:
            coef = _combine_coefficients(self.params["w"], cfg.combine)
            k3 = k.reshape(cfg.c_out, cfg.c_in, cfg.L)
            pre = np.einsum("jdtl,ijl->idt", _windows(x, cfg.L), coef[:, :, None] * k3,
                            optimize=True)
            cache["coef"] = coef
            cache["pre"] = pre
            out = np.maximum(pre, 0.0) if cfg.combine is Combine.ONE_BY_ONE_RELU else pre
        return out, cache

    def full_kernels_from(self, k):
        """Expand dense-form kernels to ``C_out x (c_in * d) x L``."""
        cfg = self.config
        if cfg.form is LayerForm.CONV1D_SHARED_GAUSSIAN:
            return np.broadcast_to(k[:, None, :], (cfg.c_out, cfg.conv_inputs, cfg.L))
        return k.reshape(cfg.c_out, cfg.conv_inputs, cfg.L)

    def backward(self, cache, d_out) -> LayerGrads:
        """Exact gradients given the upstream gradient on this layer's output."""
        if cache is None or "x" not in cache:
            raise UsageError("layer backward needs the cache from forward()")
        cfg = self.config
        x, k = cache["x"], cache["k"]
        d_out = np.asarray(d_out, dtype=np.float64)
        T = x.shape[-1]
        L = cfg.L
        grads = {}

        if cfg.form in DENSE_FORMS:
            xw = _windows(x.reshape(cfg.conv_inputs, T), L)
            g = d_out[:, 0, :]
            d_full = np.einsum("ct,jtl->cjl", g, xw, optimize=True)
            d_xw = np.einsum("ct,cjl->jtl", g, self.full_kernels_from(k), optimize=True)
            d_x = _fold_windows(d_xw, L).reshape(x.shape)
            if cfg.form is LayerForm.CONV1D_SHARED_GAUSSIAN:
                d_k = d_full.sum(axis=1)
            else:
                d_k = d_full.reshape(cfg.n_kernels, L)
        elif cfg.form is LayerForm.TGM_SINGLE:
            xw = _windows(x[0], L)
            d_k = np.einsum("idt,dtl->il", d_out, xw, optimize=True)
            d_x = _fold_windows(np.einsum("idt,il->dtl", d_out, k, optimize=True), L)[None]
        elif cfg.form is LayerForm.TGM_GROUPED:
            xw = _windows(x, L)
            d_k = np.einsum("idt,idtl->il", d_out, xw, optimize=True)
            d_x = _fold_windows(np.einsum("idt,il->idtl", d_out, k, optimize=True), L)
        else:
            coef = cache["coef"]
            d_pre = d_out
            if cfg.combine is Combine.ONE_BY_ONE_RELU:
                d_pre = np.where(cache["pre"] > 0.0, d_out, 0.0)
            xw = _windows(x, L)
            k3 = k.reshape(cfg.c_out, cfg.c_in, L)
            d_eff = np.einsum("idt,jdtl->ijl", d_pre, xw, optimize=True)
            d_x = _fold_windows(
                np.einsum("idt,ijl->jdtl", d_pre, coef[:, :, None] * k3, optimize=True), L)
            d_coef = (d_eff * k3).sum(axis=-1)
            d_k = (d_eff * coef[:, :, None]).reshape(cfg.n_kernels, L)
            if cfg.combine is Combine.SOFT_ATTENTION:
                grads["w"] = coef * (d_coef - (coef * d_coef).sum(axis=1, keepdims=True))
            else:
                grads["w"] = d_coef

        if cfg.source is KernelSource.FREE:
            grads["kernel"] = d_k
        else:
            d_mu_hat, d_sigma_hat, d_omega = K.kernel_backward(d_k, cache["bank"])
            grads["omega"] = d_omega
            if cfg.source is KernelSource.LEARNED:
                grads["mu_hat"], grads["sigma_hat"] = d_mu_hat, d_sigma_hat
        for name in self.frozen:
            grads[name] = np.zeros_like(self.params[name])
        ordered = {name: grads[name] for name in self.params}
        return LayerGrads(d_input=d_x, d_params=ordered)
