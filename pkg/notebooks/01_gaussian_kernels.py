# %% [markdown]
# # Temporal Gaussian mixture kernels
#
# A kernel of length L is a soft-attention mix of M Gaussians.  Each Gaussian
# is set by two unconstrained numbers: a center ``mu_hat`` squashed into
# [0, L-1] and a log-variance ``sigma_hat``.  The kernel's parameter count does
# not depend on L.

# %%
import numpy as np

from tgm import kernel as K
from tgm.layers import LayerConfig, param_count

np.set_printoptions(precision=3, suppress=True)

# %% [markdown]
# Three Gaussians on a 9-tap kernel: early and sharp, centered, late and wide.

# %%
L = 9
mu_hat = np.array([[-1.5, 0.0, 1.0]])
sigma_hat = np.array([[-1.0, 0.0, 1.5]])
print("centers  ", K.reparam_center(mu_hat, L))
print("variances", K.reparam_variance(sigma_hat))

bank = K.build_kernel_bank(mu_hat, sigma_hat, omega=np.zeros((1, 3)), L=L)
for m, row in enumerate(bank.k_hat[0]):
    print(f"gaussian {m}", row, "sum", round(row.sum(), 12))

# %% [markdown]
# The attention logits ``omega`` pick how much of each Gaussian goes into a
# mixed kernel.  Uniform logits average them; a peaked row selects one.

# %%
omega = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 0.0, 4.0]])
bank = K.build_kernel_bank(mu_hat, sigma_hat, omega, L)
print("attention\n", bank.a)
print("mixed kernels\n", bank.k)

# %% [markdown]
# Rows stay normalized and strictly positive even for extreme variances.

# %%
extreme = K.build_kernel_bank(np.array([[0.3, -2.0]]), np.array([[-12.0, 12.0]]),
                              np.zeros((1, 2)), L=25)
print("row sums", extreme.k_hat.sum(-1), "min entry", extreme.k_hat.min())

# %% [markdown]
# Parameter counts: one mixture layer against a standard 1-D convolution with
# the same output width.  Only the convolution grows with L.

# %%
for L in (5, 15, 50):
    tgm = param_count(LayerConfig(form="tgm_single", c_out=65, M=16, L=L, d=1024))
    conv = param_count(LayerConfig(form="conv1d_standard", source="unconstrained_free",
                                   c_out=65, L=L, d=1024))
    print(f"L={L:2d}  tgm_single {tgm:6,d}  conv1d {conv:10,d}  ratio {conv / tgm:8.0f}x")
