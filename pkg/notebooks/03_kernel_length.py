# %% [markdown]
# # Kernel length
#
# A mixture layer has the same parameters at every L; only the taps its
# Gaussians can reach change.  A standard 1-D convolution grows with L.  Here
# both are trained on the planted-offset task at a short and a long kernel.

# %%
from tgm.experiments import conv1d_config, synthetic_split, tgm_config, train_and_score
from tgm.model import TgmModel

SEED = 0
EPOCHS = 8

train, val = synthetic_split(SEED)

# %%
for L in (5, 25):
    for name, config in (("tgm", tgm_config(L=L)), ("conv1d", conv1d_config(L))):
        n_params = TgmModel(config, seed=SEED).param_count()
        score = train_and_score(config, SEED, epochs=EPOCHS, split=(train, val))
        print(f"L={L:2d}  {name:6s}  params {n_params:6,d}  val mAP {score:.3f}")
