"""
Pairwise and leave-one-out contrastive losses
==============================================

Both losses score each clip's embedding against every other clip in the
batch. The pairwise form contrasts each ordered pair of modalities; the
leave-one-out form contrasts each modality with the mean direction of the
remaining ones.
"""

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from psgcl.losses import leave_one_out_loss, pairwise_loss

rng = np.random.default_rng(0)
n, d = 16, 8

# a shared latent seen through three noisy "modalities"
z = rng.standard_normal((n, d))
noise_levels = np.linspace(0.0, 3.0, 13)
curves = {"pairwise": [], "leave-one-out": []}
for s in noise_levels:
    emb = [z + s * rng.standard_normal((n, d)) for _ in range(3)]
    curves["pairwise"].append(pairwise_loss(emb, tau=1.0))
    curves["leave-one-out"].append(leave_one_out_loss(emb, tau=1.0))

# unrelated embeddings sit near log(n); perfectly aligned ones fall well below
print("log n =", np.log(n))
for name, vals in curves.items():
    print(f"{name}: aligned {vals[0]:.3f}, noisy {vals[-1]:.3f}")

# the temperature is a log-scale on cosine similarity: larger tau sharpens
taus = np.linspace(-1, 4, 11)
aligned = [z, z * 2.0, z * 0.5]  # row scale does not matter, only direction
sharp = [leave_one_out_loss(aligned, t) for t in taus]

fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
for name, vals in curves.items():
    a.plot(noise_levels, vals, marker="o", label=name)
a.axhline(np.log(n), color="grey", ls="--", label="log n")
a.set_xlabel("noise scale")
a.set_ylabel("loss")
a.legend()
b.plot(taus, sharp, marker="o")
b.set_xlabel("tau")
b.set_ylabel("leave-one-out loss (aligned)")
fig.tight_layout()
fig.savefig("contrastive_losses.png", dpi=100)
