# Approximate and strict rotation invariance of the 3D encoder
#
# The encoder averages a per-view fingerprint over k sampled rotations,
# which approximates the rotation-group expectation of the single-view
# network. The residual orientation dependence shrinks like 1/sqrt(k).
# Canonically aligning the input first (the post-align strategy) makes the
# encoding exactly invariant, because the encoder then sees a deterministic
# function of the molecule.

import numpy as np

from rotenc import autodiff as ad
from rotenc.encoder3d import EncoderConfig, encode, init_encoder_params
from rotenc.geometry import SamplingConfig, apply_rotation, sample_rotations
from rotenc.synthetic import random_cloud

VOCAB = (1, 6, 7, 8)
probes = sample_rotations(SamplingConfig(k=20, seed=1))
clouds = [random_cloud(8, np.random.default_rng(100 + i)) for i in range(10)]


def mean_deviation(cfg):
    store = ad.ParameterStore()
    table, states = init_encoder_params(store, cfg, VOCAB, np.random.default_rng(5))
    devs = []
    for cloud in clouds:
        base = encode(cloud, table, store, cfg, states).data
        for rot in probes:
            out = encode(apply_rotation(cloud, rot), table, store, cfg, states).data
            devs.append(np.linalg.norm(out - base))
    return float(np.mean(devs))


print("mean fingerprint deviation under rotation vs view count")
print(f"{'k':>4}  {'deviation':>10}  {'x sqrt(k)':>10}")
for k in (1, 4, 16, 64):
    cfg = EncoderConfig(tau=2, widths=(16, 8), d_p=8, embed_dim=4, k=k, seed=0, align_mode="none")
    dev = mean_deviation(cfg)
    print(f"{k:>4}  {dev:>10.5f}  {dev * np.sqrt(k):>10.5f}")
print("(the last column being roughly constant is the 1/sqrt(k) scaling)")

cfg_post = EncoderConfig(tau=2, widths=(16, 8), d_p=8, embed_dim=4, k=4, seed=0, align_mode="post")
print(f"\nwith canonical alignment: deviation = {mean_deviation(cfg_post):.2e} (exact invariance)")
