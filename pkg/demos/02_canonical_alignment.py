# Canonical alignment of point clouds
#
# Principal-component alignment maps every rotated copy of a molecule onto
# one canonical orientation: project onto the covariance eigenvectors
# (largest variance first), then fix the per-axis signs against a reference
# point while keeping the frame right-handed. Mirror images stay distinct,
# which is what preserves chirality.

import numpy as np

from rotenc.alignment import canonical_align, invariance_residual
from rotenc.geometry import PointCloud, SamplingConfig, apply_rotation, sample_rotations
from rotenc.synthetic import mirror_cloud, random_cloud

rng = np.random.default_rng(0)
cloud = random_cloud(8, rng)

result = canonical_align(cloud)
print("eigenvalues (descending):", np.round(result.eigenvalues, 4))
print("sign flips applied:", result.flips)
print("degenerate spectrum:", result.degenerate)

# covariance of the aligned cloud is diagonal
aligned = result.aligned.coords
cov = aligned.T @ aligned / aligned.shape[0]
print("aligned covariance:\n", np.round(cov, 6))

# every rotated copy aligns to the same coordinates
print("\nworst residual over 200 random rotations:",
      f"{invariance_residual(cloud, trials=200, seed=1):.2e}")

# chirality: the mirror image lands somewhere else entirely
mirrored = mirror_cloud(cloud)
gap = np.max(np.abs(canonical_align(mirrored).aligned.coords - aligned))
print(f"canonical gap between enantiomers: {gap:.4f} (zero would mean chirality was lost)")

# degenerate example: a regular octahedron has all eigenvalues equal, so no
# unique frame exists; the result is flagged instead of silently arbitrary
octa = PointCloud(
    np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float),
    [6] * 6,
)
print("\noctahedron degenerate flag:", canonical_align(octa).degenerate)
for rot in sample_rotations(SamplingConfig(k=3, seed=2)):
    print("  rotated copy still degenerate:", canonical_align(apply_rotation(octa, rot)).degenerate)
