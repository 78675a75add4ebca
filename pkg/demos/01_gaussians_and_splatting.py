"""Splat a handful of semantic Gaussians onto a grid and check the analytic gradient.

Run with ``python3 demos/01_gaussians_and_splatting.py``.
"""

import numpy as np

from gsocc import GaussianSet, GridSpec, SemanticGaussian, gaussian_eval, splat, splat_backward

rng = np.random.default_rng(0)
n, n_classes = 6, 3

# Gaussians scattered in a 4 m cube, each leaning towards one class.
gaussians = GaussianSet(
    means=rng.uniform(-1.5, 1.5, size=(n, 3)),
    rotations=rng.normal(size=(n, 4)),
    scales=rng.uniform(0.2, 0.6, size=(n, 3)),
    opacities=rng.uniform(0.3, 1.0, size=n),
    logits=np.eye(n_classes)[rng.integers(n_classes, size=n)] * 2.0,
)
grid = GridSpec.from_extent((-2, -2, -2), (2, 2, 2), 0.25)

# A single Gaussian peaks at its own mean with value opacity * logits.
g0 = gaussians[0]
print("peak of g0:", gaussian_eval(g0, g0.mean), "opacity * logits:", g0.opacity * g0.logits)

exact = splat(gaussians, grid, kappa=np.inf, b_empty=0.0)
cut = splat(gaussians, grid, kappa=3.0, b_empty=0.0)
print("grid", grid.counts, "max |exact - kappa=3|:", np.abs(exact.values - cut.values).max())

# Gradient of sum(w * splat) against a central difference on one mean coordinate.
w = rng.normal(size=exact.values.shape)
grads = splat_backward(gaussians, grid, w, kappa=np.inf)
h = 1e-6
means = gaussians.means.copy()
means[2, 1] += h
up = np.sum(w * splat(gaussians.replace(means=means), grid, kappa=np.inf, b_empty=0.0).values)
means[2, 1] -= 2 * h
down = np.sum(w * splat(gaussians.replace(means=means), grid, kappa=np.inf, b_empty=0.0).values)
print("d/dmean[2, 1] analytic %.8f  finite difference %.8f" % (grads.means[2, 1], (up - down) / (2 * h)))

# Rebuilding from scalar Gaussians leaves the set bit-identical.
again = GaussianSet.from_list([SemanticGaussian(g.mean, g.rotation, g.scale, g.opacity, g.logits)
                               for g in gaussians])
print("round trip identical:", again.equals(gaussians))
