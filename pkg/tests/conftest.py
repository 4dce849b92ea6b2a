import sys

import numpy as np
import pytest

from fedsilo.data import GenSpec, SiloDataset, generate, split_all
from fedsilo.nn import Model, forward, loss


def numeric_grads(model: Model, x, y, lam, h=1e-5):
    """Central finite differences of the regularized loss for every parameter."""
    work = model.copy()

    def f():
        return loss(forward(work, x)[0], y, work, lam)

    gw, gb = [], []
    for layer in work.layers:
        for arr, out in ((layer.weights, gw), (layer.biases, gb)):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = f()
                arr[idx] = orig - h
                down = f()
                arr[idx] = orig
                g[idx] = (up - down) / (2 * h)
            out.append(g)
    return gw, gb


def kink_free_batch(model: Model, rng, batch, margin=1e-3, tries=1000):
    """Draw a Gaussian batch whose hidden pre-activations all avoid the ReLU kink.

    Central differences are not a valid oracle within ``h`` of a kink.
    """
    for _ in range(tries):
        x = rng.normal(size=(batch, model.input_dim))
        _, cache = forward(model, x)
        if all(np.abs(z).min() > margin for z in cache.pre[:-1]):
            return x
    raise RuntimeError("could not draw a kink-free batch")


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def toy_silos(n_silos=5, n=120, dim=6, seed=0, heterogeneity=0.5):
    spec = GenSpec(n_silos=n_silos, feature_dim=dim, samples_per_silo=n,
                   heterogeneity=heterogeneity, target_prevalence=0.3, seed=seed,
                   mean_active=2.0, rate_spread=4.0)
    return split_all(generate(spec), seed=seed)


@pytest.fixture
def silos5():
    return toy_silos()


def clone_silo(silo: SiloDataset, new_id: str) -> SiloDataset:
    return SiloDataset(new_id, silo._features.copy(), silo._labels.copy(),
                       None if silo.split is None else silo.split.copy())


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
