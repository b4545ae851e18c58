import numpy as np
import pytest

from peftkit import adapters as ad
from peftkit import linalg
from peftkit.linalg import Rng


def random_state(kind, seed=0, n=8, m=6, r=2, generic=True, **kw):
    """Adapter on a random base; ``generic`` moves B (and DoRA mags / MAP beta)
    away from their init values."""
    rng = Rng(seed)
    w = linalg.gaussian_init(rng, n, m, 1.0)
    state = ad.init_adapter(kind, rng, ad.FrozenBase.from_weight(w), r, **kw)
    if generic:
        state.factors.b[...] = linalg.gaussian_init(rng, r, m, 0.7)
        if state.dora_params is not None:
            state.dora_params.mags[...] *= 1.0 + 0.3 * rng.uniform(m)
        if state.map_params is not None:
            state.map_params.beta[...] = 1.3
            state.map_params.alpha[...] *= 0.9
    return state


def rand(rng, *shape):
    return rng.normal(int(np.prod(shape))).reshape(shape)


def rel_close(a, b):
    """max |a - b| relative to max |b|."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture(params=list(ad.Kind), ids=lambda k: k.value)
def kind(request):
    return request.param


# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
