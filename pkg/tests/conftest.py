import numpy as np
import pytest

from melmatch import backend
from melmatch.events import RawNote, quantize_sequence
from melmatch.model import build_target_model
from melmatch.params import K_VALUES, S_VALUES, default_params


def random_events(rng, n, symbolic=False):
    notes = [RawNote(float(60 + rng.integers(-6, 7)), float(rng.uniform(120, 1500))) for _ in range(n)]
    return quantize_sequence(notes, offset_search=not symbolic)


def sparse_table(values, rng, width):
    """Random distribution on ``width`` consecutive bins around 0 (for brute-force-sized instances)."""
    values = np.asarray(values)
    lo = int(rng.integers(-(width - 1), 1))
    p = np.zeros(len(values))
    sel = (values >= lo) & (values < lo + width)
    p[sel] = rng.dirichlet(np.ones(sel.sum()))
    return p


def random_params(rng, sparse=False, L=2, M=2):
    """Random valid parameters; ``sparse`` limits modulation and tempo change to 2 bins."""
    base = default_params(L=L, M=M)
    q = base.q
    rd = np.zeros(2 * q - 1)
    rd[q - 1 - 3 : q + 3] = rng.dirichlet(np.ones(7))
    if sparse:
        mod = sparse_table(K_VALUES, rng, 2)
        tc = sparse_table(S_VALUES, rng, 2)
    else:
        mod = rng.dirichlet(np.ones(12))
        tc = rng.dirichlet(np.ones(9))
    return base.replace(
        edit=rng.dirichlet(np.ones(base.n_edit_classes) * 2),
        modulation=mod,
        tempo_change=tc,
        pitch_error=rng.dirichlet(np.ones(12)),
        rhythm_error=rd,
        init_tempo_sigma=float(rng.uniform(0.8, 2.0)),
    )


def tiny_instance(seed, sparse=True, max_target=4, max_query=4):
    rng = np.random.default_rng(seed)
    target = random_events(rng, int(rng.integers(1, max_target + 1)), symbolic=True)
    query = random_events(rng, int(rng.integers(1, max_query + 1)))
    params = random_params(rng, sparse=sparse)
    start = int(rng.integers(1, len(target) + 1))
    return build_target_model(target, 2, 2, start), params, query


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    """Run the test once per available kernel backend."""
    before = backend.name()
    backend.use(request.param)
    yield request.param
    backend.use(before)
