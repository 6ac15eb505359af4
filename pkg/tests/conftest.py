import contextlib
import time
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import settings

from hmfdetect import dataset, model

settings.register_profile("hmf", deadline=None, max_examples=60)
settings.load_profile("hmf")

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, text): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.outcome == "passed" else "FAIL"
        detail = getattr(item, "acceptance_detail", "")
        _ACCEPTANCE[n] = f"[{status}] criterion {n:>2}: {text}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture
def detail(request):
    """Attach a short measured value to the acceptance summary line."""

    def set_detail(text):
        request.node.acceptance_detail = text

    return set_detail


@pytest.fixture(scope="session")
def fixture_data():
    return dataset.synthesize_fixture(dataset.FixtureSpec(), seed=0)


@pytest.fixture(scope="session")
def trained(fixture_data):
    """Plain-family model trained on the default fixture (shared, ~20 s)."""
    start = time.perf_counter()
    tiles = dataset.assemble(fixture_data.records, fixture_data.scenes, dataset.AssemblyConfig(seed=0))
    y = np.array([t.label for t in tiles], dtype=np.float64)
    truth = np.array([fixture_data.truth[t.address_id] for t in tiles], dtype=np.float64)
    ds = dataset.split(len(tiles), seed=0, stratify_labels=y)
    x = model.prepare_inputs([t.tile for t in tiles], 64)
    spec = model.ModelSpec("plain")
    cfg = model.TrainConfig(epochs=20, seed=0)
    m = model.train(x, y, ds, spec, cfg)
    seconds = time.perf_counter() - start
    return SimpleNamespace(model=m, x=x, y=y, truth=truth, split=ds, tiles=tiles, spec=spec, cfg=cfg, seconds=seconds)


def grid_world(n_pos, n_neg, gsd=2.0, spacing_m=20.0, cols=100):
    """One identity-CRS scene with records on a regular grid; positives first."""
    from hmfdetect.geodata import GeoTransform, RasterScene
    from hmfdetect.records import DEGREE_SCALE, IDENTITY_CRS, AddressRecord, Label

    n = n_pos + n_neg
    rows = -(-n // cols)
    cell = int(round(spacing_m / gsd))
    h, w = rows * cell, cols * cell
    px = (np.arange(h * w * 3) % 251).astype(np.uint8).reshape(h, w, 3)
    scene = RasterScene("grid", px, GeoTransform(gsd, 0.0, 0.0, 0.0, -gsd, h * gsd), IDENTITY_CRS)
    recs = []
    for k in range(n):
        r, c = divmod(k, cols)
        x = (c * cell + cell // 2) * gsd
        y = h * gsd - (r * cell + cell // 2) * gsd
        multi = k < n_pos
        recs.append(AddressRecord(
            f"g{k:05d}", f"{k} Grid Rd", "B1" if multi else "A1",
            Label.MULTI_FAMILY if multi else Label.SINGLE_FAMILY,
            y / DEGREE_SCALE, x / DEGREE_SCALE, "t1", "77004",
        ))
    return [scene], recs


@pytest.fixture
def make_world():
    return grid_world


def rel_error(analytic, numeric, floor=1e-7):
    a, b = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_grad(f, v, eps=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``v`` (perturbed in place)."""
    g = np.zeros_like(v)
    flat, gflat = v.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


KINK_MARGIN = 1e-4


@contextlib.contextmanager
def kink_probe():
    """Record how close a forward pass comes to a non-differentiable point:
    a ReLU input near zero or a max-pool window whose top two values nearly tie.
    Exact zeros (already on a ReLU's flat side upstream) are not kinks."""
    from hmfdetect import model

    margins = []
    relu_fwd, pool_fwd = model.ReLU.forward, model.MaxPool.forward

    def relu(self, x, params):
        nz = np.abs(x[x != 0])  # exact zeros come from an upstream ReLU's flat side
        margins.append(float(nz.min()) if nz.size else np.inf)
        return relu_fwd(self, x, params)

    def pool(self, x, params):
        n, h, w, c = x.shape
        k = self.k
        win = x[:, : h // k * k, : w // k * k].reshape(n, h // k, k, w // k, k, c)
        win = np.sort(win.transpose(0, 1, 3, 5, 2, 4).reshape(-1, k * k), axis=1)
        win = win[win[:, -1] != 0]
        margins.append(float(np.min(win[:, -1] - win[:, -2])) if win.size else np.inf)
        return pool_fwd(self, x, params)

    model.ReLU.forward, model.MaxPool.forward = relu, pool
    try:
        yield margins
    finally:
        model.ReLU.forward, model.MaxPool.forward = relu_fwd, pool_fwd


def smooth_point(forward):
    """True when ``forward()`` stays at least KINK_MARGIN away from every kink."""
    with kink_probe() as margins:
        forward()
    return min(margins, default=np.inf) >= KINK_MARGIN


def layer_grad_error(layer, x, params, rng):
    """Worst relative error of a layer's input and parameter gradients.

    ``x`` is redrawn (same shape) until the point is away from kinks.
    """
    while not smooth_point(lambda: layer.forward(x, params)):
        x = rng.normal(size=x.shape)
    y, cache = layer.forward(x, params)
    r = rng.normal(size=y.shape)

    def f():
        return float(np.sum(r * layer.forward(x, params)[0]))

    dx, grads = layer.backward(r, params, cache)
    errs = [rel_error(dx, numeric_grad(f, x))]
    errs += [rel_error(g, numeric_grad(f, p)) for g, p in zip(grads, params)]
    return max(errs)


def model_grad_error(spec, seed, n=3, pos_weight=2.0):
    """Worst relative error of the full-model loss gradient at a random point
    (redrawn until it is away from kinks)."""
    from hmfdetect import model

    rng = np.random.default_rng(seed)
    y = np.array([1.0, 0.0] * n)[:n]
    while True:
        m = model.init_model(spec, int(rng.integers(2**31)))
        m.params += rng.normal(0, 0.05, size=m.params.shape)  # non-zero biases too
        x = rng.uniform(size=(n, spec.input_side, spec.input_side, 3))
        if smooth_point(lambda: model.forward(m, x)):
            break
    _, g = model.backward(m, x, y, pos_weight)
    num = numeric_grad(lambda: model.backward(m, x, y, pos_weight)[0], m.params)
    return rel_error(g, num)
