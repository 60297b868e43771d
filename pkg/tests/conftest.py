import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from swinkoa import numerics as nx

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(build, arrays, rng, n=12, h=1e-6, tol=1e-3):
    """Float32 backward of ``sum(build(*ts) * w)`` vs float64 central differences.

    ``w`` is a fixed random weighting so outputs with a constant sum (softmax,
    layer norm) still have informative gradients. Returns the worst relative error.
    """
    ts = [nx.Tensor(a.astype(np.float32), requires_grad=True) for a in arrays]
    out = build(*ts)
    w = rng.normal(size=out.shape)
    nx.backward(nx.tsum(out * nx.Tensor(w)))
    analytic = [t.grad.astype(np.float64) for t in ts]
    worst = 0.0
    from swinkoa.gradcheck import precision

    with precision(np.float64):
        ts64 = [nx.Tensor(a.astype(np.float32).astype(np.float64)) for a in arrays]
        w64 = nx.Tensor(w)

        def fn():
            return nx.tsum(build(*ts64) * w64)

        for i, t in enumerate(ts64):
            for _ in range(n):
                idx = tuple(int(rng.integers(s)) for s in t.shape)
                num = nx.numeric_grad(fn, t, idx, h)
                worst = max(worst, nx.rel_error(float(analytic[i][idx]), num))
    return worst


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 1)]),
    "power": (lambda a: nx.power(nx.exp(a), 1.5), [(5,)]),
    "exp": (nx.exp, [(3, 3)]),
    "log": (lambda a: nx.log(nx.exp(a) + 1.0), [(3, 3)]),
    "matmul": (nx.matmul, [(3, 4), (4, 2)]),
    "batched_matmul": (nx.matmul, [(2, 3, 4), (2, 4, 5)]),
    "reshape_transpose": (lambda a: nx.transpose(nx.reshape(a, (2, 3, 2)), (2, 0, 1)), [(3, 4)]),
    "roll": (lambda a: nx.roll(a, (1, -2), (0, 1)), [(4, 5)]),
    "getitem": (lambda a: a[1:, ::2], [(4, 5)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=-1), [(3, 2), (3, 4)]),
    "take_rows": (lambda t: nx.take_rows(t, np.array([0, 2, 2, 1])), [(3, 4)]),
    "sum_axis": (lambda a: nx.tsum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean_pool": (nx.mean_pool, [(2, 5, 3)]),
    "relu": (lambda a: nx.relu(a + 0.05), [(4, 4)]),
    "gelu": (nx.gelu, [(4, 4)]),
    "sigmoid": (nx.sigmoid, [(4, 4)]),
    "softmax": (lambda a: nx.softmax(a, axis=-1), [(3, 6)]),
    "layer_norm": (lambda x, g, b: nx.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    "bce": (lambda a: nx.bce_with_logits(a, np.array([[0, 1, 0], [1, 0, 1]])), [(2, 3)]),
    "cross_entropy": (lambda a: nx.cross_entropy(a, np.array([2, 0, 1])), [(3, 4)]),
}


def primitive_arrays(name, rng):
    build, shapes = PRIMITIVES[name]
    arrays_ = [rng.normal(size=s) for s in shapes]
    if name == "relu":  # keep clear of the kink
        arrays_[0] = np.where(np.abs(arrays_[0] + 0.05) < 0.05, 0.5, arrays_[0])
    return build, arrays_


# ---------------------------------------------------------------------------
# acceptance bookkeeping: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


class Criterion:
    """Times a criterion, records its verdict line, and re-raises errors as FAIL."""

    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.ok, self.detail = False, "not evaluated"
        self.charged = 0.0

    def charge(self, seconds: float) -> None:
        """Count work done earlier in a shared fixture against this criterion's budget."""
        self.charged += seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def check(self, ok: bool, detail: str) -> None:
        self.ok, self.detail = bool(ok), detail

    def __exit__(self, exc_type, exc, tb):
        self.elapsed = time.perf_counter() - self.t0 + self.charged
        if exc is not None:
            self.ok, self.detail = False, f"error {exc_type.__name__}: {exc}"
        in_time = self.elapsed < self.budget_s
        verdict = "PASS" if self.ok and in_time else "FAIL"
        self.line = (f"criterion {self.number:2d} {verdict}  {self.title}: {self.detail}; "
                     f"{self.elapsed:.1f} s (budget {self.budget_s:g} s)")
        ACCEPTANCE[self.number] = self.line
        print(self.line)
        self.passed = verdict == "PASS"
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


# ---------------------------------------------------------------------------
# shared trained models
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Toy multi-head model trained until it memorises 64 synthetic samples.

    The samples are written to disk and read back before training, so the
    CLI ``eval`` sees byte-identical inputs.
    """
    from swinkoa import datagen, train
    from swinkoa.config import TOY, AdamWConfig, TrainConfig
    from swinkoa.model import KOANet
    from swinkoa.seeding import stream

    root = tmp_path_factory.mktemp("overfit")
    picks = [datagen.synth_sample(k % 5, "source", 7000 + k) for k in range(64)]
    for k, s in enumerate(picks):
        s.split, s.id = "test", f"mem{k:02d}"
    manifest = datagen.write_dataset(picks, root)
    data = datagen.load_dataset(manifest, 64)
    model = KOANet(TOY, stream(0, "init"))
    cfg = TrainConfig(batch_size=32, augment=False, optimizer=AdamWConfig(lr=3e-4))
    accs = []

    def memorised(m, row):
        accs.append(train.evaluate(m, data).accuracy)
        return accs[-1] == 1.0

    t0 = time.perf_counter()
    hist = train.train_loop(model, data, [], 200, cfg, seed=0, keep_best=False, stop=memorised)
    return {"model": model, "manifest": manifest, "data": data, "epochs": len(hist.rows),
            "accuracy": accs[-1], "seconds": time.perf_counter() - t0, "root": root}
