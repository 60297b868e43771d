"""Finite-difference audit of the model's analytic gradients.

The analytic side is the ordinary float32 backward pass. The reference side
re-evaluates the very same network (same float32-representable weights) in
float64 and takes central differences there. A float32 forward pass has a
difference quantum of roughly ``1e-5`` at ``h=1e-3``, which is larger than
many true gradient entries of the toy model, so a float32 reference would
measure rounding rather than the backward pass.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from swinkoa import numerics as nx
from swinkoa.config import NUM_GRADES, ModelConfig
from swinkoa.model import KOANet
from swinkoa.seeding import stream

# parameter groups that every audit must touch at least once
REQUIRED_GROUPS = {
    "attention": lambda n: ".attn." in n,
    "patch_merging": lambda n: ".downsample." in n,
    "head": lambda n: n.startswith("head."),
}


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    old = nx.DTYPE
    nx.DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        nx.DTYPE = old


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.entries) and all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=float("nan"))

    def groups(self) -> dict[str, int]:
        return {g: sum(pred(e.name) for e in self.entries) for g, pred in REQUIRED_GROUPS.items()}

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "max_rel_error": self.max_rel_error,
            "groups": self.groups(),
            "entries": [dict(asdict(e), index=list(e.index)) for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def perturb_parameters(model: KOANet, rng: np.random.Generator, sigma: float = 0.02) -> None:
    """Add N(0, sigma) noise to every tensor.

    The heads' output layers start at zero, which makes every encoder
    gradient exactly zero at initialisation and the audit vacuous there.
    """
    for p in model.parameters():
        p.data = (p.data + rng.normal(0.0, sigma, p.shape)).astype(p.data.dtype)


def pick_elements(named, n: int, rng: np.random.Generator) -> list[tuple[str, object, tuple]]:
    """``n`` random (name, parameter, index) picks covering every required group."""
    named = list(named)
    picks = []
    for pred in REQUIRED_GROUPS.values():
        pool = [(k, p) for k, p in named if pred(k)]
        if pool:
            picks.append(pool[int(rng.integers(len(pool)))])
    while len(picks) < n:
        picks.append(named[int(rng.integers(len(named)))])
    out = []
    for k, p in picks:
        idx = tuple(int(i) for i in np.unravel_index(int(rng.integers(p.size)), p.shape))
        out.append((k, p, idx))
    return out


def check_model(
    cfg: ModelConfig,
    n: int = 24,
    seed: int = 0,
    batch: int = 2,
    sigma: float = 0.02,
    h: float = 1e-5,
    tol: float = 1e-2,
) -> GradCheckReport:
    """Compare float32 backward gradients with float64 central differences."""
    from swinkoa.train import loss_for  # local: train imports model code

    model = KOANet(cfg, stream(seed, "init"))
    rng = stream(seed, "gradcheck")
    perturb_parameters(model, rng, sigma)
    images = rng.random((batch, cfg.image_size, cfg.image_size, 3)).astype(np.float32)
    grades = rng.integers(0, NUM_GRADES, batch)
    loss_fn = loss_for(cfg.classifier_mode)

    nx.backward(loss_fn(model(images), grades))
    named = list(model.named_parameters())
    analytic = {k: p.grad.copy() for k, p in named}
    picks = pick_elements(named, n, rng)

    saved = {k: p.data for k, p in named}
    report = GradCheckReport(tol)
    try:
        with precision(np.float64):
            for _, p in named:
                p.data = p.data.astype(np.float64)
                p.grad = None
            x64 = images.astype(np.float64)

            def fn():
                return loss_fn(model(x64), grades)

            for k, p, idx in picks:
                num = nx.numeric_grad(fn, p, idx, h)
                ana = float(analytic[k][idx])
                err = nx.rel_error(ana, num)
                report.entries.append(GradCheckEntry(k, idx, ana, num, err, err < tol))
    finally:
        for k, p in named:
            p.data = saved[k]
            p.grad = None
    return report
