"""Losses, AdamW, the training loop and the five experiment protocols."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from swinkoa import datagen
from swinkoa import numerics as nx
from swinkoa.config import NUM_GRADES, AdamWConfig, ModelConfig, TrainConfig
from swinkoa.evaluate import MetricsReport, compute_metrics
from swinkoa.model import KOANet
from swinkoa.numerics import Parameter, Tensor
from swinkoa.seeding import stream

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["epoch", "phase", "train_loss", "val_acc", "val_macro_f1"]


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=nx.DTYPE))


def _as_2d(logits) -> Tensor:
    z = _as_tensor(logits)
    if z.shape[-1] != NUM_GRADES:
        raise nx.DimensionError(f"expected {NUM_GRADES} logits per sample, got {z.shape}")
    return nx.reshape(z, (1, NUM_GRADES)) if z.ndim == 1 else z


def _check_grades(logits: Tensor, grades) -> np.ndarray:
    grades = np.atleast_1d(np.asarray(grades, dtype=np.int64))
    if logits.shape[-1] != NUM_GRADES:
        raise nx.DimensionError(f"expected {NUM_GRADES} logits per sample, got {logits.shape}")
    if grades.min() < 0 or grades.max() >= NUM_GRADES:
        raise ValueError(f"grade out of range 0..{NUM_GRADES - 1}: {grades}")
    return grades


def multi_head_loss(logits, grades) -> Tensor:
    """Sum over heads of one-vs-rest BCE, averaged over the batch."""
    z = _as_2d(logits)
    grades = _check_grades(z, grades)
    targets = np.eye(NUM_GRADES, dtype=nx.DTYPE)[grades]
    per = nx.bce_with_logits(z, targets)  # (B, 5)
    return nx.tsum(per) * (1.0 / len(grades))


def single_head_loss(logits, grades) -> Tensor:
    """Softmax cross-entropy against the one-hot grade, averaged over the batch."""
    z = _as_2d(logits)
    grades = _check_grades(z, grades)
    return nx.mean(nx.cross_entropy(z, grades))


def loss_for(mode: str):
    return multi_head_loss if mode == "multi-head" else single_head_loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    hp: AdamWConfig = field(default_factory=AdamWConfig)


def adamw_update(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, hp: AdamWConfig) -> None:
    """One in-place AdamW update of ``w`` with decoupled weight decay."""
    if g.shape != w.shape:
        raise nx.DimensionError(f"gradient shape {g.shape} does not match parameter {w.shape}")
    b1, b2 = hp.betas
    if hp.weight_decay:
        w *= np.float32(1.0 - hp.lr * hp.weight_decay)
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    w -= (hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)).astype(w.dtype, copy=False)


class AdamW:
    """AdamW over a fixed parameter list.

    Parameters with ``requires_grad=False`` or no gradient are skipped
    entirely (no decay either), which is what makes freezing exact.
    """

    def __init__(self, params, cfg: AdamWConfig | None = None):
        self.params: list[Parameter] = list(params)
        hp = cfg or AdamWConfig()
        self.state = OptimizerState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
            hp=hp,
        )

    @property
    def hp(self) -> AdamWConfig:
        return self.state.hp

    def step(self) -> None:
        st = self.state
        st.step += 1
        for p, m, v in zip(self.params, st.m, st.v):
            if not p.requires_grad or p.grad is None:
                continue
            adamw_update(p.data, p.grad, m, v, st.step, st.hp)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(params, grads, state: OptimizerState) -> OptimizerState:
    """Functional form: update ``params`` (arrays) in place from ``grads``.

    A ``None`` gradient marks a frozen tensor.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise nx.DimensionError("params, grads and optimizer state differ in length")
    state.step += 1
    for w, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        adamw_update(w, np.asarray(g, dtype=w.dtype), m, v, state.step, state.hp)
    return state


def param_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        arr = p.data if isinstance(p, Tensor) else p
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class Phase:
    name: str
    sites: tuple[str, ...]
    trainable: str = "all"  # "all" or "encoder"
    epochs: int = 100


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def losses(self, phase: str | None = None) -> list[float]:
        return [r["train_loss"] for r in self.rows if phase is None or r["phase"] == phase]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in HISTORY_FIELDS})


def evaluate(model: KOANet, samples, batch_size: int = 64) -> MetricsReport:
    """Metrics on un-augmented images."""
    if not samples:
        raise TrainingError("cannot evaluate an empty sample list")
    x, y = datagen.stack(samples)
    return compute_metrics(y, model.predict(x, batch_size))


def trainable_parameters(model: KOANet, which: str) -> list[Parameter]:
    if which == "all":
        return model.parameters()
    if which == "encoder":
        return model.encoder_parameters()
    raise ValueError(f"unknown trainable set {which!r}")


def train_loop(
    model: KOANet,
    train_samples,
    val_samples,
    epochs: int,
    train_cfg: TrainConfig,
    seed: int = 0,
    phase: str = "phase1",
    trainable: str = "all",
    history: History | None = None,
    keep_best: bool = True,
    stop=None,
) -> History:
    """Mini-batch AdamW training with per-epoch validation.

    Each call builds a fresh optimizer over the trainable set. Parameters
    outside it are frozen for the duration and restored afterwards. With
    ``keep_best`` the weights with the best validation macro-F1 are put
    back into the model at the end (first best wins ties). ``stop(model, row)``
    is called after every epoch and ends training early when it returns True.
    """
    if not train_samples:
        raise TrainingError("training set is empty")
    history = history if history is not None else History()
    params = trainable_parameters(model, trainable)
    ids = {id(p) for p in params}
    frozen = [p for p in model.parameters() if id(p) not in ids]
    saved_flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad = False
    opt = AdamW(params, train_cfg.optimizer)
    loss_fn = loss_for(model.cfg.classifier_mode)
    shuffle_rng = stream(seed, f"shuffle/{phase}")
    aug_rng = stream(seed, f"augmentation/{phase}")
    images = np.stack([s.image for s in train_samples]).astype(nx.DTYPE)
    grades = np.array([s.grade for s in train_samples], dtype=np.int64)
    n, bs = len(train_samples), train_cfg.batch_size
    best_f1, best_state = -1.0, None
    try:
        for epoch in range(1, epochs + 1):
            order = shuffle_rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                xb = images[idx]
                if train_cfg.augment:
                    xb = np.stack([datagen.apply_augment(img, datagen.AugmentParams.draw(aug_rng)) for img in xb])
                opt.zero_grad()
                loss = loss_fn(model(xb), grades[idx])
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss at epoch {epoch} of {phase}")
                nx.backward(loss)
                opt.step()
                total += float(loss.data) * len(idx)
            row = {"epoch": epoch, "phase": phase, "train_loss": total / n, "val_acc": float("nan"), "val_macro_f1": float("nan")}
            if val_samples:
                rep = evaluate(model, val_samples)
                row["val_acc"], row["val_macro_f1"] = rep.accuracy, rep.macro_f1
                if keep_best and rep.macro_f1 > best_f1:
                    best_f1, best_state = rep.macro_f1, model.state_dict()
            history.add(**row)
            log.debug("%s epoch %d loss %.4f val_f1 %.4f", phase, epoch, row["train_loss"], row["val_macro_f1"])
            if stop is not None and stop(model, row):
                break
    finally:
        for p, flag in zip(frozen, saved_flags):
            p.requires_grad = flag
        opt.zero_grad()
        for p in frozen:
            p.grad = None
    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def drift_correct(
    model: KOANet,
    target_train,
    target_val,
    epochs: int,
    train_cfg: TrainConfig,
    seed: int = 0,
    history: History | None = None,
    phase: str = "phase2",
) -> History:
    """Freeze every head parameter and fine-tune the encoder on target labels."""
    return train_loop(model, target_train, target_val, epochs, train_cfg, seed, phase, "encoder", history)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def benchmark_train_config() -> TrainConfig:
    """Settings for the synthetic benchmark (see ``datagen.benchmark_spec``)."""
    return TrainConfig(batch_size=32, epochs=100, finetune_epochs=50, optimizer=AdamWConfig(lr=3e-4))


@dataclass
class ExperimentSpec:
    id: int
    phases: list[Phase]
    classifier_mode: str = "multi-head"
    eval_sites: tuple[str, ...] = datagen.SITES


_DESCRIPTIONS = {
    1: "single head, trained on both sites",
    2: "multi-head, trained on both sites",
    3: "multi-head, trained on the target site only",
    4: "multi-head, trained on the source site only",
    5: "source training, then heads frozen and encoder fine-tuned on target",
}


def experiment_spec(exp_id: int, epochs: int = 100, finetune_epochs: int = 50) -> ExperimentSpec:
    both = ("source", "target")
    if exp_id == 1:
        return ExperimentSpec(1, [Phase("phase1", both, "all", epochs)], "single-head")
    if exp_id == 2:
        return ExperimentSpec(2, [Phase("phase1", both, "all", epochs)])
    if exp_id == 3:
        return ExperimentSpec(3, [Phase("phase1", ("target",), "all", epochs)])
    if exp_id == 4:
        return ExperimentSpec(4, [Phase("phase1", ("source",), "all", epochs)])
    if exp_id == 5:
        return ExperimentSpec(5, [
            Phase("phase1", ("source",), "all", epochs),
            Phase("phase2", ("target",), "encoder", finetune_epochs),
        ])
    raise ValueError(f"experiment id must be 1..5, got {exp_id}")


def describe(exp_id: int) -> str:
    return _DESCRIPTIONS[exp_id]


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    model: KOANet
    history: History
    reports: dict[str, MetricsReport]  # per eval site plus "combined", after the last phase
    phase_reports: list[dict[str, MetricsReport]]  # same, after every phase
    head_hashes: list[tuple[str, str]]  # (before, after) head hash per phase


def evaluate_sites(model: KOANet, samples, sites) -> dict[str, MetricsReport]:
    out = {}
    for site in sites:
        test = datagen.select(samples, site=site, split="test")
        if test:
            out[site] = evaluate(model, test)
    combined = datagen.select(samples, site=sites, split="test")
    if combined:
        out["combined"] = evaluate(model, combined)
    return out


def run_experiment(
    spec: ExperimentSpec,
    samples,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int = 0,
    model: KOANet | None = None,
) -> ExperimentResult:
    """Train through every phase of ``spec`` and evaluate on each site's test split."""
    if not 1 <= spec.id <= 5:
        raise ValueError(f"experiment id must be 1..5, got {spec.id}")
    for ph in spec.phases[1:]:
        if spec.id == 5 and ph.trainable != "encoder":
            raise ValueError("experiment 5 fine-tuning must exclude head parameters")
    cfg = model_cfg.replace(classifier_mode=spec.classifier_mode)
    if model is None:
        model = KOANet(cfg, stream(seed, "init"))
    elif model.cfg.classifier_mode != spec.classifier_mode:
        raise ValueError("model classifier mode does not match the experiment")
    history = History()
    phase_reports, hashes = [], []
    for ph in spec.phases:
        train = datagen.select(samples, site=ph.sites, split="train")
        val = datagen.select(samples, site=ph.sites, split="val")
        if not train:
            raise TrainingError(f"no training samples for sites {ph.sites}")
        before = param_hash(model.head_parameters())
        train_loop(model, train, val, ph.epochs, train_cfg, seed, ph.name, ph.trainable, history)
        hashes.append((before, param_hash(model.head_parameters())))
        phase_reports.append(evaluate_sites(model, samples, spec.eval_sites))
    return ExperimentResult(spec, model, history, phase_reports[-1], phase_reports, hashes)


def clone_model(model: KOANet) -> KOANet:
    return copy.deepcopy(model)
