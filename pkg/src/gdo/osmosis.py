"""Cross-domain self-training with an interpolated objective.

The training loop walks a domain sequence and, between each consecutive pair,
sweeps an interpolation weight lambda from near 0 to exactly 1. At each
lambda it minimizes

    (1 - lambda) * CE(previous domain, pseudo-labels)
        + lambda * CE(next domain, pseudo-labels)
        + alpha * margin hinge on the next domain
        + beta * KL to the frozen reference model

so probability mass shifts gradually from the domain the model knows to the
one it is entering. Pseudo-labels always come from a frozen snapshot
(ref_model), refreshed once per outer step, never from the model being
optimized. Two parameter blocks move on different timescales: the feature
extractor (theta) every batch, the classifier head (phi) once per domain
transition, where it descends the input-Jacobian penalty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import nn
from .domains import BatchPlan, Dataset, DomainSequence, make_batches
from .errors import ContractError, NumericError

# purpose tags for deriving independent child seeds from one run seed
_P_INIT = 0
_P_PRETRAIN = 1
_P_BATCH = 2
_P_INTER = 3
_P_ST = 4


def child_seed(seed: int, *key: int) -> int:
    """Deterministic child seed for a (purpose, index...) slot."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1)[0])


@dataclass(frozen=True)
class GdoConfig:
    """Hyperparameters for the osmosis loop.

    inter_steps counts the lambda grid points strictly between 0 and 1 for
    each domain pair; the grid always ends at exactly 1. update_mode
    "strict" moves only theta during intra-domain steps (the head waits for
    the transition); "joint" moves both blocks, which a bare linear model
    (empty theta) needs in order to learn at all.
    """

    alpha: float = 0.1
    beta: float = 0.1
    inter_steps: int = 2
    m: int = 10
    lr: nn.LrSchedule = nn.LrSchedule(0.05, 0.01)
    zeta: float = 0.01
    epochs_per_step: int = 5
    seed: int = 0
    pretrain_epochs: int = 30
    update_mode: str = "strict"
    inter_sample_size: int = 256

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.inter_steps < 0:
            raise ValueError(f"inter_steps must be >= 0, got {self.inter_steps}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.zeta < 0:
            raise ValueError(f"zeta must be >= 0, got {self.zeta}")
        if self.epochs_per_step < 1:
            raise ValueError(f"epochs_per_step must be >= 1, got {self.epochs_per_step}")
        if self.pretrain_epochs < 0:
            raise ValueError(f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.update_mode not in ("strict", "joint"):
            raise ValueError(f"update_mode must be strict or joint, got {self.update_mode!r}")
        if self.inter_sample_size < 1:
            raise ValueError(f"inter_sample_size must be >= 1, got {self.inter_sample_size}")

    @property
    def lambda_grid(self) -> tuple[float, ...]:
        """Strictly increasing weights for one domain pair, ending exactly at 1."""
        inner = tuple(j / (self.inter_steps + 1) for j in range(1, self.inter_steps + 1))
        return inner + (1.0,)

    def outer_steps(self, n_given: int) -> int:
        """Total outer steps for a run: pretraining plus one per lambda per pair."""
        if n_given < 2:
            raise ValueError(f"need at least 2 domains, got {n_given}")
        return (n_given - 1) * (self.inter_steps + 1) + 1

    @property
    def intra_which(self) -> str:
        return "both" if self.update_mode == "joint" else "theta"


@dataclass(frozen=True)
class PairedBatch:
    """Index-paired batches from two adjacent domains plus the mixing weight."""

    batch_i: Dataset
    batch_next: Dataset
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class StepLog:
    """One outer step: pair index t, lambda index k, and stability inputs.

    err_next is the oracle error on the pair's incoming domain (-1.0 when
    that domain carries no labels); drift_sq is the squared parameter
    movement over the step, measured on the block the intra phase updates.
    """

    t: int
    k: int
    lam: float
    objective: float
    err_next: float
    drift_sq: float


@dataclass(frozen=True)
class TransitionLog:
    """Jacobian penalty on the transition subsample before and after the head step."""

    t: int
    l_inter_before: float
    l_inter_after: float


@dataclass
class RunRecord:
    """Full trajectory of one run. Equality ignores wall_ms, so reruns of the
    same configuration compare equal field-for-field."""

    steps: list[StepLog] = field(default_factory=list)
    transitions: list[TransitionLog] = field(default_factory=list)
    domain_acc: list[float] = field(default_factory=list)
    pretrain_loss: float = 0.0
    outer_steps: int = 0
    wall_ms: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class TrainState:
    """Snapshot of the loop: current model, frozen reference, and counters.

    ref_model is replaced only at documented points: the start of each outer
    step in run_gdo, and the end of each phi_operator batch. (t, k) advance
    lexicographically; global_step counts every gradient step since
    pretraining began and indexes the learning-rate schedule.
    """

    model: nn.MlpModel
    ref_model: nn.MlpModel
    t: int
    k: int
    global_step: int
    trajectory: RunRecord
    last_objective: float = 0.0


def pseudo_labels(model: nn.MlpModel, X: np.ndarray) -> np.ndarray:
    """Hard labels: per-row argmax of the logits, ties to the lowest index."""
    return nn.forward(model, X).argmax(axis=1)


def accuracy(model: nn.MlpModel, ds: Dataset) -> float:
    """Fraction of oracle labels the model predicts correctly."""
    if ds.y is None:
        raise ContractError("accuracy needs a labeled dataset")
    return float((pseudo_labels(model, ds.X) == ds.y).mean())


def weighted_st_objective(model: nn.MlpModel, ref_model: nn.MlpModel,
                          batch_i: Dataset, batch_next: Dataset,
                          lam: float, cfg: GdoConfig) -> nn.LossBundle:
    """The interpolated objective and its gradients for both blocks.

    Zero-weighted terms are skipped outright, so at lam=0 (alpha=beta=0) the
    result is bit-identical to plain CE on batch_i, and at lam=1 to plain CE
    on batch_next.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    total = nn.zero_bundle(model)
    if lam != 1.0:
        ce = nn.softmax_ce(nn.forward(model, batch_i.X),
                           pseudo_labels(ref_model, batch_i.X))
        total = total + nn.backprop(model, batch_i.X,
                                    (1.0 - lam) * ce.dlogits, (1.0 - lam) * ce.value)
    if lam != 0.0 or cfg.alpha != 0.0:
        logits_next = nn.forward(model, batch_next.X)
        dlogits = np.zeros_like(logits_next)
        value = 0.0
        if lam != 0.0:
            ce = nn.softmax_ce(logits_next, pseudo_labels(ref_model, batch_next.X))
            dlogits += lam * ce.dlogits
            value += lam * ce.value
        if cfg.alpha != 0.0:
            mg = nn.margin_loss(logits_next)
            dlogits += cfg.alpha * mg.dlogits
            value += cfg.alpha * mg.value
        total = total + nn.backprop(model, batch_next.X, dlogits, value)
    if cfg.beta != 0.0:
        X_union = np.concatenate([batch_i.X, batch_next.X])
        kl = nn.kl_to_reference(nn.forward(model, X_union),
                                nn.forward(ref_model, X_union))
        total = total + nn.backprop(model, X_union,
                                    cfg.beta * kl.dlogits, cfg.beta * kl.value)
    return total


def intra_update(state: TrainState, batch: PairedBatch, cfg: GdoConfig) -> TrainState:
    """epochs_per_step descent steps on the weighted objective at batch.lam.

    In strict mode only theta moves; the reference model is left alone (it
    is refreshed by the caller once per outer step).
    """
    model = state.model
    gs = state.global_step
    value = state.last_objective
    for _ in range(cfg.epochs_per_step):
        bundle = weighted_st_objective(model, state.ref_model,
                                       batch.batch_i, batch.batch_next,
                                       batch.lam, cfg)
        model = nn.sgd_step(model, bundle, nn.schedule_rate(cfg.lr, gs),
                            which=cfg.intra_which)
        gs += 1
        value = bundle.value
    return replace(state, model=model, k=state.k + 1, global_step=gs,
                   last_objective=value)


def phi_operator(state: TrainState, B_tk: Dataset, B_tk1: Dataset,
                 cfg: GdoConfig) -> TrainState:
    """Per-batch incremental operator: consistency + prospective margin + KL.

    Minimizes CE on B_tk against the reference's pseudo-labels, the margin
    hinge on the upcoming batch B_tk1, and KL to the reference on B_tk, for
    epochs_per_step steps. The reference is refreshed to the post-update
    model at the end of the batch.
    """
    model = state.model
    ref = state.ref_model
    labels = pseudo_labels(ref, B_tk.X)
    ref_logits = nn.forward(ref, B_tk.X) if cfg.beta != 0.0 else None
    gs = state.global_step
    value = state.last_objective
    for _ in range(cfg.epochs_per_step):
        logits = nn.forward(model, B_tk.X)
        ce = nn.softmax_ce(logits, labels)
        dlogits = ce.dlogits
        value = ce.value
        if cfg.beta != 0.0:
            kl = nn.kl_to_reference(logits, ref_logits)
            dlogits = dlogits + cfg.beta * kl.dlogits
            value += cfg.beta * kl.value
        bundle = nn.backprop(model, B_tk.X, dlogits, value)
        if cfg.alpha != 0.0:
            mg = nn.margin_loss(nn.forward(model, B_tk1.X))
            bundle = bundle + nn.backprop(model, B_tk1.X,
                                          cfg.alpha * mg.dlogits,
                                          cfg.alpha * mg.value)
        model = nn.sgd_step(model, bundle, nn.schedule_rate(cfg.lr, gs),
                            which=cfg.intra_which)
        gs += 1
        value = bundle.value
    return replace(state, model=model, ref_model=model, k=state.k + 1,
                   global_step=gs, last_objective=value)


def inter_transfer(state: TrainState, D_t: Dataset, D_t1: Dataset,
                   cfg: GdoConfig) -> TrainState:
    """Head step at a domain transition: phi descends the Jacobian penalty.

    The penalty is evaluated on a seeded subsample of the two domains'
    union; theta is carried over bit-identically. Advances (t, k) to the
    next domain and logs the penalty before and after the step.
    """
    X_union = np.concatenate([D_t.X, D_t1.X])
    rng = np.random.default_rng(child_seed(cfg.seed, _P_INTER, state.t))
    take = min(cfg.inter_sample_size, X_union.shape[0])
    sample = X_union[rng.choice(X_union.shape[0], size=take, replace=False)]
    bundle = nn.input_jacobian_sqnorm(state.model, sample, theta_grads=False)
    model = nn.sgd_step(state.model, bundle, cfg.zeta, which="phi")
    after = nn._jacobian_sqnorm_value(model, sample)
    state.trajectory.transitions.append(
        TransitionLog(state.t, bundle.value, after)
    )
    return replace(state, model=model, t=state.t + 1, k=0)


def _drift_block(model: nn.MlpModel) -> np.ndarray:
    """Flat view of the block whose movement the stability log tracks: the
    feature extractor when one exists, otherwise the head (a bare linear
    model has nothing else that moves intra-domain)."""
    return nn.flatten_theta(model) if model.theta_layers else nn.flatten_phi(model)


def fit_source(source: Dataset, arch: Sequence[int], cfg: GdoConfig
               ) -> tuple[nn.MlpModel, int, float]:
    """Supervised pretraining on the labeled source domain.

    Both blocks always move here regardless of update_mode: a frozen random
    head cannot learn the source task. Returns (model, gradient steps
    consumed, final epoch's mean CE).
    """
    if source.y is None:
        raise ContractError("pretraining needs a labeled source domain")
    n_classes = int(source.y.max()) + 1
    if n_classes < 2:
        n_classes = 2
    model = nn.init_mlp(source.d, arch, n_classes,
                        seed=child_seed(cfg.seed, _P_INIT, 0))
    gs = 0
    last = nn.softmax_ce(nn.forward(model, source.X), source.y).value
    for epoch in range(cfg.pretrain_epochs):
        batches = make_batches(
            source, BatchPlan(cfg.m, child_seed(cfg.seed, _P_PRETRAIN, epoch))
        )
        epoch_losses = []
        for b in batches:
            ce = nn.softmax_ce(nn.forward(model, b.X), b.y)
            bundle = nn.backprop(model, b.X, ce.dlogits, ce.value)
            model = nn.sgd_step(model, bundle, nn.schedule_rate(cfg.lr, gs),
                                which="both")
            gs += 1
            epoch_losses.append(ce.value)
        last = float(np.mean(epoch_losses))
    return model, gs, last


def run_gdo(seq: DomainSequence, arch: Sequence[int], cfg: GdoConfig
            ) -> tuple[nn.MlpModel, RunRecord]:
    """The full loop: pretrain on the source, then osmose pair by pair.

    For each consecutive domain pair, for each lambda on the grid: freeze
    the reference, reshuffle both domains into m index-paired batches, and
    run intra updates on every pair; after the grid finishes, apply the
    inter-domain head step once. Deterministic given (seq, arch, cfg):
    rerunning yields an equal RunRecord (wall_ms excluded from comparison).
    """
    start = time.perf_counter()
    if seq.source.y is None:
        raise ContractError("the source domain must carry labels")
    record = RunRecord()
    model, gs, record.pretrain_loss = fit_source(seq.source, arch, cfg)
    record.outer_steps = 1
    record.domain_acc.append(accuracy(model, seq.source))
    state = TrainState(model, model, t=0, k=0, global_step=gs, trajectory=record)

    for i in range(seq.n_domains - 1):
        dom_i, dom_next = seq.domains[i], seq.domains[i + 1]
        for j, lam in enumerate(cfg.lambda_grid):
            state = replace(state, ref_model=state.model)
            batches_i = make_batches(
                dom_i, BatchPlan(cfg.m, child_seed(cfg.seed, _P_BATCH, i, j, 0)))
            batches_next = make_batches(
                dom_next, BatchPlan(cfg.m, child_seed(cfg.seed, _P_BATCH, i, j, 1)))
            before = _drift_block(state.model)
            objectives = []
            for k, (bi, bn) in enumerate(zip(batches_i, batches_next)):
                try:
                    state = intra_update(state, PairedBatch(bi, bn, lam), cfg)
                except NumericError as e:
                    raise NumericError(
                        f"aborted at domain pair {i}, lambda {lam:.6g}, batch {k}: {e}"
                    ) from e
                objectives.append(state.last_objective)
            record.outer_steps += 1
            err_next = (1.0 - accuracy(state.model, dom_next)
                        if dom_next.y is not None else -1.0)
            drift = _drift_block(state.model) - before
            record.steps.append(StepLog(
                t=i, k=j, lam=lam,
                objective=float(np.mean(objectives)),
                err_next=err_next,
                drift_sq=float(drift @ drift),
            ))
        state = inter_transfer(state, dom_i, dom_next, cfg)
        if dom_next.y is not None:
            record.domain_acc.append(accuracy(state.model, dom_next))
    record.wall_ms = (time.perf_counter() - start) * 1e3
    return state.model, record
