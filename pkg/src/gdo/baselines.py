"""Reference methods: source-only, one-shot target self-training, and GST.

Every baseline consumes the same DomainSequence and seed protocol as the
osmosis loop, and each self-training pass gets the same per-domain budget
(m * epochs_per_step gradient steps), so comparisons hold compute constant.
"""

from __future__ import annotations

import time
from typing import Optional, Sequence

import numpy as np

from . import nn
from .domains import BatchPlan, Dataset, DomainSequence, make_batches
from .osmosis import (
    GdoConfig,
    RunRecord,
    StepLog,
    _P_ST,
    accuracy,
    child_seed,
    fit_source,
    pseudo_labels,
)


def train_source(seq: DomainSequence, arch: Sequence[int], cfg: GdoConfig) -> nn.MlpModel:
    """Supervised training on the labeled source domain only.

    Identical procedure and seeds as the osmosis loop's pretraining phase,
    so the two start from the very same model.
    """
    model, _, _ = fit_source(seq.source, arch, cfg)
    return model


def self_train_once(model: nn.MlpModel, D: Dataset, cfg: GdoConfig, *,
                    start_step: int = 0, steps: Optional[int] = None) -> nn.MlpModel:
    """One self-training pass: freeze pseudo-labels, then fit to them.

    The labels are computed once from the input model and never refreshed
    mid-pass. The budget is m * epochs_per_step gradient steps unless
    overridden; steps=0 returns the model untouched. start_step offsets the
    learning-rate schedule so chained passes keep decaying.
    """
    labels = pseudo_labels(model, D.X)
    budget = cfg.m * cfg.epochs_per_step if steps is None else steps
    if budget < 0:
        raise ValueError(f"steps must be >= 0, got {budget}")
    labeled = Dataset(D.X, labels)  # batches carry their frozen labels along
    s = 0
    epoch = 0
    while s < budget:
        batches = make_batches(
            labeled, BatchPlan(cfg.m, child_seed(cfg.seed, _P_ST, start_step, epoch))
        )
        for b in batches:
            if s >= budget:
                break
            ce = nn.softmax_ce(nn.forward(model, b.X), b.y)
            bundle = nn.backprop(model, b.X, ce.dlogits, ce.value)
            model = nn.sgd_step(model, bundle,
                                nn.schedule_rate(cfg.lr, start_step + s), which="both")
            s += 1
        epoch += 1
    return model


def _st_objective(model: nn.MlpModel, prev_model: nn.MlpModel, D: Dataset) -> float:
    """CE of the updated model against the pass's frozen pseudo-labels."""
    return nn.softmax_ce(nn.forward(model, D.X), pseudo_labels(prev_model, D.X)).value


def gst(seq: DomainSequence, arch: Sequence[int], cfg: GdoConfig
        ) -> tuple[nn.MlpModel, RunRecord]:
    """Gradual self-training: source training, then one ST pass per domain."""
    start = time.perf_counter()
    record = RunRecord()
    model, gs, record.pretrain_loss = fit_source(seq.source, arch, cfg)
    record.outer_steps = 1
    record.domain_acc.append(accuracy(model, seq.source))
    for i in range(1, seq.n_domains):
        dom = seq.domains[i]
        prev = model
        before = np.concatenate([nn.flatten_theta(model), nn.flatten_phi(model)])
        model = self_train_once(model, dom.features_only(), cfg, start_step=gs)
        gs += cfg.m * cfg.epochs_per_step
        record.outer_steps += 1
        after = np.concatenate([nn.flatten_theta(model), nn.flatten_phi(model)])
        drift = after - before
        record.steps.append(StepLog(
            t=i - 1, k=0, lam=1.0,
            objective=_st_objective(model, prev, dom),
            err_next=(1.0 - accuracy(model, dom) if dom.y is not None else -1.0),
            drift_sq=float(drift @ drift),
        ))
        if dom.y is not None:
            record.domain_acc.append(accuracy(model, dom))
    record.wall_ms = (time.perf_counter() - start) * 1e3
    return model, record


def target_st(seq: DomainSequence, arch: Sequence[int], cfg: GdoConfig
              ) -> tuple[nn.MlpModel, RunRecord]:
    """Source training followed by a single ST pass directly on the target."""
    start = time.perf_counter()
    record = RunRecord()
    model, gs, record.pretrain_loss = fit_source(seq.source, arch, cfg)
    record.outer_steps = 1
    record.domain_acc.append(accuracy(model, seq.source))
    target = seq.target
    prev = model
    before = np.concatenate([nn.flatten_theta(model), nn.flatten_phi(model)])
    model = self_train_once(model, target.features_only(), cfg, start_step=gs)
    record.outer_steps += 1
    after = np.concatenate([nn.flatten_theta(model), nn.flatten_phi(model)])
    drift = after - before
    record.steps.append(StepLog(
        t=seq.n_domains - 2, k=0, lam=1.0,
        objective=_st_objective(model, prev, target),
        err_next=(1.0 - accuracy(model, target) if target.y is not None else -1.0),
        drift_sq=float(drift @ drift),
    ))
    if target.y is not None:
        record.domain_acc.append(accuracy(model, target))
    record.wall_ms = (time.perf_counter() - start) * 1e3
    return model, record
