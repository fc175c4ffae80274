"""Meta-tuning (MAML-style) with ordered inputs, the naive SGD baseline and
a forgetting measure.

Every routine is generic over ``task_loss(params, sample) -> scalar Tensor``
where ``params`` is a :class:`~activemeta.segnet.ParamVector`; the quadratic
oracles in the tests run through exactly the same code as the network.

One meta step over pairs ``(D_i, D_i')``::

    theta_i' = theta - alpha * grad L(theta; D_i)          (inner_steps times)
    outer    = sum_i L(theta_i'; D_i')
    theta   <- theta - beta * d outer / d theta

``second_order`` differentiates through the inner update; ``first_order``
uses the gradient at ``theta_i'`` as if ``theta_i'`` did not depend on theta.
Each pair gets its own tape and the per-pair gradients are summed, which
gives the same meta-gradient as one big tape while keeping memory flat.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import sampler, segnet
from .autodiff import grad, scale, sub
from .autodiff.tensor import Tape, Tensor
from .errors import ConfigError, GradError, NonFiniteError, TuneError
from .metrics import dice_report
from .rng import Xoshiro256ss, derive_seed
from .segnet import ParamVector
from .synthdata import NUM_CLASSES, ENHANCING, PatientVolume, Sample

TaskLoss = Callable[[Mapping[str, Tensor], object], Tensor]

MODES = ("second_order", "first_order")
TRAJECTORY_HEADER = ("step", "outer_loss", "source_val_dsc", "target_val_dsc")


@dataclass(frozen=True)
class MetaTuneConfig:
    alpha: float = 0.01
    beta: float = 0.005
    meta_steps: int = 30
    inner_steps: int = 1
    mode: str = "second_order"
    tau: float = 0.5
    method: str = "active"
    seed: int = 0
    split_ratio: float = 0.5

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ConfigError(f"alpha and beta must be positive (alpha={self.alpha}, beta={self.beta})")
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.meta_steps < 0:
            raise ConfigError(f"meta_steps must be >= 0, got {self.meta_steps}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.method not in sampler.METHODS:
            raise ConfigError(f"method must be one of {sampler.METHODS}, got {self.method!r}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.split_ratio}")

    def to_dict(self) -> dict:
        return asdict(self)


# core updates --------------------------------------------------------------

def _ensure_tracked(theta: ParamVector) -> ParamVector:
    if all(t.tracked for t in theta.tensors()):
        return theta
    return theta.watch(Tape())


def inner_adapt(theta: ParamVector, task_loss: TaskLoss, sample, alpha: float, steps: int = 1,
                create_graph: bool = False) -> ParamVector:
    """``steps`` SGD steps on ``task_loss(theta, sample)``.

    Untracked parameters are put on a fresh tape.  With ``create_graph`` the
    result stays differentiable with respect to the incoming ``theta``.
    """
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    theta = _ensure_tracked(theta)
    for step in range(steps):
        try:
            loss = task_loss(theta, sample)
            grads = grad(loss, theta.tensors(), create_graph=create_graph)
        except (NonFiniteError, GradError) as exc:
            raise TuneError(f"inner adaptation failed: {exc}", step=step) from exc
        theta = theta.replace(sub(p, scale(g, alpha)) for p, g in zip(theta.tensors(), grads))
    return theta


def _pair_grad(theta: ParamVector, d, d_out, task_loss: TaskLoss, config: MetaTuneConfig):
    tape = Tape()
    tracked = theta.watch(tape)
    second = config.mode == "second_order"
    adapted = inner_adapt(tracked, task_loss, d, config.alpha, config.inner_steps, create_graph=second)
    if second:
        outer = task_loss(adapted, d_out)
        grads = grad(outer, tracked.tensors())
    else:
        anchor = adapted.detach().watch(Tape())
        outer = task_loss(anchor, d_out)
        grads = grad(outer, anchor.tensors())
    return float(outer), [g.data for g in grads]


def meta_step(theta: ParamVector, pairs: Sequence[tuple], task_loss: TaskLoss,
              config: MetaTuneConfig) -> tuple[ParamVector, float]:
    """One meta update over ``pairs``; returns ``(theta_new, outer_loss)``."""
    pairs = list(pairs)
    if not pairs:
        raise TuneError("meta_step needs at least one (D, D') pair")
    theta = theta.detach()
    total = [np.zeros(t.shape) for t in theta.tensors()]
    outer_loss = 0.0
    for i, (d, d_out) in enumerate(pairs):
        try:
            value, grads = _pair_grad(theta, d, d_out, task_loss, config)
        except TuneError as exc:
            raise TuneError(str(exc), step=exc.step, pair=i) from exc
        except (NonFiniteError, GradError) as exc:
            raise TuneError(f"outer loss failed: {exc}", pair=i) from exc
        outer_loss += value
        for acc, g in zip(total, grads):
            acc += g
    if not all(np.isfinite(g).all() for g in total):
        raise TuneError("non-finite meta-gradient")
    new = theta.replace(Tensor(p.data - config.beta * g) for p, g in zip(theta.tensors(), total))
    return new, outer_loss


# experiment loops ----------------------------------------------------------

@dataclass
class EvalScores:
    source_dsc: float
    target_dsc: float
    target_enhancing_dsc: float


@dataclass
class StepRecord:
    step: int
    outer_loss: float
    source_val_dsc: float
    target_val_dsc: float
    target_val_enhancing_dsc: float

    def csv_row(self) -> list[str]:
        return [str(self.step), f"{self.outer_loss:.6f}", f"{self.source_val_dsc:.6f}", f"{self.target_val_dsc:.6f}"]


@dataclass
class TuneResult:
    config: dict
    initial: EvalScores
    records: list[StepRecord]
    params: ParamVector
    wall_time: float = 0.0
    order_log: list[list[str]] = field(default_factory=list)

    @property
    def final(self) -> EvalScores:
        if not self.records:
            return self.initial
        r = self.records[-1]
        return EvalScores(r.source_val_dsc, r.target_val_dsc, r.target_val_enhancing_dsc)


def evaluate(params: Mapping[str, Tensor], samples: Sequence[Sample],
             num_classes: int = NUM_CLASSES) -> tuple[float, float]:
    """Slice-averaged (mean foreground DSC, enhancing DSC)."""
    if not samples:
        raise ConfigError("evaluate: empty sample list")
    preds = segnet.predict_batch(params, np.stack([s.x for s in samples]))
    reports = [dice_report(p, s.y, num_classes) for p, s in zip(preds, samples)]
    fg = float(np.mean([r.mean_foreground for r in reports]))
    enh = float(np.mean([r.per_class[ENHANCING] for r in reports]))
    return fg, enh


def _scores(params, source_val, target_val) -> EvalScores:
    src, _ = evaluate(params, source_val)
    tgt, enh = evaluate(params, target_val)
    return EvalScores(src, tgt, enh)


def _record(step, outer_loss, params, source_val, target_val) -> StepRecord:
    s = _scores(params, source_val, target_val)
    return StepRecord(step, outer_loss, s.source_dsc, s.target_dsc, s.target_enhancing_dsc)


def run_meta_tune(theta0: ParamVector, target_train: Sequence[PatientVolume], source_val: Sequence[Sample],
                  target_val: Sequence[Sample], config: MetaTuneConfig,
                  task_loss: TaskLoss = segnet.loss) -> TuneResult:
    """Meta-tune on target patients, one patient per meta batch, cycled in order."""
    if config.method not in ("passive", "active"):
        raise ConfigError(f"run_meta_tune needs method passive or active, got {config.method!r}")
    if not target_train:
        raise ConfigError("run_meta_tune: empty target training set")
    if not source_val:
        raise ConfigError("run_meta_tune: empty source validation set")
    start = time.perf_counter()
    theta = theta0.detach()
    initial = _scores(theta, source_val, target_val)
    records, log_rows = [], []
    for k in range(config.meta_steps):
        patient = target_train[k % len(target_train)]
        try:
            inner, outer = sampler.split_inner_outer(patient.slices, config.split_ratio,
                                                     derive_seed(config.seed, f"split/{k}"))
            inner_p = sampler.decompose_tasks(theta, inner, config.tau, sampler.INNER)
            outer_p = sampler.decompose_tasks(theta, outer, config.tau, sampler.OUTER)
            schedule = sampler.order(config.method, inner_p, outer_p, derive_seed(config.seed, f"order/{k}"))
            pairs = [(d.sample, d_out.sample) for d, d_out in schedule.pairs]
            theta, outer_loss = meta_step(theta, pairs, task_loss, config)
        except TuneError as exc:
            raise TuneError(str(exc), meta_step=k) from exc
        log_rows.extend(schedule.log_rows(k))
        records.append(_record(k + 1, outer_loss, theta, source_val, target_val))
    return TuneResult(config.to_dict(), initial, records, theta, time.perf_counter() - start, log_rows)


def naive_batch_size(split_ratio: float = 0.5, slices: int = 25) -> int:
    """Samples a meta batch consumes: each pair touches one D and one D'."""
    n_inner = min(max(int(np.floor(split_ratio * slices)), 1), slices - 1)
    return 2 * min(n_inner, slices - n_inner)


def run_naive_tune(theta0: ParamVector, target_train: Sequence[PatientVolume], source_val: Sequence[Sample],
                   target_val: Sequence[Sample], config: MetaTuneConfig,
                   task_loss: TaskLoss = segnet.loss, samples_per_record: int | None = None) -> TuneResult:
    """Plain SGD (rate alpha) over shuffled target slices.

    One record per ``samples_per_record`` samples (default: what one meta
    batch consumes), ``config.meta_steps`` records in total.
    """
    if not target_train:
        raise ConfigError("run_naive_tune: empty target training set")
    if not source_val:
        raise ConfigError("run_naive_tune: empty source validation set")
    per = samples_per_record or naive_batch_size(config.split_ratio, len(target_train[0].slices))
    start = time.perf_counter()
    pool = [s for p in target_train for s in p.slices]
    theta = theta0.detach()
    initial = _scores(theta, source_val, target_val)
    records, log_rows = [], []
    stream: list = []
    epoch = 0
    for k in range(config.meta_steps):
        total = 0.0
        for j in range(per):
            if not stream:
                schedule = sampler.order_naive(pool, derive_seed(config.seed, f"naive/{epoch}"))
                log_rows.extend(schedule.log_rows(epoch))
                stream = [d.sample for d, _ in schedule.pairs][::-1]
                epoch += 1
            sample = stream.pop()
            tape = Tape()
            tracked = theta.watch(tape)
            try:
                loss = task_loss(tracked, sample)
                grads = grad(loss, tracked.tensors())
            except (NonFiniteError, GradError) as exc:
                raise TuneError(f"naive step failed: {exc}", meta_step=k, step=j) from exc
            total += float(loss)
            theta = segnet.sgd_step(theta, grads, config.alpha)
        records.append(_record(k + 1, total, theta, source_val, target_val))
    return TuneResult(config.to_dict(), initial, records, theta, time.perf_counter() - start, log_rows)


def forgetting(theta0: Mapping[str, Tensor], theta_final: Mapping[str, Tensor], source_val: Sequence[Sample]) -> float:
    """Source-val mean foreground DSC drop; positive means forgetting."""
    before, _ = evaluate(theta0, source_val)
    after, _ = evaluate(theta_final, source_val)
    return before - after


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    source_val_dsc: float

    def csv_row(self) -> list[str]:
        return [str(self.epoch), f"{self.train_loss:.6f}", f"{self.source_val_dsc:.6f}"]


PRETRAIN_HEADER = ("epoch", "train_loss", "source_val_dsc")


def pretrain(theta0: ParamVector, train: Sequence[Sample], val: Sequence[Sample], epochs: int, lr: float,
             seed: int, task_loss: TaskLoss = segnet.loss, on_epoch=None) -> tuple[ParamVector, list[EpochRecord]]:
    """Per-sample SGD over shuffled source slices; epoch 0 is the untrained eval row."""
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if not lr > 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    if not train or not val:
        raise ConfigError("pretrain needs nonempty train and val sets")
    theta = theta0.detach()
    records = [EpochRecord(0, float("nan"), evaluate(theta, val)[0])]
    for epoch in range(1, epochs + 1):
        perm = Xoshiro256ss(derive_seed(seed, f"pretrain/{epoch}")).permutation(len(train))
        total = 0.0
        for j, i in enumerate(perm):
            tracked = theta.watch(Tape())
            try:
                loss = task_loss(tracked, train[i])
                grads = grad(loss, tracked.tensors())
            except (NonFiniteError, GradError) as exc:
                raise TuneError(f"pretraining step failed: {exc}", meta_step=epoch, step=j) from exc
            total += float(loss)
            theta = segnet.sgd_step(theta, grads, lr)
        records.append(EpochRecord(epoch, total / len(train), evaluate(theta, val)[0]))
        if on_epoch is not None:
            on_epoch(records[-1])
    return theta, records
