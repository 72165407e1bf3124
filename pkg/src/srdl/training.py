"""Training strategies: vanilla, knowledge distillation, and two-stage
self-referenced training.

The self-referenced strategy splits the epoch budget in half. Stage 1 trains
from labels alone under a stage-complete decay program and ends at the
half-trained checkpoint. Its softened per-sample class posteriors are then
extracted once (canonically, without augmentation) into a KnowledgeStore.
Stage 2 restarts from freshly initialized parameters (unless the restart
ablation is disabled) and minimizes cross-entropy plus the
temperature-squared-weighted KL imitation of the stored posteriors, matched
to samples by stable id. Both stages together consume exactly the vanilla
epoch budget; the only extra compute is the single extraction pass.

Cost accounting: ``trcost`` is forward-FLOPs x epochs x training-set size.
``total_flops_estimate`` additionally counts the backward pass as twice the
forward pass plus the extraction forward, and is the basis for the
extraction-overhead ratio.
"""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .data import Augmenter, Dataset, shuffled_indices
from .errors import ContractViolation, FileIntegrityError, NumericFailure, UnsupportedVersionError
from .losses import cross_entropy_mean, joint_objective, softmax_rows
from .model import Checkpoint, ModelSpec, ParameterSet, forward_flops, forward_logits, init_params
from .schedule import ScheduleConfig, lr_at, stage_lengths, two_stage_lr

KNOWLEDGE_MAGIC = b"SRKN"
KNOWLEDGE_VERSION = 1

BACKWARD_FORWARD_RATIO = 2  # backward pass costed at ~2x the forward pass


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD settings: schedule source, Nesterov momentum, weight decay, batch."""

    schedule: ScheduleConfig
    momentum: float = 0.9
    weight_decay: float = 0.0002
    batch_size: int = 128

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ContractViolation(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractViolation(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch size must be >= 1, got {self.batch_size}")


class SGD:
    """Nesterov-momentum SGD; weight decay is folded into the gradient.

    Update per parameter: g' = g + wd * theta, v <- mu * v - lr * g',
    theta <- theta + mu * v - lr * g'. With mu = 0 this is plain SGD.
    """

    def __init__(self, params: ParameterSet, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params}

    def reset_velocity(self):
        for v in self.velocity.values():
            v[...] = 0.0

    def step(self, lr: float):
        mu = self.momentum
        wd = self.weight_decay
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericFailure(f"non-finite gradient in {name}", parameter=name)
            gt = g + wd * p.data if wd else g
            v = mu * self.velocity[name] - lr * gt
            self.velocity[name] = v
            p.data = p.data + mu * v - lr * gt


@dataclass
class KnowledgeStore:
    """Per-sample softened class posteriors extracted from a trained model."""

    ids: np.ndarray  # (n,) uint64
    probs: np.ndarray  # (n, C) float32
    temperature: float
    source: str = "self-stage1"  # or "teacher"

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 2 or len(self.ids) != len(self.probs):
            raise ContractViolation("ids and probability rows must align")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractViolation("sample ids must be unique")
        sums = self.probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ContractViolation("every probability row must sum to 1 within 1e-6")

    def __len__(self):
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def rows_for(self, ids: np.ndarray) -> np.ndarray:
        """Probability rows aligned to the given sample ids."""
        if not hasattr(self, "_index"):
            self._index = {int(i): k for k, i in enumerate(self.ids)}
        try:
            rows = [self._index[int(i)] for i in ids]
        except KeyError as e:
            raise ContractViolation(f"sample id {e.args[0]} missing from knowledge store") from e
        return self.probs[rows]


def save_knowledge(store: KnowledgeStore, path):
    """Binary layout: magic, u32 version, u64 n, u32 C, f64 T, then
    (u64 id, C little-endian f32 probs) per sample."""
    with open(path, "wb") as f:
        f.write(KNOWLEDGE_MAGIC)
        f.write(struct.pack("<I", KNOWLEDGE_VERSION))
        f.write(struct.pack("<Q", len(store)))
        f.write(struct.pack("<I", store.num_classes))
        f.write(struct.pack("<d", store.temperature))
        for i, row in zip(store.ids, store.probs):
            f.write(struct.pack("<Q", int(i)))
            f.write(np.ascontiguousarray(row, dtype="<f4").tobytes())


def load_knowledge(path) -> KnowledgeStore:
    def read(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise FileIntegrityError(f"truncated knowledge store: {what}")
        return buf

    with open(path, "rb") as f:
        if f.read(4) != KNOWLEDGE_MAGIC:
            raise FileIntegrityError(f"{path}: not a knowledge store")
        (version,) = struct.unpack("<I", read(f, 4, "version"))
        if version > KNOWLEDGE_VERSION:
            raise UnsupportedVersionError(f"knowledge store version {version} unsupported")
        (n,) = struct.unpack("<Q", read(f, 8, "count"))
        (c,) = struct.unpack("<I", read(f, 4, "class count"))
        (temp,) = struct.unpack("<d", read(f, 8, "temperature"))
        ids = np.empty(n, dtype=np.uint64)
        probs = np.empty((n, c), dtype=np.float32)
        for k in range(n):
            (ids[k],) = struct.unpack("<Q", read(f, 8, f"id {k}"))
            probs[k] = np.frombuffer(read(f, 4 * c, f"row {k}"), dtype="<f4")
    return KnowledgeStore(ids=ids, probs=probs, temperature=temp, source="file")


@dataclass
class EpochRecord:
    epoch: int  # 1..M over the whole run
    stage: int  # 1 or 2 (always 1 for single-stage strategies)
    lr: float
    mean_ce: float
    mean_kl: float
    mean_total: float
    train_top1: float


@dataclass
class RunReport:
    """Everything observed during one training run."""

    strategy: str
    seeds: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    forward_flops: int = 0
    train_size: int = 0
    trcost: int = 0  # forward_flops * epochs * train_size
    extraction_flops: int = 0
    teacher_trcost: int = 0
    total_flops_estimate: int = 0  # (1 + backward ratio) * trcost + extraction
    wall_clock_sec: float = 0.0
    final_test_top1: float | None = None
    notes: dict = field(default_factory=dict)

    def finalize_costs(self, spec_flops: int, epochs: int, n_train: int):
        self.forward_flops = spec_flops
        self.train_size = n_train
        self.trcost = spec_flops * epochs * n_train
        self.total_flops_estimate = (
            (1 + BACKWARD_FORWARD_RATIO) * (self.trcost + self.teacher_trcost)
            + self.extraction_flops
        )

    @property
    def extraction_overhead(self) -> float:
        """Extraction FLOPs as a fraction of total training compute."""
        base = (1 + BACKWARD_FORWARD_RATIO) * self.trcost
        return self.extraction_flops / base if base else 0.0

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,stage,lr,mean_ce,mean_kl,mean_total,train_top1\n")
            for r in self.epochs:
                f.write(
                    f"{r.epoch},{r.stage},{r.lr:.10g},{r.mean_ce:.10g},"
                    f"{r.mean_kl:.10g},{r.mean_total:.10g},{r.train_top1:.10g}\n"
                )


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate_top1(params: ParameterSet, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of the model on a dataset (no augmentation)."""
    correct = 0
    feats = ds.features.astype(params.dtype, copy=False)
    for start in range(0, len(ds), batch_size):
        x = tz.Tensor(feats[start : start + batch_size])
        logits = forward_logits(params, x).data
        predicted = logits.argmax(axis=1) + 1
        correct += int((predicted == ds.labels[start : start + batch_size]).sum())
    return correct / len(ds)


def _train_stage(
    params: ParameterSet,
    sgd: SGD,
    data: Dataset,
    *,
    n_epochs: int,
    lr_for_epoch,
    run_seed: int,
    stage: int,
    epoch_offset: int,
    batch_size: int,
    store: KnowledgeStore | None,
    temperature: float,
    augmenter: Augmenter | None,
    records: list[EpochRecord],
):
    """Run one stage of epochs, appending per-epoch records.

    When ``store`` is given each batch minimizes the joint objective against
    the stored reference rows; otherwise plain cross-entropy.
    """
    n = len(data)
    feats = data.features.astype(params.dtype, copy=False)
    for t in range(1, n_epochs + 1):
        lr = lr_for_epoch(t)
        order = shuffled_indices(n, run_seed, stage, t)
        aug_rng = np.random.default_rng([run_seed, stage, t, 1])
        ce_sum = 0.0
        kl_sum = 0.0
        for idx in _batches(n, batch_size, order):
            xb = feats[idx]
            if augmenter is not None:
                xb = augmenter(xb, aug_rng)
            x = tz.Tensor(xb)
            labels = data.labels[idx]
            params.zero_grad()
            logits = forward_logits(params, x)
            if store is None:
                loss = cross_entropy_mean(logits, labels)
                ce = float(loss.data)
                kl = 0.0
            else:
                ref = store.rows_for(data.ids[idx])
                loss, report = joint_objective(logits, labels, ref, temperature)
                ce, kl = report.ce, report.kl
            if not np.isfinite(float(loss.data)):
                raise NumericFailure(
                    f"non-finite loss at epoch {epoch_offset + t}", epoch=epoch_offset + t
                )
            loss.backward()
            try:
                sgd.step(lr)
            except NumericFailure as e:
                raise NumericFailure(str(e), parameter=e.parameter, epoch=epoch_offset + t) from e
            ce_sum += ce * len(idx)
            kl_sum += kl * len(idx)
        mean_ce = ce_sum / n
        mean_kl = kl_sum / n
        weight = temperature**2 if store is not None else 0.0
        records.append(
            EpochRecord(
                epoch=epoch_offset + t,
                stage=stage,
                lr=lr,
                mean_ce=mean_ce,
                mean_kl=mean_kl,
                mean_total=mean_ce + weight * mean_kl,
                train_top1=evaluate_top1(params, data),
            )
        )


def train_vanilla(
    spec: ModelSpec,
    data: Dataset,
    n_epochs: int,
    opt: OptimizerConfig,
    seed: int,
    *,
    dtype=np.float32,
    test_data: Dataset | None = None,
    augmenter: Augmenter | None = None,
) -> tuple[Checkpoint, RunReport]:
    """Single-stage supervised training with cross-entropy only."""
    if n_epochs < 1:
        raise ContractViolation(f"need at least one epoch, got {n_epochs}")
    started = time.perf_counter()
    params = init_params(spec, seed, dtype=dtype)
    sgd = SGD(params, opt.momentum, opt.weight_decay)
    cfg = opt.schedule.with_horizon(n_epochs)
    report = RunReport(strategy="vanilla", seeds={"init": seed})
    _train_stage(
        params, sgd, data,
        n_epochs=n_epochs,
        lr_for_epoch=lambda t: lr_at(cfg, t),
        run_seed=seed, stage=1, epoch_offset=0,
        batch_size=opt.batch_size,
        store=None, temperature=1.0,
        augmenter=augmenter, records=report.epochs,
    )
    report.finalize_costs(forward_flops(spec), n_epochs, len(data))
    if test_data is not None:
        report.final_test_top1 = evaluate_top1(params, test_data)
    report.wall_clock_sec = time.perf_counter() - started
    report.notes.update(_conventions())
    ckpt = Checkpoint(spec=spec, params=params, stage="vanilla-final", epoch=n_epochs,
                      rng_state={"seed": seed})
    return ckpt, report


def extract_knowledge(
    ckpt: Checkpoint, data: Dataset, temperature: float, batch_size: int = 256,
    source: str = "self-stage1",
) -> KnowledgeStore:
    """One canonical forward pass over the training set; no augmentation.

    Produces one softened posterior row per sample, keyed by sample id.
    """
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    params = ckpt.params
    feats = data.features.astype(params.dtype, copy=False)
    rows = np.empty((len(data), ckpt.spec.num_classes), dtype=np.float32)
    for start in range(0, len(data), batch_size):
        x = tz.Tensor(feats[start : start + batch_size])
        logits = forward_logits(params, x).data
        rows[start : start + len(x.data)] = softmax_rows(
            logits.astype(np.float64), temperature
        ).astype(np.float32)
    return KnowledgeStore(ids=data.ids.copy(), probs=rows, temperature=temperature,
                          source=source)


def train_srdl(
    spec: ModelSpec,
    data: Dataset,
    n_epochs: int,
    opt: OptimizerConfig,
    temperature: float,
    seed1: int,
    seed2: int,
    *,
    restart: bool = True,
    stage_complete: bool = True,
    dtype=np.float32,
    test_data: Dataset | None = None,
    augmenter: Augmenter | None = None,
) -> tuple[Checkpoint, Checkpoint, KnowledgeStore, RunReport]:
    """Two-stage self-referenced training.

    Returns the half-trained checkpoint, the final checkpoint, the extracted
    knowledge store and the run report. Ablations: ``restart=False`` starts
    stage 2 from the half-trained parameters; ``stage_complete=False`` slices
    one full-run decay program across both stages instead of restarting it.
    """
    if n_epochs < 2:
        raise ContractViolation(f"two-stage training needs >= 2 epochs, got {n_epochs}")
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    if seed1 == seed2:
        warnings.warn("stage-2 restart seed equals stage-1 seed; stages will share their init")
    started = time.perf_counter()
    len1, len2 = stage_lengths(n_epochs)
    base = opt.schedule
    report = RunReport(strategy="srdl", seeds={"init": seed1, "restart": seed2})

    params = init_params(spec, seed1, dtype=dtype)
    sgd = SGD(params, opt.momentum, opt.weight_decay)
    _train_stage(
        params, sgd, data,
        n_epochs=len1,
        lr_for_epoch=lambda t: two_stage_lr(base, n_epochs, 1, t, stage_complete),
        run_seed=seed1, stage=1, epoch_offset=0,
        batch_size=opt.batch_size,
        store=None, temperature=temperature,
        augmenter=augmenter, records=report.epochs,
    )
    half = Checkpoint(spec=spec, params=params.copy(), stage="stage1-final", epoch=len1,
                      rng_state={"seed": seed1})

    store = extract_knowledge(half, data, temperature)
    report.extraction_flops = forward_flops(spec) * len(data)

    if restart:
        params = init_params(spec, seed2, dtype=dtype)
        sgd = SGD(params, opt.momentum, opt.weight_decay)
    else:
        sgd.reset_velocity()
    _train_stage(
        params, sgd, data,
        n_epochs=len2,
        lr_for_epoch=lambda t: two_stage_lr(base, n_epochs, 2, t, stage_complete),
        run_seed=seed2, stage=2, epoch_offset=len1,
        batch_size=opt.batch_size,
        store=store, temperature=temperature,
        augmenter=augmenter, records=report.epochs,
    )
    report.finalize_costs(forward_flops(spec), n_epochs, len(data))
    if test_data is not None:
        report.final_test_top1 = evaluate_top1(params, test_data)
    report.wall_clock_sec = time.perf_counter() - started
    report.notes.update(_conventions())
    report.notes.update(
        {
            "restart": restart,
            "stage_complete": stage_complete,
            "temperature": temperature,
            "knowledge_extraction": "canonical inputs, no augmentation",
        }
    )
    final = Checkpoint(spec=spec, params=params, stage="stage2-final", epoch=n_epochs,
                       rng_state={"seed": seed2})
    return half, final, store, report


def train_kd(
    student_spec: ModelSpec,
    teacher: Checkpoint,
    data: Dataset,
    n_epochs: int,
    opt: OptimizerConfig,
    temperature: float,
    seed: int,
    *,
    teacher_trcost: int = 0,
    dtype=np.float32,
    test_data: Dataset | None = None,
    augmenter: Augmenter | None = None,
) -> tuple[Checkpoint, RunReport]:
    """Teacher-student distillation with the same joint objective.

    The teacher's softened posteriors are extracted once up front. Pass
    ``teacher_trcost`` when the teacher was trained in-session so the cost
    report covers it; a pre-existing teacher costs nothing here.
    """
    if teacher.spec.num_classes != student_spec.num_classes:
        raise ContractViolation(
            f"teacher has {teacher.spec.num_classes} classes, student expects "
            f"{student_spec.num_classes}"
        )
    if n_epochs < 1:
        raise ContractViolation(f"need at least one epoch, got {n_epochs}")
    started = time.perf_counter()
    store = extract_knowledge(teacher, data, temperature, source="teacher")
    report = RunReport(strategy="kd", seeds={"init": seed})
    report.extraction_flops = forward_flops(teacher.spec) * len(data)
    report.teacher_trcost = teacher_trcost

    params = init_params(student_spec, seed, dtype=dtype)
    sgd = SGD(params, opt.momentum, opt.weight_decay)
    cfg = opt.schedule.with_horizon(n_epochs)
    _train_stage(
        params, sgd, data,
        n_epochs=n_epochs,
        lr_for_epoch=lambda t: lr_at(cfg, t),
        run_seed=seed, stage=1, epoch_offset=0,
        batch_size=opt.batch_size,
        store=store, temperature=temperature,
        augmenter=augmenter, records=report.epochs,
    )
    report.finalize_costs(forward_flops(student_spec), n_epochs, len(data))
    if test_data is not None:
        report.final_test_top1 = evaluate_top1(params, test_data)
    report.wall_clock_sec = time.perf_counter() - started
    report.notes.update(_conventions())
    report.notes["teacher_stage"] = teacher.stage
    ckpt = Checkpoint(spec=student_spec, params=params, stage="kd-final", epoch=n_epochs,
                      rng_state={"seed": seed})
    return ckpt, report


def combined_trcost(report: RunReport) -> int:
    """Strategy cost including an in-session teacher, as the cost tables do."""
    return report.trcost + report.teacher_trcost


def ensemble_predict(ckpts: list[Checkpoint], batch: np.ndarray) -> np.ndarray:
    """Mean of the members' plain softmax posteriors, one row per sample."""
    if not ckpts:
        raise ContractViolation("ensemble needs at least one checkpoint")
    classes = {c.spec.num_classes for c in ckpts}
    if len(classes) != 1:
        raise ContractViolation(f"ensemble members disagree on class count: {sorted(classes)}")
    total = None
    for c in ckpts:
        x = tz.Tensor(np.asarray(batch, dtype=c.params.dtype))
        logits = forward_logits(c.params, x).data
        p = softmax_rows(logits.astype(np.float64))
        total = p if total is None else total + p
    return total / len(ckpts)


def ensemble_top1(ckpts: list[Checkpoint], ds: Dataset, batch_size: int = 256) -> float:
    """Accuracy of the ensemble prediction (argmax, lowest index wins ties)."""
    correct = 0
    for start in range(0, len(ds), batch_size):
        probs = ensemble_predict(ckpts, ds.features[start : start + batch_size])
        predicted = probs.argmax(axis=1) + 1
        correct += int((predicted == ds.labels[start : start + batch_size]).sum())
    return correct / len(ds)


def _conventions() -> dict:
    return {
        "loss_reduction": "mean over samples",
        "flops_convention": "1 MAC = 2 FLOPs; elementwise ops 1 FLOP",
        "backward_cost_estimate": f"{BACKWARD_FORWARD_RATIO}x forward",
        "labels": "1-based",
    }
