"""Hereditary knowledge transfer training: fused forward pass, composite loss,
optimiser step and the epoch loop, plus solo and distillation baselines."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import BlockNet, collect_trainable, freeze, native_forward
from .checkpoint import save_checkpoint
from .config import validate_weights
from .data import Batch, Dataset, batch_iter
from .errors import DimensionError, NumericError, TrainingAborted
from .etm import (
    CHILD_TO_PARENT,
    PARENT_TO_CHILD,
    ActivationCache,
    AttentionProbe,
    build_stages,
    etm_fuse,
    extract,
)
from .optim import SGD
from .tensor import Tape, Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "L1", "L2", "L3", "L_HKT", "val_acc_native", "val_acc_fused", "wall_ms")


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.25
    alpha2: float = 0.5
    alpha3: float = 0.25

    def __post_init__(self):
        validate_weights(self.alpha1, self.alpha2, self.alpha3)

    def as_tuple(self) -> tuple:
        return (self.alpha1, self.alpha2, self.alpha3)


@dataclass
class StepOutputs:
    z_star_n: Tensor
    z_n: Tensor
    z_tilde_star_n: Tensor
    L1: Tensor
    L2: Tensor
    L3: Tensor
    L: Optional[Tensor] = None

    def losses(self) -> dict:
        out = {"L1": self.L1.item(), "L2": self.L2.item(), "L3": self.L3.item()}
        if self.L is not None:
            out["L_HKT"] = self.L.item()
        return out


def one_hot(labels, classes: int) -> Tensor:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor(out)


def task_loss(pred: Tensor, labels, kind: str = "ce") -> Tensor:
    if kind == "ce":
        return T.cross_entropy_loss(pred, labels)
    return T.mae_loss(pred, one_hot(labels, pred.shape[1]))


def hkt_forward(parent: BlockNet, child: BlockNet, stages, x: Tensor, labels,
                weights: Optional[LossWeights] = None, loss_kind: str = "ce",
                probe: Optional[AttentionProbe] = None) -> StepOutputs:
    """Interleaved parent/child forward with bidirectional fusion after each stage
    but the last, plus an unfused child pass for the native loss."""
    n = child.n_stages
    if parent.n_stages != n or len(stages) != n - 1:
        raise DimensionError(
            f"stage misalignment: parent {parent.n_stages} stages, child {n}, {len(stages)} fusion stages"
        )
    if parent.output_shape != child.output_shape:
        raise DimensionError(f"prediction shapes differ: parent {parent.output_shape}, child {child.output_shape}")
    cache = ActivationCache()
    cache.store(parent, 1, parent.stage_forward(1, x))
    cache.store(child, 1, child.stage_forward(1, x))
    for i in range(1, n):
        st = stages[i - 1]
        if st.stage_index != i:
            raise DimensionError(f"fusion stage {st.stage_index} sits at position {i}")
        zp, zc = extract(parent, i, cache), extract(child, i, cache)
        hp = probe.hook(i, CHILD_TO_PARENT) if probe else None
        hc = probe.hook(i, PARENT_TO_CHILD) if probe else None
        phi_p = etm_fuse(st, zc, zp, CHILD_TO_PARENT, hp)
        phi_c = etm_fuse(st, zp, zc, PARENT_TO_CHILD, hc)
        cache.store(child, i + 1, child.stage_forward(i + 1, phi_c))
        cache.store(parent, i + 1, parent.stage_forward(i + 1, phi_p))
    z_star = extract(child, n, cache)
    zt_star = extract(parent, n, cache)
    z_native = native_forward(child, x)[-1]
    gt = one_hot(labels, z_star.shape[1])
    outs = StepOutputs(
        z_star_n=z_star,
        z_n=z_native,
        z_tilde_star_n=zt_star,
        L1=T.mae_loss(z_star, gt),
        L2=task_loss(z_native, labels, loss_kind),
        L3=T.mae_loss(zt_star, gt),
    )
    if weights is not None:
        outs.L = combined_loss(outs, weights)
    return outs


def combined_loss(outs: StepOutputs, w: LossWeights) -> Tensor:
    """``alpha1 * L1 + alpha2 * L2 + alpha3 * L3``."""
    return T.add(T.add(T.scale(outs.L1, w.alpha1), T.scale(outs.L2, w.alpha2)), T.scale(outs.L3, w.alpha3))


@dataclass
class HKTState:
    parent: BlockNet
    child: BlockNet
    stages: list
    weights: LossWeights
    optimizer: SGD
    loss_kind: str = "ce"
    step: int = 0
    probe: Optional[AttentionProbe] = None

    @classmethod
    def create(cls, parent, child, stages, weights=None, lr=0.05, momentum=0.9, **kw) -> "HKTState":
        if not parent.frozen:
            freeze(parent)
        opt = SGD(collect_trainable(child, *stages), lr=lr, momentum=momentum)
        return cls(parent, child, stages, weights or LossWeights(), opt, **kw)

    def trainable(self) -> list:
        return self.optimizer.params


def _check_finite(step: int, losses: dict) -> None:
    if not all(math.isfinite(v) for v in losses.values()):
        raise TrainingAborted(step, losses)


def train_step(state: HKTState, batch: Batch) -> dict:
    """One forward, backward and SGD update of child and adapter parameters."""
    parent_params = state.parent.parameters()
    if not state.parent.frozen or any(state.optimizer.holds(p) for p in parent_params):
        raise TrainingAborted(state.step, {"parent_frozen": float("nan")})
    with Tape():
        if state.probe is not None:
            state.probe.step = state.step + 1
        try:
            outs = hkt_forward(state.parent, state.child, state.stages, batch.x, batch.labels,
                               state.weights, state.loss_kind, state.probe)
        except NumericError as exc:
            raise TrainingAborted(state.step + 1, {"forward": float("nan")}) from exc
        losses = outs.losses()
        _check_finite(state.step + 1, losses)
        backward(outs.L)
    for p in parent_params:
        p.grad = None
    state.optimizer.step()
    state.step += 1
    return losses


def supervised_step(net: BlockNet, optimizer: SGD, batch: Batch, step: int = 0) -> dict:
    """Plain cross-entropy step on the native path (solo child or parent pre-training)."""
    with Tape():
        loss = T.cross_entropy_loss(net.forward(batch.x), batch.labels)
        losses = {"L2": loss.item()}
        _check_finite(step, losses)
        backward(loss)
    optimizer.step()
    return losses


def kd_loss(teacher: BlockNet, student: BlockNet, batch: Batch, temperature: float, mix: float):
    """``mix * CE(student) + (1 - mix) * MSE(softmax(s / T), softmax(t / T))``."""
    s = student.forward(batch.x)
    with no_grad():
        t = teacher.forward(batch.x)
    ce = T.cross_entropy_loss(s, batch.labels)
    ps = T.softmax_rows(T.scale(s, 1.0 / temperature))
    pt = T.softmax_rows(T.scale(t, 1.0 / temperature))
    distill = T.mse_loss(ps, pt)
    total = T.add(T.scale(ce, mix), T.scale(distill, 1.0 - mix))
    return total, ce, distill


def kd_baseline_step(teacher: BlockNet, student: BlockNet, batch: Batch, temperature: float,
                     mix: float, optimizer: SGD, step: int = 0) -> dict:
    if not teacher.frozen:
        freeze(teacher)
    with Tape():
        total, ce, distill = kd_loss(teacher, student, batch, temperature, mix)
        losses = {"L2": ce.item(), "KD": distill.item(), "L_HKT": total.item()}
        _check_finite(step, losses)
        backward(total)
    optimizer.step()
    return losses


def predict(net: BlockNet, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(net.forward(Tensor(x[s:s + batch_size])).data.argmax(axis=1))
    return np.concatenate(out)


def accuracy_native(net: BlockNet, ds: Dataset) -> float:
    return float((predict(net, ds.inputs) == ds.labels).mean())


def accuracy_fused(parent, child, stages, ds: Dataset, batch_size: int = 1024) -> float:
    hits = 0
    with no_grad():
        for s in range(0, len(ds), batch_size):
            x = Tensor(ds.inputs[s:s + batch_size])
            y = ds.labels[s:s + batch_size]
            outs = hkt_forward(parent, child, stages, x, y)
            hits += int((outs.z_star_n.data.argmax(axis=1) == y).sum())
    return hits / len(ds)


def export_child(child: BlockNet, path, meta: dict | None = None) -> Path:
    """Write only the child's blocks; adapters and parent are not part of the file."""
    return save_checkpoint(child, path, meta)


def epoch_seed(seed: int, epoch: int):
    return np.random.SeedSequence([int(seed), int(epoch)])


class MetricsWriter:
    """Streams metric rows to CSV; floats use ``repr`` so reruns are byte-identical."""

    def __init__(self, path, record_timing: bool = False):
        self.path = Path(path)
        self.fh = self.path.open("w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(METRIC_COLUMNS)
        self.record_timing = record_timing
        self._t0 = time.perf_counter()

    def row(self, **values) -> None:
        if self.record_timing:
            values["wall_ms"] = round((time.perf_counter() - self._t0) * 1000.0, 3)
        cells = []
        for col in METRIC_COLUMNS:
            v = values.get(col)
            cells.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        self.writer.writerow(cells)

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainingReport:
    method: str
    steps: int = 0
    epochs: int = 0
    initial_val_acc_native: float = float("nan")
    best_val_acc_native: float = float("nan")
    best_step: int = 0
    final_val_acc_native: float = float("nan")
    final_val_acc_fused: Optional[float] = None
    child_params: int = 0
    history: list = field(default_factory=list)
    l2_trajectory: list = field(default_factory=list)
    files: dict = field(default_factory=dict)


def train_loop(method: str, net: BlockNet, cfg, train_ds: Dataset, val_ds: Dataset, out_dir,
               parent: BlockNet | None = None) -> TrainingReport:
    """Train ``net`` for the configured epochs with ``method``.

    ``method`` is 'parent' or 'solo' (plain cross-entropy), 'hkt' or 'kd'; the
    last two need the frozen ``parent``. Writes ``metrics.csv``, the
    best-native-accuracy checkpoint and the final checkpoint into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if method == "parent":
        seed, lr, epochs = cfg.parent_seed, cfg.parent_lr, cfg.parent_epochs
    else:
        seed, lr, epochs = cfg.seed, cfg.lr, cfg.epochs
    if method in ("hkt", "kd"):
        if parent is None:
            raise DimensionError(f"{method} training needs a parent network")
        freeze(parent)
    stages = []
    state = None
    probe = AttentionProbe() if (cfg.emit_attention and method == "hkt") else None
    if method == "hkt":
        stages = build_stages(parent, net, cfg.lam, seed)
        state = HKTState.create(parent, net, stages, LossWeights(*cfg.alphas), lr=lr,
                                momentum=cfg.momentum, loss_kind=cfg.task_loss, probe=probe)
        optimizer = state.optimizer
    else:
        optimizer = SGD(collect_trainable(net), lr=lr, momentum=cfg.momentum)
    tag = "parent" if method == "parent" else "child"
    report = TrainingReport(method=method, child_params=net.param_count())
    metrics = MetricsWriter(out_dir / "metrics.csv", cfg.record_timing)

    def validate(step, epoch, losses):
        acc_native = accuracy_native(net, val_ds)
        acc_fused = accuracy_fused(parent, net, stages, val_ds) if method == "hkt" else None
        metrics.row(step=step, epoch=epoch, **losses, val_acc_native=acc_native, val_acc_fused=acc_fused)
        report.history.append({"step": step, "epoch": epoch, "val_acc_native": acc_native,
                               "val_acc_fused": acc_fused})
        if not acc_native <= report.best_val_acc_native:
            report.best_val_acc_native, report.best_step = acc_native, step
            report.files["best"] = str(export_child(net, out_dir / f"{tag}_best.hktc",
                                                    {"step": step, "seed": seed, "val_acc": repr(acc_native)}))
        report.final_val_acc_native, report.final_val_acc_fused = acc_native, acc_fused
        return acc_native

    try:
        report.initial_val_acc_native = validate(0, 0, {})
        step = 0
        for epoch in range(1, epochs + 1):
            if cfg.lr_decay_every and epoch > 1 and (epoch - 1) % cfg.lr_decay_every == 0:
                optimizer.lr *= cfg.lr_decay_gamma
            batches = list(batch_iter(train_ds, cfg.batch_size, epoch_seed(seed, epoch)))
            for bi, batch in enumerate(batches):
                last = bi == len(batches) - 1
                if method == "hkt":
                    if probe is not None:
                        probe.capture = last
                    losses = train_step(state, batch)
                elif method == "kd":
                    losses = kd_baseline_step(parent, net, batch, cfg.kd_temperature, cfg.kd_mix, optimizer, step + 1)
                    losses.pop("KD")
                else:
                    losses = supervised_step(net, optimizer, batch, step + 1)
                step += 1
                report.l2_trajectory.append(losses["L2"])
                if last and (epoch % cfg.eval_every == 0 or epoch == epochs):
                    validate(step, epoch, losses)
                else:
                    metrics.row(step=step, epoch=epoch, **losses)
            report.epochs = epoch
        report.steps = step
    finally:
        metrics.close()
    report.files["metrics"] = str(out_dir / "metrics.csv")
    report.files["final"] = str(export_child(net, out_dir / f"{tag}_final.hktc", {"step": report.steps, "seed": seed}))
    if probe is not None:
        _write_attention(probe, out_dir)
        report.files["attention"] = str(out_dir / "attention.csv")
    return report


def _write_attention(probe: AttentionProbe, out_dir: Path) -> None:
    with (out_dir / "attention.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "stage", "direction", "row_sum_max_dev", "residual_norm"])
        for r in probe.records:
            w.writerow([r["step"], r["stage"], r["direction"], repr(r["row_sum_max_dev"]), repr(r["residual_norm"])])
    if probe.matrices:
        np.savez(out_dir / "attention_matrices.npz", **probe.matrices)
