"""Extract, transfer and mixture stages with genetic attention.

Genetic attention uses the receiver's activation as the query and the
transferred donor activation as both key and value, and returns the values minus
their attention-weighted average. The mixture step adds that residual to the
receiver's activation scaled by ``lam``.

Flattening: an (N, C, H, W) activation becomes, per sample, H*W positions by C
channels and the scores are scaled by sqrt(C). An (N, D) activation becomes D
positions by one channel (scale 1); treating the whole vector as one position
would make the residual vanish identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import BlockNet, he_uniform, param_rng
from .errors import DimensionError, OrderingError, ValidationError
from .tensor import Tensor

PARENT_TO_CHILD = "parent->child"
CHILD_TO_PARENT = "child->parent"
DIRECTIONS = (PARENT_TO_CHILD, CHILD_TO_PARENT)


class TransferAdapter:
    """Channel projection (1x1 conv, or affine map for vectors) followed by
    bilinear resizing to the receiver's spatial size."""

    def __init__(self, src_shape, dst_shape, seed: int = 0, name: str = "tau"):
        src_shape, dst_shape = tuple(src_shape), tuple(dst_shape)
        if len(src_shape) != len(dst_shape) or len(src_shape) not in (1, 3):
            raise DimensionError(f"{name}: cannot adapt {src_shape} to {dst_shape}")
        self.src_shape = src_shape
        self.dst_shape = dst_shape
        self.name = name
        c_src, c_dst = src_shape[0], dst_shape[0]
        if c_src == c_dst:
            w = np.eye(c_dst)
        else:
            w = he_uniform(param_rng(seed, f"{name}.w"), (c_dst, c_src), c_src)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.bias = Tensor(np.zeros(c_dst), requires_grad=True, name=f"{name}.b")

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, z: Tensor) -> Tensor:
        return transfer(self, z)


def transfer(adapter: TransferAdapter, z: Tensor) -> Tensor:
    if tuple(z.shape[1:]) != adapter.src_shape:
        raise DimensionError(
            f"{adapter.name}: expects (N, {', '.join(map(str, adapter.src_shape))}) input, got {z.shape}"
        )
    if len(adapter.src_shape) == 1:
        return T.linear(z, adapter.weight, adapter.bias)
    y = T.conv1x1(z, adapter.weight, adapter.bias)
    h, w = adapter.dst_shape[1:]
    if y.shape[2:] != (h, w):
        y = T.bilinear_resize(y, h, w)
    return y


def _flatten(t: Tensor):
    n = t.shape[0]
    if t.ndim == 2:
        return T.reshape(t, (n, t.shape[1], 1)), 1
    c, h, w = t.shape[1:]
    return T.permute(T.reshape(t, (n, c, h * w)), (0, 2, 1)), c


def _unflatten(flat: Tensor, shape) -> Tensor:
    if len(shape) == 2:
        return T.reshape(flat, shape)
    return T.reshape(T.permute(flat, (0, 2, 1)), shape)


def genetic_attention(tau_x: Tensor, x_child: Tensor, hook=None) -> Tensor:
    """``V - reshape(softmax(Q K^T / sqrt(c)) V)`` with Q = x_child, K = V = tau_x.

    ``hook(alpha, residual)``, if given, receives the (N, P, P) attention
    matrices and the residual array.
    """
    if tau_x.shape != x_child.shape:
        raise DimensionError(f"genetic_attention: shape mismatch {tau_x.shape} vs {x_child.shape}")
    if tau_x.ndim not in (2, 4):
        raise DimensionError(f"genetic_attention: expected (N, D) or (N, C, H, W), got {tau_x.shape}")
    v, c = _flatten(tau_x)
    q, _ = _flatten(x_child)
    scores = T.bmm(q, T.permute(v, (0, 2, 1)))
    if c > 1:
        scores = T.scale(scores, 1.0 / math.sqrt(c))
    alpha = T.softmax_rows(scores)
    mixed = _unflatten(T.bmm(alpha, v), tau_x.shape)
    out = T.sub(tau_x, mixed)
    if hook is not None:
        hook(alpha.data, out.data)
    return out


@dataclass
class EtmStage:
    """Adapters and mixing weight for the fusion after stage ``stage_index``."""

    stage_index: int
    tau_c: TransferAdapter
    tau_p: TransferAdapter
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")

    def parameters(self) -> list:
        return self.tau_c.parameters() + self.tau_p.parameters()

    def param_count(self) -> int:
        return self.tau_c.param_count() + self.tau_p.param_count()


def build_stages(parent: BlockNet, child: BlockNet, lam: float = 0.5, seed: int = 0) -> list:
    """One :class:`EtmStage` per fusion point between stages 1..n-1."""
    if parent.n_stages != child.n_stages:
        raise DimensionError(
            f"stage count mismatch: parent has {parent.n_stages}, child has {child.n_stages}"
        )
    stages = []
    for i, (ps, cs) in enumerate(zip(parent.stage_shapes()[:-1], child.stage_shapes()[:-1]), start=1):
        if len(ps) != len(cs):
            raise DimensionError(f"stage {i}: parent activation {ps} and child activation {cs} differ in rank")
        stages.append(
            EtmStage(
                stage_index=i,
                tau_c=TransferAdapter(ps, cs, seed=seed, name=f"etm.s{i}.tau_c"),
                tau_p=TransferAdapter(cs, ps, seed=seed, name=f"etm.s{i}.tau_p"),
                lam=lam,
            )
        )
    return stages


def etm_fuse(stage: EtmStage, z_src: Tensor, x_native: Tensor, direction: str, hook=None) -> Tensor:
    """``x_native + lam * GA(tau(z_src), x_native)`` using the adapter for ``direction``."""
    if direction == PARENT_TO_CHILD:
        adapter = stage.tau_c
    elif direction == CHILD_TO_PARENT:
        adapter = stage.tau_p
    else:
        raise ValidationError(f"unknown direction {direction!r}")
    tau = transfer(adapter, z_src)
    if tau.shape != x_native.shape:
        raise DimensionError(
            f"stage {stage.stage_index} ({direction}): transferred {tau.shape} vs receiver {x_native.shape}"
        )
    return T.add(x_native, T.scale(genetic_attention(tau, x_native, hook), stage.lam))


class ActivationCache:
    """Stage activations computed during one forward step, keyed by (network, stage)."""

    def __init__(self):
        self._acts: dict = {}

    def store(self, net: BlockNet, stage: int, act: Tensor) -> None:
        self._acts[(net.name, stage)] = act

    def __contains__(self, key):
        return key in self._acts


def extract(net: BlockNet, stage: int, cache: ActivationCache) -> Tensor:
    """Identity tap on a stage activation already computed this step."""
    try:
        return cache._acts[(net.name, stage)]
    except KeyError:
        raise OrderingError(f"{net.name} stage {stage} has not been computed this step") from None


class AttentionProbe:
    """Collects attention diagnostics per (step, stage, direction)."""

    def __init__(self, keep_matrices: bool = True):
        self.keep_matrices = keep_matrices
        self.records: list[dict] = []
        self.matrices: dict[str, np.ndarray] = {}
        self.step = 0
        self.capture = True

    def hook(self, stage: int, direction: str):
        def _record(alpha, residual):
            dev = float(np.abs(alpha.sum(axis=-1) - 1.0).max())
            norm = float(np.sqrt((residual * residual).sum() / residual.shape[0]))
            self.records.append(
                {"step": self.step, "stage": stage, "direction": direction,
                 "row_sum_max_dev": dev, "residual_norm": norm}
            )
            if self.keep_matrices and self.capture:
                tag = "p2c" if direction == PARENT_TO_CHILD else "c2p"
                self.matrices[f"step{self.step}_s{stage}_{tag}"] = alpha[0].copy()

        return _record
