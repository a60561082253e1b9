"""Block-structured feed-forward networks.

A :class:`BlockNet` is an ordered list of functional blocks (stages). Networks
are described by a compact spec string with one ``kind:args`` entry per stage,
separated by ``|``::

    mlp:256,256 | mlp:128 | head:3          # vector inputs
    conv:32,32/2 | conv:64 | head:10        # image inputs

Kinds:

``linear:D``        affine map, no activation
``mlp:D1,D2,...``   affine + ReLU per listed width
``conv:C1,C2/k``    1x1 convolution + ReLU per listed width, then k x k average pool
``pool``            global average pool, (N, C, H, W) -> (N, C)
``head:D1,...,K``   classifier; global-pools image inputs, ReLU between layers,
                    final layer affine
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor

KINDS = ("linear", "mlp", "conv1x1-stack", "pooling", "classifier-head")
_ALIASES = {"conv": "conv1x1-stack", "pool": "pooling", "head": "classifier-head"}


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    widths: tuple = ()
    pool: int = 1

    def __str__(self):
        short = {v: k for k, v in _ALIASES.items()}.get(self.kind, self.kind)
        if self.kind == "pooling":
            return short
        text = f"{short}:{','.join(str(w) for w in self.widths)}"
        if self.kind == "conv1x1-stack" and self.pool != 1:
            text += f"/{self.pool}"
        return text


def parse_net_spec(text: str) -> list[BlockSpec]:
    specs = []
    for i, part in enumerate(text.split("|"), start=1):
        part = part.strip()
        if not part:
            raise ValidationError(f"stage {i} of net spec {text!r} is empty")
        kind, _, args = part.partition(":")
        kind = _ALIASES.get(kind.strip(), kind.strip())
        if kind not in KINDS:
            raise ValidationError(f"stage {i}: unknown block kind {kind!r}")
        pool = 1
        if "/" in args:
            args, _, p = args.partition("/")
            pool = int(p)
        try:
            widths = tuple(int(w) for w in args.split(",") if w.strip())
        except ValueError:
            raise ValidationError(f"stage {i}: widths must be integers in {part!r}") from None
        if kind == "pooling":
            if widths:
                raise ValidationError(f"stage {i}: pool takes no widths")
        elif not widths or min(widths) < 1:
            raise ValidationError(f"stage {i}: {kind} needs positive widths")
        if kind == "linear" and len(widths) != 1:
            raise ValidationError(f"stage {i}: linear takes exactly one width")
        if pool < 1:
            raise ValidationError(f"stage {i}: pool factor must be >= 1")
        specs.append(BlockSpec(kind, widths, pool))
    return specs


def format_net_spec(specs) -> str:
    return "|".join(str(s) for s in specs)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param_rng(seed: int, key: str) -> np.random.Generator:
    """Generator keyed by (seed, key) so initialisation never depends on call order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(key.encode())]))


class Block:
    """One functional block: a parameterised differentiable map with fixed shapes.

    Shapes exclude the batch dimension.
    """

    def __init__(self, spec: BlockSpec, input_shape: tuple, seed: int = 0, prefix: str = "block"):
        self.spec = spec
        self.kind = spec.kind
        self.input_shape = tuple(input_shape)
        self.params: dict[str, Tensor] = {}
        self._layers: list[tuple[str, str]] = []
        self.output_shape = self._build(seed, prefix)

    def _add_affine(self, idx, d_in, d_out, seed, prefix):
        rng = param_rng(seed, f"{prefix}.l{idx}.w")
        w = Tensor(he_uniform(rng, (d_out, d_in), d_in), requires_grad=True, name=f"{prefix}.l{idx}.w")
        b = Tensor(np.zeros(d_out), requires_grad=True, name=f"{prefix}.l{idx}.b")
        self.params[f"l{idx}.w"] = w
        self.params[f"l{idx}.b"] = b
        self._layers.append((f"l{idx}.w", f"l{idx}.b"))

    def _build(self, seed, prefix):
        shape = self.input_shape
        kind, widths = self.kind, self.spec.widths
        if kind in ("linear", "mlp"):
            if len(shape) != 1:
                raise DimensionError(f"{prefix}: {kind} needs vector input, got {shape}")
            d = shape[0]
            for i, w in enumerate(widths):
                self._add_affine(i, d, w, seed, prefix)
                d = w
            return (d,)
        if kind == "conv1x1-stack":
            if len(shape) != 3:
                raise DimensionError(f"{prefix}: conv1x1-stack needs (C, H, W) input, got {shape}")
            c, h, w = shape
            k = self.spec.pool
            if h % k or w % k:
                raise DimensionError(f"{prefix}: spatial size {h}x{w} not divisible by pool {k}")
            for i, cw in enumerate(widths):
                self._add_affine(i, c, cw, seed, prefix)
                c = cw
            return (c, h // k, w // k)
        if kind == "pooling":
            if len(shape) != 3:
                raise DimensionError(f"{prefix}: pooling needs (C, H, W) input, got {shape}")
            return (shape[0],)
        # classifier-head
        if len(shape) not in (1, 3):
            raise DimensionError(f"{prefix}: classifier-head needs vector or image input, got {shape}")
        d = shape[0]
        for i, w in enumerate(widths):
            self._add_affine(i, d, w, seed, prefix)
            d = w
        return (d,)

    def forward(self, x: Tensor) -> Tensor:
        kind = self.kind
        if kind == "pooling":
            return T.global_avg_pool(x)
        if kind == "conv1x1-stack":
            for wk, bk in self._layers:
                x = T.relu(T.conv1x1(x, self.params[wk], self.params[bk]))
            return T.avg_pool2d(x, self.spec.pool) if self.spec.pool > 1 else x
        if kind == "classifier-head" and x.ndim == 4:
            x = T.global_avg_pool(x)
        last = len(self._layers) - 1
        for i, (wk, bk) in enumerate(self._layers):
            x = T.linear(x, self.params[wk], self.params[bk])
            if kind == "mlp" or (kind == "classifier-head" and i < last):
                x = T.relu(x)
        return x

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_identity(self) -> None:
        """Set square affine layers to identity with zero bias (linear blocks only)."""
        for wk, bk in self._layers:
            w = self.params[wk]
            if w.shape[0] != w.shape[1]:
                raise ValidationError(f"identity init needs square weights, got {w.shape}")
            w.data[...] = np.eye(w.shape[0])
            self.params[bk].data[...] = 0.0


@dataclass
class BlockNet:
    """An ordered stack of blocks; ``blocks[i]`` is stage ``i + 1``."""

    name: str
    blocks: list
    input_shape: tuple
    frozen: bool = False
    spec: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.blocks:
            raise ValidationError(f"{self.name}: a network needs at least one block")
        shape = tuple(self.input_shape)
        for i, b in enumerate(self.blocks, start=1):
            if tuple(b.input_shape) != shape:
                raise DimensionError(
                    f"{self.name}: stage {i} expects input {b.input_shape} but receives {shape}"
                )
            shape = b.output_shape

    @classmethod
    def build(cls, name: str, spec: str, input_shape, seed: int = 0) -> "BlockNet":
        specs = parse_net_spec(spec)
        blocks, shape = [], tuple(input_shape)
        for i, s in enumerate(specs, start=1):
            b = Block(s, shape, seed=seed, prefix=f"{name}.s{i}")
            blocks.append(b)
            shape = b.output_shape
        return cls(name, blocks, tuple(input_shape), spec=format_net_spec(specs), seed=seed)

    @property
    def n_stages(self) -> int:
        return len(self.blocks)

    @property
    def output_shape(self) -> tuple:
        return self.blocks[-1].output_shape

    def stage_shapes(self) -> list:
        return [b.output_shape for b in self.blocks]

    def parameters(self) -> list:
        return [p for b in self.blocks for p in b.params.values()]

    def named_parameters(self):
        for i, b in enumerate(self.blocks, start=1):
            for k, p in b.params.items():
                yield f"s{i}.{k}", p

    def param_count(self) -> int:
        return sum(b.param_count() for b in self.blocks)

    def param_hash(self) -> str:
        """SHA-256 over the raw bytes of every parameter, in declaration order."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def stage_forward(self, stage: int, x: Tensor) -> Tensor:
        if not 1 <= stage <= self.n_stages:
            raise DimensionError(f"{self.name}: stage {stage} outside 1..{self.n_stages}")
        block = self.blocks[stage - 1]
        if tuple(x.shape[1:]) != block.input_shape:
            raise DimensionError(
                f"{self.name}: stage {stage} expects (N, {', '.join(map(str, block.input_shape))}) "
                f"input, got {x.shape}"
            )
        return block.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        return native_forward(self, x)[-1]


def native_forward(net: BlockNet, x: Tensor) -> list:
    """Plain composition of all stages; returns every stage activation."""
    acts = []
    for i in range(1, net.n_stages + 1):
        x = net.stage_forward(i, x)
        acts.append(x)
    return acts


def freeze(net: BlockNet) -> None:
    """Mark ``net`` frozen. Its parameters stop requiring gradients, so the tape
    still differentiates through its blocks with respect to their inputs but
    never accumulates into its weights."""
    net.frozen = True
    for p in net.parameters():
        p.requires_grad = False
        p.grad = None


def collect_trainable(*owners) -> list:
    """Trainable tensors of the given networks and adapters, frozen nets excluded."""
    out, seen = [], set()
    for owner in owners:
        if isinstance(owner, BlockNet):
            params = [] if owner.frozen else owner.parameters()
        else:
            params = owner.parameters()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out
