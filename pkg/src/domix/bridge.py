"""Adapter composition through a trainable bridge matrix.

k same-shape, same-rank domain adapters are stacked -- row-wise for the A
side, column-wise for the B side -- and a full (k*r) x (k*r) matrix P is
inserted between the stacks:

    delta_W = (alpha / r) * B_cat @ P @ A_cat

With P diagonal this is sum_i p_ii * b_i a_i^T: each diagonal entry gates
one rank-1 knowledge component. The default init is diagonal with equal
entries summing to one (1/(k*r) each), which favors no domain. Default
trainability keeps A_cat frozen while P and B_cat learn, so every update
to delta_W stays inside the row space of A_cat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import LoRAAdapter, kaiming_uniform
from .errors import ContractError, ShapeError
from .tensor import Tensor, dropout, linear, make_rng, scale

P_INITS = ("ours", "identity", "zero", "kaiming")


@dataclass
class FreezeConfig:
    """Which of the three composed matrices receive gradients."""

    train_A: bool = False
    train_P: bool = True
    train_B: bool = True

    def any_trainable(self) -> bool:
        return self.train_A or self.train_P or self.train_B


DEFAULT_FREEZE = FreezeConfig()


@dataclass
class ComposedAdapter:
    """Concatenated domain adapters joined by a bridge matrix.

    Block i of ``a_cat`` rows / ``b_cat`` columns is source adapter i,
    verbatim. ``freeze`` mirrors the requires_grad flags on the tensors.
    """

    a_cat: Tensor
    p: Tensor
    b_cat: Tensor
    k: int
    r: int
    alpha: float
    freeze: FreezeConfig
    source_tags: tuple[str, ...] = ()
    slot: tuple[int, str] | None = None
    dropout_p: float = 0.0

    @property
    def m(self) -> int:
        return self.b_cat.shape[0]

    @property
    def n(self) -> int:
        return self.a_cat.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in (self.a_cat, self.p, self.b_cat) if t.requires_grad]


def _bridge_init(init: str, size: int, seed: int) -> np.ndarray:
    if init == "ours":
        return np.diag(np.full(size, 1.0 / size, dtype=np.float32))
    if init == "identity":
        return np.eye(size, dtype=np.float32)
    if init == "zero":
        return np.zeros((size, size), dtype=np.float32)
    if init == "kaiming":
        return kaiming_uniform(make_rng(seed), (size, size), fan_in=size)
    raise ContractError(f"unknown bridge init {init!r}; choose one of {P_INITS}")


def compose(
    adapters: list[LoRAAdapter],
    init: str = "ours",
    seed: int = 0,
    freeze: FreezeConfig | None = None,
    dropout_p: float = 0.0,
) -> ComposedAdapter:
    """Stack k adapters and insert the bridge matrix.

    All inputs must target the same (m, n) with the same rank and alpha;
    heterogeneous inputs are rejected rather than padded. ``init`` picks the
    bridge start: 'ours' (diagonal, entries 1/(k*r) summing to one),
    'identity', 'zero', or 'kaiming'.
    """
    if not adapters:
        raise ContractError("compose: need at least one adapter")
    first = adapters[0]
    for a in adapters[1:]:
        if (a.m, a.n) != (first.m, first.n):
            raise ContractError(f"compose: mixed target shapes {(first.m, first.n)} vs {(a.m, a.n)}")
        if a.rank != first.rank:
            raise ContractError(f"compose: mixed ranks {first.rank} vs {a.rank}")
        if a.alpha != first.alpha:
            raise ContractError(f"compose: mixed alpha {first.alpha} vs {a.alpha}")
    k, r = len(adapters), first.rank
    freeze = FreezeConfig(**vars(freeze)) if freeze is not None else FreezeConfig()
    if not freeze.any_trainable():
        raise ContractError("compose: at least one of A/P/B must be trainable")
    a_cat = np.concatenate([a.A.data for a in adapters], axis=0)
    b_cat = np.concatenate([a.B.data for a in adapters], axis=1)
    p = _bridge_init(init, k * r, seed)
    return ComposedAdapter(
        a_cat=Tensor(a_cat, requires_grad=freeze.train_A),
        p=Tensor(p, requires_grad=freeze.train_P),
        b_cat=Tensor(b_cat, requires_grad=freeze.train_B),
        k=k,
        r=r,
        alpha=first.alpha,
        freeze=freeze,
        source_tags=tuple(a.domain_tag for a in adapters),
        slot=first.slot,
        dropout_p=dropout_p,
    )


def composed_delta(c: ComposedAdapter) -> np.ndarray:
    """Materialized (alpha / r) * B_cat @ P @ A_cat as an [m, n] array."""
    return c.scaling * (c.b_cat.data @ c.p.data @ c.a_cat.data)


def composed_forward(c: ComposedAdapter, x: Tensor, rng=None, train: bool = False) -> Tensor:
    """Factored path ((x @ A_cat^T) @ P^T) @ B_cat^T * (alpha / r).

    Never materializes delta_W; agrees with x @ composed_delta(c)^T.
    """
    if x.shape[-1] != c.n:
        raise ShapeError(f"composed_forward: input {x.shape} does not match A_cat {c.a_cat.shape}")
    h = dropout(x, c.dropout_p, rng, train)
    h = linear(h, c.a_cat)
    h = linear(h, c.p)
    h = linear(h, c.b_cat)
    return scale(h, c.scaling)


def apply_freeze(c: ComposedAdapter, f: FreezeConfig) -> None:
    """Set requires_grad flags so optimizer steps touch only trainable parts."""
    if not f.any_trainable():
        raise ContractError("apply_freeze: at least one of A/P/B must stay trainable")
    c.a_cat.requires_grad = f.train_A
    c.p.requires_grad = f.train_P
    c.b_cat.requires_grad = f.train_B
    c.freeze = FreezeConfig(**vars(f))


def split_blocks(c: ComposedAdapter) -> list[LoRAAdapter]:
    """Recover the k per-domain (A, B) blocks as standalone adapters.

    Blocks are copies of the current stacks, so after composed training they
    reflect the trained values, not the original sources.
    """
    out = []
    for d in range(c.k):
        rows = slice(d * c.r, (d + 1) * c.r)
        out.append(
            LoRAAdapter(
                A=Tensor(c.a_cat.data[rows].copy(), requires_grad=True),
                B=Tensor(c.b_cat.data[:, rows].copy(), requires_grad=True),
                rank=c.r,
                alpha=c.alpha,
                domain_tag=c.source_tags[d] if d < len(c.source_tags) else "",
                slot=c.slot,
            )
        )
    return out
