"""Single-domain low-rank adapters.

An adapter targets one frozen weight matrix W in R^{m x n} and carries the
residual update delta_W = (alpha / r) * B @ A with A in R^{r x n} and
B in R^{m x r}, r well below min(m, n). A is random at init and B is zero,
so a freshly attached adapter leaves the model bit-for-bit unperturbed.
The product B @ A can equally be read as a sum of r rank-1 components
b_i a_i^T; that per-rank view is what the bridge composition builds on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor, dropout, linear, make_rng, scale


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Kaiming-uniform draw with the leaky-relu slope sqrt(5) convention,
    i.e. uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)] (the usual choice for
    the random side of a low-rank pair)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class LoRAAdapter:
    """One domain's (A, B) pair for one target matrix.

    ``domain_tag`` is informational only; nothing downstream keys on it.
    """

    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    domain_tag: str = ""
    slot: tuple[int, str] | None = None
    dropout_p: float = 0.05

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in (self.A, self.B) if t.requires_grad]


def init_lora(
    m: int,
    n: int,
    r: int,
    alpha: float,
    seed: int,
    domain_tag: str = "",
    slot: tuple[int, str] | None = None,
    dropout_p: float = 0.05,
) -> LoRAAdapter:
    """Fresh adapter: A ~ Kaiming-uniform over [r, n], B = 0 over [m, r].

    B = 0 guarantees delta_w == 0 exactly, so attaching a fresh adapter
    changes nothing until training moves B.
    """
    if r < 1 or r > min(m, n):
        raise ContractError(f"init_lora: need 1 <= r <= min(m, n), got r={r}, m={m}, n={n}")
    rng = make_rng(seed)
    a = Tensor(kaiming_uniform(rng, (r, n), fan_in=n), requires_grad=True)
    b = Tensor(np.zeros((m, r), dtype=np.float32), requires_grad=True)
    return LoRAAdapter(A=a, B=b, rank=r, alpha=alpha, domain_tag=domain_tag, slot=slot, dropout_p=dropout_p)


def delta_w(adapter: LoRAAdapter) -> np.ndarray:
    """Materialized residual update (alpha / r) * B @ A as an [m, n] array."""
    return adapter.scaling * (adapter.B.data @ adapter.A.data)


def rank_components(adapter: LoRAAdapter) -> list[tuple[np.ndarray, np.ndarray]]:
    """The r (b_i, a_i) pairs whose scaled outer products sum to delta_w."""
    return [(adapter.B.data[:, i].copy(), adapter.A.data[i, :].copy()) for i in range(adapter.rank)]


def lora_forward(adapter: LoRAAdapter, x: Tensor, rng=None, train: bool = False) -> Tensor:
    """Factored adapter path: ((drop(x) @ A^T) @ B^T) * (alpha / r)."""
    h = dropout(x, adapter.dropout_p, rng, train)
    h = linear(h, adapter.A)
    h = linear(h, adapter.B)
    return scale(h, adapter.scaling)
