"""A small transformer encoder with adapter slots on every linear layer.

Each encoder layer exposes six slots (q, k, v, o, ffn_up, ffn_down). A slot
holds a frozen base weight and at most one attached adapter; its forward is
x @ (W + delta_W)^T + bias, with the adapter contribution computed in
factored form. Pre-norm residual blocks, first-token pooling for
classification, and an MLM head tied to the embedding table by default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import LoRAAdapter, init_lora, lora_forward
from .bridge import ComposedAdapter, composed_forward
from .errors import ContractError, ShapeError
from .tensor import Tensor

ROLES = ("q", "k", "v", "o", "ffn_up", "ffn_down")


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 64
    dropout_p: float = 0.0
    activation: str = "gelu"  # or "relu"
    tie_mlm_head: bool = True
    num_classes: int = 2
    pad_id: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig: {name} must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ContractError(
                f"ModelConfig: hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"ModelConfig: dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.activation not in ("gelu", "relu"):
            raise ContractError(f"ModelConfig: unknown activation {self.activation!r}")

    def slot_shape(self, role: str) -> tuple[int, int]:
        """(m, n) = (out, in) of the target matrix for a role."""
        h, f = self.hidden_dim, self.ffn_dim
        if role in ("q", "k", "v", "o"):
            return (h, h)
        if role == "ffn_up":
            return (f, h)
        if role == "ffn_down":
            return (h, f)
        raise ContractError(f"unknown slot role {role!r}")


class LinearSlot:
    """One adapted linear: y = x @ (W + delta_W)^T + b. W never trains."""

    def __init__(self, weight: Tensor, bias: Tensor | None, layer: int, role: str):
        self.weight = weight
        self.bias = bias
        self.layer = layer
        self.role = role
        self.adapter: LoRAAdapter | ComposedAdapter | None = None

    @property
    def m(self) -> int:
        return self.weight.shape[0]

    @property
    def n(self) -> int:
        return self.weight.shape[1]

    def attach(self, adapter: LoRAAdapter | ComposedAdapter) -> None:
        if self.adapter is not None:
            raise ContractError(f"slot ({self.layer}, {self.role}) already has an adapter attached")
        if (adapter.m, adapter.n) != (self.m, self.n):
            raise ShapeError(
                f"adapter ({adapter.m}, {adapter.n}) does not fit slot ({self.layer}, {self.role}) "
                f"of shape ({self.m}, {self.n})"
            )
        self.adapter = adapter

    def detach(self) -> LoRAAdapter | ComposedAdapter:
        if self.adapter is None:
            raise ContractError(f"slot ({self.layer}, {self.role}) has no adapter attached")
        adapter, self.adapter = self.adapter, None
        return adapter

    def forward(self, x: Tensor, rng=None, train: bool = False) -> Tensor:
        y = T.linear(x, self.weight, self.bias)
        if self.adapter is None:
            return y
        if isinstance(self.adapter, LoRAAdapter):
            return T.add(y, lora_forward(self.adapter, x, rng=rng, train=train))
        return T.add(y, composed_forward(self.adapter, x, rng=rng, train=train))


class ToyTransformer:
    """Encoder with per-slot adapter injection, an MLM head, and a classifier.

    Base weights are created once from ``seed`` and never receive gradients
    through the normal training paths; the classifier head is the only
    always-trainable part. One instance belongs to one training thread.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = T.make_rng(seed)
        c = config

        def init(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32))

        self.embedding = init((c.vocab_size, c.hidden_dim))
        self.positional = init((c.max_seq_len, c.hidden_dim))
        self.layers = []
        for li in range(c.num_layers):
            layer = {
                "ln1_g": Tensor(np.ones(c.hidden_dim, dtype=np.float32)),
                "ln1_b": Tensor(np.zeros(c.hidden_dim, dtype=np.float32)),
                "ln2_g": Tensor(np.ones(c.hidden_dim, dtype=np.float32)),
                "ln2_b": Tensor(np.zeros(c.hidden_dim, dtype=np.float32)),
            }
            for role in ROLES:
                m, n = c.slot_shape(role)
                layer[role] = LinearSlot(init((m, n)), Tensor(np.zeros(m, dtype=np.float32)), li, role)
            self.layers.append(layer)
        self.final_ln_g = Tensor(np.ones(c.hidden_dim, dtype=np.float32))
        self.final_ln_b = Tensor(np.zeros(c.hidden_dim, dtype=np.float32))
        self.mlm_head = None if c.tie_mlm_head else init((c.vocab_size, c.hidden_dim))
        self.cls_w = init((c.num_classes, c.hidden_dim))
        self.cls_b = Tensor(np.zeros(c.num_classes, dtype=np.float32))
        self.rng = T.make_rng(seed + 1)  # dropout stream; reseed per run

    # -- parameter registry -------------------------------------------------

    def slots(self) -> dict[tuple[int, str], LinearSlot]:
        return {(li, role): layer[role] for li, layer in enumerate(self.layers) for role in ROLES}

    def base_parameters(self) -> list[tuple[str, Tensor]]:
        """Everything the pre-training stage must leave untouched (the
        classifier head and any adapters are not part of the base)."""
        params = [("embedding", self.embedding), ("positional", self.positional)]
        for li, layer in enumerate(self.layers):
            for key in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                params.append((f"layer{li}.{key}", layer[key]))
            for role in ROLES:
                slot = layer[role]
                params.append((f"layer{li}.{role}.weight", slot.weight))
                params.append((f"layer{li}.{role}.bias", slot.bias))
        params.append(("final_ln_g", self.final_ln_g))
        params.append(("final_ln_b", self.final_ln_b))
        if self.mlm_head is not None:
            params.append(("mlm_head", self.mlm_head))
        return params

    def classifier_parameters(self) -> list[Tensor]:
        return [self.cls_w, self.cls_b]

    def adapter_parameters(self) -> list[Tensor]:
        out = []
        for slot in self.slots().values():
            a = slot.adapter
            if isinstance(a, LoRAAdapter):
                out.extend([a.A, a.B])
            elif isinstance(a, ComposedAdapter):
                out.extend([a.a_cat, a.p, a.b_cat])
        return out

    def base_weight_hash(self) -> str:
        """SHA-256 over all base weight buffers, in registry order."""
        h = hashlib.sha256()
        for _, t in self.base_parameters():
            h.update(t.data.tobytes())
        return h.hexdigest()

    def init_classifier(self, num_classes: int, seed: int) -> None:
        rng = T.make_rng(seed)
        self.config.num_classes = num_classes
        self.cls_w = Tensor(rng.normal(0.0, 0.02, size=(num_classes, self.config.hidden_dim)).astype(np.float32))
        self.cls_b = Tensor(np.zeros(num_classes, dtype=np.float32))

    def set_trainable(self, names: set[str] | None = None, base: bool = False, classifier: bool = False) -> None:
        for _, t in self.base_parameters():
            t.requires_grad = base
        for t in self.classifier_parameters():
            t.requires_grad = classifier
        del names

    # -- forward ------------------------------------------------------------

    def _attention_bias(self, tokens: np.ndarray) -> Tensor:
        """[B*heads, 1, S] additive bias: large negative on padding keys."""
        b, s = tokens.shape
        bias = np.where(tokens == self.config.pad_id, np.float32(-1e9), np.float32(0.0))
        bias = np.repeat(bias[:, None, None, :], self.config.num_heads, axis=1)
        return Tensor(bias.reshape(b * self.config.num_heads, 1, s))

    def forward_hidden(self, tokens: np.ndarray, train: bool = False) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"expected [batch, seq] token ids, got shape {tokens.shape}")
        b, s = tokens.shape
        c = self.config
        if s > c.max_seq_len:
            raise ContractError(f"sequence length {s} exceeds max_seq_len {c.max_seq_len}")
        if tokens.size and tokens.max() >= c.vocab_size:
            raise IndexError(f"token id {tokens.max()} out of range for vocab {c.vocab_size}")
        nh, dh = c.num_heads, c.hidden_dim // c.num_heads
        act = T.gelu if c.activation == "gelu" else T.relu
        attn_bias = self._attention_bias(tokens)

        x = T.embedding(self.embedding, tokens)
        x = T.add(x, T.slice_rows(self.positional, s))
        x = T.dropout(x, c.dropout_p, self.rng, train)
        for layer in self.layers:
            h = T.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            q = layer["q"].forward(h, rng=self.rng, train=train)
            k = layer["k"].forward(h, rng=self.rng, train=train)
            v = layer["v"].forward(h, rng=self.rng, train=train)

            def heads(t: Tensor) -> Tensor:
                t = T.reshape(t, (b, s, nh, dh))
                t = T.transpose(t, (0, 2, 1, 3))
                return T.reshape(t, (b * nh, s, dh))

            q, k, v = heads(q), heads(k), heads(v)
            scores = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
            scores = T.add(scores, attn_bias)
            attn = T.softmax(scores, axis=-1)
            attn = T.dropout(attn, c.dropout_p, self.rng, train)
            ctx = T.bmm(attn, v)
            ctx = T.reshape(ctx, (b, nh, s, dh))
            ctx = T.transpose(ctx, (0, 2, 1, 3))
            ctx = T.reshape(ctx, (b, s, c.hidden_dim))
            out = layer["o"].forward(ctx, rng=self.rng, train=train)
            out = T.dropout(out, c.dropout_p, self.rng, train)
            x = T.add(x, out)

            h2 = T.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            up = act(layer["ffn_up"].forward(h2, rng=self.rng, train=train))
            down = layer["ffn_down"].forward(up, rng=self.rng, train=train)
            down = T.dropout(down, c.dropout_p, self.rng, train)
            x = T.add(x, down)
        return T.layer_norm(x, self.final_ln_g, self.final_ln_b)

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        head = self.embedding if self.config.tie_mlm_head else self.mlm_head
        return T.linear(hidden, head)

    def forward_mlm(
        self,
        tokens: np.ndarray,
        positions: tuple[np.ndarray, np.ndarray],
        targets: np.ndarray,
        train: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Logits over the vocab plus mean NLL of the original tokens at the
        masked positions (and only there). ``positions`` is (rows, cols)."""
        rows, cols = np.asarray(positions[0]), np.asarray(positions[1])
        if rows.size == 0:
            raise ContractError("forward_mlm: empty mask set, loss undefined")
        if cols.size and cols.max() >= tokens.shape[1]:
            raise ContractError("forward_mlm: mask position outside sequence bounds")
        hidden = self.forward_hidden(tokens, train=train)
        logits = self.mlm_logits(hidden)
        picked = T.gather_rows(logits, rows, cols)
        loss = T.cross_entropy(picked, np.asarray(targets))
        return logits, loss

    def forward_classify(
        self, tokens: np.ndarray, labels: np.ndarray | None = None, train: bool = False
    ) -> tuple[Tensor, Tensor | None]:
        """First-token pooled logits over classes; cross-entropy when labels
        are given."""
        hidden = self.forward_hidden(tokens, train=train)
        pooled = T.select(hidden, axis=1, index=0)
        logits = T.linear(pooled, self.cls_w, self.cls_b)
        loss = T.cross_entropy(logits, np.asarray(labels)) if labels is not None else None
        return logits, loss

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        logits, _ = self.forward_classify(tokens, train=False)
        return logits.data.argmax(axis=1)


# -- adapter plumbing -------------------------------------------------------


def attach_adapter(model: ToyTransformer, selector: tuple[int, str], adapter) -> None:
    """Attach one adapter at (layer, role). Detaching restores the base
    behavior exactly because the base path never changes."""
    slots = model.slots()
    if selector not in slots:
        raise ContractError(f"no slot {selector!r}")
    slots[selector].attach(adapter)


def detach_adapter(model: ToyTransformer, selector: tuple[int, str]):
    slots = model.slots()
    if selector not in slots:
        raise ContractError(f"no slot {selector!r}")
    return slots[selector].detach()


def attach_fresh_loras(
    model: ToyTransformer,
    rank: int,
    alpha: float,
    seed: int,
    domain_tag: str = "",
    dropout_p: float = 0.05,
) -> dict[tuple[int, str], LoRAAdapter]:
    """One fresh adapter per slot, each with its own derived seed."""
    adapters = {}
    for i, (key, slot) in enumerate(sorted(model.slots().items())):
        adapters[key] = init_lora(
            slot.m, slot.n, rank, alpha, seed=seed * 100003 + i, domain_tag=domain_tag, slot=key, dropout_p=dropout_p
        )
        slot.attach(adapters[key])
    return adapters


def attach_adapter_set(model: ToyTransformer, adapters: dict[tuple[int, str], object]) -> None:
    slots = model.slots()
    missing = set(adapters) - set(slots)
    if missing:
        raise ContractError(f"adapter set names unknown slots: {sorted(missing)}")
    for key, adapter in adapters.items():
        slots[key].attach(adapter)


def detach_all(model: ToyTransformer) -> dict[tuple[int, str], object]:
    out = {}
    for key, slot in model.slots().items():
        if slot.adapter is not None:
            out[key] = slot.detach()
    return out
