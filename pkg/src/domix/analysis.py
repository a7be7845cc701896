"""Verification and analysis tooling.

Three jobs: exact trainable-parameter arithmetic for the composed setup
(checked against a live model elsewhere), extraction of per-layer bridge
diagonals for heatmap plotting, and a preset-driven ablation harness that
sweeps bridge-init / trainability / initialization configurations.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import LoRAAdapter, kaiming_uniform
from .bridge import ComposedAdapter, FreezeConfig, compose
from .data import LabeledDataset
from .errors import ContractError
from .model import ModelConfig, ROLES, ToyTransformer, attach_adapter_set
from .tensor import Tensor, make_rng, softmax_np
from .training import TrainConfig, finetune


@dataclass
class ArchSpec:
    """Target-matrix shapes of one architecture, layer-repeated.

    ``slot_shapes`` maps role -> (m, n) = (out, in). ``total_base_params``
    backs the full-fine-tuning count: computed exactly for the toy preset,
    and the published rounded figure for the reference preset.
    """

    name: str
    num_layers: int
    slot_shapes: dict[str, tuple[int, int]]
    total_base_params: int | None = None

    def __post_init__(self):
        if self.num_layers < 1 or any(m < 1 or n < 1 for m, n in self.slot_shapes.values()):
            raise ContractError("ArchSpec: all dims must be >= 1")

    def targets(self) -> list[tuple[int, int]]:
        return [self.slot_shapes[role] for _ in range(self.num_layers) for role in self.slot_shapes]

    @classmethod
    def toy(cls, config: ModelConfig | None = None) -> "ArchSpec":
        config = config if config is not None else ModelConfig()
        shapes = {role: config.slot_shape(role) for role in ROLES}
        c = config
        total = c.vocab_size * c.hidden_dim + c.max_seq_len * c.hidden_dim
        per_layer = 4 * c.hidden_dim + sum(m * n + m for m, n in shapes.values())
        total += c.num_layers * per_layer + 2 * c.hidden_dim
        if not c.tie_mlm_head:
            total += c.vocab_size * c.hidden_dim
        total += c.num_classes * c.hidden_dim + c.num_classes
        return cls(name="toy", num_layers=c.num_layers, slot_shapes=shapes, total_base_params=total)

    @classmethod
    def roberta_base(cls) -> "ArchSpec":
        shapes = {
            "q": (768, 768),
            "k": (768, 768),
            "v": (768, 768),
            "o": (768, 768),
            "ffn_up": (3072, 768),
            "ffn_down": (768, 3072),
        }
        # 124.06M is the published full-fine-tuning figure for this
        # architecture; it is not derivable from the target shapes alone.
        return cls(name="roberta-base", num_layers=12, slot_shapes=shapes, total_base_params=124_060_000)


ARCH_PRESETS = {"toy": ArchSpec.toy, "roberta-base": ArchSpec.roberta_base}

COUNT_MODES = ("domix", "lora_full", "full_ft")


def count_trainable_params(arch: ArchSpec, k: int, r: int, mode: str = "domix") -> int:
    """Trainable-parameter arithmetic per fine-tuning mode.

    domix:     per target, k*r*m for the B stack plus (k*r)^2 for the full
               bridge matrix (the A stack is frozen).
    lora_full: per target, r*(m+n) -- a plain adapter on the same six
               targets per layer, both sides trainable. Note this target
               set is the one this package adapts; other target choices
               give different totals.
    full_ft:   every base parameter.
    """
    if k < 1 or r < 1:
        raise ContractError(f"count_trainable_params: need k >= 1 and r >= 1, got k={k}, r={r}")
    targets = arch.targets()
    if mode == "domix":
        return sum(k * r * m for m, _ in targets) + len(targets) * (k * r) ** 2
    if mode == "lora_full":
        return sum(r * (m + n) for m, n in targets)
    if mode == "full_ft":
        if arch.total_base_params is None:
            raise ContractError(f"arch {arch.name!r} does not carry a base parameter count")
        return arch.total_base_params
    raise ContractError(f"unknown mode {mode!r}; choose one of {COUNT_MODES}")


def live_trainable_count(model: ToyTransformer) -> int:
    """requires_grad scalars in the attached adapter stacks -- the live
    counterpart of the ``domix`` arithmetic (the head is counted apart)."""
    return sum(t.size for t in model.adapter_parameters() if t.requires_grad)


# -- bridge-diagonal extraction ----------------------------------------------


def extract_bridge_diagonals(
    composed: dict[tuple[int, str], ComposedAdapter],
) -> dict[tuple[int, str], np.ndarray]:
    """Per (layer, role): softmax over that bridge's diagonal entries.

    Each returned vector sums to 1; the grid of vectors is what the heatmap
    CSV serializes.
    """
    if not composed:
        raise ContractError("extract_bridge_diagonals: empty composed set")
    out = {}
    for key in sorted(composed):
        c = composed[key]
        if not isinstance(c, ComposedAdapter):
            raise ContractError(f"slot {key!r} does not hold a composed adapter")
        out[key] = softmax_np(np.diag(c.p.data).astype(np.float64))
    return out


def diagonals_to_csv(diagonals: dict[tuple[int, str], np.ndarray]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["layer", "slot", "diag_index", "value"])
    for (layer, role), vec in diagonals.items():
        for i, v in enumerate(vec):
            writer.writerow([layer, role, i, f"{v:.8f}"])
    return buf.getvalue()


# -- ablation harness ---------------------------------------------------------

P_INIT_CHOICES = ("identity", "ours", "zero", "kaiming")
AB_INIT_CHOICES = ("ours", "zero", "kaiming")


@dataclass(frozen=True)
class AblationSpec:
    """One harness configuration: inits for the three matrices plus the
    freeze pattern. ``p_trainable`` is the freeze's P flag, kept as a
    property so a spec cannot contradict itself."""

    spec_id: str
    p_init: str = "ours"
    a_init: str = "ours"
    b_init: str = "ours"
    freeze: FreezeConfig = field(default_factory=FreezeConfig)

    @property
    def p_trainable(self) -> bool:
        return self.freeze.train_P

    @property
    def ab_init(self) -> str:
        return f"{self.a_init}:{self.b_init}"


def table_presets() -> list[AblationSpec]:
    """The 14 studied rows: four bridge-presence/trainability combos, four
    freeze patterns, six initialization patterns. The default configuration
    (all-ours inits, frozen A) appears once per group by design."""
    fz = FreezeConfig
    presets = [
        AblationSpec("bridge_identity_frozen", p_init="identity", freeze=fz(False, False, True)),
        AblationSpec("bridge_identity_trained", p_init="identity", freeze=fz(False, True, True)),
        AblationSpec("bridge_ours_frozen", p_init="ours", freeze=fz(False, False, True)),
        AblationSpec("bridge_ours_trained", p_init="ours", freeze=fz(False, True, True)),
        AblationSpec("train_a_b", freeze=fz(True, False, True)),
        AblationSpec("train_a_p", freeze=fz(True, True, False)),
        AblationSpec("train_a_p_b", freeze=fz(True, True, True)),
        AblationSpec("train_p_b", freeze=fz(False, True, True)),
        AblationSpec("init_p_zero", p_init="zero"),
        AblationSpec("init_p_kaiming", p_init="kaiming"),
        AblationSpec("init_b_zero", b_init="zero"),
        AblationSpec("init_b_kaiming", b_init="kaiming"),
        AblationSpec("init_a_kaiming", a_init="kaiming"),
        AblationSpec("init_all_ours"),
    ]
    return presets


@dataclass
class AblationSetup:
    """Shared ingredients for every harness run: the base model recipe, the
    k pre-trained per-slot adapter sets, and the end task."""

    model_config: ModelConfig
    model_seed: int
    adapter_sets: list[dict[tuple[int, str], LoRAAdapter]]
    task: LabeledDataset
    train_cfg: TrainConfig
    eval_task: LabeledDataset | None = None


def _reinit_adapter(adapter: LoRAAdapter, a_init: str, b_init: str, seed: int) -> LoRAAdapter:
    def side(init: str, tensor: Tensor, fan_in: int, salt: int) -> Tensor:
        if init == "ours":
            return Tensor(tensor.data.copy(), requires_grad=True)
        if init == "zero":
            return Tensor(np.zeros_like(tensor.data), requires_grad=True)
        if init == "kaiming":
            return Tensor(kaiming_uniform(make_rng(seed + salt), tensor.shape, fan_in), requires_grad=True)
        raise ContractError(f"unknown init {init!r}; choose one of {AB_INIT_CHOICES}")

    return LoRAAdapter(
        A=side(a_init, adapter.A, adapter.n, 1),
        B=side(b_init, adapter.B, adapter.rank, 2),
        rank=adapter.rank,
        alpha=adapter.alpha,
        domain_tag=adapter.domain_tag,
        slot=adapter.slot,
        dropout_p=adapter.dropout_p,
    )


def run_single_ablation(setup: AblationSetup, spec: AblationSpec, seed: int) -> dict:
    if not spec.freeze.any_trainable():
        return {"spec_id": spec.spec_id, "seed": seed, "skipped": "all of A/P/B frozen"}
    model = ToyTransformer(setup.model_config, seed=setup.model_seed)
    model.init_classifier(setup.task.num_classes, seed=seed + 7)
    composed = {}
    keys = sorted(setup.adapter_sets[0])
    for si, key in enumerate(keys):
        per_domain = [_reinit_adapter(s[key], spec.a_init, spec.b_init, seed * 1009 + si) for s in setup.adapter_sets]
        composed[key] = compose(per_domain, init=spec.p_init, seed=seed * 2003 + si, freeze=spec.freeze)
    attach_adapter_set(model, composed)
    cfg = replace(setup.train_cfg, seed=seed)
    metrics, _ = finetune(model, setup.task, cfg, freeze=spec.freeze, eval_task=setup.eval_task)
    return {
        "spec_id": spec.spec_id,
        "p_init": spec.p_init,
        "p_trainable": spec.p_trainable,
        "train_A": spec.freeze.train_A,
        "train_P": spec.freeze.train_P,
        "train_B": spec.freeze.train_B,
        "ab_init": spec.ab_init,
        "seed": seed,
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
    }


def run_ablation_matrix(
    setup: AblationSetup,
    specs: list[AblationSpec],
    seeds: list[int],
    max_workers: int | None = None,
) -> list[dict]:
    """Every spec x seed as an independent run; rows in (spec, seed) order.

    Runs share nothing mutable, so they can fan out over threads
    (``max_workers``, capped by DOMIX_THREADS when set).
    """
    if not specs:
        raise ContractError("run_ablation_matrix: no specs given")
    jobs = [(spec, seed) for spec in specs for seed in seeds]
    if max_workers is None or max_workers <= 1:
        return [run_single_ablation(setup, spec, seed) for spec, seed in jobs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run_single_ablation, setup, spec, seed) for spec, seed in jobs]
        return [f.result() for f in futures]


ABLATION_CSV_COLUMNS = [
    "spec_id",
    "p_init",
    "p_trainable",
    "train_A",
    "train_P",
    "train_B",
    "ab_init",
    "seed",
    "accuracy",
    "macro_f1",
]


def ablation_results_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_CSV_COLUMNS, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        if "skipped" in row:
            continue
        writer.writerow(row)
    return buf.getvalue()


def rowspace_residual(delta: np.ndarray, a_cat: np.ndarray) -> float:
    """Relative Frobenius residual of projecting ``delta``'s rows onto the
    row space of ``a_cat`` (least squares). Zero means full containment."""
    norm = np.linalg.norm(delta)
    if norm == 0:
        return 0.0
    x, *_ = np.linalg.lstsq(a_cat.astype(np.float64).T, delta.astype(np.float64).T, rcond=None)
    resid = delta.astype(np.float64) - (a_cat.astype(np.float64).T @ x).T
    return float(np.linalg.norm(resid) / norm)
