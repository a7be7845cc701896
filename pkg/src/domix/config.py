"""key=value config files covering the model, adapters, training, masking.

Values auto-coerce (int, then float, then bool, else string); unknown keys
are rejected so typos fail loudly. '#' starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ContractError
from .model import ModelConfig
from .training import MaskingPolicy, TrainConfig


@dataclass
class Settings:
    model: ModelConfig
    train: TrainConfig
    masking: MaskingPolicy
    model_seed: int = 0
    rank: int = 8
    alpha: float = 16.0
    adapter_dropout: float = 0.05

    @classmethod
    def defaults(cls) -> "Settings":
        return cls(model=ModelConfig(), train=TrainConfig(), masking=MaskingPolicy())


_BOOL = {"true": True, "yes": True, "false": False, "no": False}


def _coerce(raw: str):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return _BOOL.get(raw.lower(), raw)


_TOP_LEVEL = ("model_seed", "rank", "alpha", "adapter_dropout")


def parse_config(path: str | Path) -> Settings:
    text = Path(path).read_text(encoding="utf-8")
    pairs = {}
    for ln_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{ln_no}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        pairs[key] = _coerce(raw)

    sections = {
        "model": {f.name for f in fields(ModelConfig)},
        "train": {f.name for f in fields(TrainConfig)},
        "masking": {f.name for f in fields(MaskingPolicy)},
    }
    kwargs = {name: {} for name in sections}
    top = {}
    for key, value in pairs.items():
        if key in _TOP_LEVEL:
            top[key] = value
            continue
        hit = False
        for name, known in sections.items():
            if key in known:
                kwargs[name][key] = value
                hit = True
        if not hit:
            raise ContractError(f"{path}: unknown config key {key!r}")

    return Settings(
        model=ModelConfig(**kwargs["model"]),
        train=TrainConfig(**kwargs["train"]),
        masking=MaskingPolicy(**kwargs["masking"]),
        **top,
    )


def default_config_text() -> str:
    return """\
# model
vocab_size=1000
hidden_dim=64
num_layers=4
num_heads=4
ffn_dim=256
max_seq_len=64
dropout_p=0.0
activation=gelu
tie_mlm_head=true
model_seed=0

# adapters
rank=8
alpha=16
adapter_dropout=0.05

# training
learning_rate=5e-4
batch_size=64
num_epochs=1
lr_schedule=linear
warmup_steps=100
weight_decay=0.01
seed=0

# masking
mask_prob=0.15
replace_mask_frac=0.8
replace_random_frac=0.1
keep_frac=0.1
"""
