"""On-disk container for adapters and compositions.

Layout: an 8-byte little-endian length, a canonical JSON manifest of that
length, then the payload -- raw little-endian IEEE-754 float32 buffers,
row-major, concatenated in manifest order. Offsets are payload-relative and
4-byte aligned. The manifest is serialized canonically (sorted keys, fixed
separators), so save -> load -> save is byte-identical.

Kinds: 'lora' (one adapter per slot), 'composed' (one composition per
slot), 'checkpoint' (composed plus classifier head and label vocabulary).
The fingerprint ties a bundle to the (config, base seed, vocab) triple that
deterministically generates its base model; mixing fingerprints is refused.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import LoRAAdapter
from .bridge import ComposedAdapter, FreezeConfig
from .errors import BundleError
from .tensor import Tensor

FORMAT_VERSION = 1
KINDS = ("lora", "composed", "checkpoint")


def arch_fingerprint(model_config: dict, model_seed: int, vocab: dict) -> str:
    """Hash of everything that deterministically generates the base model."""
    blob = json.dumps(
        {"config": model_config, "seed": model_seed, "vocab": vocab},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class AdapterBundle:
    kind: str
    fingerprint: str
    base_hash: str
    model_config: dict
    model_seed: int
    vocab: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # k, r, alpha, source_tags, freeze, label_vocab, ...

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BundleError(f"unknown bundle kind {self.kind!r}")

    def add_tensor(self, name: str, array: np.ndarray) -> None:
        if name in self.tensors:
            raise BundleError(f"duplicate tensor name {name!r}")
        self.tensors[name] = np.ascontiguousarray(array, dtype=np.float32)

    def manifest(self) -> dict:
        records = []
        offset = 0
        for name, arr in self.tensors.items():
            nbytes = arr.size * 4
            records.append(
                {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": nbytes}
            )
            offset += nbytes
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "fingerprint": self.fingerprint,
            "base_hash": self.base_hash,
            "model_config": self.model_config,
            "model_seed": self.model_seed,
            "vocab": self.vocab,
            "tensors": records,
            "meta": self.meta,
        }

    def save(self, path: str | Path) -> None:
        manifest_bytes = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(manifest_bytes)))
            fh.write(manifest_bytes)
            for arr in self.tensors.values():
                fh.write(arr.astype("<f4", copy=False).tobytes())

    @classmethod
    def load(cls, path: str | Path, expected_fingerprint: str | None = None) -> "AdapterBundle":
        """Parse and validate a bundle.

        Every manifest invariant is checked before the payload is touched;
        truncation or any mismatch raises BundleError, never a crash.
        """
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise BundleError(f"cannot read bundle {path}: {e}") from e
        if len(raw) < 8:
            raise BundleError(f"bundle {path} too short for header")
        (mlen,) = struct.unpack("<Q", raw[:8])
        if len(raw) < 8 + mlen:
            raise BundleError(f"bundle {path}: manifest truncated")
        try:
            manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise BundleError(f"bundle {path}: manifest is not valid JSON") from e
        payload = raw[8 + mlen :]

        for key in ("format_version", "kind", "fingerprint", "base_hash", "model_config", "model_seed", "vocab", "tensors", "meta"):
            if key not in manifest:
                raise BundleError(f"bundle {path}: manifest missing {key!r}")
        if manifest["format_version"] != FORMAT_VERSION:
            raise BundleError(f"bundle {path}: unsupported format version {manifest['format_version']}")
        if manifest["kind"] not in KINDS:
            raise BundleError(f"bundle {path}: unknown kind {manifest['kind']!r}")
        records = manifest["tensors"]
        expected_offset = 0
        for rec in records:
            for key in ("name", "shape", "dtype", "offset", "nbytes"):
                if key not in rec:
                    raise BundleError(f"bundle {path}: tensor record missing {key!r}")
            if rec["dtype"] != "f32":
                raise BundleError(f"bundle {path}: unsupported dtype {rec['dtype']!r}")
            if rec["offset"] % 4 != 0:
                raise BundleError(f"bundle {path}: offset of {rec['name']!r} not 4-byte aligned")
            if rec["offset"] != expected_offset:
                raise BundleError(f"bundle {path}: tensor {rec['name']!r} offset gap or overlap")
            count = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
            if count * 4 != rec["nbytes"]:
                raise BundleError(f"bundle {path}: tensor {rec['name']!r} shape/nbytes disagree")
            expected_offset += rec["nbytes"]
        if expected_offset != len(payload):
            raise BundleError(
                f"bundle {path}: payload is {len(payload)} bytes but manifest declares {expected_offset}"
            )
        if expected_fingerprint is not None and manifest["fingerprint"] != expected_fingerprint:
            raise BundleError(
                f"bundle {path}: fingerprint mismatch\n  expected {expected_fingerprint}\n  found    {manifest['fingerprint']}"
            )
        tensors = {}
        for rec in records:
            start = rec["offset"]
            buf = payload[start : start + rec["nbytes"]]
            arr = np.frombuffer(buf, dtype="<f4").reshape(rec["shape"]).copy()
            if rec["name"] in tensors:
                raise BundleError(f"bundle {path}: duplicate tensor name {rec['name']!r}")
            tensors[rec["name"]] = arr
        bundle = cls(
            kind=manifest["kind"],
            fingerprint=manifest["fingerprint"],
            base_hash=manifest["base_hash"],
            model_config=manifest["model_config"],
            model_seed=manifest["model_seed"],
            vocab=manifest["vocab"],
            tensors=tensors,
            meta=manifest["meta"],
        )
        return bundle


# -- adapter <-> bundle conversion -------------------------------------------


def _slot_name(key: tuple[int, str]) -> str:
    return f"layer{key[0]}.{key[1]}"


def _slot_key(name: str) -> tuple[int, str]:
    layer, role = name.split(".", 1)
    return (int(layer.removeprefix("layer")), role)


def pack_lora(bundle: AdapterBundle, adapters: dict[tuple[int, str], LoRAAdapter]) -> None:
    first = next(iter(adapters.values()))
    bundle.meta.update(
        {
            "k": 1,
            "r": first.rank,
            "alpha": first.alpha,
            "source_tags": [first.domain_tag],
            "adapter_dropout": first.dropout_p,
        }
    )
    for key in sorted(adapters):
        bundle.add_tensor(f"{_slot_name(key)}.A", adapters[key].A.data)
        bundle.add_tensor(f"{_slot_name(key)}.B", adapters[key].B.data)


def unpack_lora(bundle: AdapterBundle) -> dict[tuple[int, str], LoRAAdapter]:
    if bundle.kind != "lora":
        raise BundleError(f"expected a lora bundle, got kind {bundle.kind!r}")
    meta = bundle.meta
    out = {}
    for name, arr in bundle.tensors.items():
        if not name.endswith(".A"):
            continue
        key = _slot_key(name.removesuffix(".A"))
        b_name = f"{_slot_name(key)}.B"
        if b_name not in bundle.tensors:
            raise BundleError(f"bundle missing tensor {b_name!r}")
        out[key] = LoRAAdapter(
            A=Tensor(arr, requires_grad=True),
            B=Tensor(bundle.tensors[b_name], requires_grad=True),
            rank=int(meta["r"]),
            alpha=float(meta["alpha"]),
            domain_tag=str(meta.get("source_tags", [""])[0]),
            slot=key,
            dropout_p=float(meta.get("adapter_dropout", 0.05)),
        )
    if not out:
        raise BundleError("lora bundle holds no adapter tensors")
    return out


def pack_composed(bundle: AdapterBundle, composed: dict[tuple[int, str], ComposedAdapter]) -> None:
    first = next(iter(composed.values()))
    bundle.meta.update(
        {
            "k": first.k,
            "r": first.r,
            "alpha": first.alpha,
            "source_tags": list(first.source_tags),
            "freeze": vars(first.freeze),
        }
    )
    for key in sorted(composed):
        c = composed[key]
        bundle.add_tensor(f"{_slot_name(key)}.A_cat", c.a_cat.data)
        bundle.add_tensor(f"{_slot_name(key)}.P", c.p.data)
        bundle.add_tensor(f"{_slot_name(key)}.B_cat", c.b_cat.data)


def unpack_composed(bundle: AdapterBundle) -> dict[tuple[int, str], ComposedAdapter]:
    if bundle.kind not in ("composed", "checkpoint"):
        raise BundleError(f"expected a composed bundle, got kind {bundle.kind!r}")
    meta = bundle.meta
    freeze = FreezeConfig(**meta["freeze"]) if meta.get("freeze") else FreezeConfig()
    out = {}
    for name in bundle.tensors:
        if not name.endswith(".P"):
            continue
        key = _slot_key(name.removesuffix(".P"))
        prefix = _slot_name(key)
        try:
            a_cat = bundle.tensors[f"{prefix}.A_cat"]
            b_cat = bundle.tensors[f"{prefix}.B_cat"]
        except KeyError as e:
            raise BundleError(f"bundle missing tensor for slot {prefix!r}") from e
        out[key] = ComposedAdapter(
            a_cat=Tensor(a_cat, requires_grad=freeze.train_A),
            p=Tensor(bundle.tensors[name], requires_grad=freeze.train_P),
            b_cat=Tensor(b_cat, requires_grad=freeze.train_B),
            k=int(meta["k"]),
            r=int(meta["r"]),
            alpha=float(meta["alpha"]),
            freeze=FreezeConfig(**vars(freeze)),
            source_tags=tuple(meta.get("source_tags", ())),
            slot=key,
            dropout_p=float(meta.get("composed_dropout", 0.0)),
        )
    if not out:
        raise BundleError("composed bundle holds no adapter tensors")
    return out
