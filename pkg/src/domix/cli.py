"""Command-line interface.

Subcommands mirror the workflow: build-vocab -> pretrain (once per domain,
runs happily in parallel processes) -> compose -> finetune, plus
count-params / analyze / ablate for the verification tooling.

Exit codes: 0 success, 2 bad arguments, 3 file / format problems,
4 contract violations during training or composition.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .adapter import LoRAAdapter
from .analysis import (
    ARCH_PRESETS,
    AblationSetup,
    COUNT_MODES,
    ablation_results_to_csv,
    count_trainable_params,
    diagonals_to_csv,
    extract_bridge_diagonals,
    run_ablation_matrix,
    table_presets,
)
from .bridge import P_INITS, FreezeConfig, compose
from .bundle import (
    AdapterBundle,
    arch_fingerprint,
    pack_composed,
    pack_lora,
    unpack_composed,
    unpack_lora,
)
from .config import Settings, default_config_text, parse_config
from .data import Tokenizer, load_corpus, load_jsonl_task
from .errors import BundleError, ContractError, ShapeError
from .model import ModelConfig, ToyTransformer, attach_adapter_set, attach_fresh_loras, detach_all
from .training import finetune, pretrain_domain, train_classifier_steps

FREEZE_PRESETS = {
    "domix": FreezeConfig(train_A=False, train_P=True, train_B=True),
    "a-b": FreezeConfig(train_A=True, train_P=False, train_B=True),
    "a-p": FreezeConfig(train_A=True, train_P=True, train_B=False),
    "a-p-b": FreezeConfig(train_A=True, train_P=True, train_B=True),
    # 'all' freezes the full composed stack; only the classifier head trains.
    "all": FreezeConfig(train_A=False, train_P=False, train_B=False),
}


def _write_log(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _load_tokenizer(path: str | Path) -> Tokenizer:
    return Tokenizer.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _model_from_bundle(bundle: AdapterBundle) -> tuple[ToyTransformer, Tokenizer]:
    config = ModelConfig(**bundle.model_config)
    model = ToyTransformer(config, seed=bundle.model_seed)
    if model.base_weight_hash() != bundle.base_hash:
        raise ContractError("rebuilt base model does not match the bundle's base hash")
    return model, Tokenizer.from_json(bundle.vocab)


# -- subcommands --------------------------------------------------------------


def cmd_init_config(args) -> int:
    Path(args.out).write_text(default_config_text(), encoding="utf-8")
    print(args.out)
    return 0


def cmd_build_vocab(args) -> int:
    settings = parse_config(args.config)
    lines = []
    for corpus in args.corpus:
        lines.extend(ln for ln in Path(corpus).read_text(encoding="utf-8").splitlines() if ln.strip())
    tok = Tokenizer.build(lines, settings.model.vocab_size)
    Path(args.out).write_text(json.dumps(tok.to_json(), sort_keys=True), encoding="utf-8")
    print(f"vocab with {len(tok.vocab)} entries -> {args.out}", file=sys.stderr)
    return 0


def cmd_pretrain(args) -> int:
    settings = parse_config(args.config)
    if args.vocab:
        tok = _load_tokenizer(args.vocab)
    else:
        lines = [ln for ln in Path(args.corpus).read_text(encoding="utf-8").splitlines() if ln.strip()]
        tok = Tokenizer.build(lines, settings.model.vocab_size)
    tag = args.tag or Path(args.corpus).stem
    corpus = load_corpus(args.corpus, tok, settings.model.max_seq_len, name=tag)
    model = ToyTransformer(settings.model, seed=settings.model_seed)
    attach_fresh_loras(model, settings.rank, settings.alpha, seed=args.seed, domain_tag=tag, dropout_p=settings.adapter_dropout)
    cfg = replace(settings.train, seed=args.seed, max_seq_len=settings.model.max_seq_len)
    if args.steps is not None:
        cfg = replace(cfg, num_steps=args.steps, num_epochs=None)
    adapters, log = pretrain_domain(model, corpus, cfg, settings.masking)

    bundle = AdapterBundle(
        kind="lora",
        fingerprint=arch_fingerprint(asdict(settings.model), settings.model_seed, tok.to_json()),
        base_hash=model.base_weight_hash(),
        model_config=asdict(settings.model),
        model_seed=settings.model_seed,
        vocab=tok.to_json(),
    )
    pack_lora(bundle, adapters)
    bundle.save(args.out)
    _write_log(Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl"), log)
    print(f"final loss {log[-1]['loss']:.4f} after {len(log)} steps -> {args.out}", file=sys.stderr)
    return 0


def cmd_compose(args) -> int:
    bundles = [AdapterBundle.load(p) for p in args.adapters]
    first = bundles[0]
    for path, b in zip(args.adapters, bundles):
        if b.kind != "lora":
            raise ContractError(f"{path}: compose needs lora bundles, got {b.kind!r}")
        if b.fingerprint != first.fingerprint:
            raise ContractError(
                "mixed arch fingerprints:\n"
                f"  {args.adapters[0]}: {first.fingerprint}\n"
                f"  {path}: {b.fingerprint}"
            )
        if b.meta["r"] != first.meta["r"]:
            raise ContractError(f"mixed ranks: {first.meta['r']} vs {b.meta['r']}")
    adapter_sets = [unpack_lora(b) for b in bundles]
    composed = {}
    for key in sorted(adapter_sets[0]):
        composed[key] = compose([s[key] for s in adapter_sets], init=args.p_init, seed=args.seed)
    out = AdapterBundle(
        kind="composed",
        fingerprint=first.fingerprint,
        base_hash=first.base_hash,
        model_config=first.model_config,
        model_seed=first.model_seed,
        vocab=first.vocab,
    )
    pack_composed(out, composed)
    out.meta["p_init"] = args.p_init
    out.save(args.out)
    print(f"composed k={len(bundles)} r={first.meta['r']} p_init={args.p_init} -> {args.out}", file=sys.stderr)
    return 0


def _parse_staged(spec: str) -> tuple[int, int]:
    try:
        n1, n2 = (int(part) for part in spec.split(":"))
    except ValueError:
        raise ContractError(f"--staged expects N1:N2, got {spec!r}") from None
    if n1 < 0 or n2 < 0:
        raise ContractError("--staged epochs must be >= 0")
    return n1, n2


def cmd_finetune(args) -> int:
    bundle = AdapterBundle.load(args.composed)
    model, tok = _model_from_bundle(bundle)
    settings = parse_config(args.config) if args.config else None
    cfg = settings.train if settings else bundle_train_defaults()
    cfg = replace(cfg, seed=args.seed, max_seq_len=model.config.max_seq_len)
    if args.lr is not None:
        cfg = replace(cfg, learning_rate=args.lr)
    if args.steps is not None:
        cfg = replace(cfg, num_steps=args.steps, num_epochs=None)
    elif args.epochs is not None:
        cfg = replace(cfg, num_steps=None, num_epochs=args.epochs)

    task = load_jsonl_task(args.task, tok, model.config.max_seq_len)
    eval_task = (
        load_jsonl_task(args.eval_task, tok, model.config.max_seq_len, label_vocab=task.label_vocab)
        if args.eval_task
        else None
    )
    model.init_classifier(task.num_classes, seed=args.seed + 1)
    freeze = FREEZE_PRESETS[args.freeze]
    log: list[dict] = []

    composed = unpack_composed(bundle)
    if args.staged:
        n1, n2 = _parse_staged(args.staged)
        steps_per_epoch = max(1, int(np.ceil(len(task) / cfg.batch_size)))
        from .bridge import split_blocks

        sources = {key: split_blocks(c) for key, c in composed.items()}
        fresh = attach_fresh_loras(
            model, composed[next(iter(composed))].r, composed[next(iter(composed))].alpha,
            seed=args.seed, domain_tag="task", dropout_p=0.0,
        )
        solo_params = []
        for key in sorted(fresh):
            solo_params.extend([fresh[key].A, fresh[key].B])
        solo_params.extend(model.classifier_parameters())
        for t in solo_params:
            t.requires_grad = True
        train_classifier_steps(model, task, cfg, solo_params, log=log, num_steps=n1 * steps_per_epoch)
        detach_all(model)
        staged_composed = {}
        for key in sorted(composed):
            staged_composed[key] = compose([fresh[key]] + sources[key], init="ours", freeze=freeze if freeze.any_trainable() else None)
        attach_adapter_set(model, staged_composed)
        cfg2 = replace(cfg, num_steps=n2 * steps_per_epoch, num_epochs=None)
        metrics, ft_log = finetune(model, task, cfg2, freeze=freeze, eval_task=eval_task)
        for rec in ft_log:
            rec["step"] += n1 * steps_per_epoch
            rec["split"] = "composed"
        log.extend(ft_log)
        composed = staged_composed
    else:
        attach_adapter_set(model, composed)
        metrics, ft_log = finetune(model, task, cfg, freeze=freeze, eval_task=eval_task)
        log.extend(ft_log)

    out = AdapterBundle(
        kind="checkpoint",
        fingerprint=bundle.fingerprint,
        base_hash=model.base_weight_hash(),
        model_config=bundle.model_config,
        model_seed=bundle.model_seed,
        vocab=bundle.vocab,
    )
    pack_composed(out, composed)
    out.add_tensor("classifier.weight", model.cls_w.data)
    out.add_tensor("classifier.bias", model.cls_b.data)
    out.meta["label_vocab"] = task.label_vocab
    out.meta["freeze_preset"] = args.freeze
    out.save(args.out)
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.json")
    metrics_path.write_text(json.dumps(metrics.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_log(Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl"), log)
    print(
        f"accuracy {metrics.accuracy:.4f} macro_f1 {metrics.macro_f1:.4f} -> {args.out}",
        file=sys.stderr,
    )
    return 0


def bundle_train_defaults():
    from .training import TrainConfig

    return TrainConfig(num_epochs=3)


def cmd_count_params(args) -> int:
    if args.k < 1 or args.r < 1:
        print("count-params: --k and --r must be >= 1", file=sys.stderr)
        return 2
    if args.arch == "toy" and args.config:
        arch = ARCH_PRESETS["toy"](parse_config(args.config).model)
    else:
        arch = ARCH_PRESETS[args.arch]()
    print(count_trainable_params(arch, args.k, args.r, mode=args.mode))
    return 0


def cmd_analyze(args) -> int:
    bundle = AdapterBundle.load(args.composed)
    composed = unpack_composed(bundle)
    csv_text = diagonals_to_csv(extract_bridge_diagonals(composed))
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_ablate(args) -> int:
    bundles = [AdapterBundle.load(p, expected_fingerprint=None) for p in args.adapters]
    first = bundles[0]
    for path, b in zip(args.adapters, bundles):
        if b.fingerprint != first.fingerprint:
            raise ContractError(f"mixed arch fingerprints between {args.adapters[0]} and {path}")
    model_config = ModelConfig(**first.model_config)
    tok = Tokenizer.from_json(first.vocab)
    task = load_jsonl_task(args.task, tok, model_config.max_seq_len)
    eval_task = (
        load_jsonl_task(args.eval_task, tok, model_config.max_seq_len, label_vocab=task.label_vocab)
        if args.eval_task
        else None
    )
    cfg = parse_config(args.config).train if args.config else bundle_train_defaults()
    if args.steps is not None:
        cfg = replace(cfg, num_steps=args.steps, num_epochs=None)
    cfg = replace(cfg, max_seq_len=model_config.max_seq_len)
    setup = AblationSetup(
        model_config=model_config,
        model_seed=first.model_seed,
        adapter_sets=[unpack_lora(b) for b in bundles],
        task=task,
        train_cfg=cfg,
        eval_task=eval_task,
    )
    import os

    workers = int(os.environ.get("DOMIX_THREADS", "1"))
    rows = run_ablation_matrix(setup, table_presets(), seeds=args.seeds, max_workers=workers)
    csv_text = ablation_results_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write(csv_text)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("build-vocab", help="build a shared vocabulary from one or more corpora")
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="pre-train one domain's adapters against the frozen base")
    p.add_argument("--corpus", required=True, help="one UTF-8 document per line")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--vocab", help="shared vocabulary JSON (recommended for multi-domain workflows)")
    p.add_argument("--tag", help="domain tag stored in the bundle (default: corpus stem)")
    p.add_argument("--steps", type=int, help="override the configured step budget")
    p.add_argument("--log", help="training-log path (default: OUT.log.jsonl)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("compose", help="concatenate adapter bundles and insert the bridge matrix")
    p.add_argument("--adapters", nargs="+", required=True)
    p.add_argument("--p-init", choices=P_INITS, default="ours")
    p.add_argument("--seed", type=int, default=0, help="seed for the kaiming bridge init")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("finetune", help="fine-tune a composed bundle plus classifier head on a task")
    p.add_argument("--composed", required=True)
    p.add_argument("--task", required=True, help="JSONL records with fields 'text' and 'label'")
    p.add_argument("--freeze", choices=sorted(FREEZE_PRESETS), default="domix")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--eval-task", help="held-out JSONL for the reported metrics")
    p.add_argument("--staged", help="N1:N2 -- N1 solo-adapter epochs on the task, then compose, then N2 epochs")
    p.add_argument("--config", help="config file for training hyperparameters")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--metrics", help="metrics JSON path (default: OUT.metrics.json)")
    p.add_argument("--log", help="training-log path (default: OUT.log.jsonl)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("count-params", help="trainable-parameter arithmetic for an architecture")
    p.add_argument("--arch", choices=sorted(ARCH_PRESETS), required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--mode", choices=COUNT_MODES, default="domix")
    p.add_argument("--config", help="config file for the toy arch dims")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("analyze", help="softmaxed bridge diagonals as a heatmap CSV")
    p.add_argument("--composed", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="run the preset configuration matrix on a task")
    p.add_argument("--adapters", nargs="+", required=True, help="lora bundles, one per domain")
    p.add_argument("--task", required=True)
    p.add_argument("--eval-task")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except BundleError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ContractError, ShapeError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def console_entry() -> None:
    sys.exit(main())
