"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import make_pattern
from .checkpoint import KIND_NF4, load_checkpoint, read_checkpoint, save_checkpoint
from .data import (
    TokenizedCorpus, filter_by_length, load_corpus, load_instructions, pack_pretraining_batches,
    split_holdout, write_token_file,
)
from .errors import ConfigError, DataError, LabError
from .evaluate import ablate_attention_pattern, ablate_lora_rank, ablate_steps, context_length_sweep
from .model import Model, ModelConfig, build_model, coerce, fresh_adapters
from .quant import HEADER, StorageReport, planned_storage, quantized_from_bytes, storage_report
from .trainer import TrainConfig, pretrain_base, train_loop

log = logging.getLogger("ctxlab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "seed"]
TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "seed"]

# fixed offsets from the top-level seed
MODEL_SEED, TRAIN_SEED, PACK_SEED, PRETRAIN_SEED = 0, 1, 2, 3


@dataclass
class RunOptions:
    seed: int = 0
    corpus: str = ""
    eval_corpus: str = ""
    instructions: str = ""
    holdout_fraction: float = 0.02
    eval_tokens: int = 8192
    out_dir: str = "runs/default"
    checkpoint: str = ""
    base_checkpoint: str = ""
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    pretrain_accum: int = 4
    ctx_lens: str = ""
    eval_attention: str = "global"
    quantize_threshold: int = 0
    ranks: str = "8,16,32,64"
    ablate_every: int = 20
    ablate_max_steps: int = 200


RUN_KEYS = [f.name for f in fields(RunOptions)]


@dataclass
class RunConfig:
    """Fully resolved configuration; serialised verbatim into every output."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "RunConfig":
        unknown = set(items) - set(MODEL_KEYS) - set(TRAIN_KEYS) - set(RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        run = RunOptions(**{k: coerce(items[k], type(getattr(RunOptions, k, ""))) for k in RUN_KEYS if k in items})
        model_kw = {k: coerce(items[k], type(getattr(ModelConfig(), k))) for k in MODEL_KEYS if k in items}
        train_kw = {k: coerce(items[k], type(getattr(TrainConfig(), k))) for k in TRAIN_KEYS if k in items}
        model = ModelConfig(seed=run.seed + MODEL_SEED, **model_kw)
        train = TrainConfig(seed=run.seed + TRAIN_SEED, **train_kw)
        return cls(model, train, run)

    def to_mapping(self) -> dict[str, str]:
        out = {k: str(getattr(self.run, k)) for k in RUN_KEYS}
        out.update({k: str(getattr(self.model, k)) for k in MODEL_KEYS})
        out.update({k: str(getattr(self.train, k)) for k in TRAIN_KEYS})
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_mapping().items())

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


FLAG_KEYS = {
    "max_steps": "max_steps", "lr": "base_lr", "warmup": "warmup_steps", "grad_accum": "grad_accum_steps",
    "corpus": "corpus", "out_dir": "out_dir", "checkpoint": "checkpoint", "ctx_lens": "ctx_lens",
    "attention": "eval_attention", "ranks": "ranks", "every": "ablate_every", "max": "ablate_max_steps",
    "seed": "seed", "base_checkpoint": "base_checkpoint",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    items: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        items.update(parse_config_text(path.read_text(), str(path)))
    if "LQL_SEED" in os.environ:
        items["seed"] = os.environ["LQL_SEED"]
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            items[key] = str(value)
    for assignment in getattr(args, "set", None) or []:
        if "=" not in assignment:
            raise ConfigError(f"--set expects key=value, got {assignment!r}")
        key, value = assignment.split("=", 1)
        items[key.strip()] = value.strip()
    return RunConfig.from_mapping(items)


def _int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of integers") from None
    if not values:
        raise ConfigError(f"{what} is empty")
    return values


# -- shared pipeline pieces --------------------------------------------------------


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _corpora(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    corpus = load_corpus([_require_file(cfg.run.corpus, "corpus")])
    train_ids, held = split_holdout(corpus.ids, cfg.run.holdout_fraction)
    if cfg.run.eval_corpus:
        held = load_corpus([_require_file(cfg.run.eval_corpus, "eval corpus")]).ids
    return train_ids, held[: cfg.run.eval_tokens]


def _eval_tokens(cfg: RunConfig) -> np.ndarray:
    if cfg.run.eval_corpus:
        return load_corpus([_require_file(cfg.run.eval_corpus, "eval corpus")]).ids[: cfg.run.eval_tokens]
    return _corpora(cfg)[1]


def _base_model(cfg: RunConfig, train_ids: np.ndarray) -> Model:
    """The frozen starting point: a loaded checkpoint or a freshly pretrained short-context base."""
    if cfg.run.base_checkpoint:
        return load_checkpoint(_require_file(cfg.run.base_checkpoint, "base checkpoint"))
    short = cfg.model.replace(target_ctx=cfg.model.pretrained_ctx, attention="global", group_size=0)
    base = build_model(short)
    samples = pack_pretraining_batches(train_ids, cfg.model.pretrained_ctx, cfg.run.seed + PRETRAIN_SEED)
    pre = TrainConfig(base_lr=cfg.run.pretrain_lr, warmup_steps=20, grad_accum_steps=cfg.run.pretrain_accum,
                      max_steps=cfg.run.pretrain_steps, seed=cfg.run.seed + PRETRAIN_SEED)
    log.info("pretraining base for %d steps at context %d", pre.max_steps, short.target_ctx)
    pretrain_base(base, samples, pre)
    return base


def _extended(cfg: RunConfig, base: Model) -> Model:
    """Apply the run's interpolation settings over the base weights, with fresh adapters."""
    return Model(cfg.model, base.base, {k: v.data for k, v in base.norms.items()}, fresh_adapters(cfg.model))


def _training_samples(cfg: RunConfig, train_ids: np.ndarray):
    if cfg.run.instructions:
        samples, rejected = load_instructions(_require_file(cfg.run.instructions, "instruction file"),
                                              cfg.model.target_ctx)
        log.info("instruction samples: %d kept, %d rejected", len(samples), rejected)
        if not samples:
            raise DataError("no usable instruction samples")
        return [s.as_training() for s in samples]
    return pack_pretraining_batches(train_ids, cfg.model.target_ctx, cfg.run.seed + PACK_SEED)


def _write_outputs(out: Path, stem: str, obj) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(obj.to_json() + "\n")
    (out / f"{stem}.tsv").write_text(obj.to_tsv())


# -- commands ------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    train_ids, eval_ids = _corpora(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.cfg").write_text(cfg.to_text())
    base = _base_model(cfg, train_ids)
    if not cfg.run.base_checkpoint:
        save_checkpoint(base, out / "base.ckpt")
    model = _extended(cfg, base)
    samples = _training_samples(cfg, train_ids)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    result = train_loop(model, samples, cfg.train, checkpoint_dir=ckpt_dir, log_path=out / "train.log")
    save_checkpoint(model, out / "final.ckpt", {"step": str(cfg.train.max_steps)})
    last = result.records[-1].loss if result.records else float("nan")
    print(f"trained {cfg.train.max_steps} steps; final loss {last:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    model = load_checkpoint(_require_file(cfg.run.checkpoint, "checkpoint"))
    tokens = _eval_tokens(cfg)
    lengths = _int_list(cfg.run.ctx_lens, "ctx_lens") if cfg.run.ctx_lens else [model.config.target_ctx]
    for n in lengths:
        if n > model.config.target_ctx:
            raise ConfigError(f"ctx_len {n} exceeds target_ctx {model.config.target_ctx}")
    pattern = make_pattern(cfg.run.eval_attention, model.config.group_size or model.config.target_ctx // 4)
    report = context_length_sweep(model, tokens, lengths, pattern, cfg.run.quantize_threshold or None,
                                  name=cfg.run.checkpoint, config=cfg.to_mapping())
    _write_outputs(cfg.out_dir, "report", report)
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def quantize_report_lines(path) -> tuple[list[str], dict]:
    config_map, sections = read_checkpoint(path)
    superblock = int(config_map.get("superblock_size", 256))
    quantized = [s for s in sections if s.kind == KIND_NF4]
    if not quantized:
        raise DataError("checkpoint holds no quantized tensors")
    lines = ["tensor\tparams\tcode_bits\tabsmax_bits\tsuperblock_bits\tbits_per_param\tsection_bytes"]
    stored = StorageReport(0, 0, 0, 0)
    plain = StorageReport(0, 0, 0, 0)
    double = StorageReport(0, 0, 0, 0)
    byte_mismatches = 0
    for sec in quantized:
        q = quantized_from_bytes(sec.payload, sec.shape, superblock)
        rep = storage_report(q)
        # codes round up to whole bytes on disk
        accounted = HEADER.size + -(-rep.code_bits // 8) + (rep.absmax_bits + rep.superblock_bits) // 8
        if accounted != len(sec.payload):
            byte_mismatches += 1
        stored += rep
        plain += planned_storage(q.numel, q.block_size, False, superblock)
        double += planned_storage(q.numel, q.block_size, True, superblock)
        lines.append(f"{sec.name}\t{rep.parameter_count}\t{rep.code_bits}\t{rep.absmax_bits}\t"
                     f"{rep.superblock_bits}\t{rep.bits_per_parameter:.6f}\t{len(sec.payload)}")
    summary = {
        "stored": stored.as_dict(),
        "without_double_quant_bits_per_param": plain.bits_per_parameter,
        "with_double_quant_bits_per_param": double.bits_per_parameter,
        "saving_bits_per_param": plain.bits_per_parameter - double.bits_per_parameter,
        "byte_count_mismatches": byte_mismatches,
    }
    lines.append(f"# aggregate\t{stored.parameter_count}\t{stored.code_bits}\t{stored.absmax_bits}\t"
                 f"{stored.superblock_bits}\t{stored.bits_per_parameter:.6f}")
    lines.append(f"# bits/param without double quantization\t{plain.bits_per_parameter:.6f}")
    lines.append(f"# bits/param with double quantization\t{double.bits_per_parameter:.6f}")
    lines.append(f"# saving\t{summary['saving_bits_per_param']:.6f}")
    return lines, summary


def cmd_quantize_report(cfg: RunConfig) -> int:
    lines, summary = quantize_report_lines(_require_file(cfg.run.checkpoint, "checkpoint"))
    print("\n".join(lines))
    if summary["byte_count_mismatches"]:
        log.error("%d sections disagree with their storage accounting", summary["byte_count_mismatches"])
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate(kind: str, cfg: RunConfig) -> int:
    if kind not in ("rank", "steps", "attention"):
        raise ConfigError(f"unknown ablation {kind!r}")
    provenance = cfg.to_mapping()
    if kind == "attention":
        model = load_checkpoint(_require_file(cfg.run.checkpoint, "checkpoint"))
        table = ablate_attention_pattern(model, _eval_tokens(cfg), quantize_threshold=cfg.run.quantize_threshold or None,
                                         config=provenance)
    else:
        train_ids, eval_ids = _corpora(cfg)
        if cfg.run.checkpoint:
            start = load_checkpoint(_require_file(cfg.run.checkpoint, "checkpoint"))
            model = _extended(cfg, start)
        else:
            model = _extended(cfg, _base_model(cfg, train_ids))
        samples = _training_samples(cfg, train_ids)
        if kind == "rank":
            ranks = _int_list(cfg.run.ranks, "ranks")
            table = ablate_lora_rank(model, ranks, samples, cfg.train, eval_ids, config=provenance)
        else:
            table = ablate_steps(model, samples, cfg.train, eval_ids, cfg.run.ablate_every,
                                 cfg.run.ablate_max_steps, config=provenance)
    _write_outputs(cfg.out_dir, f"ablate_{kind}", table)
    sys.stdout.write(table.to_tsv())
    return EXIT_OK


def cmd_data_prepare(cfg: RunConfig, inputs: list[str], min_tokens: int, max_tokens: int) -> int:
    paths = [_require_file(p, "input") for p in inputs]
    corpus = load_corpus(paths)
    result = filter_by_length(corpus.documents(), min_tokens, max_tokens)
    kept_entries = [e for e in corpus.manifest if min_tokens <= e.token_count <= max_tokens]
    ids = np.concatenate(result.kept) if result.kept else np.zeros(0, dtype=np.int64)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_token_file(out / "corpus.tok", ids)
    filtered = TokenizedCorpus(ids, corpus.vocab_size, [
        dataclasses.replace(e, token_start=int(s))
        for e, s in zip(kept_entries, np.cumsum([0] + [e.token_count for e in kept_entries])[:-1])
    ])
    (out / "manifest.json").write_text(filtered.manifest_json() + "\n")
    print(f"kept {result.kept_count} documents, dropped {result.dropped_count}; {ids.size} tokens -> {out / 'corpus.tok'}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--base-checkpoint", dest="base_checkpoint")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--grad-accum", dest="grad_accum", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxlab", description="Context extension with a 4-bit base and low-rank adapters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain (or load) a base, then finetune adapters at the target context")
    _common(p)
    _training_flags(p)

    p = sub.add_parser("eval", help="sliding-window perplexity sweep")
    _common(p)
    p.add_argument("--ctx-lens", dest="ctx_lens")
    p.add_argument("--attention", choices=["global", "shift_short"])

    p = sub.add_parser("quantize-report", help="bit accounting of a checkpoint's quantized tensors")
    _common(p)

    p = sub.add_parser("ablate", help="rank, step or attention-pattern ablation")
    p.add_argument("kind", choices=["rank", "steps", "attention"])
    _common(p)
    _training_flags(p)
    p.add_argument("--ranks")
    p.add_argument("--every", type=int)
    p.add_argument("--max", type=int)

    p = sub.add_parser("data-prepare", help="tokenize and length-filter documents into a token file")
    _common(p)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--min-tokens", dest="min_tokens", type=int, default=0)
    p.add_argument("--max-tokens", dest="max_tokens", type=int, default=2**62)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "quantize-report":
            return cmd_quantize_report(cfg)
        if args.command == "ablate":
            return cmd_ablate(args.kind, cfg)
        return cmd_data_prepare(cfg, args.inputs, args.min_tokens, args.max_tokens)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
