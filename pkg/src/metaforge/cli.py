"""Command-line entry point: ingest, train, eval, encode, report.

Exit codes: 0 ok, 2 format error, 3 data-size error, 4 checkpoint error,
5 validation error. The METAFORGE_SEED environment variable supplies the
seed when neither the --seed flag nor a config file sets one.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .dataio import (
    DataSizeError,
    FormatError,
    build_task_dataset,
    load_task_dataset,
    save_task_dataset,
)
from .evalkit import (
    RunReport,
    adapt_and_eval_report,
    hash_config,
    run_cross_task,
    run_finetune,
    run_pooled,
)
from .metatrain import FinetuneConfig, MamlConfig
from .mutenc import EncodingError, MutationError, Vocabulary, encode_enhanced, encode_standard, parse_mutation_list
from .net import CheckpointError, NetConfig, load_checkpoint

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_VALIDATION = 5


# ---------------------------------------------------------------------------
# RunConfig: defaults < config file < CLI flags
# ---------------------------------------------------------------------------

_TOP_KEYS = {"protocol", "encoder_mode", "data", "exclude_task", "task", "pooled",
             "out", "seed", "trials", "deterministic", "maml", "net", "finetune"}


@dataclasses.dataclass
class RunConfig:
    """Merged view of one command invocation, hashed into its RunReports."""

    protocol: str = "maml"
    encoder_mode: str = "enhanced"
    data: list[str] = dataclasses.field(default_factory=list)
    exclude_task: str | None = None
    task: str | None = None
    pooled: bool = False
    out: str = "runs"
    seed: int = 0
    trials: int = 1
    deterministic: bool = False
    maml: MamlConfig = dataclasses.field(default_factory=MamlConfig)
    net: NetConfig = dataclasses.field(default_factory=NetConfig)
    finetune: FinetuneConfig = dataclasses.field(default_factory=FinetuneConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @property
    def config_hash(self) -> str:
        # the output directory is bookkeeping, not run semantics
        d = self.to_dict()
        d.pop("out")
        return hash_config(d)


def _nested(cls, overrides: dict, label: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - fields
    if unknown:
        raise FormatError(f"unknown {label} config keys: {sorted(unknown)}")
    return overrides


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge built-in defaults, then the --config file, then CLI flags."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FormatError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise FormatError("config file must hold a JSON object")
        unknown = set(file_cfg) - _TOP_KEYS
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")

    maml_over = _nested(MamlConfig, dict(file_cfg.get("maml", {})), "maml")
    net_over = _nested(NetConfig, dict(file_cfg.get("net", {})), "net")
    ft_over = _nested(FinetuneConfig, dict(file_cfg.get("finetune", {})), "finetune")

    seed = args.seed
    if seed is None:
        seed = file_cfg.get("seed")
    if seed is None:
        env = os.environ.get("METAFORGE_SEED")
        seed = int(env) if env else 0
    seed = int(seed)

    def pick(flag_val, key, default):
        if flag_val is not None:
            return flag_val
        return file_cfg.get(key, default)

    maml_over.setdefault("seed", seed)
    ft_over.setdefault("seed", seed)
    try:
        cfg = RunConfig(
            protocol=pick(getattr(args, "protocol", None), "protocol", "maml"),
            encoder_mode=pick(getattr(args, "encoder", None), "encoder_mode", "enhanced"),
            data=list(getattr(args, "data", None) or file_cfg.get("data", [])),
            exclude_task=pick(getattr(args, "exclude_task", None), "exclude_task", None),
            task=pick(getattr(args, "task", None), "task", None),
            pooled=bool(getattr(args, "pooled", False) or file_cfg.get("pooled", False)),
            out=pick(getattr(args, "out", None), "out", "runs"),
            seed=seed,
            trials=int(pick(getattr(args, "trials", None), "trials", 1)),
            deterministic=bool(getattr(args, "deterministic", False)
                               or file_cfg.get("deterministic", False)),
            maml=MamlConfig(**maml_over),
            net=NetConfig(**net_over),
            finetune=FinetuneConfig(**ft_over),
        )
    except (TypeError, ValueError) as e:
        raise FormatError(f"bad config value: {e}") from e
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("METAFORGE_SEED", "0"))
    ds = build_task_dataset([Path(p) for p in args.inputs], task=args.task,
                            seed=seed, ratio=args.train_ratio, bins=args.bins)
    out = Path(args.out)
    save_task_dataset(ds, out)
    kept = len(ds.train) + len(ds.test)
    print(f"task {ds.task}: accepted {kept} records "
          f"({len(ds.train)} train / {len(ds.test)} test), rejected {len(ds.rejects)}")
    for line in ds.rejects:
        print(f"  reject {line}")
    print(f"wrote {out}")
    return EXIT_OK


def _load_datasets(paths: list[str]):
    if not paths:
        raise DataSizeError("no dataset directories given (use --data)")
    return [load_task_dataset(Path(p)) for p in paths]


def _write_reports(out: Path, reports: list[RunReport], cfg_hash: str) -> None:
    stamped = [dataclasses.replace(r, config_hash=cfg_hash) for r in reports]
    payload = [r.to_dict() for r in stamped]
    (out / "run_report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for r in stamped:
        print(f"{r.protocol} {r.task} [{r.encoder_mode}] "
              f"nmse {r.nmse_mean:.4f} ± {r.nmse_variance:.4f} (trials {len(r.trial_nmse)})")


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    tasks = _load_datasets(cfg.data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.mfck"
    log = out / "train_log.jsonl"

    if cfg.protocol == "maml":
        if cfg.pooled:
            reports = list(run_pooled(
                tasks, cfg.net, cfg.maml, cfg.encoder_mode, trials=cfg.trials,
                deterministic=cfg.deterministic, checkpoint_path=ckpt,
                log_path=log).values())
        elif cfg.exclude_task:
            reports = [run_cross_task(
                tasks, cfg.exclude_task, cfg.net, cfg.maml, cfg.encoder_mode,
                trials=cfg.trials, deterministic=cfg.deterministic,
                checkpoint_path=ckpt, log_path=log)]
        else:
            raise FormatError("--protocol maml needs --exclude-task NAME or --pooled")
    elif cfg.protocol == "finetune":
        if not cfg.task:
            raise FormatError("--protocol finetune needs --task NAME")
        reports = [run_finetune(
            tasks, cfg.task, cfg.net, cfg.finetune, cfg.encoder_mode,
            trials=cfg.trials, pooled=cfg.pooled, deterministic=cfg.deterministic,
            checkpoint_path=ckpt, log_path=log)]
    else:
        raise FormatError(f"unknown protocol {cfg.protocol!r}")

    (out / "run_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_reports(out, reports, cfg.config_hash)
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    net_cfg, params, _, meta = load_checkpoint(Path(args.checkpoint))
    tasks = _load_datasets(cfg.data)
    if not cfg.task:
        raise FormatError("eval needs --task NAME")
    maml = cfg.maml
    if "maml" in meta and not getattr(args, "config", None):
        # fall back to the adaptation settings the checkpoint was trained with
        maml = MamlConfig(**meta["maml"])
        if args.seed is not None:
            maml = dataclasses.replace(maml, seed=cfg.seed)
    encoder_mode = cfg.encoder_mode
    if getattr(args, "encoder", None) is None and "encoder_mode" in meta:
        encoder_mode = meta["encoder_mode"]
    report = adapt_and_eval_report(net_cfg, params, tasks, cfg.task, maml,
                                   encoder_mode, trials=cfg.trials,
                                   deterministic=cfg.deterministic,
                                   protocol=meta.get("protocol", "cross_task"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_reports(out, [report], cfg.config_hash)
    return EXIT_OK


def cmd_encode(args) -> int:
    vocab = Vocabulary()
    muts = parse_mutation_list(args.mut)
    modes = ["enhanced", "standard"] if args.mode == "both" else [args.mode]
    for mode in modes:
        if mode == "enhanced":
            toks = encode_enhanced(args.seq, muts, vocab, max_len=args.max_len)
        else:
            toks = encode_standard(args.seq, args.mut, vocab, max_len=args.max_len)
        n = int(np.sum(toks.mask))
        tokens = [vocab.token_for(int(i)) for i in toks.ids[:n]]
        print(f"{mode}: {' '.join(tokens)}")
        print(f"{mode} ids: {' '.join(str(int(i)) for i in toks.ids[:n])}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report
    paths = [Path(p) for p in args.runs]
    written = write_report(paths, Path(args.out))
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaforge",
                                description="Few-shot mutation-effect regression: "
                                            "data ingestion, meta-training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("ingest", help="QC, dedup, split and normalize a delimited file")
    pi.add_argument("inputs", nargs="+", help="CSV/TSV files with a header row")
    pi.add_argument("--task", required=True, help="task tag for the dataset")
    pi.add_argument("--out", required=True, help="output dataset directory")
    pi.add_argument("--seed", type=int, default=None)
    pi.add_argument("--train-ratio", type=float, default=0.8)
    pi.add_argument("--bins", type=int, default=10)
    pi.set_defaults(fn=cmd_ingest)

    pt = sub.add_parser("train", help="run a training protocol and write reports")
    pt.add_argument("--data", action="append", help="ingested dataset directory (repeatable)")
    pt.add_argument("--protocol", choices=["maml", "finetune"], default=None)
    pt.add_argument("--encoder", choices=["enhanced", "standard"], default=None)
    pt.add_argument("--exclude-task", default=None, help="cross-task: hold this task out")
    pt.add_argument("--pooled", action="store_true", help="train on every task's train split")
    pt.add_argument("--task", default=None, help="finetune target task")
    pt.add_argument("--config", default=None, help="JSON config file")
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--trials", type=int, default=None)
    pt.add_argument("--out", default=None)
    pt.add_argument("--deterministic", action="store_true",
                    help="zero wall-time fields for bit-stable outputs")
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="adapt a checkpoint on a task and report NMSE")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", action="append")
    pe.add_argument("--task", default=None)
    pe.add_argument("--encoder", choices=["enhanced", "standard"], default=None)
    pe.add_argument("--config", default=None)
    pe.add_argument("--seed", type=int, default=None)
    pe.add_argument("--trials", type=int, default=None)
    pe.add_argument("--out", default=None)
    pe.add_argument("--deterministic", action="store_true")
    pe.set_defaults(fn=cmd_eval)

    pc = sub.add_parser("encode", help="print token sequences for a mutation")
    pc.add_argument("--seq", required=True, help="wild-type amino acid sequence")
    pc.add_argument("--mut", required=True, help="mutation list, e.g. 'R10A;K12G'")
    pc.add_argument("--mode", choices=["enhanced", "standard", "both"], default="enhanced")
    pc.add_argument("--max-len", type=int, default=1024)
    pc.set_defaults(fn=cmd_encode)

    pr = sub.add_parser("report", help="aggregate run reports into tables and figures")
    pr.add_argument("--runs", action="append", required=True,
                    help="run directory or run_report.json (repeatable)")
    pr.add_argument("--out", required=True, help="report output directory")
    pr.set_defaults(fn=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except DataSizeError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (MutationError, EncodingError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
