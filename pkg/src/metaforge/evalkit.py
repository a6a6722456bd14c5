"""Metrics and experiment protocols: NMSE, cross-task and pooled evaluation,
fine-tuning baselines, trial aggregation, and the synthetic task family the
protocol tests run on.

Everything here produces numbers, never figures. Trials repeat the full
protocol (train + adapt + evaluate) with seed base+i and are summarized
as mean plus population variance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from .dataio import DataSizeError, MutationRecord, TaskDataset, build_task_dataset_from_records
from .metatrain import (
    FinetuneConfig,
    MamlConfig,
    RecordEncoder,
    adapt_and_eval,
    train_finetune,
    train_maml,
)
from .mutenc import AMINO_ACIDS, Mutation
from .net import NetConfig, TransformerModel
from .tensor_engine import ShapeError


def nmse(pred, truth) -> float:
    """Mean squared error divided by the population variance of the truth.

    1.0 is the score of a constant predictor at the truth mean; lower is
    better. Requires at least two truth values with nonzero variance.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"nmse length mismatch: {p.shape} vs {t.shape}")
    if t.size < 2:
        raise ShapeError("nmse needs at least 2 values")
    var = float(np.var(t))
    if var == 0.0:
        raise ShapeError("nmse undefined: truth has zero variance")
    return float(np.mean((p - t) ** 2)) / var


def trial_stats(values) -> tuple[float, float]:
    """Mean and population variance over per-trial values."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.var())


def hash_config(mapping: dict) -> str:
    blob = json.dumps(mapping, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def params_digest(params) -> str:
    h = hashlib.sha256()
    for name in params.names():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class RunReport:
    """One protocol outcome on one target task, across trials."""

    protocol: str
    task: str
    encoder_mode: str
    trial_nmse: list[float]
    nmse_mean: float
    nmse_variance: float
    wall_seconds: float
    config_hash: str
    seeds: list[int]
    train_size: int
    checkpoint_hash: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


# ---------------------------------------------------------------------------
# synthetic task family
# ---------------------------------------------------------------------------

# Kyte-Doolittle hydropathy, the standard published scale
HYDROPATHY = {
    "A": 1.8, "R": -4.5, "N": -3.5, "D": -3.5, "C": 2.5,
    "Q": -3.5, "E": -3.5, "G": -0.4, "H": -3.2, "I": 4.5,
    "L": 3.8, "K": -3.9, "M": 1.9, "F": 2.8, "P": -1.6,
    "S": -0.8, "T": -0.7, "V": 4.2, "W": -0.9, "Y": -1.3,
}

SYNTH_SEQ_LEN = 48
SYNTH_NOISE = 0.05

# shared wild type for every synthetic task; mutations vary, background stays
# fixed, as in a real single-protein mutational scan
SYNTH_WILDTYPE = "CAHILYKGQWTKRVRNMTVVHMDDIFPCTHVDGYPCFSMLAVYNHTGT"


def synthetic_coefficients(rng) -> tuple[float, float, float]:
    """Task-specific (hydropathy, sine, slope) weights around shared means."""
    z = rng.normal(size=3)
    return 1.0 + 0.5 * z[0], 0.75 + 0.5 * z[1], 0.5 + 0.5 * z[2]


def synthetic_records(task: str, n: int, rng, coeffs: tuple[float, float, float],
                      shifted: bool = False) -> list[MutationRecord]:
    """Single-substitution records on a shared wild type whose target is a
    fixed function of position fraction and hydropathy change, plus noise.

    Mutations are drawn without replacement from the (position, replacement)
    grid, so a task never contains duplicate records. `shifted` restricts
    sites to the final third of the sequence and negates the hydropathy
    weight, giving one task a feature/response distribution the rest of the
    family never shows. The flip sits on the residue-identity term so that
    both encoder modes are exposed to it, while the position-dependent terms
    keep the family-wide rule.
    """
    a, b, c = coeffs
    a = -a if shifted else a
    wt = SYNTH_WILDTYPE
    lo = (2 * SYNTH_SEQ_LEN) // 3 if shifted else 0
    pairs = [(p, r) for p in range(lo + 1, SYNTH_SEQ_LEN + 1)
             for r in AMINO_ACIDS if r != wt[p - 1]]
    if n > len(pairs):
        raise ValueError(f"at most {len(pairs)} distinct records available, got n={n}")
    records = []
    for i in rng.choice(len(pairs), size=n, replace=False):
        pos, repl = pairs[int(i)]
        orig = wt[pos - 1]
        pf = pos / SYNTH_SEQ_LEN
        dh = (HYDROPATHY[repl] - HYDROPATHY[orig]) / 9.0
        y = a * dh + b * np.sin(2.0 * np.pi * pf) + c * pf + SYNTH_NOISE * rng.normal()
        records.append(MutationRecord(
            sequence=wt, mutations=[Mutation(pos, orig, repl)],
            target=float(y), source=f"synth_{task}", task=task))
    return records


def make_synthetic_task(name: str, seed: int, n: int = 64,
                        shifted: bool = False) -> TaskDataset:
    rng = np.random.default_rng(seed)
    coeffs = synthetic_coefficients(rng)
    records = synthetic_records(name, n, rng, coeffs, shifted=shifted)
    return build_task_dataset_from_records(records, name, seed=seed)


def make_synthetic_family(k: int, seed: int, n_per_task: int = 64,
                          shifted_last: bool = False) -> list[TaskDataset]:
    """K related tasks; optionally the last one gets the shifted distribution."""
    tasks = []
    for i in range(k):
        shifted = shifted_last and i == k - 1
        tasks.append(make_synthetic_task(f"synth{i}", seed=seed + 1000 * i,
                                         n=n_per_task, shifted=shifted))
    return tasks


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _find_task(tasks: list[TaskDataset], name: str) -> TaskDataset:
    for t in tasks:
        if t.task == name:
            return t
    raise DataSizeError(f"task {name!r} not found among {[t.task for t in tasks]}")


def _report(protocol, task, encoder_mode, values, wall, cfg_map, seeds,
            train_size, ckpt_hash) -> RunReport:
    mean, var = trial_stats(values)
    return RunReport(protocol=protocol, task=task, encoder_mode=encoder_mode,
                     trial_nmse=[float(v) for v in values], nmse_mean=mean,
                     nmse_variance=var, wall_seconds=wall, config_hash=hash_config(cfg_map),
                     seeds=list(seeds), train_size=train_size, checkpoint_hash=ckpt_hash)


def run_cross_task(tasks: list[TaskDataset], target: str, net_config: NetConfig,
                   cfg: MamlConfig, encoder_mode: str = "enhanced", trials: int = 3,
                   deterministic: bool = False, checkpoint_path=None,
                   log_path=None) -> RunReport:
    """Meta-train on every task except the target, then adapt+evaluate on it.

    Each trial is an independent training run at seed cfg.seed + i. The
    exclusion contract is enforced against record provenance tags. When
    checkpoint_path/log_path are given they capture the first trial's
    training run.
    """
    target_ds = _find_task(tasks, target)
    others = [t for t in tasks if t.task != target]
    if len(others) < 2:
        raise DataSizeError(f"cross-task needs >= 2 non-target tasks, have {len(others)}")
    model = TransformerModel(net_config)
    encoder = RecordEncoder(net_config.max_len, encoder_mode)
    clock = None if deterministic else time.perf_counter
    t0 = time.perf_counter()
    digest = hashlib.sha256()
    values, seeds = [], []
    for i in range(trials):
        cfg_i = dataclasses.replace(cfg, seed=cfg.seed + i)
        seeds.append(cfg_i.seed)
        params, _, _, seen = train_maml(
            model, others, cfg_i, encoder, clock=clock,
            checkpoint_path=checkpoint_path if i == 0 else None,
            log_path=log_path if i == 0 else None,
            checkpoint_meta={"maml": dataclasses.asdict(cfg_i),
                             "encoder_mode": encoder_mode,
                             "protocol": "cross_task", "target": target})
        if target in seen:
            raise RuntimeError(f"exclusion violated: target {target!r} records reached training")
        digest.update(params_digest(params).encode())
        values.extend(adapt_and_eval(model, params, target_ds, cfg_i, encoder,
                                     trials=1, base_seed=cfg_i.seed))
    wall = 0.0 if deterministic else time.perf_counter() - t0
    cfg_map = {"protocol": "cross_task", "target": target, "encoder_mode": encoder_mode,
               "maml": dataclasses.asdict(cfg), "net": net_config.to_dict(), "trials": trials}
    return _report("cross_task", target, encoder_mode, values, wall, cfg_map, seeds,
                   sum(len(t.train) for t in others), digest.hexdigest()[:16])


def run_pooled(tasks: list[TaskDataset], net_config: NetConfig, cfg: MamlConfig,
               encoder_mode: str = "enhanced", trials: int = 3,
               deterministic: bool = False, checkpoint_path=None,
               log_path=None) -> dict[str, RunReport]:
    """Meta-train on every task's train split, then adapt+evaluate each task.

    One training per trial is shared by all evaluations, so the per-task
    reports carry the same checkpoint hash. checkpoint_path/log_path
    capture the first trial's training run.
    """
    if not tasks:
        raise DataSizeError("pooled run needs at least one task")
    model = TransformerModel(net_config)
    encoder = RecordEncoder(net_config.max_len, encoder_mode)
    clock = None if deterministic else time.perf_counter
    t0 = time.perf_counter()
    digest = hashlib.sha256()
    per_task: dict[str, list[float]] = {t.task: [] for t in tasks}
    seeds = []
    for i in range(trials):
        cfg_i = dataclasses.replace(cfg, seed=cfg.seed + i)
        seeds.append(cfg_i.seed)
        params, _, _, _ = train_maml(
            model, tasks, cfg_i, encoder, clock=clock,
            checkpoint_path=checkpoint_path if i == 0 else None,
            log_path=log_path if i == 0 else None,
            checkpoint_meta={"maml": dataclasses.asdict(cfg_i),
                             "encoder_mode": encoder_mode, "protocol": "pooled_meta"})
        digest.update(params_digest(params).encode())
        for t in tasks:
            per_task[t.task].extend(adapt_and_eval(model, params, t, cfg_i, encoder,
                                                   trials=1, base_seed=cfg_i.seed))
    wall = 0.0 if deterministic else time.perf_counter() - t0
    ckpt_hash = digest.hexdigest()[:16]
    train_size = sum(len(t.train) for t in tasks)
    reports = {}
    for t in tasks:
        cfg_map = {"protocol": "pooled_meta", "target": t.task, "encoder_mode": encoder_mode,
                   "maml": dataclasses.asdict(cfg), "net": net_config.to_dict(),
                   "trials": trials}
        reports[t.task] = _report("pooled_meta", t.task, encoder_mode, per_task[t.task],
                                  wall, cfg_map, seeds, train_size, ckpt_hash)
    return reports


def run_finetune(tasks: list[TaskDataset], target: str, net_config: NetConfig,
                 ft: FinetuneConfig, encoder_mode: str = "enhanced", trials: int = 3,
                 pooled: bool = False, deterministic: bool = False,
                 checkpoint_path=None, log_path=None) -> RunReport:
    """Supervised baseline: train on the target's train split (or on every
    task's, when pooled) and evaluate the target test split without adaptation."""
    target_ds = _find_task(tasks, target)
    train_records = ([r for t in tasks for r in t.train] if pooled
                     else list(target_ds.train))
    model = TransformerModel(net_config)
    encoder = RecordEncoder(net_config.max_len, encoder_mode)
    clock = None if deterministic else time.perf_counter
    t0 = time.perf_counter()
    digest = hashlib.sha256()
    test_batch, test_y = encoder(target_ds.test)
    values, seeds = [], []
    for i in range(trials):
        ft_i = dataclasses.replace(ft, seed=ft.seed + i)
        seeds.append(ft_i.seed)
        params, _, _ = train_finetune(
            model, train_records, ft_i, encoder, clock=clock,
            checkpoint_path=checkpoint_path if i == 0 else None,
            log_path=log_path if i == 0 else None,
            checkpoint_meta={"finetune": dataclasses.asdict(ft_i),
                             "encoder_mode": encoder_mode,
                             "protocol": "finetune_pooled" if pooled else "finetune",
                             "target": target})
        digest.update(params_digest(params).encode())
        values.append(nmse(model.predict(params, test_batch), test_y))
    wall = 0.0 if deterministic else time.perf_counter() - t0
    protocol = "finetune_pooled" if pooled else "finetune"
    cfg_map = {"protocol": protocol, "target": target, "encoder_mode": encoder_mode,
               "finetune": dataclasses.asdict(ft), "net": net_config.to_dict(),
               "trials": trials}
    return _report(protocol, target, encoder_mode, values, wall, cfg_map, seeds,
                   len(train_records), digest.hexdigest()[:16])


def adapt_and_eval_report(net_config: NetConfig, params, tasks: list[TaskDataset],
                          target: str, cfg: MamlConfig, encoder_mode: str = "enhanced",
                          trials: int = 3, deterministic: bool = False,
                          protocol: str = "cross_task") -> RunReport:
    """Adapt an already-trained parameter set on a target task and report NMSE.

    Trial i draws support and adaptation randomness from seed cfg.seed + i;
    no training happens here. `protocol` labels the report with the protocol
    the parameters came from.
    """
    target_ds = _find_task(tasks, target)
    model = TransformerModel(net_config)
    encoder = RecordEncoder(net_config.max_len, encoder_mode)
    t0 = time.perf_counter()
    values = adapt_and_eval(model, params, target_ds, cfg, encoder,
                            trials=trials, base_seed=cfg.seed)
    wall = 0.0 if deterministic else time.perf_counter() - t0
    cfg_map = {"protocol": protocol, "target": target, "encoder_mode": encoder_mode,
               "maml": dataclasses.asdict(cfg), "net": net_config.to_dict(),
               "trials": trials}
    return _report(protocol, target, encoder_mode, values, wall, cfg_map,
                   [cfg.seed + i for i in range(trials)], len(target_ds.train),
                   params_digest(params))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def aggregate(reports: list[RunReport]) -> dict:
    """Task x method comparison rows, sorted, as a plain JSON-able mapping."""
    rows = []
    for r in sorted(reports, key=lambda r: (r.task, r.protocol, r.encoder_mode)):
        rows.append({
            "task": r.task,
            "method": r.protocol,
            "encoder_mode": r.encoder_mode,
            "trials": len(r.trial_nmse),
            "train_size": r.train_size,
            "wall_seconds": r.wall_seconds,
            "nmse_mean": r.nmse_mean,
            "nmse_variance": r.nmse_variance,
        })
    return {"rows": rows}


def render_table(agg: dict) -> str:
    """Aligned plain-text rendering of an aggregate() result."""
    headers = ["task", "method", "encoder", "trials", "train", "time_s", "nmse"]
    lines = [headers]
    for row in agg["rows"]:
        lines.append([
            row["task"], row["method"], row["encoder_mode"], str(row["trials"]),
            str(row["train_size"]), f"{row['wall_seconds']:.2f}",
            f"{row['nmse_mean']:.4f} ± {row['nmse_variance']:.4f}",
        ])
    widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
    out = []
    for k, line in enumerate(lines):
        out.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)).rstrip())
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
