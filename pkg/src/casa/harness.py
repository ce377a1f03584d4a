"""Experiment orchestration: data, both training stages, ensembles, reports.

An experiment runs ``num_seeds`` replicates. Replicate ``r`` uses seed
``seed + r`` for both the synthetic benchmark draw and training, holds out
each requested test domain in turn, and scores one or more pipeline
variants on it. Variants that only differ after stage one share the same
stage-one models.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .datasets import GENERATOR_NAME, DomainDataset, SyntheticSpec, generate, load_csv, split_holdout
from .errors import (
    CasaError,
    CheckpointVersionError,
    ConfigError,
    ExperimentError,
    ParseError,
)
from .inference import EnsembleModel, evaluate
from .meta_tasks import MetaTask, TaskSetPolicy, build_tasks, mask_to_str
from .models import CaFiLMParams, MLPAdapter, MLPParams, ModelBundle
from .training import OptimizerState, TrainConfig, train_stage1, train_stage2, validation_score

CHECKPOINT_VERSION = 1
U64 = 2**64

VARIANTS = ("none", "ensemble_no_adapter", "adapter_in_stage1", "no_context_mlp", "mlp_adapter")
VARIANT_LABELS = {
    "none": "CASA",
    "ensemble_no_adapter": "Ensemble(h.f)",
    "adapter_in_stage1": "Ensemble(h.g_i.f)",
    "no_context_mlp": "CASA w/o context (MLP)",
    "mlp_adapter": "CASA MLP adapter",
}


def default_train_config(**overrides) -> TrainConfig:
    """Desk-scale training preset for the synthetic benchmarks."""
    base = dict(lr_stage1=3e-3, lr_adapter=1e-2, steps_stage1=1500, steps_stage2=3000)
    return TrainConfig(**{**base, **overrides})


def default_synthetic_spec(**overrides) -> SyntheticSpec:
    base = dict(num_domains=4, classes=2, feature_dim=4, samples_per_domain=400,
                shift_mode="context_coupled", shift_magnitude=10.0, noise_std=1.0, seed=0)
    return SyntheticSpec(**{**base, **overrides})


@dataclass
class ExperimentConfig:
    dataset: SyntheticSpec | str = field(default_factory=default_synthetic_spec)
    test_domain: int | list[int] = 0
    task_policy: TaskSetPolicy = field(default_factory=TaskSetPolicy)
    train: TrainConfig = field(default_factory=default_train_config)
    ablation: str = "none"
    output_dir: str | None = None
    num_seeds: int = 3

    @property
    def test_domains(self) -> list[int]:
        return [self.test_domain] if isinstance(self.test_domain, int) else list(self.test_domain)

    def validate(self) -> None:
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")
        if self.ablation not in VARIANTS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {VARIANTS}")
        if not self.test_domains or len(set(self.test_domains)) != len(self.test_domains):
            raise ConfigError("test_domain must be an id or a list of distinct ids")
        if any((not isinstance(d, int)) or d < 0 for d in self.test_domains):
            raise ConfigError("test domain ids must be non-negative integers")
        if isinstance(self.dataset, SyntheticSpec):
            self.dataset.validate()
            if max(self.test_domains) >= self.dataset.num_domains:
                raise ConfigError("test_domain outside the generated domains")
        self.train.validate()

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset) if isinstance(self.dataset, SyntheticSpec) else self.dataset,
            "test_domain": self.test_domain,
            "task_policy": asdict(self.task_policy),
            "train": asdict(self.train),
            "ablation": self.ablation,
            "output_dir": self.output_dir,
            "num_seeds": self.num_seeds,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _reject_unknown(raw, cls, "experiment config")
        kwargs = dict(raw)
        if "dataset" in kwargs:
            ds = kwargs["dataset"]
            if isinstance(ds, dict):
                _reject_unknown(ds, SyntheticSpec, "dataset")
                kwargs["dataset"] = SyntheticSpec(**ds)
            elif not isinstance(ds, str):
                raise ConfigError("dataset must be a synthetic spec object or a CSV path")
        if "task_policy" in kwargs:
            _reject_unknown(kwargs["task_policy"], TaskSetPolicy, "task_policy")
            kwargs["task_policy"] = TaskSetPolicy(**kwargs["task_policy"])
        if "train" in kwargs:
            _reject_unknown(kwargs["train"], TrainConfig, "train")
            kwargs["train"] = default_train_config(**kwargs["train"])
        if isinstance(kwargs.get("test_domain"), str):
            if kwargs["test_domain"] != "all":
                raise ConfigError("test_domain must be an integer, a list, or \"all\"")
            kwargs.setdefault("dataset", default_synthetic_spec())
            if not isinstance(kwargs["dataset"], SyntheticSpec):
                raise ConfigError("test_domain \"all\" needs a synthetic dataset spec")
            kwargs["test_domain"] = list(range(kwargs["dataset"].num_domains))
        try:
            config = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        config.validate()
        return config


def _reject_unknown(raw, cls, where: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------- checkpoints


def _encode(t: Tensor | np.ndarray) -> dict:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    return {"shape": list(arr.shape), "hex": [float(v).hex() for v in arr.reshape(-1)]}


def _decode(obj: dict) -> np.ndarray:
    shape = tuple(obj["shape"])
    values = np.array([float.fromhex(v) for v in obj["hex"]], dtype=np.float64)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ParseError("tensor payload does not match its shape")
    return values.reshape(shape)


def _encode_mlp(p: MLPParams) -> list:
    return [[_encode(w), _encode(b)] for w, b in p.layers]


def _decode_mlp(obj: list, trainable: bool = False) -> MLPParams:
    return MLPParams([(Tensor(_decode(w), trainable), Tensor(_decode(b), trainable)) for w, b in obj])


def _encode_adapter(adapter) -> dict:
    if isinstance(adapter, CaFiLMParams):
        return {"kind": "cafilm", "A": _encode(adapter.A), "b": _encode(adapter.b)}
    return {"kind": "mlp", "uses_context": adapter.uses_context, "params": _encode_mlp(adapter.params)}


def _decode_adapter(obj: dict):
    if obj["kind"] == "cafilm":
        return CaFiLMParams(Tensor(_decode(obj["A"])), Tensor(_decode(obj["b"])))
    if obj["kind"] == "mlp":
        return MLPAdapter(_decode_mlp(obj["params"]), bool(obj["uses_context"]))
    raise ParseError(f"unknown adapter kind {obj['kind']!r}")


@dataclass
class Checkpoint:
    bundles: list[ModelBundle]
    config: dict = field(default_factory=dict)
    step: int = 0
    optimizer: dict | None = None
    prng: str = GENERATOR_NAME
    format_version: int = CHECKPOINT_VERSION

    @property
    def shared_adapter(self):
        adapters = {id(b.adapter) for b in self.bundles}
        return self.bundles[0].adapter if len(adapters) == 1 else None


def _encode_optimizer(state: OptimizerState) -> dict:
    return {"step": state.step, "m": [_encode(m) for m in state.m], "v": [_encode(v) for v in state.v]}


def _decode_optimizer(obj: dict) -> OptimizerState:
    return OptimizerState([_decode(m) for m in obj["m"]], [_decode(v) for v in obj["v"]], int(obj["step"]))


def save_checkpoint(state: Checkpoint, path) -> None:
    """Write ``state`` as JSON with hex-encoded floats (bit-exact), atomically."""
    adapters, index = [], {}
    records = []
    for b in state.bundles:
        slot = None
        if b.adapter is not None:
            if id(b.adapter) not in index:
                index[id(b.adapter)] = len(adapters)
                adapters.append(_encode_adapter(b.adapter))
            slot = index[id(b.adapter)]
        records.append({
            "task_id": b.task_id,
            "extractor": _encode_mlp(b.extractor),
            "classifier": _encode_mlp(b.classifier),
            "adapter": slot,
        })
    optimizer = None
    if state.optimizer is not None:
        optimizer = {k: (_encode_optimizer(v) if isinstance(v, OptimizerState) else v) for k, v in state.optimizer.items()}
    payload = {
        "format_version": state.format_version,
        "prng": state.prng,
        "step": state.step,
        "config": state.config,
        "adapters": adapters,
        "bundles": records,
        "optimizer": optimizer,
    }
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ParseError(f"{path}: not a checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format {payload['format_version']!r}, expected {CHECKPOINT_VERSION}"
        )
    try:
        adapters = [_decode_adapter(a) for a in payload["adapters"]]
        bundles = [
            ModelBundle(
                rec["task_id"],
                _decode_mlp(rec["extractor"]),
                _decode_mlp(rec["classifier"]),
                None if rec["adapter"] is None else adapters[rec["adapter"]],
            )
            for rec in payload["bundles"]
        ]
        optimizer = payload.get("optimizer")
        if optimizer is not None:
            optimizer = {k: (_decode_optimizer(v) if isinstance(v, dict) and "m" in v else v) for k, v in optimizer.items()}
        return Checkpoint(bundles, payload["config"], int(payload["step"]), optimizer, payload["prng"], CHECKPOINT_VERSION)
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed checkpoint ({exc})") from None


# -------------------------------------------------------------------- running


class MetricsWriter:
    """Append-only JSON-lines sink; the single writer for an output directory."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def __call__(self, record: dict) -> None:
        record = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in record.items()}
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class LeakageAudit:
    """Batch hook counting sampled domains; refuses any batch from a held-out domain."""

    def __init__(self, forbidden: set[int]):
        self.forbidden = set(forbidden)
        self.counts: dict[int, int] = {}

    def __call__(self, stage: str, task_id: int, domains: np.ndarray) -> None:
        for d in np.unique(domains):
            self.counts[int(d)] = self.counts.get(int(d), 0) + 1
        leaked = self.forbidden.intersection(int(d) for d in np.unique(domains))
        if leaked:
            raise ExperimentError(stage, task_id, None, f"held-out domain {sorted(leaked)} reached training")


@dataclass
class ReportRow:
    variant: str
    label: str
    test_domains: list[int]
    accuracies: list[list[float]]  # [seed][test domain]
    batch_size: int
    # one entry per (seed, test domain): per-task meta-source/meta-target accuracy
    val_accuracies: list[dict] = field(default_factory=list)

    @property
    def per_domain(self) -> list[float]:
        return [float(np.mean(col)) for col in zip(*self.accuracies)]

    @property
    def per_seed(self) -> list[float]:
        return [float(np.mean(row)) for row in self.accuracies]

    @property
    def average(self) -> float:
        return float(np.mean(self.per_domain))

    @property
    def stderr(self) -> float:
        seeds = self.per_seed
        if len(seeds) < 2:
            return 0.0
        return float(np.std(seeds, ddof=1) / math.sqrt(len(seeds)))


def _replicate_seed(base: int, r: int) -> int:
    return (int(base) + r) % U64


def _load_domains(config: ExperimentConfig, r: int) -> tuple[list[DomainDataset], int]:
    if isinstance(config.dataset, SyntheticSpec):
        spec = SyntheticSpec(**{**asdict(config.dataset), "seed": _replicate_seed(config.dataset.seed, r)})
        return generate(spec), spec.classes
    domains = load_csv(config.dataset)
    return domains, int(max(d.labels.max() for d in domains)) + 1


def prepare_tasks(domains: list[DomainDataset], test_domain: int, policy: TaskSetPolicy, train: TrainConfig) -> tuple[list[MetaTask], DomainDataset]:
    """Hold out ``test_domain``, split the rest for validation, and build meta-tasks."""
    by_id = {d.domain_id: d for d in domains}
    if test_domain not in by_id:
        raise ConfigError(f"test domain {test_domain} not present (have {sorted(by_id)})")
    training = [by_id[k] for k in sorted(by_id) if k != test_domain]
    parts = [
        split_holdout(d, train.val_fraction, np.random.SeedSequence(int(train.seed), spawn_key=(5, d.domain_id)))
        for d in training
    ]
    tasks = build_tasks([p[0] for p in parts], policy, [p[1] for p in parts])
    return tasks, by_id[test_domain]


def _guard(stage: str, task, seed: int, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ExperimentError:
        raise
    except CasaError as exc:
        raise ExperimentError(stage, task, seed, exc) from exc


def _run_variant(variant, tasks, stage1, cfg, num_classes, audit, metrics, seed):
    """Returns (bundles for the ensemble, stage-two result or None)."""
    if variant == "ensemble_no_adapter":
        return stage1, None
    if variant == "adapter_in_stage1":
        bundles = [
            _guard("stage1", t.task_id, seed, train_stage1, t, cfg, num_classes,
                   adapter=CaFiLMParams.identity(), batch_hook=audit, metrics=metrics)
            for t in tasks
        ]
        return bundles, None
    if variant == "none":
        adapter = CaFiLMParams.identity()
    else:
        rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(6,)))
        adapter = MLPAdapter.init(cfg.feature_dim, cfg.adapter_hidden_dim, variant == "mlp_adapter", rng)
    result = _guard("stage2", None, seed, train_stage2, tasks, stage1, cfg, adapter, batch_hook=audit, metrics=metrics)
    return result.bundles, result


def run_variants(config: ExperimentConfig, variants=None) -> dict[str, ReportRow]:
    """Run ``variants`` (default: ``config.ablation``) on shared stage-one models."""
    config.validate()
    variants = list(variants or [config.ablation])
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    out_dir = Path(config.output_dir) if config.output_dir else None
    # where the files go is not part of the experiment
    snapshot = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    writer = MetricsWriter(out_dir / "metrics.jsonl" if out_dir else None)
    accs = {v: [] for v in variants}
    vals = {v: [] for v in variants}
    try:
        for r in range(config.num_seeds):
            seed = _replicate_seed(config.train.seed, r)
            cfg = TrainConfig(**{**asdict(config.train), "seed": seed})
            domains, num_classes = _guard("data", None, seed, _load_domains, config, r)
            row = {v: [] for v in variants}
            for test_domain in config.test_domains:
                tasks, test_ds = _guard("data", None, seed, prepare_tasks, domains, test_domain, config.task_policy, cfg)
                audit = LeakageAudit({test_domain})
                context = {"seed": seed, "test_domain": test_domain}

                def sink(record, _ctx=context, _variant=None):
                    writer({**record, **_ctx, "variant": _variant})

                stage1 = None
                if any(v in ("none", "ensemble_no_adapter", "no_context_mlp", "mlp_adapter") for v in variants):
                    stage1 = [
                        _guard("stage1", t.task_id, seed, train_stage1, t, cfg, num_classes,
                               batch_hook=audit, metrics=lambda rec: sink(rec, _variant="shared"))
                        for t in tasks
                    ]
                for v in variants:
                    bundles, result = _run_variant(
                        v, tasks, stage1, cfg, num_classes, audit,
                        lambda rec, _v=v: sink(rec, _variant=_v), seed,
                    )
                    ensemble = EnsembleModel(bundles, require_shared_adapter=v not in ("ensemble_no_adapter", "adapter_in_stage1"))
                    acc = _guard("eval", None, seed, evaluate, ensemble, test_ds, cfg.test_batch_size)
                    row[v].append(acc)
                    sink({"stage": "test", "accuracy": acc, "batch_size": cfg.test_batch_size,
                          "step": None if result is None else result.best_step}, _variant=v)
                    score, per_task = validation_score(tasks, bundles, cfg)
                    vals[v].append({"seed": seed, "test_domain": test_domain, "val_score": score,
                                    "per_task": [{"task_id": t.task_id, "mask": mask_to_str(t.mask),
                                                  "val_acc_source": src, "val_acc_target": tgt}
                                                 for t, (src, tgt) in zip(tasks, per_task)]})
                    sink({"stage": "validation", "val_score": score, "per_task": vals[v][-1]["per_task"]}, _variant=v)
                    if out_dir is not None:
                        opt = None
                        if result is not None:
                            opt = {"adapter": result.optimizer_state}
                            opt.update({f"classifier_{i}": st for i, st in enumerate(result.classifier_states) if st.m})
                        ckpt = Checkpoint(bundles, {"experiment": snapshot, "variant": v, "seed": seed,
                                                    "test_domain": test_domain,
                                                    "masks": [mask_to_str(t.mask) for t in tasks]},
                                          0 if result is None else result.best_step, opt)
                        save_checkpoint(ckpt, out_dir / f"checkpoint_{v}_seed{seed}_test{test_domain}.json")
                sink({"stage": "audit", "batches_by_domain": {str(k): n for k, n in sorted(audit.counts.items())}})
            for v in variants:
                accs[v].append(row[v])
    finally:
        writer.close()
    rows = {
        v: ReportRow(v, VARIANT_LABELS[v], config.test_domains, accs[v], config.train.test_batch_size, vals[v])
        for v in variants
    }
    if out_dir is not None:
        report(list(rows.values()), out_dir)
    return rows


def run_experiment(config: ExperimentConfig) -> ReportRow:
    return run_variants(config, [config.ablation])[config.ablation]


# -------------------------------------------------------------------- reports


def rows_from_metrics(path) -> list[ReportRow]:
    """Rebuild report rows from the ``test`` records of a metrics file."""
    table: dict[str, dict[int, dict[int, float]]] = {}
    batch = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("stage") != "test":
                continue
            table.setdefault(rec["variant"], {}).setdefault(rec["seed"], {})[rec["test_domain"]] = rec["accuracy"]
            batch[rec["variant"]] = rec["batch_size"]
    rows = []
    for v in [v for v in VARIANTS if v in table]:
        seeds = sorted(table[v])
        domains = sorted(table[v][seeds[0]])
        accs = [[table[v][s][d] for d in domains] for s in seeds]
        rows.append(ReportRow(v, VARIANT_LABELS[v], domains, accs, batch[v]))
    return rows


def report(rows: list[ReportRow], out_dir) -> tuple[Path, Path]:
    """Write ``report.csv`` and an aligned ``report.txt``; accuracies as fractions / percent."""
    if not rows:
        raise ConfigError("report needs at least one row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domains = sorted({d for row in rows for d in row.test_domains})
    header = ["variant"] + [f"acc_domain{d}" for d in domains] + ["average", "stderr", "num_seeds", "batch_size"]
    csv_path, txt_path = out_dir / "report.csv", out_dir / "report.txt"
    lines = []
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            per = dict(zip(row.test_domains, row.per_domain))
            writer.writerow([row.label] + [repr(per[d]) if d in per else "" for d in domains]
                            + [repr(row.average), repr(row.stderr), len(row.accuracies), row.batch_size])
            lines.append([row.label] + [f"{100 * per[d]:.1f}" if d in per else "-" for d in domains]
                         + [f"{100 * row.average:.1f}", f"{100 * row.stderr:.1f}"])
    text_header = ["Algorithm"] + [f"D{d}" for d in domains] + ["Avg", "+/-"]
    widths = [max(len(str(r[i])) for r in [text_header] + lines) for i in range(len(text_header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    body = [fmt(text_header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines]
    txt_path.write_text("\n".join(body) + "\n", encoding="utf-8")
    return csv_path, txt_path


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
