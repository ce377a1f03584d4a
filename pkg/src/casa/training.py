"""Two-stage training.

Stage one fits one extractor/classifier pair per meta-task on its pooled
meta-source by plain cross-entropy. Stage two freezes the extractors and
trains a single adapter shared by every task on

    adapt_loss(target batch) + lambda_preserve * preserve_loss(source batch)

visiting tasks round-robin. Target batches come from one meta-target domain
at a time; source batches from the pooled meta-source. Both stages keep the
parameters with the best held-out validation accuracy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import DomainDataset, pool
from .errors import ConfigError, EmptyBatchError, TrainingError
from .inference import EnsembleModel, accuracy
from .meta_tasks import MetaTask
from .models import CaFiLMParams, MLPAdapter, MLPParams, ModelBundle, adapted_logits

BatchHook = Callable[[str, int, np.ndarray], None]
MetricsSink = Callable[[dict], None]

_STAGE1_KEY = 1
_STAGE2_KEY = 2
_VAL_KEY = 3
_ADAPTER_KEY = 4


@dataclass
class TrainConfig:
    lr_stage1: float = 5e-5
    lr_adapter: float = 1e-3
    lr_classifier_finetune: float = 5e-5
    batch_size: int = 32
    lambda_preserve: float = 1.0
    steps_stage1: int = 2000
    steps_stage2: int = 2000
    finetune_classifier: bool = False
    val_fraction: float = 0.2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden_dim: int = 32
    feature_dim: int = 16
    adapter_hidden_dim: int = 32
    checkpoint_every: int = 100
    eval_batch_size: int | None = None

    def validate(self) -> None:
        for name in ("lr_stage1", "lr_adapter", "lr_classifier_finetune"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not self.lambda_preserve >= 0:
            raise ConfigError("lambda_preserve must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ConfigError("step counts must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.eval_batch_size is not None and self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")

    @property
    def test_batch_size(self) -> int:
        return self.eval_batch_size or self.batch_size

    @classmethod
    def pacs_like(cls, **overrides) -> "TrainConfig":
        return cls(**{"lambda_preserve": 0.1, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    """Adam moments for a fixed list of parameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class BatchSampler:
    """Shuffled epochs over ``n`` indices; the last short batch is kept."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise EmptyBatchError("cannot sample batches from an empty dataset")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _shuffled_pool(datasets: list[DomainDataset], rng: np.random.Generator):
    x, y, _ = pool(datasets)
    order = rng.permutation(len(y))
    return x[order], y[order]


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], values: list[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.data[...] = v


def _infer_classes(task: MetaTask) -> int:
    return int(max(ds.labels.max() for ds in task.source + task.target)) + 1


def init_bundle(task_id: int, input_dim: int, num_classes: int, config: TrainConfig) -> ModelBundle:
    rng = _rng(config.seed, _STAGE1_KEY, task_id)
    h = config.hidden_dim
    extractor = MLPParams.init([input_dim, h, h, config.feature_dim], rng)
    classifier = MLPParams.init([config.feature_dim, num_classes], rng)
    return ModelBundle(task_id, extractor, classifier)


def _finite_or_raise(loss: Tensor, step: int, stage: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"{stage} loss diverged ({value})", step=step)
    return value


def train_stage1(
    task: MetaTask,
    config: TrainConfig,
    num_classes: int | None = None,
    adapter: CaFiLMParams | MLPAdapter | None = None,
    batch_hook: BatchHook | None = None,
    metrics: MetricsSink | None = None,
) -> ModelBundle:
    """Empirical risk minimisation on the pooled meta-source of ``task``.

    ``adapter`` is only used by the ablation that trains a per-task adapter
    jointly with the extractor and classifier.
    """
    config.validate()
    if not task.source:
        raise ConfigError("task has an empty meta-source")
    num_classes = num_classes or _infer_classes(task)
    x, y, domains = task.pooled_source()
    bundle = init_bundle(task.task_id, x.shape[1], num_classes, config)
    if adapter is not None:
        adapter.set_trainable(True)
        bundle = bundle.with_adapter(adapter)

    model_params = bundle.extractor.parameters() + bundle.classifier.parameters()
    adapter_params = adapter.parameters() if adapter is not None else []
    all_params = model_params + adapter_params
    model_state = OptimizerState.for_params(model_params)
    adapter_state = OptimizerState.for_params(adapter_params)

    sampler = BatchSampler(len(y), config.batch_size, _rng(config.seed, _STAGE1_KEY, task.task_id, 1))
    val = _shuffled_pool(task.source_val, _rng(config.seed, _VAL_KEY, task.task_id)) if task.source_val else None

    best_score, best_step, best = -1.0, 0, _snapshot(all_params)
    last_loss = float("nan")
    for step in range(config.steps_stage1 + 1):
        if step % config.checkpoint_every == 0 or step == config.steps_stage1:
            score = accuracy(bundle, val[0], val[1], config.test_batch_size) if val else float("nan")
            if metrics is not None:
                metrics({
                    "stage": "stage1", "step": step, "task_id": task.task_id,
                    "loss_adapt": None, "loss_preserve": None,
                    "loss_total": None if step == 0 else last_loss,
                    "val_acc_source": score, "val_acc_target": None,
                })
            if val is None or score > best_score:
                best_score, best_step, best = score, step, _snapshot(all_params)
        if step == config.steps_stage1:
            break
        idx = sampler.next()
        if batch_hook is not None:
            batch_hook("stage1", task.task_id, domains[idx])
        loss = ad.softmax_cross_entropy(adapted_logits(bundle, x[idx]), y[idx])
        last_loss = _finite_or_raise(loss, step, "stage1")
        ad.zero_grad(all_params)
        ad.backward(loss)
        adam_step(model_params, [p.grad for p in model_params], model_state, config.lr_stage1,
                  config.adam_beta1, config.adam_beta2, config.adam_eps)
        if adapter_params:
            adam_step(adapter_params, [p.grad for p in adapter_params], adapter_state, config.lr_adapter,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)

    _restore(all_params, best)
    ad.zero_grad(all_params)
    return bundle


def adapt_loss(bundle: ModelBundle, x, y) -> Tensor:
    """Cross-entropy of the adapted model on one meta-target domain batch."""
    if len(y) == 0:
        raise EmptyBatchError("adapt_loss: empty batch")
    return ad.softmax_cross_entropy(adapted_logits(bundle, x), y)


def preserve_loss(bundle: ModelBundle, x, y) -> Tensor:
    """Cross-entropy of the adapted model on one pooled meta-source batch."""
    if len(y) == 0:
        raise EmptyBatchError("preserve_loss: empty batch")
    return ad.softmax_cross_entropy(adapted_logits(bundle, x), y)


def combined_loss(bundle: ModelBundle, target_batch, source_batch, lambda_preserve: float):
    """``adapt + lambda * preserve``; ``target_batch`` is None for a full-mask task.

    Returns ``(total, adapt, preserve)`` with ``adapt`` None when skipped.
    """
    preserve = preserve_loss(bundle, *source_batch)
    weighted = ad.mul(preserve, lambda_preserve)
    if target_batch is None:
        return weighted, None, preserve
    adapt = adapt_loss(bundle, *target_batch)
    return ad.add(adapt, weighted), adapt, preserve


@dataclass
class Stage2Result:
    adapter: CaFiLMParams | MLPAdapter
    bundles: list[ModelBundle]
    best_step: int
    best_score: float
    history: list[dict] = field(default_factory=list)
    optimizer_state: OptimizerState | None = None
    classifier_states: list[OptimizerState] = field(default_factory=list)
    # combined loss of every optimisation step, in order
    losses: list[float] = field(default_factory=list)

    def ensemble(self) -> EnsembleModel:
        return EnsembleModel(self.bundles)


def stage2_bundles(bundles: list[ModelBundle], adapter, finetune_classifier: bool) -> list[ModelBundle]:
    """Fresh bundles for stage two: extractor frozen, classifier frozen or trainable."""
    out = []
    for b in bundles:
        extractor = b.extractor.copy()
        extractor.set_trainable(False)
        classifier = b.classifier.copy()
        classifier.set_trainable(finetune_classifier)
        out.append(ModelBundle(b.task_id, extractor, classifier, adapter))
    return out


def validation_score(tasks: list[MetaTask], bundles: list[ModelBundle], config: TrainConfig) -> tuple[float, list[tuple[float, float | None]]]:
    """Mean over tasks of source and target held-out accuracy.

    Source validation is the pooled meta-source in a fixed shuffled order;
    each meta-target domain is evaluated on its own so test-time batches are
    single-domain, as they are on the real test domain.
    """
    scores, per_task = [], []
    bs = config.test_batch_size
    for task, bundle in zip(tasks, bundles):
        src = tgt = None
        if task.source_val:
            xs, ys = _shuffled_pool(task.source_val, _rng(config.seed, _VAL_KEY, task.task_id))
            src = accuracy(bundle, xs, ys, bs)
            scores.append(src)
        if task.target_val:
            correct = sum(accuracy(bundle, ds.features, ds.labels, bs) * len(ds) for ds in task.target_val)
            tgt = correct / sum(len(ds) for ds in task.target_val)
            scores.append(tgt)
        per_task.append((src, tgt))
    return (float(np.mean(scores)) if scores else float("nan")), per_task


def train_stage2(
    tasks: list[MetaTask],
    bundles: list[ModelBundle],
    config: TrainConfig,
    adapter: CaFiLMParams | MLPAdapter | None = None,
    batch_hook: BatchHook | None = None,
    metrics: MetricsSink | None = None,
) -> Stage2Result:
    """Train one adapter shared by every task on the meta-target/meta-source objective."""
    config.validate()
    if len(tasks) != len(bundles):
        raise ConfigError(f"{len(tasks)} tasks but {len(bundles)} bundles")
    if not tasks:
        raise ConfigError("no meta-tasks")
    if adapter is None:
        adapter = CaFiLMParams.identity()
    adapter.set_trainable(True)
    bundles = stage2_bundles(bundles, adapter, config.finetune_classifier)

    adapter_params = adapter.parameters()
    classifier_params = [b.classifier.parameters() if config.finetune_classifier else [] for b in bundles]
    if not adapter_params and not any(classifier_params):
        raise ConfigError("stage two has nothing to train")
    adapter_state = OptimizerState.for_params(adapter_params)
    classifier_states = [OptimizerState.for_params(ps) for ps in classifier_params]

    source_data, source_samplers, target_samplers = [], [], []
    for task in tasks:
        x, y, dom = task.pooled_source()
        source_data.append((x, y, dom))
        source_samplers.append(BatchSampler(len(y), config.batch_size, _rng(config.seed, _STAGE2_KEY, task.task_id, 0)))
        target_samplers.append([
            BatchSampler(len(ds), config.batch_size, _rng(config.seed, _STAGE2_KEY, task.task_id, 1, k))
            for k, ds in enumerate(task.target)
        ])
    visits = [0] * len(tasks)
    last = [dict(loss_adapt=None, loss_preserve=None, loss_total=None) for _ in tasks]

    def snapshot():
        return _snapshot(adapter_params), [_snapshot(ps) for ps in classifier_params]

    history: list[dict] = []
    losses: list[float] = []
    best_score, best_step, best = -1.0, 0, snapshot()
    n_tasks = len(tasks)
    for step in range(config.steps_stage2 + 1):
        if step % config.checkpoint_every == 0 or step == config.steps_stage2:
            score, per_task = validation_score(tasks, bundles, config)
            for task, (src, tgt), rec in zip(tasks, per_task, last):
                record = {"stage": "stage2", "step": step, "task_id": task.task_id, **rec,
                          "val_acc_source": src, "val_acc_target": tgt}
                history.append(record)
                if metrics is not None:
                    metrics(record)
            if score > best_score:
                best_score, best_step, best = score, step, snapshot()
        if step == config.steps_stage2:
            break

        i = step % n_tasks
        task, bundle = tasks[i], bundles[i]
        target_batch = None
        if task.target:
            k = visits[i] % len(task.target)
            ds = task.target[k]
            idx = target_samplers[i][k].next()
            if batch_hook is not None:
                batch_hook("stage2", task.task_id, np.full(idx.size, ds.domain_id))
            target_batch = (ds.features[idx], ds.labels[idx])
        visits[i] += 1
        x, y, dom = source_data[i]
        idx = source_samplers[i].next()
        if batch_hook is not None:
            batch_hook("stage2", task.task_id, dom[idx])
        total, adapt, preserve = combined_loss(bundle, target_batch, (x[idx], y[idx]), config.lambda_preserve)
        last[i] = dict(
            loss_adapt=None if adapt is None else adapt.item(),
            loss_preserve=preserve.item(),
            loss_total=_finite_or_raise(total, step, "stage2"),
        )
        losses.append(last[i]["loss_total"])
        trainable = adapter_params + classifier_params[i]
        ad.zero_grad(trainable)
        ad.backward(total)
        adam_step(adapter_params, [p.grad for p in adapter_params], adapter_state, config.lr_adapter,
                  config.adam_beta1, config.adam_beta2, config.adam_eps)
        if classifier_params[i]:
            adam_step(classifier_params[i], [p.grad for p in classifier_params[i]], classifier_states[i],
                      config.lr_classifier_finetune, config.adam_beta1, config.adam_beta2, config.adam_eps)

    best_adapter, best_classifiers = best
    _restore(adapter_params, best_adapter)
    for ps, vals in zip(classifier_params, best_classifiers):
        _restore(ps, vals)
    ad.zero_grad(adapter_params + [p for ps in classifier_params for p in ps])
    return Stage2Result(adapter, bundles, best_step, best_score, history, adapter_state, classifier_states, losses)
