import json
import math

import numpy as np
import pytest

from casa import harness
from casa.datasets import SyntheticSpec, generate, save_csv
from casa.errors import CheckpointVersionError, ConfigError, ExperimentError, ParseError, TrainingError
from casa.harness import (
    Checkpoint,
    ExperimentConfig,
    LeakageAudit,
    ReportRow,
    default_train_config,
    load_checkpoint,
    read_report_csv,
    report,
    rows_from_metrics,
    run_experiment,
    run_variants,
    save_checkpoint,
)
from casa.inference import EnsembleModel, ensemble_probs
from casa.models import CaFiLMParams, MLPAdapter, MLPParams, ModelBundle

TINY_TRAIN = dict(steps_stage1=30, steps_stage2=30, checkpoint_every=10, hidden_dim=8, feature_dim=4)


def tiny_config(tmp_path=None, **kw):
    base = dict(
        dataset=SyntheticSpec(samples_per_domain=40),
        train=default_train_config(**TINY_TRAIN),
        num_seeds=2,
        output_dir=str(tmp_path) if tmp_path else None,
    )
    return ExperimentConfig(**{**base, **kw})


class TestConfig:
    def test_from_dict_defaults(self):
        cfg = ExperimentConfig.from_dict({"test_domain": 2})
        assert cfg.test_domains == [2] and cfg.num_seeds == 3
        assert cfg.dataset.shift_mode == "context_coupled" and cfg.train.lambda_preserve == 1.0

    @pytest.mark.parametrize(
        "raw",
        [{"tset_domain": 1}, {"train": {"lr": 0.1}}, {"dataset": {"domains": 4}}, {"task_policy": {"type": "x"}}],
    )
    def test_unknown_keys_rejected(self, raw):
        with pytest.raises(ConfigError, match="unknown key"):
            ExperimentConfig.from_dict(raw)

    @pytest.mark.parametrize(
        "raw", [{"num_seeds": 0}, {"ablation": "dropout"}, {"test_domain": 9}, {"test_domain": [1, 1]}, {"test_domain": "some"}]
    )
    def test_invalid_values(self, raw):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    def test_all_test_domains(self):
        assert ExperimentConfig.from_dict({"test_domain": "all"}).test_domains == [0, 1, 2, 3]

    def test_dict_round_trip(self):
        cfg = tiny_config(test_domain=[0, 3], ablation="mlp_adapter")
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_csv_dataset_path(self, tmp_path):
        save_csv(generate(SyntheticSpec(samples_per_domain=40)), tmp_path / "d.csv")
        cfg = ExperimentConfig.from_dict({"dataset": str(tmp_path / "d.csv"), "test_domain": 1, "num_seeds": 1,
                                          "train": TINY_TRAIN})
        row = run_experiment(cfg)
        assert len(row.accuracies) == 1 and 0.0 <= row.average <= 1.0


class TestRunExperiment:
    def test_row_shape_and_stderr(self):
        row = run_experiment(tiny_config(num_seeds=3))
        assert row.label == "CASA" and row.test_domains == [0]
        assert len(row.per_seed) == 3
        assert row.stderr == pytest.approx(np.std(row.per_seed, ddof=1) / math.sqrt(3), abs=1e-15)
        assert len(row.val_accuracies) == 3
        assert all(len(v["per_task"]) == 7 for v in row.val_accuracies)

    def test_single_seed_has_zero_stderr(self):
        assert run_experiment(tiny_config(num_seeds=1)).stderr == 0.0

    def test_identical_runs_write_identical_files(self, tmp_path):
        run_variants(tiny_config(tmp_path / "a"), ["none", "ensemble_no_adapter"])
        run_variants(tiny_config(tmp_path / "b"), ["none", "ensemble_no_adapter"])
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "report.csv" in names and "metrics.jsonl" in names
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_variants_share_stage_one(self, tmp_path):
        run_variants(tiny_config(tmp_path, num_seeds=1), ["none", "ensemble_no_adapter", "mlp_adapter"])
        ckpts = {v: load_checkpoint(tmp_path / f"checkpoint_{v}_seed0_test0.json")
                 for v in ("none", "ensemble_no_adapter", "mlp_adapter")}
        for a, b, c in zip(*(ck.bundles for ck in ckpts.values())):
            for p, q, r in zip(a.extractor.parameters(), b.extractor.parameters(), c.extractor.parameters()):
                assert np.array_equal(p.data, q.data) and np.array_equal(p.data, r.data)
        separate = run_experiment(tiny_config(num_seeds=1, ablation="ensemble_no_adapter"))
        assert separate.accuracies == rows_from_metrics(tmp_path / "metrics.jsonl")[1].accuracies

    def test_variant_adapters(self, tmp_path):
        run_variants(tiny_config(tmp_path, num_seeds=1), list(harness.VARIANTS))
        load = lambda v: load_checkpoint(tmp_path / f"checkpoint_{v}_seed0_test0.json")
        assert isinstance(load("none").shared_adapter, CaFiLMParams)
        assert load("ensemble_no_adapter").bundles[0].adapter is None
        per_task = load("adapter_in_stage1")
        assert per_task.shared_adapter is None and all(isinstance(b.adapter, CaFiLMParams) for b in per_task.bundles)
        assert load("no_context_mlp").shared_adapter.uses_context is False
        assert isinstance(load("mlp_adapter").shared_adapter, MLPAdapter) and load("mlp_adapter").shared_adapter.uses_context

    def test_metrics_reconstruct_the_report(self, tmp_path):
        rows = run_variants(tiny_config(tmp_path, test_domain=[1, 2]), ["none", "no_context_mlp"])
        rebuilt = {r.variant: r for r in rows_from_metrics(tmp_path / "metrics.jsonl")}
        for v, row in rows.items():
            assert rebuilt[v].accuracies == row.accuracies
            assert rebuilt[v].average == row.average and rebuilt[v].stderr == row.stderr

    def test_audit_records_exclude_the_test_domain(self, tmp_path):
        run_variants(tiny_config(tmp_path, test_domain=[0, 2]), ["none", "adapter_in_stage1"])
        audits = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        audits = [r for r in audits if r["stage"] == "audit"]
        assert len(audits) == 4
        for rec in audits:
            counts = rec["batches_by_domain"]
            assert str(rec["test_domain"]) not in counts
            assert len(counts) == 3 and all(n > 0 for n in counts.values())

    def test_leakage_audit_refuses_held_out_batches(self):
        audit = LeakageAudit({2})
        audit("stage1", 0, np.array([0, 1, 1]))
        with pytest.raises(ExperimentError, match="held-out"):
            audit("stage2", 3, np.array([1, 2]))

    def test_failures_name_stage_task_and_seed(self, monkeypatch):
        def boom(task, *args, **kwargs):
            raise TrainingError("loss diverged", step=5)

        monkeypatch.setattr(harness, "train_stage1", boom)
        with pytest.raises(ExperimentError) as info:
            run_experiment(tiny_config(train=default_train_config(**TINY_TRAIN, seed=7)))
        assert (info.value.stage, info.value.task, info.value.seed) == ("stage1", 0, 7)
        assert "step 5" in str(info.value)


@pytest.fixture(scope="module")
def state(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    run_variants(tiny_config(out, num_seeds=1), ["none"])
    return out / "checkpoint_none_seed0_test0.json"


class TestCheckpoint:

    def test_round_trip_forward_is_bitwise(self, state, tmp_path):
        ck = load_checkpoint(state)
        x = np.random.default_rng(0).normal(size=(32, 4))
        before = ensemble_probs(EnsembleModel(ck.bundles), x)
        save_checkpoint(ck, tmp_path / "again.json")
        again = load_checkpoint(tmp_path / "again.json")
        assert np.array_equal(before, ensemble_probs(EnsembleModel(again.bundles), x))
        assert (tmp_path / "again.json").read_bytes() == state.read_bytes()

    def test_contents(self, state):
        ck = load_checkpoint(state)
        assert ck.prng.startswith("numpy.random.Generator(PCG64)")
        assert ck.config["variant"] == "none" and len(ck.bundles) == 7
        assert ck.optimizer["adapter"].step == 30

    def test_truncated_file(self, state, tmp_path):
        data = state.read_bytes()
        (tmp_path / "cut.json").write_bytes(data[: len(data) // 2])
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "cut.json")

    def test_old_version(self, state, tmp_path):
        payload = json.loads(state.read_text())
        payload["format_version"] = 0
        (tmp_path / "old.json").write_text(json.dumps(payload))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "old.json")

    def test_hex_floats_are_exact(self, tmp_path):
        adapter = CaFiLMParams(harness.Tensor(np.array([[0.1, 1 / 3], [-2e-300, np.pi]])), harness.Tensor([1.0, 5e-324]))
        rng = np.random.default_rng(0)
        bundle = ModelBundle(0, MLPParams.init([2, 3], rng), MLPParams.init([3, 2], rng), adapter)
        save_checkpoint(Checkpoint([bundle]), tmp_path / "c.json")
        back = load_checkpoint(tmp_path / "c.json").bundles[0].adapter
        assert np.array_equal(back.A.data, adapter.A.data) and np.array_equal(back.b.data, adapter.b.data)


class TestReport:
    def _row(self, accs, variant="none"):
        return ReportRow(variant, harness.VARIANT_LABELS[variant], [0, 2], accs, 32)

    def test_one_row(self, tmp_path):
        csv_path, txt_path = report([self._row([[0.5, 0.75]])], tmp_path)
        assert len(csv_path.read_text().splitlines()) == 2
        text = txt_path.read_text().splitlines()
        assert text[0].split() == ["Algorithm", "D0", "D2", "Avg", "+/-"]
        assert text[2].split()[:4] == ["CASA", "50.0", "75.0", "62.5"]

    def test_csv_reparses_and_averages_recompute(self, tmp_path):
        rows = [self._row([[0.51, 0.62], [0.73, 0.84], [0.95, 0.16]]),
                self._row([[0.3, 0.3], [0.2, 0.9], [0.1, 0.4]], "mlp_adapter")]
        csv_path, _ = report(rows, tmp_path)
        for row, rec in zip(rows, read_report_csv(csv_path)):
            per = [float(rec["acc_domain0"]), float(rec["acc_domain2"])]
            assert per == row.per_domain
            assert float(rec["average"]) == pytest.approx(sum(per) / 2, abs=1e-9)
            assert float(rec["stderr"]) == row.stderr
            assert int(rec["num_seeds"]) == 3 and int(rec["batch_size"]) == 32

    def test_stderr_by_hand(self):
        row = self._row([[0.6, 0.6], [0.8, 0.8], [0.7, 0.7]])
        # per-seed means 0.6, 0.8, 0.7: sample std 0.1
        assert row.stderr == pytest.approx(0.1 / math.sqrt(3), abs=1e-12)

    def test_needs_a_row(self, tmp_path):
        with pytest.raises(ConfigError):
            report([], tmp_path)


def test_replicate_seeds_wrap_at_64_bits():
    assert harness._replicate_seed(2**64 - 1, 1) == 0
    assert harness._replicate_seed(5, 2) == 7
