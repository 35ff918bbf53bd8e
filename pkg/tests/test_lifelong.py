import json

import numpy as np
import pytest

import cmlreid.akfp as akfp_mod
from cmlreid.lifelong import (VARIANTS, CheckpointError, CMLReIDModel, ConfigError,
                              ExperimentConfig, checkpoint_dict, load_checkpoint, make_variant,
                              run_sequence, run_task, save_checkpoint)

FAST = dict(epoch_scale=0.02)


def snap(params):
    return {p.name: p.value.copy() for p in params}


def changed(before, params):
    return any(not np.array_equal(before[p.name], p.value) for p in params)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.lam == 0.5 and cfg.P * cfg.K == 64
        assert cfg.casp_epochs == 12 and cfg.akfp_epochs == 6

    def test_all_problems_listed(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict({"lam": -1, "beta": 2, "order": 9, "bogus": 1})
        fields = {p.split(":")[0] for p in exc.value.problems}
        assert fields == {"lam", "beta", "order", "bogus"}

    def test_unknown_world_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(world={"nope": 1})

    def test_round_trip(self):
        cfg = ExperimentConfig(seed=7, variant="no_ctx", world={"rotation": 0.4})
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            make_variant(ExperimentConfig().replace(variant="nope"))


class TestRunTask:
    def test_full_trains_both_stages(self, world):
        model = CMLReIDModel(ExperimentConfig(**FAST))
        casp, akfp = snap(model.casp.all_parameters), snap(model.visual.parameters)
        frozen = snap(model.text.frozen + model.visual.frozen)
        run_task(model, world.domains["SC1"], 0)
        assert changed(casp, model.casp.all_parameters)
        assert changed(akfp, model.visual.parameters)
        assert not changed(frozen, model.text.frozen + model.visual.frozen)
        assert {r["stage"] for r in model.logs} == {"casp", "akfp"}

    def test_sft_leaves_prompts(self, world):
        model = CMLReIDModel(ExperimentConfig(variant="sft", **FAST))
        casp = snap(model.casp.all_parameters)
        run_task(model, world.domains["SC1"], 0)
        assert not changed(casp, model.casp.all_parameters)
        assert model.protos is None and model.bundle is None and model.classifier is None
        assert {r["stage"] for r in model.logs} == {"akfp"}
        assert all(r["L_proj"] == 0 for r in model.logs)

    def test_no_lproj_forces_lambda_zero(self, world):
        model = CMLReIDModel(ExperimentConfig(variant="no_lproj", **FAST))
        run_task(model, world.domains["CC1"], 0)
        akfp_rows = [r for r in model.logs if r["stage"] == "akfp"]
        assert all(r["lam_L_proj"] == 0 and r["L_proj"] > 0 for r in akfp_rows)

    def test_variant_assembly(self):
        parts = {v: CMLReIDModel(ExperimentConfig(variant=v)) for v in VARIANTS}
        assert parts["no_casp"].skip_casp and parts["sft"].skip_casp and not parts["full"].skip_casp
        assert parts["no_akfp"].bundle.single and parts["no_akfp"].lam == 0
        assert parts["single_prototype"].protos.shared
        assert parts["no_ctx"].casp.mode == "no_ctx"

    def test_same_initialisation_across_variants(self):
        a, b = CMLReIDModel(ExperimentConfig()), CMLReIDModel(ExperimentConfig(variant="sft"))
        for p, q in zip(a.visual.parameters, b.visual.parameters):
            assert np.array_equal(p.value, q.value)

    def test_full_and_sft_see_same_batches(self, world, monkeypatch):
        seen = {}
        real = akfp_mod.sample_pk_indices

        def recorder(variant):
            def wrapped(*args):
                idx = real(*args)
                seen.setdefault(variant, []).append(idx.copy())
                return idx
            return wrapped
        for v in ("full", "sft"):
            monkeypatch.setattr(akfp_mod, "sample_pk_indices", recorder(v))
            run_task(CMLReIDModel(ExperimentConfig(variant=v, **FAST)), world.domains["SC2"], 0)
        assert len(seen["full"]) == len(seen["sft"]) > 0
        assert all(np.array_equal(a, b) for a, b in zip(seen["full"], seen["sft"]))


class TestSequence:
    def test_protocol_shape(self, world):
        res = run_sequence(ExperimentConfig(domains=["CC2", "SC1"], **FAST), world)
        assert res.matrix.n_rows == 2
        assert list(res.matrix.row(1)) == ["CC2"]
        assert sorted(res.matrix.row(2)) == ["CC2", "SC1"]
        assert set(res.held_out) == {"SC3", "CC3"}

    def test_deterministic(self):
        a = run_sequence(ExperimentConfig(order=3, **FAST))
        b = run_sequence(ExperimentConfig(order=3, **FAST))
        assert a.matrix.to_csv() == b.matrix.to_csv()


class TestCheckpoint:
    def test_byte_identical_resave(self, tmp_path, world):
        model = CMLReIDModel(ExperimentConfig(**FAST))
        run_task(model, world.domains["CC1"], 0)
        save_checkpoint(model, tmp_path / "a.json")
        save_checkpoint(load_checkpoint(tmp_path / "a.json"), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_continue_after_reload(self, tmp_path, world):
        cfg = ExperimentConfig(**FAST)
        model = CMLReIDModel(cfg)
        run_task(model, world.domains["SC1"], 0)
        save_checkpoint(model, tmp_path / "c.json")
        again = load_checkpoint(tmp_path / "c.json")
        run_task(model, world.domains["CC1"], 1)
        run_task(again, world.domains["CC1"], 1)
        assert model.logs == again.logs
        assert checkpoint_dict(model) == checkpoint_dict(again)

    def test_truncated(self, tmp_path):
        model = CMLReIDModel(ExperimentConfig())
        save_checkpoint(model, tmp_path / "c.json")
        text = (tmp_path / "c.json").read_text()
        (tmp_path / "c.json").write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.json")

    def test_wrong_schema(self, tmp_path):
        (tmp_path / "c.json").write_text('{"schema": "other/9"}')
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.json")

    def test_missing_parameter(self, tmp_path):
        data = checkpoint_dict(CMLReIDModel(ExperimentConfig()))
        del data["parameters"]["visual.adapter.W1"]
        (tmp_path / "c.json").write_text(json.dumps(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.json")
