import numpy as np
import pytest

from cmlreid.casp import (CONTEXT_DIM, N_BASE, N_MOD, Casp, ContextEncoder, PromptModulator,
                          casp_stage_loss, casp_train_stage, encode_context, modulate_prompts)
from cmlreid.encoders import (FEATURE_DIM, TOKEN_DIM, EmptyPromptError, TextEncoder, VisualEncoder,
                              encode_text, encode_visual)
from cmlreid.lifelong import CMLReIDModel, ExperimentConfig
from cmlreid.numerics import Linear, Parameter, ProtocolError, finite_diff_check
from cmlreid.rng import stream


def _snapshot(params):
    return {p.name: p.value.copy() for p in params}


def _same(before, params):
    return all(np.array_equal(before[p.name], p.value) for p in params)


class TestVisual:
    def test_deterministic(self, world):
        enc = VisualEncoder(stream(0, "v"))
        s = world.domains["SC1"].train[0]
        assert np.array_equal(encode_visual(enc, s), encode_visual(enc, s))

    def test_zero_adapter(self, world):
        enc = VisualEncoder(stream(0, "v"))
        for p in enc.parameters:
            p.value[...] = 0
        assert not encode_visual(enc, world.domains["CC1"].train[3]).any()

    def test_gradient(self, world):
        enc = VisualEncoder(stream(0, "v"))
        x = world.domains["SC1"].train.latents[:6]

        def closure():
            f = enc.forward(x)
            enc.backward(2 * f)
            return float((f ** 2).sum())
        assert finite_diff_check(closure, enc.parameters) < 1e-4


class TestText:
    def test_duplicate_token(self):
        enc = TextEncoder(stream(0, "t"))
        t = stream(0, "tok").normal(size=TOKEN_DIM)
        assert np.array_equal(encode_text(enc, t[None]), encode_text(enc, np.stack([t, t])))

    def test_permutation(self):
        enc = TextEncoder(stream(0, "t"))
        toks = stream(0, "tok").normal(size=(5, TOKEN_DIM))
        assert np.array_equal(encode_text(enc, toks), encode_text(enc, toks[::-1]))

    def test_empty(self):
        with pytest.raises(EmptyPromptError):
            TextEncoder(stream(0, "t")).forward(np.zeros((1, 0, TOKEN_DIM)))

    def test_token_gradient(self):
        enc = TextEncoder(stream(0, "t"))
        tok = Parameter("tok", stream(0, "tok").normal(size=(3, TOKEN_DIM)))

        def closure():
            e = enc.forward(tok.value[None])
            tok.accumulate(enc.backward(np.sin(e))[0])
            return float((-np.cos(e)).sum())
        assert finite_diff_check(closure, [tok], fraction=1.0) < 1e-4


class TestContext:
    def test_uniform_attention(self):
        ctx = ContextEncoder(stream(0, "c"))
        ctx.query.value[...] = 0
        f = stream(0, "f").normal(size=(3, FEATURE_DIM))
        c = encode_context(ctx, f)
        assert np.allclose(ctx.attention, 1 / 8)
        assert np.allclose(c, ctx.mlp.forward(f.reshape(3, 8, 8).mean(axis=1)), atol=1e-14)

    def test_identical_inputs(self):
        ctx = ContextEncoder(stream(0, "c"))
        f = stream(0, "f").normal(size=FEATURE_DIM)
        c = encode_context(ctx, np.stack([f, f]))
        assert np.array_equal(c[0], c[1])

    def test_gradient(self):
        ctx = ContextEncoder(stream(0, "c"))
        ctx.query.value[...] *= 10
        f = Parameter("f", stream(0, "f").normal(size=(4, FEATURE_DIM)))

        def closure():
            c = ctx.forward(f.value)
            f.accumulate(ctx.backward(np.cos(c)))
            return float(np.sin(c).sum())
        assert finite_diff_check(closure, ctx.parameters + [f]) < 1e-4


class TestModulator:
    def test_identity_modulation(self):
        mod = PromptModulator(stream(0, "m"))
        for p in mod.parameters:
            p.value[...] = 0
        base = stream(0, "b").normal(size=(N_BASE, TOKEN_DIM))
        out = modulate_prompts(mod, base, stream(0, "c").normal(size=CONTEXT_DIM))
        assert np.allclose(out[0], base.mean(axis=0), atol=1e-15)

    def test_context_matters(self):
        mod = PromptModulator(stream(0, "m"))
        base = stream(0, "b").normal(size=(N_BASE, TOKEN_DIM))
        c = stream(0, "c").normal(size=(2, CONTEXT_DIM))
        out = mod.forward(base, c)
        assert not np.array_equal(out[0], out[1])

    def test_gradient(self):
        mod = PromptModulator(stream(0, "m"))
        base = Parameter("base", stream(0, "b").normal(size=(N_BASE, TOKEN_DIM)))
        c = Parameter("c", stream(0, "c").normal(size=(3, CONTEXT_DIM)))

        def closure():
            out = mod.forward(base.value, c.value)
            db, dc = mod.backward(np.cos(out))
            base.accumulate(db)
            c.accumulate(dc)
            return float(np.sin(out).sum())
        assert finite_diff_check(closure, mod.parameters + [base, c]) < 1e-4


class TestCasp:
    def test_deterministic_embedding(self):
        f = stream(0, "f").normal(size=(3, FEATURE_DIM))
        a = Casp(TextEncoder(stream(0, "t")), stream(0, "c")).embed(f)
        b = Casp(TextEncoder(stream(0, "t")), stream(0, "c")).embed(f)
        assert np.array_equal(a, b)

    def test_identity_modulation_reduces_to_base(self):
        text = TextEncoder(stream(0, "t"))
        casp = Casp(text, stream(0, "c"))
        for p in casp.modulator.parameters:
            p.value[...] = 0
        e = casp.embed(stream(0, "f").normal(size=(2, FEATURE_DIM)))
        assert np.allclose(e[0], encode_text(text, casp.p_base.value), atol=1e-14)

    def test_no_ctx_modulation_constant(self):
        casp = Casp(TextEncoder(stream(0, "t")), stream(0, "c"), mode="no_ctx")
        p = casp.prompts(stream(0, "f").normal(size=(4, FEATURE_DIM)))
        assert all(np.array_equal(p[0], p[i]) for i in range(4))

    def test_uninformative_embedding_ce(self):
        casp = Casp(TextEncoder(stream(0, "t")), stream(0, "c"), mode="no_ctx")
        # text heads start at zero, so identical e_T give uniform logits
        head = Linear(Parameter("W", np.zeros((FEATURE_DIM, 5))))
        f = stream(0, "f").normal(size=(8, FEATURE_DIM))
        ids = np.repeat([0, 1, 2, 3], 2)
        rep = casp_stage_loss(casp, head, f, ids, ids, backward=False)
        assert rep.identity == pytest.approx(np.log(5), abs=1e-12)

    def test_single_identity_rejected(self):
        casp = Casp(TextEncoder(stream(0, "t")), stream(0, "c"))
        head = Linear(Parameter("W", np.zeros((FEATURE_DIM, 2))))
        with pytest.raises(ProtocolError):
            casp_stage_loss(casp, head, np.ones((2, FEATURE_DIM)), np.array([1, 1]), np.array([0, 0]))

    def test_stage_loss_gradient(self):
        casp = Casp(TextEncoder(stream(0, "t")), stream(0, "c"))
        head = Linear(Parameter("W", stream(0, "h").normal(0, 0.1, (FEATURE_DIM, 4))),
                      Parameter("b", np.zeros((1, 4)), decay=False))
        f = stream(0, "f").normal(size=(8, FEATURE_DIM))
        ids = np.repeat([0, 1, 2, 3], 2)
        err = finite_diff_check(lambda: casp_stage_loss(casp, head, f, ids, ids).total,
                                casp.parameters + head.parameters)
        assert err < 1e-4


class TestCaspStage:
    def test_zero_epochs(self, world):
        model = CMLReIDModel(ExperimentConfig())
        before = _snapshot(model.casp.all_parameters)
        assert casp_train_stage(model, world.domains["SC1"], 0, model.cfg, 0) == []
        assert _same(before, model.casp.all_parameters)

    def test_alignment_drops_and_isolation(self, world):
        model = CMLReIDModel(ExperimentConfig())
        frozen = model.visual.parameters + model.visual.frozen + model.text.frozen + model.akfp_parameters()
        before = _snapshot(frozen)
        logs = casp_train_stage(model, world.domains["SC1"], 12, model.cfg, 0)
        assert logs[-1]["alignment"] < 0.8 * logs[0]["alignment"]
        assert _same(before, frozen)
        assert logs[0]["lr"] == model.cfg.casp_lr
        assert logs[-1]["lr"] == pytest.approx(model.cfg.casp_lr * model.cfg.lr_floor)

    def test_e_t_depends_on_state(self, world):
        model = CMLReIDModel(ExperimentConfig())
        casp_train_stage(model, world.domains["SC1"], 10, model.cfg, 0)
        sc = model.casp.embed(model.features(world.domains["SC1"].eval.latents[:1]))[0]
        cc = model.casp.embed(model.features(world.domains["CC1"].eval.latents[:1]))[0]
        cos = sc @ cc / np.linalg.norm(sc) / np.linalg.norm(cc)
        assert cos < 0.999

    def test_casp_loss_decreases_over_first_steps(self, world):
        from cmlreid.numerics import Adam
        from cmlreid.world import sample_pk_indices
        model = CMLReIDModel(ExperimentConfig())
        d = world.domains["CC1"]
        head = model.text_head(d)
        opt = Adam(model.casp.parameters + head.parameters, 3e-3)
        feats = model.features(d.train.latents)
        idx = sample_pk_indices(d, 16, 4, stream(0, "fixed"))
        ids = d.train.identities[idx]
        local = ids - min(d.train_ids)
        losses = []
        for _ in range(20):
            losses.append(casp_stage_loss(model.casp, head, feats[idx], ids, local).alignment)
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:]))


def test_prompts_regenerate_after_reload(tmp_path, world):
    from cmlreid.lifelong import load_checkpoint, run_task, save_checkpoint
    model = CMLReIDModel(ExperimentConfig(epoch_scale=0.02))
    run_task(model, world.domains["SC1"], 0)
    save_checkpoint(model, tmp_path / "c.json")
    again = load_checkpoint(tmp_path / "c.json")
    f = model.features(world.domains["CC2"].eval.latents[:5])
    assert np.array_equal(model.casp.prompts(f)[:, N_BASE:], again.casp.prompts(f)[:, N_BASE:])
    assert model.casp.prompts(f).shape[1] == N_BASE + N_MOD
