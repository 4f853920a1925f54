import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedmoldiff.diffusion import DiscreteDiffusion, NoisyBatch, TransitionModel, build_schedule
from fedmoldiff.models import (
    DenoiserHandle,
    ModelConfig,
    NonFiniteLoss,
    OptimizerConfig,
    ParamStore,
    RegressorGuidance,
    RegressorHandle,
    ShapeMismatch,
    adamw_step,
    denoiser_forward,
    denoiser_loss,
    gradients,
    guided_reverse_step,
    init_optimizer,
    init_params,
    make_inputs,
    param_shapes,
    regressor_forward,
    regressor_loss,
    reweight,
)
from fedmoldiff.models.guidance import NonFiniteGuidance
from fedmoldiff.molgraph import parse_smiles

SMALL = ModelConfig(layers=2, hidden_node=16, hidden_edge=8, hidden_global=8, heads=2)


def jittered(cfg, seed, kind):
    """Random init with non-zero biases so no parameter is trivially inert."""
    p = init_params(cfg, seed, kind)
    rng = np.random.default_rng(seed + 100)
    return p.map(lambda v: (v + 0.1 * rng.standard_normal(v.shape)).astype(v.dtype))


def noisy_batch(graphs, T=20, seed=0, t=None):
    d = DiscreteDiffusion(build_schedule(T), TransitionModel.from_graphs(graphs))
    clean = NoisyBatch.from_graphs(graphs, 0, T)
    rng = np.random.default_rng(seed)
    b, n = clean.nodes.shape
    tt = rng.integers(1, T + 1, size=b) if t is None else np.full(b, t)
    return clean, d.noise_batch(clean, tt, rng.random((b, n)), rng.random((b, n, n)))


def permute_batch(z, perm):
    return NoisyBatch(z.t, z.nodes[:, perm], z.edges[:, perm][:, :, perm], z.mask[:, perm], z.T)


class TestInit:
    def test_deterministic(self):
        assert init_params(SMALL, 3) == init_params(SMALL, 3)
        assert init_params(SMALL, 3) != init_params(SMALL, 4)

    def test_bias_zero_and_glorot_bound(self):
        p = init_params(SMALL, 0, "regressor")
        for name, v in p.items():
            if name.endswith(".b"):
                assert not v.any()
            else:
                a = math.sqrt(6 / (v.shape[0] + v.shape[1]))
                assert np.abs(v).max() < a
        assert p.dtype == np.float32
        assert p.shapes() == param_shapes(SMALL, "regressor")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_node=10, heads=4)
        with pytest.raises(ValueError):
            ModelConfig(layers=0)


class TestForward:
    def test_denoiser_equivariance_all_perms(self):
        g = parse_smiles("CC(=O)N")
        _, z = noisy_batch([g], seed=2, t=8)
        p = jittered(SMALL, 1, "denoiser").to_torch()
        nl, el = (a.numpy() for a in denoiser_forward(p, SMALL, make_inputs(z)))
        for perm in itertools.permutations(range(4)):
            perm = list(perm)
            pnl, pel = (a.numpy() for a in denoiser_forward(p, SMALL, make_inputs(permute_batch(z, perm))))
            assert np.abs(pnl - nl[:, perm]).max() < 1e-5
            assert np.abs(pel - el[:, perm][:, :, perm]).max() < 1e-5

    def test_regressor_invariance_all_perms(self):
        g = parse_smiles("CC(=O)N")
        _, z = noisy_batch([g], seed=2, t=8)
        p = jittered(SMALL, 1, "regressor").to_torch()
        out = regressor_forward(p, SMALL, make_inputs(z)).numpy()
        for perm in itertools.permutations(range(4)):
            got = regressor_forward(p, SMALL, make_inputs(permute_batch(z, list(perm)))).numpy()
            assert np.abs(got - out).max() < 1e-5

    def test_edge_logits_symmetric(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:5])
        _, el = DenoiserHandle(SMALL, jittered(SMALL, 0, "denoiser"))(z)
        assert np.array_equal(el, np.swapaxes(el, 1, 2))

    def test_zero_params(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:4])
        nl, el = DenoiserHandle(SMALL, init_params(SMALL, 0).zeros_like())(z)
        assert not nl.any() and not el.any()
        r = RegressorHandle(SMALL, init_params(SMALL, 0, "regressor").zeros_like())(z)
        assert not r.any()

    def test_padding_independent(self, corpus_graphs):
        g = corpus_graphs[3]
        _, z = noisy_batch([g], seed=1, t=5)
        zp = NoisyBatch(z.t, np.pad(z.nodes, ((0, 0), (0, 2))), np.pad(z.edges, ((0, 0), (0, 2), (0, 2))),
                        np.pad(z.mask, ((0, 0), (0, 2))), z.T)
        p = jittered(SMALL, 5, "denoiser")
        a, b = DenoiserHandle(SMALL, p)(z), DenoiserHandle(SMALL, p)(zp)
        assert np.allclose(a[0], b[0][:, :g.n], atol=1e-5)
        r = jittered(SMALL, 5, "regressor")
        assert np.allclose(RegressorHandle(SMALL, r)(z), RegressorHandle(SMALL, r)(zp), atol=1e-5)

    def test_shape_mismatch(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:2])
        p = init_params(SMALL, 0, "regressor").to_torch()
        with pytest.raises(ShapeMismatch):
            denoiser_forward(p, SMALL, make_inputs(z))

    def test_finite_on_fixtures(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:64])
        assert np.all(np.isfinite(RegressorHandle(SMALL, init_params(SMALL, 0, "regressor"))(z)))


class TestLosses:
    def test_saturated_logits(self, monkeypatch):
        g = parse_smiles("C=CO")
        clean, z = noisy_batch([g], t=3)
        nl = torch.full((1, 3, 4), -30.0, dtype=torch.float64)
        el = torch.full((1, 3, 3, 4), -30.0, dtype=torch.float64)
        nl[0, torch.arange(3), torch.as_tensor(clean.nodes[0])] = 30.0
        for i in range(3):
            el[0, i, torch.arange(3), torch.as_tensor(clean.edges[0, i])] = 30.0
        import fedmoldiff.models.nets as nets

        monkeypatch.setattr(nets, "denoiser_forward", lambda p, cfg, inp: (nl, el))
        loss = nets.denoiser_loss({}, SMALL, make_inputs(z, torch.float64), clean)
        assert 0 <= loss.item() < 1e-9

    def test_uniform_logits(self, corpus_graphs):
        clean, z = noisy_batch(corpus_graphs[:6])
        p = init_params(SMALL, 0).zeros_like().astype(np.float64).to_torch()
        loss = denoiser_loss(p, SMALL, make_inputs(z, torch.float64), clean).item()
        # ln 4 per node; graphs with at least one atom pair add 5 * ln 4 for edges
        expected = np.mean([math.log(4) * (1 + 5 * (g.n > 1)) for g in corpus_graphs[:6]])
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_regressor_examples(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:1])
        p = init_params(SMALL, 0, "regressor").zeros_like().to_torch()
        inp = make_inputs(z)
        assert regressor_loss(p, SMALL, inp, torch.ones(1, 2)).item() == 1.0
        assert regressor_loss(p, SMALL, inp, torch.zeros(1, 2)).item() == 0.0


def finite_difference_check(params64, loss_fn, coords=60, h=1e-3, seed=0):
    loss, grad = gradients(params64, loss_fn)
    flat = params64.flatten()
    gflat = grad.flatten()
    rng = np.random.default_rng(seed)
    # draw from coordinates with a non-negligible gradient so the check is not vacuous
    live = np.flatnonzero(np.abs(gflat) > 1e-4)
    idx = rng.choice(live, size=coords, replace=False)
    worst = 0.0
    for i in idx:
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        with torch.no_grad():
            fd = (loss_fn(params64.unflatten(up).to_torch()).item()
                  - loss_fn(params64.unflatten(dn).to_torch()).item()) / (2 * h)
        denom = max(abs(fd), abs(gflat[i]), 1e-6)
        worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst, len(idx)


@pytest.fixture(scope="module")
def batch(corpus_graphs):
    return noisy_batch(corpus_graphs[:6], seed=4)


class TestGradients:
    def test_denoiser_fd(self, batch):
        clean, z = batch
        p = jittered(SMALL, 2, "denoiser").astype(np.float64)
        inp = make_inputs(z, torch.float64)
        worst, live = finite_difference_check(p, lambda t: denoiser_loss(t, SMALL, inp, clean))
        assert worst < 1e-3 and live >= 50

    def test_regressor_fd(self, batch):
        _, z = batch
        p = jittered(SMALL, 3, "regressor").astype(np.float64)
        inp = make_inputs(z, torch.float64)
        target = torch.as_tensor(np.random.default_rng(0).normal(size=(6, 2)))
        worst, live = finite_difference_check(p, lambda t: regressor_loss(t, SMALL, inp, target))
        assert worst < 1e-3 and live >= 50

    def test_constant_loss(self):
        p = init_params(SMALL, 0)
        loss, g = gradients(p, lambda t: torch.tensor(3.0))
        assert loss == 3.0 and not g.flatten().any()

    def test_linearity(self, batch):
        clean, z = batch
        p = jittered(SMALL, 2, "denoiser").astype(np.float64)
        inp = make_inputs(z, torch.float64)
        _, g1 = gradients(p, lambda t: denoiser_loss(t, SMALL, inp, clean))
        _, g2 = gradients(p, lambda t: 2 * denoiser_loss(t, SMALL, inp, clean))
        assert np.abs(g2.flatten() - 2 * g1.flatten()).max() < 1e-6

    def test_non_finite(self):
        with pytest.raises(NonFiniteLoss):
            gradients(init_params(SMALL, 0), lambda t: torch.tensor(float("nan")))


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + eps)
    return p


class TestAdamW:
    def store(self, x):
        return ParamStore({"w": np.array([x], dtype=np.float64)})

    def test_decay_only(self):
        p = ParamStore({"w": np.array([1.5, -2.0])})
        st = init_optimizer(p, OptimizerConfig(lr=0.1, weight_decay=0.01))
        new, _ = adamw_step(p, p.zeros_like(), st)
        assert np.allclose(new["w"], p["w"] * (1 - 0.1 * 0.01))

    def test_first_step(self):
        p = self.store(0.0)
        new, st = adamw_step(p, self.store(1.0), init_optimizer(p))
        assert new["w"][0] == pytest.approx(-2e-4 / (1 + 1e-8), rel=1e-12)
        assert st.step == 1

    def test_pure(self):
        p = self.store(0.3)
        st = init_optimizer(p)
        a = adamw_step(p, self.store(0.7), st)
        b = adamw_step(p, self.store(0.7), st)
        assert a[0] == b[0] and a[1].m == b[1].m and st.step == 0 and not st.m["w"].any()

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(1e-4, 1e-1))
    def test_matches_scalar_adam(self, p0, grads, lr):
        p = self.store(p0)
        state = init_optimizer(p, OptimizerConfig(lr=lr, weight_decay=0.0))
        for g in grads:
            p, state = adamw_step(p, self.store(g), state)
        assert p["w"][0] == pytest.approx(adam_scalar(p0, grads, lr), rel=1e-10, abs=1e-12)

    def test_shape_mismatch(self):
        p = self.store(0.0)
        with pytest.raises(ShapeMismatch):
            adamw_step(p, ParamStore({"v": np.zeros(1)}), init_optimizer(p))

    def test_loss_descent(self, corpus_graphs):
        clean, z = noisy_batch(corpus_graphs[10:18], seed=9)
        p = init_params(SMALL, 7)
        inp = make_inputs(z)
        state = init_optimizer(p, OptimizerConfig(lr=1e-3))
        first = None
        for _ in range(200):
            loss, g = gradients(p, lambda t: denoiser_loss(t, SMALL, inp, clean))
            first = loss if first is None else first
            p, state = adamw_step(p, g, state)
        with torch.no_grad():
            last = denoiser_loss(p.to_torch(), SMALL, inp, clean).item()
        assert last <= 0.5 * first


class TestParamStore:
    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=6),
                           hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=4)),
                           min_size=1, max_size=5))
    def test_flatten_round_trip(self, entries):
        p = ParamStore(entries)
        back = p.unflatten(p.flatten())
        assert back == p
        assert back.names() == sorted(entries)

    def test_immutable(self):
        p = init_params(SMALL, 0)
        with pytest.raises(ValueError):
            p["in_x.b"][0] = 1.0

    def test_wrong_size(self):
        with pytest.raises(ShapeMismatch):
            init_params(SMALL, 0).unflatten(np.zeros(3))

    def test_torch_round_trip(self):
        p = jittered(SMALL, 0, "denoiser")
        assert ParamStore.from_torch(p.to_torch()) == p


class TestGuidance:
    def test_zero_scale_is_identity(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:3], t=5)
        d = DiscreteDiffusion(build_schedule(20), TransitionModel.from_graphs(corpus_graphs[:3]))
        den = DenoiserHandle(SMALL, jittered(SMALL, 0, "denoiser"))
        pn, pe = d.step_distributions(*den(z), z)
        guide = RegressorGuidance(SMALL, jittered(SMALL, 1, "regressor"), [0.0, 0.0], 0.0)
        gn, ge = guide(z, pn, pe)
        assert np.abs(gn - pn).max() < 1e-9 and np.abs(ge - pe).max() < 1e-9
        # the same holds through the reweighting formula itself
        gx, gee = guide.input_gradients(z)
        assert np.abs(reweight(pn, gx, 0.0) - pn).max() < 1e-9

    def test_normalized(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:3], t=5)
        d = DiscreteDiffusion(build_schedule(20), TransitionModel.from_graphs(corpus_graphs[:3]))
        den = DenoiserHandle(SMALL, jittered(SMALL, 0, "denoiser"))
        guide = RegressorGuidance(SMALL, jittered(SMALL, 1, "regressor"), [0.5, -0.5], 100.0)
        pn, pe = guide(z, *d.step_distributions(*den(z), z))
        assert np.abs(pn.sum(-1) - 1).max() < 1e-9 and np.abs(pe.sum(-1) - 1).max() < 1e-9
        z2 = guided_reverse_step(d, den, guide, z, np.random.default_rng(0))
        assert np.all(z2.t == z.t - 1) and np.array_equal(z2.edges, np.swapaxes(z2.edges, 1, 2))

    def test_monotone_two_categories(self):
        probs = np.array([0.5, 0.5])
        grad = np.array([1.0, -1.0])
        prev = 0.5
        for lam in (0.1, 0.5, 1.0, 2.0, 5.0):
            p = reweight(probs, grad, lam)
            # analytic: p1 = 1 / (1 + exp(-2 lam))
            assert p[1] == pytest.approx(1 / (1 + math.exp(-2 * lam)), rel=1e-12)
            assert p[1] > prev
            prev = p[1]

    def test_edge_gradient_symmetric(self, corpus_graphs):
        _, z = noisy_batch(corpus_graphs[:2], t=5)
        guide = RegressorGuidance(SMALL, jittered(SMALL, 1, "regressor"), [1.0, 1.0], 1.0)
        _, ge = guide.input_gradients(z)
        assert np.allclose(ge, np.swapaxes(ge, 1, 2))

    def test_bad_target(self):
        with pytest.raises(NonFiniteGuidance):
            RegressorGuidance(SMALL, init_params(SMALL, 0, "regressor"), [np.nan, 0.0])
