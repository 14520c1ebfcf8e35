import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import frozenadv.attack as attack_mod
from frozenadv.attack import (AttackConfig, BudgetConfigError, Scenario, ScenarioError, ZeroSignalError,
                              averaged_embedding, bim_attack, clip_linf, gaussian_control, run_scenario)
from frozenadv.harness import compute_edr, edr_terms
from frozenadv.taskhead import LayerWeights, weighted_sum
from frozenadv.upstream import FrozenModelError, freeze, init_model, layer_stack


@pytest.fixture(scope="module")
def setup(pipeline):
    x = pipeline["dataset"].waves("test")[:12]
    m = pipeline["models"]["a"]
    return m, x, bim_attack(m, x, AttackConfig())


def test_clip_examples():
    assert clip_linf(np.array([0.75]), np.array([0.5]), 0.1)[0] == pytest.approx(0.6)
    assert clip_linf(np.array([0.55]), np.array([0.5]), 0.1)[0] == 0.55
    assert clip_linf(np.array([1.1]), np.array([0.9995]), 0.002)[0] == 1.0
    with pytest.raises(ValueError):
        clip_linf(np.zeros(3), np.zeros(4), 0.1)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-1, 1)), arrays(np.float64, 16, elements=st.floats(-2, 2)),
       st.floats(0, 0.5))
def test_clip_budget_bitwise(origin, t, eps):
    out = clip_linf(origin + t, origin, eps)
    assert np.all(np.abs(out - origin) <= eps)
    assert np.all((out >= -1) & (out <= 1))


def test_config_validation():
    AttackConfig().validate()
    assert AttackConfig().step == pytest.approx(0.0004)
    AttackConfig(epsilon=0.0).validate()
    for bad in (dict(epsilon=-1), dict(alpha=0.01), dict(n_iters=-1), dict(alpha=0.0)):
        with pytest.raises(BudgetConfigError):
            AttackConfig(**bad).validate()


def test_requires_frozen_model():
    with pytest.raises(FrozenModelError):
        bim_attack(init_model("a"), np.zeros(4096))


@pytest.mark.parametrize("cfg", [AttackConfig(n_iters=0), AttackConfig(epsilon=0.0)])
def test_zero_budget_identity(setup, cfg):
    m, x, _ = setup
    r = bim_attack(m, x[0], cfg)
    assert r.adversarial.samples.tobytes() == x[0].tobytes()
    assert r.nsr == 0 and r.linf == 0


def test_budget_and_range(setup):
    _, x, res = setup
    for xi, r in zip(x, res):
        d = np.abs(r.adversarial.samples - xi)
        assert d.max() <= 0.002 and r.linf <= 0.002
        assert np.all(np.abs(r.adversarial.samples) <= 1)


def test_budget_spent_on_most_coordinates(setup):
    _, x, res = setup
    # five steps of eps/5 land on eps up to float rounding, not bit-exactly
    frac = np.mean([np.mean(np.abs(r.adversarial.samples - xi) >= 0.002 * (1 - 1e-9)) for xi, r in zip(x, res)])
    assert frac > 0.5


def test_loss_trace_mostly_increasing(setup):
    _, _, res = setup
    for r in res:
        t = np.array(r.loss_trace)
        assert len(t) == 11 and t[0] == 0.0
        assert np.mean(np.diff(t) >= 0) >= 0.8


def test_deterministic_and_thread_independent(setup):
    m, x, res = setup
    again = bim_attack(m, x, AttackConfig(), threads=4)
    assert all(a.adversarial.samples.tobytes() == b.adversarial.samples.tobytes() for a, b in zip(res, again))
    single = bim_attack(m, x[3], AttackConfig())
    assert single.adversarial.samples.tobytes() == res[3].adversarial.samples.tobytes()


def test_averaged_embedding_is_uniform_weighted_sum(setup):
    m, x, _ = setup
    feats = layer_stack(m, x[:2])
    z = averaged_embedding(m, x[:2])
    assert np.allclose(z, np.stack([weighted_sum(f, LayerWeights(np.zeros(4))) for f in feats]))


def test_averaged_embedding_identical_layers(monkeypatch):
    m = freeze(init_model("a"))

    def fake(g, model, x, P=None, frame_mask=None):
        node = g.op("reshape", x, shape=(g.value(x).shape[0], 64, 64))
        return [node] * 4
    monkeypatch.setattr(attack_mod, "build_encoder", fake)
    x = np.random.default_rng(0).uniform(-1, 1, 4096)
    assert np.allclose(averaged_embedding(m, x), x.reshape(64, 64))


def test_averaged_embedding_hand_case(monkeypatch):
    def fake(g, model, x, P=None, frame_mask=None):
        return [g.const(np.array([[[1.0]]])), g.const(np.array([[[3.0]]]))]
    monkeypatch.setattr(attack_mod, "build_encoder", fake)
    assert np.array_equal(averaged_embedding(freeze(init_model("a")), np.zeros(4096)), [[2.0]])


def test_gaussian_matching():
    x = np.random.default_rng(1).uniform(-0.3, 0.3, 4096)
    assert gaussian_control(x, 0.0, 0).adversarial.samples.tobytes() == x.tobytes()
    r = gaussian_control(x, 0.1, 0)
    assert abs(r.nsr_preclamp - 0.1) <= 1e-9
    assert abs(r.nsr - 0.1) <= 1e-9          # clamp does not bind here
    with pytest.raises(ZeroSignalError):
        gaussian_control(np.zeros(4096), 0.1, 0)
    with pytest.raises(ValueError):
        gaussian_control(x, -0.1, 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 2.0), st.integers(0, 2**32 - 1))
def test_gaussian_nsr_exact(nsr, seed):
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, 256)
    assert abs(gaussian_control(x, nsr, seed).nsr_preclamp - nsr) <= 1e-9


def test_bim_beats_matched_gaussian(setup):
    m, x, res = setup
    gauss = [gaussian_control(xi, r.nsr, 0).adversarial.samples for xi, r in zip(x, res)]
    e_bim = compute_edr(m, [(xi, r.adversarial) for xi, r in zip(x, res)])
    e_g = compute_edr(m, list(zip(x, gauss)))
    assert np.all(e_g.terms < e_bim.terms)
    assert e_bim.mean > 2 * e_g.mean


def test_scenarios(pipeline, setup):
    ma, mb = pipeline["models"]["a"], pipeline["models"]["b"]
    _, x, res = setup
    out = run_scenario(Scenario("clean", ma), AttackConfig(), x[:3])
    assert all(o.tobytes() == r.adversarial.samples.tobytes() for o, r in out)
    with pytest.raises(ScenarioError):
        run_scenario(Scenario("zero_knowledge", ma, ma), AttackConfig(), x[:1])
    with pytest.raises(ScenarioError):
        Scenario("limited_knowledge", ma, mb).validate()
    with pytest.raises(ScenarioError):
        Scenario("gaussian", ma, mb).validate()
    with pytest.raises(ScenarioError):
        Scenario("fgsm", ma).validate()
    g = run_scenario(Scenario("gaussian", ma), AttackConfig(), x, matched=res)
    assert all(abs(r.nsr_preclamp - m.nsr) <= 1e-9 for (_, r), m in zip(g, res))


def test_limited_beats_zero_knowledge(pipeline, setup):
    ma, mb = pipeline["models"]["a"], pipeline["models"]["b"]
    _, x, lk = setup
    zk = [r for _, r in run_scenario(Scenario("zero_knowledge", ma, mb), AttackConfig(), x)]
    e_lk = compute_edr(ma, [(xi, r.adversarial) for xi, r in zip(x, lk)]).mean
    e_zk = compute_edr(ma, [(xi, r.adversarial) for xi, r in zip(x, zk)]).mean
    assert e_lk > e_zk


def test_edr_examples():
    assert edr_terms(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]]))[0] == 1.0
    z = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert np.array_equal(edr_terms(z, z), np.zeros(3))
    z = np.array([[10.0, 0.0], [10.0, 0.0]])
    assert edr_terms(z, np.array([[8.0, 0.0], [6.0, 0.0]])).mean() == pytest.approx(0.3)
