import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cari import tensor as T
from cari.attack import AttackConfig, cross_entropy_loss, pgd, project, worst_case_pair
from cari.errors import ConfigError
from cari.metrics import adv_metrics, clean_metrics, representations
from cari.model import intervene


def _linear(w):
    return lambda z: T.sum(T.mul(z, w))


def test_beta_zero_returns_start_exactly(rng):
    z0 = rng.standard_normal((4, 3))
    out = pgd(z0, _linear(np.ones(3)), AttackConfig(beta=0.0))
    assert np.array_equal(out, z0) and out is not z0


def test_linear_one_step_linf_moves_to_sign_corner():
    w = np.array([0.5, -2.0, 1e-3])
    z0 = np.array([0.1, 0.2, -0.3])
    out = pgd(z0, _linear(w), AttackConfig(norm="inf", beta=0.3, steps=1))
    assert np.allclose(out, z0 + 0.3 * np.sign(w), atol=1e-15)


def test_maximize_direction_descends():
    w = np.array([1.0, -1.0])
    out = pgd(np.zeros(2), _linear(w), AttackConfig(norm="inf", beta=0.2, steps=1, direction="maximize-MI"))
    assert np.allclose(out, [-0.2, 0.2])


def test_l2_overshoot_lands_on_boundary(rng):
    z0 = rng.standard_normal(5)
    w = rng.standard_normal(5)
    out = pgd(z0, _linear(w), AttackConfig(norm="2", beta=0.4, steps=3, step_size=5.0))
    assert abs(np.linalg.norm(out - z0) - 0.4) <= 1e-9
    assert np.allclose((out - z0) / 0.4, w / np.linalg.norm(w))


def test_zero_gradient_returns_start(rng):
    z0 = rng.standard_normal((2, 3))
    out = pgd(z0, lambda z: T.sum(T.mul(z, 0.0)), AttackConfig(beta=0.5))
    assert np.array_equal(out, z0)


def test_attack_config_errors():
    with pytest.raises(ConfigError):
        AttackConfig(norm="1")
    with pytest.raises(ConfigError):
        AttackConfig(beta=-1)
    with pytest.raises(ConfigError):
        AttackConfig(steps=0)
    with pytest.raises(ConfigError):
        AttackConfig(step_size=0.0)
    assert AttackConfig(beta=0.3, steps=10).alpha == pytest.approx(0.075)
    assert AttackConfig(norm="infinity").norm == "inf"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["2", "inf"]), st.floats(0.0, 2.0))
def test_projection_is_inside_ball(seed, norm, beta):
    r = np.random.default_rng(seed)
    z0 = r.standard_normal((6, 4))
    z = z0 + r.normal(0, 5, (6, 4))
    p = project(z, z0, beta, norm)
    ordv = np.inf if norm == "inf" else 2
    assert np.all(np.linalg.norm(p - z0, ord=ordv, axis=1) <= beta + 1e-9)


def test_ascent_never_improves_clean_loss(tiny_model, rng):
    z = rng.standard_normal((16, 4))
    y = rng.integers(0, 2, 16)
    loss = cross_entropy_loss(tiny_model, y)
    for norm in ("2", "inf"):
        out = pgd(z, loss, AttackConfig(norm=norm, beta=0.5, steps=7))
        tape = T.Tape()
        before = loss(tape.constant(z)).data
        after = loss(tape.constant(out)).data
        assert np.all(after >= before - 1e-9)


def test_worst_case_pair_directions(tiny_model, rng):
    x = rng.standard_normal((12, 6))
    z = rng.standard_normal((12, 4))
    y = rng.integers(0, 2, 12)
    zb, _ = intervene(tiny_model, x, z)
    cfg = AttackConfig(beta=0.3)
    za, zba = worst_case_pair(z, zb, tiny_model, y, cfg)
    loss = cross_entropy_loss(tiny_model, y)
    tape = T.Tape()
    assert np.all(loss(tape.constant(za)).data >= loss(tape.constant(z)).data - 1e-9)
    assert np.all(loss(tape.constant(zba)).data <= loss(tape.constant(zb)).data + 1e-9)
    assert np.abs(za - z).max() <= 0.3 + 1e-12 and np.abs(zba - zb).max() <= 0.3 + 1e-12
    same = worst_case_pair(z, zb, tiny_model, y, cfg.with_(beta=0.0))
    assert np.array_equal(same[0], z) and np.array_equal(same[1], zb)


def test_determinism_including_random_start(tiny_model, rng):
    z = rng.standard_normal((8, 4))
    y = rng.integers(0, 2, 8)
    cfg = AttackConfig(norm="2", beta=0.4, random_start=True)
    a = pgd(z, cross_entropy_loss(tiny_model, y), cfg, np.random.default_rng(5))
    b = pgd(z, cross_entropy_loss(tiny_model, y), cfg, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ConfigError):
        pgd(z, cross_entropy_loss(tiny_model, y), cfg)


def test_attack_leaves_parameters_untouched(tiny_model, rng):
    before = {k: v.copy() for k, v in tiny_model.named_params().items()}
    z = rng.standard_normal((8, 4))
    pgd(z, cross_entropy_loss(tiny_model, rng.integers(0, 2, 8)), AttackConfig(beta=1.0))
    for k, v in tiny_model.named_params().items():
        assert np.array_equal(v, before[k])


def test_beta_zero_adv_metrics_equal_clean(trained_base, synth_splits):
    te = synth_splits[2]
    assert adv_metrics(trained_base, te, AttackConfig(beta=0.0)) == clean_metrics(trained_base, te)


@pytest.mark.parametrize("norm", ["inf", "2"])
def test_budget_is_monotone_on_trained_model(trained_base, synth_splits, norm):
    te = synth_splits[2]
    z = representations(trained_base, te)
    accs = [adv_metrics(trained_base, te, AttackConfig(norm=norm, beta=b), z)[1] for b in (0.0, 0.1, 0.3, 0.5)]
    assert all(a >= b for a, b in zip(accs, accs[1:])), accs
    assert accs[-1] <= clean_metrics(trained_base, te)[1]
