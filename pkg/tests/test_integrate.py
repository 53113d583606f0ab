from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delta_lfm.flow import FlowConfig, init_velocity_net
from delta_lfm.integrate import (
    IntegrationError,
    euler_integrate,
    integrate_latent,
    predict_followup,
    predict_trajectory,
    time_grid,
)
from delta_lfm.latent import AEConfig, decode_batch, encode_batch, init_autoencoder


def test_constant_field():
    z = euler_integrate(lambda z, t: np.full_like(z, 2.0), np.ones(3), 0.0, 3.0, 0.1)
    np.testing.assert_allclose(z, 7.0, atol=1e-12)


def test_linear_field_matches_discrete_compounding():
    z = euler_integrate(lambda z, t: z, np.array([1.0]), 0.0, 1.0, 0.01)
    assert abs(z[0] - 1.01**100) < 1e-9


def test_first_order_convergence():
    errs = []
    for dt in (0.02, 0.01, 0.005):
        z = euler_integrate(lambda z, t: z, np.array([1.0]), 0.0, 1.0, dt)
        errs.append(abs(z[0] - np.e))
    for a, b in zip(errs, errs[1:]):
        assert 1.8 <= a / b <= 2.2


def test_time_grid_shrinks_last_step_and_splices_marks():
    g = time_grid(0.0, 1.05, 0.1)
    assert len(g) == 12
    assert g[-1] == 1.05
    assert g[-1] - g[-2] == pytest.approx(0.05)
    g = time_grid(0.0, 1.0, 0.25, marks=[0.5, 0.6])
    np.testing.assert_allclose(g, [0.0, 0.25, 0.5, 0.6, 0.75, 1.0])
    assert len(time_grid(0.0, 1.0, 0.1, marks=[0.3 + 1e-12])) == 11
    assert len(time_grid(70.0, 70.5, 0.5)) == 2
    for bad in [(1.0, 1.0, 0.1, ()), (0.0, 1.0, 0.0, ()), (0.0, 1.0, 0.1, (1.5,))]:
        with pytest.raises(ValueError):
            time_grid(*bad)


@given(span=st.floats(0.05, 20), dt=st.floats(0.01, 1.0))
def test_time_grid_properties(span, dt):
    g = time_grid(0.0, span, dt)
    h = np.diff(g)
    assert g[0] == 0.0 and g[-1] == span
    assert np.all(h > 0)
    assert np.all(h <= dt + 1e-9)


def test_snapshots_are_intermediate_states():
    f = lambda z, t: np.cos(t) * z
    z, snaps = euler_integrate(f, np.ones(2), 0.0, 2.0, 0.1, snapshots=[0.5, 2.0])
    np.testing.assert_array_equal(snaps[1], z)
    head = euler_integrate(f, np.ones(2), 0.0, 0.5, 0.1)
    np.testing.assert_allclose(snaps[0], head, atol=1e-14)


def test_time_additivity_on_shared_grid():
    f = lambda z, t: np.sin(z) + 0.1 * t
    full = euler_integrate(f, np.array([0.3, -1.0]), 0.0, 2.0, 0.25)
    mid = euler_integrate(f, np.array([0.3, -1.0]), 0.0, 1.0, 0.25)
    np.testing.assert_allclose(euler_integrate(f, mid, 1.0, 2.0, 0.25), full, atol=1e-14)


def test_non_finite_state_aborts_with_step_index():
    f = lambda z, t: np.full_like(z, np.inf) if t > 0.05 else z
    with pytest.raises(IntegrationError, match="step 1"):
        euler_integrate(f, np.ones(1), 0.0, 1.0, 0.1)


def test_sde_is_seeded():
    f = lambda z, t: -z
    a = euler_integrate(f, np.ones(4), 0.0, 1.0, 0.1, sde_sigma=0.3, rng=np.random.default_rng(5))
    b = euler_integrate(f, np.ones(4), 0.0, 1.0, 0.1, sde_sigma=0.3, rng=np.random.default_rng(5))
    c = euler_integrate(f, np.ones(4), 0.0, 1.0, 0.1, sde_sigma=0.3, rng=np.random.default_rng(6))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# predictions with a small untrained model


@pytest.fixture(scope="module")
def bundle():
    ae = AEConfig(image_size=32, latent_shape=(4, 4), hidden=(32,), seed=0)
    flow = FlowConfig(hidden=16, cond_width=8, embed_dim=4, dt=0.05)
    P = init_velocity_net(16, flow, 0)
    rng = np.random.default_rng(2)
    for k in P:
        if k.startswith("ada") or k == "out.w":
            P[k] = rng.normal(0.0, 0.1, P[k].shape)
    return SimpleNamespace(ae_params=init_autoencoder(ae), flow_params=P, flow_cfg=flow)


def test_single_step_when_target_is_one_dt_away(bundle, tiny_cohort):
    p = tiny_cohort.patients[0]
    v = p.visits[0]
    _, pred = predict_followup(bundle, v, p, v.age + bundle.flow_cfg.dt)
    assert pred.steps == [1]
    with pytest.raises(ValueError):
        predict_followup(bundle, v, p, v.age)


def test_residual_decode_formula(bundle, tiny_cohort):
    p = tiny_cohort.patients[0]
    v = p.visits[0]
    img, pred = predict_followup(bundle, v, p, v.age + 2.0)
    z0 = encode_batch(bundle.ae_params, v.image)[0][0]
    dec = decode_batch(bundle.ae_params, np.stack([pred.latents[0], z0]))
    np.testing.assert_allclose(img, np.clip(v.image + dec[0] - dec[1], 0, 1), atol=1e-12)
    zT = integrate_latent(bundle.flow_params, z0, p, v.age, v.age + 2.0, bundle.flow_cfg)
    np.testing.assert_array_equal(zT, pred.latents[0])


def test_trajectory_snapshots_match_followup(bundle, tiny_cohort):
    p = tiny_cohort.patients[1]
    v = p.visits[0]
    traj = predict_trajectory(bundle, v, p, 9.0, 1.0)
    assert len(traj.images) == 9
    assert traj.query_ages == [v.age + k for k in range(1, 10)]
    assert sum(traj.steps) == 180
    img, _ = predict_followup(bundle, v, p, v.age + 9.0)
    np.testing.assert_allclose(traj.images[-1], img, atol=1e-12)
    partial = predict_trajectory(bundle, v, p, 2.5, 1.0)
    assert partial.query_ages[-1] == v.age + 2.5 and len(partial.images) == 3


def test_reanchored_trajectory_matches_chained_followups(bundle, tiny_cohort):
    from dataclasses import replace

    p = tiny_cohort.patients[1]
    v = p.visits[0]
    b = SimpleNamespace(**{**vars(bundle), "flow_cfg": replace(bundle.flow_cfg, reanchor_segments=True)})
    traj = predict_trajectory(b, v, p, 2.0, 1.0)
    z0 = encode_batch(b.ae_params, v.image)[0][0]
    z1 = integrate_latent(b.flow_params, z0, p, v.age, v.age + 1.0, b.flow_cfg)
    z2 = integrate_latent(b.flow_params, z1, p, v.age + 1.0, v.age + 2.0, b.flow_cfg)
    np.testing.assert_array_equal(traj.latents[1], z2)
