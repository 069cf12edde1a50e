from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sliceloop.datagen.generator import generate
from sliceloop.datagen.params import Harmonic, SimulationParams, TrafficParams, to_vector
from sliceloop.errors import DimensionMismatch, NonFiniteLoss, SchemaMismatch, WeightSumMismatch
from sliceloop.fedcal import (
    ClientState,
    FLConfig,
    ThetaSpace,
    calibrate,
    calibrate_params,
    clip,
    discrepancy,
    dp_noise,
    emulate_real,
    fedavg,
    feature_scale,
    local_gradient,
    mean_squared_distance,
    partition_clients,
    read_history,
    run_round,
    write_history,
    write_theta_trace,
)
from sliceloop.numerics import RngStream

SMALL = replace(SimulationParams(), n_users=20)


class QuadClient:
    """Test double: delta(theta) = ||theta - c||^2."""

    def __init__(self, c, n=1, client_id=0):
        self.c = np.asarray(c, float)
        self.n_cl = n
        self.client_id = client_id


def quad(theta, client):
    return float(np.sum((np.asarray(theta) - client.c) ** 2))


# -- emulation ----------------------------------------------------------------------

def test_emulate_zero_fraction(small_ds):
    out = emulate_real(small_ds, 0.0, RngStream(1))
    np.testing.assert_array_equal(out.features(), small_ds.features())
    assert out.metadata["provenance_log"][-1]["event"] == "emulate_real"


def test_emulate_default_fraction(full_ds):
    out = emulate_real(full_ds, 0.15, RngStream(1))
    changed = out["snr_db"] != full_ds["snr_db"]
    assert changed.sum() == 1500
    assert np.all(out["snr_db"][changed] < full_ds["snr_db"][changed])
    for f in ("pos_x_m", "pos_y_m", "speed_mps", "traffic_load_pps", "label", "group"):
        np.testing.assert_array_equal(out[f], full_ds[f])


# -- discrepancy --------------------------------------------------------------------

def _clients(theta, n=2000, seed=3, n_clients=5):
    rng = RngStream(seed, "dgl")
    real = generate(theta, n, rng)
    return real, partition_clients(real, n_clients, rng, theta)


def test_partition_round_robin():
    real, clients = _clients(SMALL)
    assert [c.client_id for c in clients] == list(range(5))
    assert sum(c.n_cl for c in clients) == len(real)
    for c in clients:
        assert np.all(c.real_samples["user_id"] % 5 == c.client_id)


def test_discrepancy_zero_at_truth():
    _, clients = _clients(SMALL)
    for c in clients:
        assert discrepancy(to_vector(SMALL), c) == 0.0


def test_discrepancy_arithmetic():
    assert mean_squared_distance([1, 2], [0, 0]) == 2.5
    assert mean_squared_distance([[1, 1], [0, 2]], [[0, 0], [0, 0]]) == 3.0
    with pytest.raises(SchemaMismatch):
        mean_squared_distance([1, 2], [1, 2, 3])


def test_discrepancy_order_invariant():
    _, clients = _clients(SMALL)
    c = clients[1]
    theta = to_vector(replace(SMALL, channel=replace(SMALL.channel, shadowing_sigma_db=6.0)))
    perm = np.random.default_rng(0).permutation(c.n_cl)
    shuffled = ClientState(c.client_id, c.real_samples.take(perm), c.rng, c.template)
    assert discrepancy(theta, shuffled) == pytest.approx(discrepancy(theta, c), rel=1e-12)
    assert discrepancy(theta, c) > 0


def test_discrepancy_schema_mismatch():
    _, clients = _clients(SMALL)
    c = clients[0]
    alien = c.real_samples.replace_columns(window=c.real_samples["window"] + 10_000)
    with pytest.raises(SchemaMismatch):
        discrepancy(to_vector(SMALL), ClientState(0, alien, c.rng, c.template))


# -- gradients ------------------------------------------------------------------------

def test_gradient_quadratic_double():
    c = QuadClient([1.0, -2.0, 0.5])
    theta = np.array([0.3, 0.7, -1.1])
    g = local_gradient(theta, c, 1e-3, quad)
    np.testing.assert_allclose(g, 2 * (theta - c.c), rtol=1e-6)


def test_gradient_richardson_order():
    f = lambda th, _: float(np.sin(3 * th[0]) * np.exp(th[1]))  # noqa: E731
    theta = np.array([0.4, -0.2])
    g = [local_gradient(theta, None, h, f) for h in (1e-2, 5e-3, 2.5e-3)]
    # central differences: error ~ C h^2, so successive gaps shrink by 4
    ratio = (g[0] - g[1]) / (g[1] - g[2])
    np.testing.assert_allclose(ratio, 4.0, rtol=0.02)


def test_gradient_flat_phase_direction():
    theta = replace(SMALL, traffic=TrafficParams(5.0, (Harmonic(0.0, 0.01, 0.3),)))
    real = generate(theta, 600, RngStream(2, "dgl"))
    client = partition_clients(real, 3, RngStream(2, "dgl"), theta)[0]
    space = ThetaSpace.for_params(theta)
    u = space.to_unit(to_vector(theta))
    g = local_gradient(u, client, 1e-3, lambda v, c: discrepancy(space.to_theta(v), c))
    assert abs(g[space.names.index("phi_1")]) < 1e-9


def test_gradient_non_finite():
    with pytest.raises(NonFiniteLoss):
        local_gradient(np.zeros(2), None, 1e-3, lambda th, _: float("nan"))


# -- privacy and aggregation ------------------------------------------------------------

def test_dp_noise_examples():
    g = np.array([0.3, -0.4])
    np.testing.assert_array_equal(dp_noise(g, 1.0, 0.0, RngStream(1)), g)
    np.testing.assert_allclose(dp_noise(np.array([6.0, 8.0]), 1.0, 0.0, RngStream(1)), [0.6, 0.8])
    draws = np.array([dp_noise(np.zeros(3), 1.0, 1.0, RngStream(i, "dp")) for i in range(10_000)])
    assert np.all((draws.std(axis=0) >= 0.95) & (draws.std(axis=0) <= 1.05))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e6, 1e6)),
       st.floats(1e-3, 1e3))
def test_clip_bound(g, c):
    assert np.linalg.norm(clip(g, c)) <= c * (1 + 1e-12)


def test_fedavg_examples():
    np.testing.assert_array_equal(fedavg([(4, np.array([1.0, 2.0]))], 4), [1.0, 2.0])
    np.testing.assert_allclose(fedavg([(1, np.array([0.0])), (3, np.array([4.0]))], 4), [3.0])
    np.testing.assert_allclose(fedavg([(2, np.array([2.0])), (2, np.array([4.0]))], 4), [3.0])
    with pytest.raises(DimensionMismatch):
        fedavg([(1, np.zeros(2)), (1, np.zeros(3))], 2)
    with pytest.raises(WeightSumMismatch):
        fedavg([(1, np.zeros(2)), (1, np.zeros(2))], 5)


# -- rounds -----------------------------------------------------------------------------

def test_round_reduces_to_gradient_descent():
    cfg = FLConfig(n_rounds=1, learning_rate=0.1, dp_sigma=0.0, clip_norm=1e9)
    c = QuadClient([1.0, 2.0])
    u = np.array([0.0, 0.0])
    state, ledger = run_round(u, [c], cfg, RngStream(1), loss=quad)
    np.testing.assert_allclose(state.theta_next, u - 0.1 * 2 * (u - c.c), rtol=1e-6)
    assert ledger.rounds_applied == 1


def test_round_update_identity():
    cfg = FLConfig(learning_rate=0.37, dp_sigma=1.0)
    clients = [QuadClient([1.0, 2.0], 3, 0), QuadClient([-1.0, 0.5], 5, 1)]
    state, _ = run_round(np.array([0.2, 0.1]), clients, cfg, RngStream(2), loss=quad)
    np.testing.assert_array_equal(state.theta_step,
                                  state.theta - cfg.learning_rate * state.aggregated_g)
    np.testing.assert_allclose(state.theta_step - state.theta + cfg.learning_rate * state.aggregated_g,
                               0.0, atol=1e-15)
    assert [c.client_id for c in state.per_client] == [0, 1]


def test_calibrate_zero_rounds():
    theta, hist = calibrate(np.array([1.0, 2.0]), [QuadClient([0, 0])], FLConfig(n_rounds=0),
                            RngStream(1), loss=quad)
    np.testing.assert_array_equal(theta, [1.0, 2.0])
    assert hist == ()


def test_calibrate_quadratic_monotone():
    cfg = FLConfig(n_rounds=10, learning_rate=0.2, dp_sigma=0.0, clip_norm=1e9)
    clients = [QuadClient([1.0, -1.0], 2, 0), QuadClient([3.0, 1.0], 2, 1)]
    res = calibrate(np.array([5.0, 5.0]), clients, cfg, RngStream(1), loss=quad)
    deltas = [s.mean_delta for s in res.history]
    assert all(b <= a for a, b in zip(deltas, deltas[1:]))
    assert len(res.history) == 10 and res.ledger.rounds_applied == 10


def test_privacy_ledger_note():
    res = calibrate(np.zeros(1), [QuadClient([1.0])], FLConfig(n_rounds=3), RngStream(1), loss=quad)
    d = res.ledger.to_dict()
    assert d["rounds_applied"] == 3 and d["dp_sigma"] == 1.0 and "out of scope" in d["note"]


def test_fedavg_equals_pooled_gradient_real_simulator(full_ds):
    theta = SimulationParams()
    rng = RngStream(5, "fixture")
    real = emulate_real(full_ds, 0.15, RngStream(5, "emulate"))
    scale = feature_scale(real)
    shards = partition_clients(real, 5, rng, theta, scale=scale)
    assert len({c.n_cl for c in shards}) == 1
    pooled = ClientState(0, real, rng, theta, scale)
    space = ThetaSpace.for_params(theta, ("pathloss_exponent", "shadowing_sigma_db"))
    loss = lambda th, c: discrepancy(space.full(th), c)  # noqa: E731
    u = space.to_unit(space.select(to_vector(theta))) + 0.01
    cfg = FLConfig(dp_sigma=0.0, clip_norm=1e9)
    state, _ = run_round(u, shards, cfg, RngStream(1), space=space, loss=loss)
    unit_loss = lambda v, c: loss(space.to_theta(v), c)  # noqa: E731
    pooled_g = local_gradient(u, pooled, cfg.fd_step, unit_loss)
    np.testing.assert_allclose(state.aggregated_g, pooled_g, rtol=0, atol=1e-10)


def test_calibrate_params_moves_toward_truth_and_replays(tmp_path):
    truth = replace(SMALL, channel=replace(SMALL.channel, shadowing_sigma_db=6.0))
    _, clients = _clients(truth, n=1000)
    cfg = FLConfig(n_rounds=3, dp_sigma=0.0)
    start = SMALL
    p1, r1 = calibrate_params(start, clients, cfg, RngStream(4))
    p2, r2 = calibrate_params(start, clients, cfg, RngStream(4))
    assert p1 == p2
    np.testing.assert_array_equal(r1.theta_trace(), r2.theta_trace())
    assert abs(p1.channel.shadowing_sigma_db - 6.0) < abs(start.channel.shadowing_sigma_db - 6.0)
    # untouched coordinates keep their values
    assert p1.traffic == start.traffic and p1.mobility == start.mobility
    h = write_history(r1, tmp_path / "h.jsonl")
    rows = read_history(h)
    assert [r["round"] for r in rows] == [0, 1, 2]
    trace = write_theta_trace(r1, tmp_path / "t.csv").read_text().splitlines()
    assert trace[0] == "round,pathloss_exponent,shadowing_sigma_db" and len(trace) == 5


def test_flconfig_validation_and_round_trip():
    cfg = FLConfig()
    assert (cfg.n_clients, cfg.n_rounds, cfg.dp_sigma) == (5, 10, 1.0)
    assert FLConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FLConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        FLConfig(dp_sigma=-1.0)
