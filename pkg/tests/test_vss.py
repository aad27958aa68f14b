import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmsr import tensor as T
from gmsr import vss as V
from gmsr.params import init_params, sub
from gmsr.scan import ScanParams
from gmsr.tensor import Tensor

import oracles


def scan_set(e, n, seed):
    rng = np.random.default_rng(seed)
    routes = []
    for _ in V.ROUTES:
        p = ScanParams.init(e, n, rng)
        p.b_delta.data += 1.0
        routes.append(p)
    return V.DirectionalScanSet(tuple(routes))


def as_numpy(scans):
    return {name: {k: getattr(p, k).data for k in ("a_log", "d_skip", "w_delta", "b_delta", "w_b", "w_c")}
            for name, p in zip(V.ROUTES, scans.routes)}


def ss2d_np(u, scans):
    with T.no_grad():
        return V.ss2d(Tensor(u), scans).data


def block_params(cfg, seed=0):
    return init_params(V.vss_specs(cfg), np.random.default_rng(seed))


def test_config_expanded_width():
    assert V.VssConfig(5, expansion=1.5).expanded == 8
    with pytest.raises(ValueError):
        V.VssConfig(3, expansion=0.1)


def test_exactly_four_routes():
    with pytest.raises(ValueError):
        V.DirectionalScanSet(tuple(scan_set(2, 2, 0).routes[:3]))


def test_single_pixel_is_sum_of_closed_forms():
    scans = scan_set(3, 2, 1)
    u = np.random.default_rng(1).uniform(-1, 1, size=(1, 1, 3))
    expected = np.zeros(3)
    for p in scans.routes:
        delta, A, B, C = oracles.scan_coefficients(u[0], p.a_log.data, p.w_delta.data,
                                                   p.b_delta.data, p.w_b.data, p.w_c.data)
        x = u[0, 0]
        expected += (delta[0][:, None] * B[0][None, :] * x[:, None]) @ C[0] + p.d_skip.data * x
    np.testing.assert_allclose(ss2d_np(u, scans)[0, 0], expected, atol=1e-14)


def test_single_row_forward_route_is_plain_scan():
    scans = scan_set(2, 3, 2)
    u = np.random.default_rng(2).uniform(-1, 1, size=(1, 9, 2))
    p = scans.routes[0]
    with T.no_grad():
        got = V.scan_route(Tensor(u), p, "row_forward").data[0]
        ref = V.selective_scan(Tensor(u[0]), p, "sequential").data
    np.testing.assert_array_equal(got, ref)


@pytest.mark.parametrize("H,W", [(3, 3), (7, 5), (2, 6), (1, 1)])
def test_ss2d_matches_explicit_permutations(H, W):
    scans = scan_set(3, 2, H * 10 + W)
    u = np.random.default_rng(H + W).uniform(-1, 1, size=(H, W, 3))
    expected = oracles.ss2d_explicit(u, as_numpy(scans), V.ROUTES)
    assert np.abs(ss2d_np(u, scans) - expected).max() < 1e-10


def test_row_backward_is_forward_on_reversed_input():
    # row_backward traverses the flattened map end to start, i.e. the
    # row_forward order of the map reversed along both H and W
    p = scan_set(2, 2, 3).routes[0]
    u = np.random.default_rng(3).uniform(-1, 1, size=(4, 5, 2))
    with T.no_grad():
        back = V.scan_route(Tensor(u), p, "row_backward").data
        fwd = V.scan_route(Tensor(u[::-1, ::-1].copy()), p, "row_forward").data[::-1, ::-1]
    np.testing.assert_array_equal(back, fwd)


def test_single_row_backward_is_reversal_along_w():
    p = scan_set(2, 2, 4).routes[0]
    u = np.random.default_rng(4).uniform(-1, 1, size=(1, 7, 2))
    with T.no_grad():
        back = V.scan_route(Tensor(u), p, "row_backward").data
        fwd = V.scan_route(Tensor(u[:, ::-1].copy()), p, "row_forward").data[:, ::-1]
    np.testing.assert_array_equal(back, fwd)


def test_route_evaluation_order_invariance():
    scans = scan_set(2, 2, 5)
    u = np.random.default_rng(5).uniform(-1, 1, size=(4, 3, 2))
    with T.no_grad():
        parts = {r: V.scan_route(Tensor(u), p, r).data for r, p in zip(V.ROUTES, scans.routes)}
    fixed = ((parts["row_forward"] + parts["row_backward"]) + parts["col_forward"]) + parts["col_backward"]
    np.testing.assert_array_equal(ss2d_np(u, scans), fixed)
    shuffled = parts["col_backward"] + parts["row_forward"] + parts["col_forward"] + parts["row_backward"]
    assert np.abs(fixed - shuffled).max() < 1e-12


@pytest.mark.parametrize("route", V.ROUTES)
def test_flatten_roundtrip(route):
    u = Tensor(np.random.default_rng(6).normal(size=(3, 4, 2)))
    seq = V.flatten_route(u, route)
    assert seq.shape == (12, 2)
    np.testing.assert_array_equal(V.unflatten_route(seq, route, 3, 4).data, u.data)


def test_block_shape_on_8x8x16():
    cfg = V.VssConfig(16, state_size=4)
    x = Tensor(np.random.default_rng(7).uniform(-1, 1, size=(8, 8, 16)))
    with T.no_grad():
        assert V.vss_block(x, block_params(cfg), cfg).shape == (8, 8, 16)


@given(st.integers(1, 5), st.integers(1, 5))
@settings(max_examples=15, deadline=None)
def test_block_preserves_shape(H, W):
    cfg = V.VssConfig(3, state_size=2)
    x = Tensor(np.random.default_rng(H * 7 + W).uniform(-1, 1, size=(H, W, 3)))
    with T.no_grad():
        assert V.vss_block(x, block_params(cfg), cfg).shape == (H, W, 3)


def test_zero_projection_gives_zero_output():
    cfg = V.VssConfig(4, state_size=2)
    params = block_params(cfg)
    params["out_proj.weight"].data[:] = 0.0
    params["out_proj.bias"].data[:] = 0.0
    x = Tensor(np.random.default_rng(8).uniform(-1, 1, size=(3, 3, 4)))
    with T.no_grad():
        assert not V.vss_block(x, params, cfg).data.any()


def test_channel_mismatch():
    cfg = V.VssConfig(4, state_size=2)
    with pytest.raises(ValueError):
        V.vss_block(Tensor(np.ones((2, 2, 3))), block_params(cfg), cfg)


def test_independent_route_params():
    cfg = V.VssConfig(2, state_size=2)
    params = block_params(cfg)
    a = [sub(params, r)["w_b"].data for r in V.ROUTES]
    assert all(not np.array_equal(a[0], other) for other in a[1:])


def test_block_gradcheck():
    cfg = V.VssConfig(2, state_size=2)
    params = block_params(cfg, seed=9)
    for r in V.ROUTES:
        params[f"{r}.b_delta"].data += 1.0
    x = Tensor(np.random.default_rng(9).uniform(-1, 1, size=(4, 4, 2)), requires_grad=True)
    wrt = [x] + list(params.values())
    err = T.gradcheck(lambda: V.vss_block(x, params, cfg), wrt)
    assert err < 1e-4
