"""Self-check suite behind ``gmsr verify``.

Each check is named ``module/op`` and returns ``(ok, detail)``. Ops are looked
up through their modules at call time so a patched op is what gets checked.
"""

from __future__ import annotations

import math
import tempfile
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import attention as A
from . import data as D
from . import metrics as M
from . import model as G
from . import scan as S
from . import tensor as T
from . import train as TR
from . import vss as V
from .params import init_params, sub

GRAD_TOL = 1e-4
SCAN_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def grad_error(build: Callable[..., T.Tensor], inputs: list[T.Tensor],
               max_per_tensor: int | None = None) -> float:
    return T.gradcheck(lambda: build(*inputs), inputs, max_per_tensor=max_per_tensor)


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _grad_check(build, make_inputs, max_per_tensor=None):
    def check():
        rng = np.random.default_rng(0)
        err = grad_error(build, make_inputs(rng), max_per_tensor)
        return err < GRAD_TOL, f"max rel err {err:.2e}"
    return check


def tiny_config(**kw) -> G.GmsrConfig:
    base = dict(feature_width=4, num_blocks=1, state_size=2, expansion=2.0, out_channels=5, seed=3)
    base.update(kw)
    return G.GmsrConfig(**base)


def _scan_params(rng, d, n):
    p = S.ScanParams.init(d, n, rng)
    p.b_delta.data += 1.0   # larger steps make the recurrence non-trivial
    return p


# ---------------------------------------------------------------- checks


def _scan_equivalence():
    rng = np.random.default_rng(1)
    worst = 0.0
    for L in (1, 2, 3, 7, 64, 100, 257, 1024):
        p = _scan_params(rng, 3, 4)
        x = T.Tensor(rng.uniform(-1, 1, size=(L, 3)))
        with T.no_grad():
            worst = max(worst, float(np.abs(S.scan_parallel(x, p).data
                                            - S.scan_sequential(x, p).data).max()))
    return worst < SCAN_TOL, f"max abs diff {worst:.2e}"


def _scan_associativity():
    rng = np.random.default_rng(2)
    e = [(rng.uniform(0, 1, 5), rng.normal(size=5)) for _ in range(3)]
    l = S.combine(S.combine(e[0], e[1]), e[2])
    r = S.combine(e[0], S.combine(e[1], e[2]))
    err = max(np.abs(l[0] - r[0]).max(), np.abs(l[1] - r[1]).max())
    return err < 1e-12, f"max diff {err:.2e}"


def ss2d_oracle(u: np.ndarray, scans: V.DirectionalScanSet) -> np.ndarray:
    """Materialize each route's token order explicitly, scan, scatter back, sum."""
    H, W, E = u.shape
    orders = {
        "row_forward": [(h, w) for h in range(H) for w in range(W)],
        "col_forward": [(h, w) for w in range(W) for h in range(H)],
    }
    orders["row_backward"] = orders["row_forward"][::-1]
    orders["col_backward"] = orders["col_forward"][::-1]
    out = np.zeros_like(u)
    for route, params in zip(V.ROUTES, scans.routes):
        order = orders[route]
        seq = np.stack([u[h, w] for h, w in order])
        with T.no_grad():
            y = S.scan_sequential(T.Tensor(seq), params).data
        part = np.zeros_like(u)
        for (h, w), row in zip(order, y):
            part[h, w] = row
        out = out + part
    return out


def _ss2d_vs_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for H, W in ((3, 3), (7, 5), (1, 4), (1, 1)):
        scans = V.DirectionalScanSet(tuple(_scan_params(rng, 3, 2) for _ in V.ROUTES))
        u = rng.uniform(-1, 1, size=(H, W, 3))
        with T.no_grad():
            got = V.ss2d(T.Tensor(u), scans).data
        worst = max(worst, float(np.abs(got - ss2d_oracle(u, scans)).max()))
    return worst < SCAN_TOL, f"max abs diff {worst:.2e}"


def _attention_algebra():
    f = np.broadcast_to(np.arange(5.0)[None, :, None], (4, 5, 2)).copy()
    maps = A.spatial_gradient_maps(T.Tensor(f))
    gx_ok = np.array_equal(maps.g_x.data[:, :-1], np.ones((4, 4, 2))) and not maps.g_x.data[:, -1].any()
    gy_ok = not maps.g_y.data.any()
    cube = np.broadcast_to(np.arange(6.0), (3, 3, 6)).copy()
    sg = A.spectral_gradient_map(T.Tensor(cube), normalize=False)
    spe_ok = np.array_equal(sg.g_comp.data, np.ones((3, 3, 6)))
    rng = np.random.default_rng(5)
    dup_ok = True
    for _ in range(20):
        g = A.spectral_gradient_map(T.Tensor(rng.normal(size=(3, 4, 5)))).g_comp.data
        dup_ok &= g.shape[2] == 5 and np.array_equal(g[..., 4], g[..., 3])
    ok = gx_ok and gy_ok and spe_ok and dup_ok
    return ok, f"g_x {gx_ok} g_y {gy_ok} spectral {spe_ok} duplication {dup_ok}"


def _attention_bounds():
    rng = np.random.default_rng(6)
    params = init_params(A.spatial_attention_specs(), rng)
    ok = True
    for _ in range(50):
        f = rng.normal(size=(5, 4, 3)) * rng.uniform(0.1, 10)
        with T.no_grad():
            for fn in (lambda t: A.spatial_gradient_attention(t, params),
                       A.spectral_gradient_attention):
                ok &= bool(np.all(np.abs(fn(T.Tensor(f)).data) <= np.abs(f)))
    return ok, "|out| <= |in|" if ok else "attention amplified its input"


def _param_count_tiny():
    cfg = G.GmsrConfig(feature_width=4, num_blocks=1, state_size=2, expansion=2.0)
    got = G.param_count(cfg)
    return got == 1046, f"count {got} (expected 1046)"


def _residual_identity():
    cfg = tiny_config(num_blocks=2)
    net = G.GmsrNet(cfg)
    for k, p in net.params.items():
        if ".fuse." in k:
            p.data[:] = 0.0
    f = np.random.default_rng(7).uniform(size=(4, 4, cfg.feature_width))
    with T.no_grad():
        out = T.Tensor(f)
        for i in range(cfg.num_blocks):
            out = G.gm_block_forward(out, sub(net.params, f"blocks.{i}"), cfg)
    return np.array_equal(out.data, f), "trunk is identity with zero fuse"


def _lr_schedule():
    s = TR.LrSchedule(100)
    vals = [TR.lr_at(t, s) for t in range(101)]
    ok = (vals[0] == 1e-4 and vals[-1] == 0.0 and all(a >= b for a, b in zip(vals, vals[1:]))
          and abs(TR.lr_at(50, s) - 1e-4 * 0.5 ** 1.5) < 1e-18)
    return ok, f"lr(0)={vals[0]} lr(T)={vals[-1]}"


def _adam_scalar():
    p = {"x": T.Tensor(0.0)}
    st = TR.OptimState()
    for _ in range(100):
        g = -1.0 if p["x"].data < 3 else (1.0 if p["x"].data > 3 else 0.0)
        TR.adam_step(p, {"x": np.array(g)}, st, 0.1)
    x = float(p["x"].data)
    return abs(x - 3) < 0.5, f"x after 100 steps = {x:.4f}"


def _metric_oracles():
    rng = np.random.default_rng(8)
    z, r = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    diffs = [(z[i, j, c] - r[i, j, c]) ** 2 for i in range(4) for j in range(4) for c in range(3)]
    mse = sum(diffs) / len(diffs)
    ok = abs(M.rmse(z, r) - math.sqrt(mse)) < 1e-12
    ok &= abs(M.psnr(z, r) - 10 * math.log10(1 / mse)) < 1e-12
    ok &= M.assim(r, r) == 1.0
    ok &= abs(M.sam(z * 2.5, r) - M.sam(z, r)) < 1e-10
    return bool(ok), "rmse/psnr/assim/sam"


def _cube_roundtrip():
    rng = np.random.default_rng(9)
    cube = D.HsiCube(rng.uniform(size=(5, 4, 3)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "c.hsc"
        D.cube_write(cube, path)
        back = D.cube_read(path)
        size_ok = path.stat().st_size == 16 + 4 * 3 + 4 * 60
    return back == cube and size_ok, "HSC1 round trip"


def _checkpoint_roundtrip():
    net = G.GmsrNet(tiny_config())
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.gmsr"
        G.save_checkpoint(net, path)
        back = G.load_checkpoint(path)
    return (back.config == net.config
            and np.array_equal(back.flat_params(), net.flat_params())), "checkpoint round trip"


def _layernorm_inputs(rng):
    return [_rand(rng, 3, 2, 6), _rand(rng, 6, lo=0.5, hi=1.5), _rand(rng, 6)]


def _vss_inputs(cfg):
    def make(rng):
        params = init_params(V.vss_specs(cfg), rng)
        for k, p in params.items():
            if k.endswith("b_delta"):
                p.data += 1.0
        return [_rand(rng, 4, 4, cfg.channels)] + list(params.values())
    return make


def _vss_build(cfg):
    names = [s.name for s in V.vss_specs(cfg)]

    def build(x, *ps):
        return V.vss_block(x, dict(zip(names, ps)), cfg)
    return build


def _model_check(max_per_tensor):
    def check():
        cfg = tiny_config()
        net = G.GmsrNet(cfg)
        rgb = T.Tensor(np.random.default_rng(10).uniform(size=(8, 8, 3)), requires_grad=True)
        ps = list(net.params.values())
        err = T.gradcheck(lambda: net(rgb), [rgb] + ps,
                          max_per_tensor=max_per_tensor)
        return err < GRAD_TOL, f"max rel err {err:.2e}"
    return check


def _gm_block_check():
    cfg = tiny_config()
    specs = G.gm_block_specs(cfg)
    names = [s.name for s in specs]

    def make(rng):
        params = init_params(specs, rng)
        return [_rand(rng, 4, 4, cfg.feature_width)] + list(params.values())

    def build(f, *ps):
        return G.gm_block_forward(f, dict(zip(names, ps)), cfg)
    return _grad_check(build, make, max_per_tensor=6)()


def default_checks() -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    vcfg = V.VssConfig(channels=2, expansion=2.0, state_size=2)
    spa_names = [s.name for s in A.spatial_attention_specs()]
    checks = [
        ("tensor-core/add", _grad_check(lambda a, b: T.add(a, b), lambda r: [_rand(r, 3, 4), _rand(r, 4)])),
        ("tensor-core/hadamard", _grad_check(lambda a, b: T.mul(a, b), lambda r: [_rand(r, 3, 4), _rand(r, 3, 4)])),
        ("tensor-core/div", _grad_check(lambda a, b: T.div(a, b), lambda r: [_rand(r, 3), _rand(r, 3, lo=1, hi=2)])),
        ("tensor-core/sigmoid", _grad_check(lambda a: T.sigmoid(a), lambda r: [_rand(r, 5, lo=-4, hi=4)])),
        ("tensor-core/silu", _grad_check(lambda a: T.silu(a), lambda r: [_rand(r, 5, lo=-4, hi=4)])),
        ("tensor-core/softplus", _grad_check(lambda a: T.softplus(a), lambda r: [_rand(r, 5, lo=-4, hi=4)])),
        ("tensor-core/exp", _grad_check(lambda a: T.texp(a), lambda r: [_rand(r, 5)])),
        ("tensor-core/abs", _grad_check(lambda a: T.tabs(a), lambda r: [_rand(r, 5, lo=0.1, hi=1)])),
        ("tensor-core/linear", _grad_check(lambda x, w, b: T.linear(x, w, b),
                                           lambda r: [_rand(r, 2, 3, 4), _rand(r, 4, 5), _rand(r, 5)])),
        ("tensor-core/conv2d_pointwise", _grad_check(lambda x, w, b: T.conv2d(x, w, b, "pointwise"),
                                                     lambda r: [_rand(r, 3, 4, 2), _rand(r, 2, 3), _rand(r, 3)])),
        ("tensor-core/conv2d_depthwise", _grad_check(lambda x, w, b: T.conv2d(x, w, b, "depthwise"),
                                                     lambda r: [_rand(r, 4, 5, 3), _rand(r, 3, 3, 3), _rand(r, 3)])),
        ("tensor-core/conv2d_dense", _grad_check(lambda x, w, b: T.conv2d(x, w, b, "dense"),
                                                 lambda r: [_rand(r, 5, 4, 2), _rand(r, 7, 7, 2, 1), _rand(r, 1)])),
        ("tensor-core/layernorm", _grad_check(lambda x, g, b: T.layernorm(x, g, b), _layernorm_inputs)),
        ("tensor-core/reduce_pool", _grad_check(
            lambda x: T.concat([T.reshape(T.reduce_pool(x, "channel", "max"), (12,)),
                                T.reshape(T.reduce_pool(x, "channel", "avg"), (12,)),
                                T.reshape(T.reduce_pool(x, "spatial", "max"), (5,)),
                                T.reshape(T.reduce_pool(x, "spatial", "avg"), (5,))], axis=0),
            lambda r: [_rand(r, 3, 4, 5)])),
        ("tensor-core/concat", _grad_check(lambda a, b: T.concat([a, b], axis=2),
                                           lambda r: [_rand(r, 2, 2, 3), _rand(r, 2, 2, 1)])),
        ("tensor-core/slice", _grad_check(lambda a: T.slice_axis(a, 1, 1, 3), lambda r: [_rand(r, 2, 4, 2)])),
        ("tensor-core/transpose_flip_reshape", _grad_check(
            lambda a: T.reshape(T.flip(T.transpose(a, (1, 0, 2)), 0), (-1,)), lambda r: [_rand(r, 2, 3, 2)])),
        ("selective-scan/associativity", _scan_associativity),
        ("selective-scan/scan_parallel", _scan_equivalence),
        ("selective-scan/gradient", _grad_check(
            lambda x, *ps: S.scan_parallel(x, S.ScanParams(*ps)),
            lambda r: [_rand(r, 9, 3)] + _scan_params(r, 3, 4).tensors())),
        ("selective-scan/gradient_sequential", _grad_check(
            lambda x, *ps: S.scan_sequential(x, S.ScanParams(*ps)),
            lambda r: [_rand(r, 6, 2)] + _scan_params(r, 2, 3).tensors())),
        ("vss/ss2d", _ss2d_vs_oracle),
        ("vss/vss_block", _grad_check(_vss_build(vcfg), _vss_inputs(vcfg))),
        ("gradient-attention/algebra", _attention_algebra),
        ("gradient-attention/bounds", _attention_bounds),
        ("gradient-attention/spatial_gradient_attention", _grad_check(
            lambda f, w, b: A.spatial_gradient_attention(f, dict(zip(spa_names, (w, b)))),
            lambda r: [_rand(r, 4, 5, 3), _rand(r, 7, 7, 2, 1), _rand(r, 1)])),
        ("gradient-attention/spectral_gradient_attention", _grad_check(
            A.spectral_gradient_attention, lambda r: [_rand(r, 3, 4, 5)])),
        ("gmsr-model/gm_block", _gm_block_check),
        ("gmsr-model/gmsr_forward", _model_check(max_per_tensor=3)),
        ("gmsr-model/param_count", _param_count_tiny),
        ("gmsr-model/residual_identity", _residual_identity),
        ("gmsr-model/checkpoint", _checkpoint_roundtrip),
        ("train-engine/l1_loss", _grad_check(lambda z, r: TR.l1_loss(z, r),
                                             lambda r: [_rand(r, 2, 2, 3), _rand(r, 2, 2, 3, lo=2, hi=3)])),
        ("train-engine/lr_at", _lr_schedule),
        ("train-engine/adam_step", _adam_scalar),
        ("metrics/oracles", _metric_oracles),
        ("data-io/cube_roundtrip", _cube_roundtrip),
    ]
    return checks


def run_checks(checks=None) -> list[CheckResult]:
    results = []
    for name, fn in checks if checks is not None else default_checks():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
        results.append(CheckResult(name, bool(ok), detail))
    return results
