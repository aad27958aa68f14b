import itertools
import json
import struct

import numpy as np
import pytest

from gmsr import model as G
from gmsr import tensor as T
from gmsr.model import CheckpointError, CheckpointMismatchError, GmsrConfig, GmsrNet
from gmsr.params import init_params, sub
from gmsr.tensor import Tensor

from oracles import hand_count

TINY = dict(feature_width=4, num_blocks=1, state_size=2, expansion=2.0)


def rgb(h=8, w=8, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(h, w, 3))


class TestParamCount:
    def test_tiny_config_pre_registered(self):
        # stem 16 + vss 724 + g_spa 99 + fuse 52 + head 155
        assert G.param_count(GmsrConfig(**TINY)) == 1046
        assert hand_count(4, 1, 2, 2, 31) == 1046

    @pytest.mark.parametrize("cf,n,N,cout", [(16, 3, 16, 31), (8, 2, 4, 8), (3, 4, 1, 5)])
    def test_matches_symbolic_count(self, cf, n, N, cout):
        cfg = GmsrConfig(feature_width=cf, num_blocks=n, state_size=N, out_channels=cout)
        assert G.param_count(cfg) == hand_count(cf, n, N, 2.0, cout)

    def test_head_alone(self):
        specs = {s.name: s.size for s in G.param_specs(GmsrConfig(feature_width=16, out_channels=31))}
        assert specs["head.weight"] + specs["head.bias"] == 527

    def test_default_count(self):
        assert G.param_count(GmsrConfig()) == 40728

    def test_breakdown_sums_to_total(self):
        cfg = GmsrConfig(**TINY)
        bd = G.param_breakdown(cfg)
        assert sum(bd.values()) == 1046
        assert bd["stem"] == 16 and bd["head"] == 155
        assert bd["blocks.0.vss"] == 724 and bd["blocks.0.g_spa"] == 99 and bd["blocks.0.fuse"] == 52

    def test_invariant_to_spatial_size(self):
        m = GmsrNet(GmsrConfig(**TINY))
        with T.no_grad():
            m.predict(rgb(4, 4))
            m.predict(rgb(9, 6))
        assert m.param_count() == 1046

    def test_enabling_a_branch_increases_count(self):
        flags = ("use_vss", "use_g_spa", "use_g_spe")
        base = GmsrConfig(**TINY)
        for bits in itertools.product((False, True), repeat=3):
            if not any(bits):
                continue
            cfg = base.replace(**dict(zip(flags, bits)))
            for flag, on in zip(flags, bits):
                if not on:
                    assert G.param_count(cfg.replace(**{flag: True})) > G.param_count(cfg)

    def test_strictly_increasing_in_blocks(self):
        counts = [G.param_count(GmsrConfig(**{**TINY, "num_blocks": n})) for n in range(1, 6)]
        assert counts == sorted(set(counts))


class TestConfig:
    def test_rejects_no_branches(self):
        with pytest.raises(ValueError):
            GmsrConfig(use_vss=False, use_g_spa=False, use_g_spe=False)

    @pytest.mark.parametrize("kw", [{"num_blocks": 0}, {"feature_width": 0}, {"scan_impl": "x"}])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            GmsrConfig(**kw)

    def test_json_roundtrip(self):
        cfg = GmsrConfig(**TINY, use_g_spe=False)
        assert GmsrConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            GmsrConfig.from_dict({"width": 3})


class TestBlock:
    def make(self, **kw):
        cfg = GmsrConfig(**{**TINY, **kw})
        params = sub(init_params(G.param_specs(cfg), np.random.default_rng(1)), "blocks.0")
        return cfg, params

    def test_zero_fuse_is_identity(self):
        cfg, params = self.make()
        params["fuse.weight"].data[:] = 0
        params["fuse.bias"].data[:] = 0
        f = np.random.default_rng(2).normal(size=(5, 5, 4))
        with T.no_grad():
            np.testing.assert_array_equal(G.gm_block_forward(Tensor(f), params, cfg).data, f)

    def test_vss_only_fuse_shape(self):
        cfg, params = self.make(use_g_spa=False, use_g_spe=False)
        assert params["fuse.weight"].shape == (4, 4)
        assert not any(k.startswith("g_spa") for k in params)

    def test_shape_on_16x16x8(self):
        cfg, params = self.make(feature_width=8)
        f = Tensor(np.random.default_rng(3).normal(size=(16, 16, 8)))
        with T.no_grad():
            assert G.gm_block_forward(f, params, cfg).shape == (16, 16, 8)

    def test_branches_read_same_input(self):
        # spectral-only block: y = fuse(f * spectral_gate(f)) + f
        cfg, params = self.make(use_vss=False, use_g_spa=False)
        from gmsr.attention import spectral_gradient_attention
        f = Tensor(np.random.default_rng(4).normal(size=(3, 3, 4)))
        with T.no_grad():
            got = G.gm_block_forward(f, params, cfg).data
            x3 = spectral_gradient_attention(f).data
        expected = x3 @ params["fuse.weight"].data + params["fuse.bias"].data + f.data
        np.testing.assert_allclose(got, expected, atol=1e-14)

    def test_gradcheck(self):
        cfg, params = self.make()
        for k, v in params.items():
            if k.endswith("b_delta"):
                v.data += 1.0
        # bounded features as in the verify suite: with heavy-tailed inputs some
        # gradients drop below 1e-9, where central-difference round-off nears 1e-4
        f = Tensor(np.random.default_rng(5).uniform(-1, 1, size=(4, 4, 4)), requires_grad=True)
        err = T.gradcheck(lambda: G.gm_block_forward(f, params, cfg), [f] + list(params.values()),
                          max_per_tensor=12)
        assert err < 1e-4


class TestNetwork:
    def test_default_output_shape(self):
        with T.no_grad():
            out = GmsrNet(GmsrConfig(state_size=4)).predict(rgb(32, 32))
        assert out.shape == (32, 32, 31)

    def test_bit_identical_reruns(self):
        a = GmsrNet(GmsrConfig(**TINY, seed=5)).predict(rgb(seed=1))
        b = GmsrNet(GmsrConfig(**TINY, seed=5)).predict(rgb(seed=1))
        assert a.tobytes() == b.tobytes()

    def test_trunk_identity_when_fuse_zeroed(self):
        cfg = GmsrConfig(**{**TINY, "num_blocks": 3})
        m = GmsrNet(cfg)
        for k, v in m.params.items():
            if ".fuse." in k:
                v.data[:] = 0
        x = rgb(seed=2)
        stem = x @ m.params["stem.weight"].data + m.params["stem.bias"].data
        expected = stem @ m.params["head.weight"].data + m.params["head.bias"].data
        np.testing.assert_array_equal(m.predict(x), expected)

    def test_finite_at_depth_8(self):
        out = GmsrNet(GmsrConfig(**{**TINY, "num_blocks": 8})).predict(rgb(6, 6, seed=3))
        assert np.all(np.isfinite(out))

    def test_rejects_wrong_input_channels(self):
        with pytest.raises(ValueError):
            GmsrNet(GmsrConfig(**TINY)).predict(np.zeros((4, 4, 2)))

    def test_end_to_end_gradcheck(self):
        m = GmsrNet(GmsrConfig(**TINY, out_channels=5, seed=3))
        x = Tensor(rgb(8, 8, seed=4), requires_grad=True)
        err = T.gradcheck(lambda: m(x), [x] + list(m.params.values()), max_per_tensor=6)
        assert err < 1e-4


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        m = GmsrNet(GmsrConfig(**TINY, seed=9))
        G.save_checkpoint(m, tmp_path / "a.gmsr")
        back = G.load_checkpoint(tmp_path / "a.gmsr")
        assert back.config == m.config
        assert back.flat_params().tobytes() == m.flat_params().tobytes()
        G.save_checkpoint(back, tmp_path / "b.gmsr")
        assert (tmp_path / "a.gmsr").read_bytes() == (tmp_path / "b.gmsr").read_bytes()

    def test_layout(self, tmp_path):
        m = GmsrNet(GmsrConfig(**TINY))
        G.save_checkpoint(m, tmp_path / "c.gmsr")
        raw = (tmp_path / "c.gmsr").read_bytes()
        assert raw[:4] == b"GMSR"
        version, clen = struct.unpack_from("<II", raw, 4)
        assert version == 1
        assert json.loads(raw[12:12 + clen]) == json.loads(m.config.to_json())
        (n,) = struct.unpack_from("<Q", raw, 12 + clen)
        assert n == 1046 and len(raw) == 20 + clen + 8 * n
        first = struct.unpack_from("<d", raw, 20 + clen)[0]
        assert first == m.params["stem.weight"].data.reshape(-1)[0]

    def test_mismatch_names_counts(self, tmp_path):
        G.save_checkpoint(GmsrNet(GmsrConfig(**TINY)), tmp_path / "d.gmsr")
        with pytest.raises(CheckpointMismatchError) as info:
            G.load_checkpoint(tmp_path / "d.gmsr", expected=GmsrConfig(**{**TINY, "num_blocks": 2}))
        assert info.value.actual == 1046
        assert str(G.param_count(GmsrConfig(**{**TINY, "num_blocks": 2}))) in str(info.value)
        assert "1046" in str(info.value)

    @pytest.mark.parametrize("mutate", ["magic", "truncate", "version"])
    def test_corrupt_files(self, tmp_path, mutate):
        path = tmp_path / "e.gmsr"
        G.save_checkpoint(GmsrNet(GmsrConfig(**TINY)), path)
        raw = bytearray(path.read_bytes())
        if mutate == "magic":
            raw[:4] = b"XXXX"
        elif mutate == "truncate":
            raw = raw[:-9]
        else:
            raw[4:8] = struct.pack("<I", 7)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            G.load_checkpoint(path)
