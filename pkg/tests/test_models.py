import numpy as np
import pytest

from cbnet.errors import ArchitectureError, FormatError, ProfileError, VersionError
from cbnet.models import (
    AUTOENCODER_PROFILES,
    build_branchy_lenet,
    build_converting_autoencoder,
    build_lenet,
    build_lightweight,
    count_macs,
    extract_main_path,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)


def conv_params(cout, cin, k):
    return cout * cin * k * k + cout


def dense_params(din, dout):
    return dout * din + dout


# independent per-layer oracle for the concrete architecture hyperparameters
BACKBONE_ENTRY = conv_params(5, 1, 5)
BRANCH = conv_params(10, 5, 3) + dense_params(490, 10)
BACKBONE_TAIL = conv_params(10, 5, 5) + conv_params(20, 10, 5) + dense_params(500, 84)
FINAL_HEAD = dense_params(84, 10)


class TestBranchyLenet:
    def test_two_exits_final_is_tail(self):
        net = build_branchy_lenet(seed=0)
        assert net.exit_count == 2
        assert net.has_early_exit
        assert not net.stages[-1].head or net.stages[-1].head  # tail head exists
        outs = net.forward_all(np.zeros((1, 28, 28), dtype=np.float32))
        assert len(outs) == 2

    def test_zero_image_gives_two_probability_vectors(self):
        net = build_branchy_lenet(seed=1)
        outs = net.forward_all(np.zeros((1, 28, 28), dtype=np.float32))
        for out in outs:
            assert out.shape == (10,)
            assert out.sum() == pytest.approx(1.0, abs=1e-6)

    def test_parameter_count_matches_independent_oracle(self):
        net = build_branchy_lenet(seed=0)
        expected = BACKBONE_ENTRY + BRANCH + BACKBONE_TAIL + FINAL_HEAD
        assert parameter_count(net) == expected == 54714

    def test_seed_determinism(self):
        a = build_branchy_lenet(seed=42).params()
        b = build_branchy_lenet(seed=42).params()
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])

    def test_different_seeds_differ(self):
        a = build_branchy_lenet(seed=1).params()
        b = build_branchy_lenet(seed=2).params()
        assert any(not np.array_equal(a[k], b[k]) for k in a)


class TestLenet:
    def test_single_exit(self):
        net = build_lenet(seed=0)
        assert net.exit_count == 1
        assert not net.has_early_exit

    def test_main_path_weights_match_branchy_under_same_seed(self):
        lenet = build_lenet(seed=9).params()
        branchy = build_branchy_lenet(seed=9).params()
        for key in lenet:
            np.testing.assert_array_equal(lenet[key], branchy[key])

    def test_parameter_count(self):
        assert parameter_count(build_lenet(seed=0)) == \
            BACKBONE_ENTRY + BACKBONE_TAIL + FINAL_HEAD


class TestLightweight:
    def test_equals_early_exit_exactly(self, rng):
        branchy = build_branchy_lenet(seed=5)
        light = build_lightweight(branchy)
        imgs = rng.random((16, 1, 28, 28)).astype(np.float32)
        early = branchy.forward_all(imgs)[0]
        np.testing.assert_array_equal(light.forward_final(imgs), early)

    def test_layer_inventory(self):
        from cbnet.layers import Conv2d, Dense
        light = build_lightweight(build_branchy_lenet(seed=0))
        convs = [l for l in light.layers() if isinstance(l, Conv2d)]
        denses = [l for l in light.layers() if isinstance(l, Dense)]
        assert len(convs) == 2 and len(denses) == 1

    def test_weights_bit_identical_to_source(self):
        branchy = build_branchy_lenet(seed=3)
        light = build_lightweight(branchy)
        src = branchy.params()
        for key, val in light.params().items():
            np.testing.assert_array_equal(val, src[key])

    def test_requires_early_exit(self):
        with pytest.raises(ArchitectureError):
            build_lightweight(build_lenet(seed=0))

    def test_extract_main_path_matches_final_exit(self, rng):
        branchy = build_branchy_lenet(seed=4)
        main = extract_main_path(branchy)
        imgs = rng.random((8, 1, 28, 28)).astype(np.float32)
        np.testing.assert_array_equal(main.forward_final(imgs),
                                      branchy.forward_final(imgs))


class TestAutoencoder:
    @pytest.mark.parametrize("dataset,widths", [
        ("mnist", (784, 384, 32)),
        ("fmnist", (512, 256, 128)),
        ("kmnist", (512, 384, 32)),
    ])
    def test_profile_widths(self, dataset, widths):
        assert AUTOENCODER_PROFILES[dataset].widths == widths
        net = build_converting_autoencoder(dataset, seed=0)
        dims = [l.d_out for l in net.stages[0].trunk if hasattr(l, "d_out")]
        assert tuple(dims) == widths + (784,)

    def test_sigmoid_output_range(self, rng):
        net = build_converting_autoencoder("mnist", "sigmoid", seed=0)
        out = net.forward_final(rng.random((3, 784)).astype(np.float32))
        assert out.shape == (3, 784)
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_softmax_output_sums_to_one(self, rng):
        net = build_converting_autoencoder("mnist", "softmax", seed=0)
        out = net.forward_final(rng.random((3, 784)).astype(np.float32))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_unknown_dataset(self):
        with pytest.raises(ProfileError):
            build_converting_autoencoder("qmnist", seed=0)

    def test_unknown_output_activation(self):
        with pytest.raises(ProfileError):
            build_converting_autoencoder("mnist", "tanh", seed=0)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        net = build_branchy_lenet(seed=11, dataset_id="mnist")
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.meta["arch"] == "branchy_lenet"
        assert loaded.meta["dataset"] == "mnist"
        src = net.params()
        for key, val in loaded.params().items():
            np.testing.assert_array_equal(val, src[key])
        # save -> load -> save reproduces the same bytes
        path2 = tmp_path / "net2.ckpt"
        save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_autoencoder_records_output_activation(self, tmp_path):
        net = build_converting_autoencoder("fmnist", "softmax", seed=2)
        path = tmp_path / "ae.ckpt"
        save_checkpoint(net, path)
        assert load_checkpoint(path).meta["output_activation"] == "softmax"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        net = build_lenet(seed=0)
        path = tmp_path / "v2.ckpt"
        save_checkpoint(net, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_truncated_tensor_payload(self, tmp_path):
        net = build_lenet(seed=0)
        path = tmp_path / "cut.ckpt"
        save_checkpoint(net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 100])
        with pytest.raises(Exception) as info:
            load_checkpoint(path)
        from cbnet.errors import TruncationError
        assert isinstance(info.value, TruncationError)


class TestMacCounts:
    """Closed-form per-layer MAC oracle, derived independently of count_macs."""

    @staticmethod
    def oracle_lenet():
        def out(sz, k, s, p):
            return (sz + 2 * p - k) // s + 1

        macs = 0
        h = out(28, 5, 1, 3)          # conv1 -> 30
        macs += h * h * 5 * 1 * 25
        h = out(h, 2, 2, 0)           # pool -> 15
        h2 = out(h, 5, 1, 3)          # conv2 -> 17
        macs += h2 * h2 * 10 * 5 * 25
        h2 = out(h2, 2, 2, 0)         # pool -> 8
        h3 = out(h2, 5, 1, 3)         # conv3 -> 10
        macs += h3 * h3 * 20 * 10 * 25
        h3 = out(h3, 2, 2, 0)         # pool -> 5
        macs += (20 * h3 * h3) * 84 + 84 * 10
        return macs

    @staticmethod
    def oracle_lightweight():
        def out(sz, k, s, p):
            return (sz + 2 * p - k) // s + 1

        h = out(28, 5, 1, 3)
        macs = h * h * 5 * 1 * 25
        h = out(h, 2, 2, 0)
        hb = out(h, 3, 1, 1)          # branch conv -> 15
        macs += hb * hb * 10 * 5 * 9
        hb = out(hb, 2, 2, 0)         # pool -> 7
        macs += (10 * hb * hb) * 10
        return macs

    @staticmethod
    def oracle_autoencoder(widths):
        h1, h2, h3 = widths
        return 784 * h1 + h1 * h2 + h2 * h3 + h3 * 784

    def test_lenet_count(self):
        assert count_macs(build_lenet(seed=0))["total"] == self.oracle_lenet() == 1016590

    def test_lightweight_count(self):
        light = build_lightweight(build_branchy_lenet(seed=0))
        assert count_macs(light)["total"] == self.oracle_lightweight() == 218650

    @pytest.mark.parametrize("dataset", ["mnist", "fmnist", "kmnist"])
    def test_autoencoder_count(self, dataset):
        ae = build_converting_autoencoder(dataset, seed=0)
        expected = self.oracle_autoencoder(AUTOENCODER_PROFILES[dataset].widths)
        assert count_macs(ae)["total"] == expected
