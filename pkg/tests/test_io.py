"""Data readers, configs, checkpoints and image output."""

import numpy as np
import pytest
from PIL import Image

from led.autodiff import Rng
from led.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from led.config import ExperimentConfig
from led.data import GaussianMixture, load_binarized_mnist, read_amat, toy_mixture_sampler, write_amat
from led.errors import CheckpointError, ConfigError, ContractError, ParseError
from led.figures import PANELS, emit_density_map, emit_latent_panels, pixel_centers, read_pgm, write_pgm
from led.vae import build_led_vae


class TestAmat:
    def test_zero_line(self, tmp_path):
        p = tmp_path / "a.amat"
        p.write_text(" ".join(["0"] * 784) + "\n")
        np.testing.assert_array_equal(read_amat(p), np.zeros((1, 784)))

    def test_decimal_tokens(self, tmp_path):
        p = tmp_path / "a.amat"
        p.write_text(" ".join(["1.", "0.0", "1.0", "0"] * 196) + "\n")
        np.testing.assert_array_equal(read_amat(p)[0, :4], [1, 0, 1, 0])

    @pytest.mark.parametrize("line, needle", [
        (" ".join(["0"] * 783 + ["2"]), "token '2'"),
        (" ".join(["0"] * 783), "expected 784 values"),
        (" ".join(["0"] * 785), "expected 784 values"),
        (" ".join(["0"] * 783 + ["0.5"]), "token '0.5'"),
    ])
    def test_malformed_lines_name_file_and_line(self, tmp_path, line, needle):
        p = tmp_path / "bad.amat"
        p.write_text(" ".join(["1"] * 784) + "\n" + line + "\n")
        with pytest.raises(ParseError) as err:
            read_amat(p)
        assert err.value.line == 2
        assert str(err.value).startswith(f"{p}:2:")
        assert needle in str(err.value)

    def test_line_count_checked(self, tmp_path):
        X = (np.random.default_rng(0).random((3, 784)) < 0.5).astype(float)
        write_amat(tmp_path / "x.amat", X)
        np.testing.assert_array_equal(read_amat(tmp_path / "x.amat", expected_lines=3), X)
        with pytest.raises(ParseError, match="expected 50000 lines"):
            read_amat(tmp_path / "x.amat", expected_lines=50000)

    def test_canonical_counts_enforced(self, tmp_path):
        X = np.zeros((2, 784))
        for split in ("train", "valid", "test"):
            write_amat(tmp_path / f"binarized_mnist_{split}.amat", X)
        with pytest.raises(ParseError, match="50000"):
            load_binarized_mnist(tmp_path)
        train, valid, test = load_binarized_mnist(tmp_path, expected_counts=None)
        assert train.shape == valid.shape == test.shape == (2, 784)


class TestMixture:
    def test_single_component_is_gaussian(self):
        mix = GaussianMixture([[1.0, -1.0]], [[[0.5, 0.1], [0.1, 0.3]]], [1.0])
        x = toy_mixture_sampler(mix, 50_000, np.random.default_rng(0))
        np.testing.assert_allclose(x.mean(0), [1.0, -1.0], atol=0.02)
        np.testing.assert_allclose(np.cov(x.T), [[0.5, 0.1], [0.1, 0.3]], atol=0.02)

    def test_component_frequencies(self):
        w = np.array([0.1, 0.2, 0.3, 0.4])
        mix = GaussianMixture(GaussianMixture.ring().means, GaussianMixture.ring().covs, w)
        n = 100_000
        _, labels = mix.sample(n, np.random.default_rng(1), return_labels=True)
        freq = np.bincount(labels, minlength=4) / n
        assert np.all(np.abs(freq - w) < 3 * np.sqrt(w * (1 - w) / n))

    def test_density_integrates_to_one(self):
        mix = GaussianMixture.ring()
        c = np.linspace(-5, 5, 401)
        c = 0.5 * (c[1:] + c[:-1])
        gx, gy = np.meshgrid(c, c)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        assert abs(mix.pdf(pts).sum() * (10 / 400) ** 2 - 1.0) < 1e-3
        np.testing.assert_allclose(np.exp(mix.log_pdf(pts[:50])), mix.pdf(pts[:50]))

    def test_bad_weights(self):
        with pytest.raises(ConfigError):
            GaussianMixture([[0, 0], [1, 1]], [np.eye(2)] * 2, [0.5, 0.6])


class TestConfig:
    TEXT = """
    # comment
    [experiment]
    kind = toy
    [model]
    l_prior = 4  # inline comment
    enc_hidden = 32, 32
    [training]
    lr = 0.002
    """

    def test_parse_and_defaults(self):
        cfg = ExperimentConfig.from_text(self.TEXT.replace("\n    ", "\n"))
        assert cfg.model.l_prior == 4
        assert cfg.model.enc_hidden == (32, 32)
        assert cfg.training.lr == 0.002
        assert cfg.training.batch_size == 100
        assert cfg.likelihood == "gaussian"

    def test_round_trip_and_digest(self):
        cfg = ExperimentConfig.from_text(self.TEXT.replace("\n    ", "\n"))
        again = ExperimentConfig.from_text(cfg.to_text())
        assert again.to_text() == cfg.to_text()
        assert again.digest() == cfg.digest()
        assert cfg.override(**{"model.l_prior": 8}).digest() != cfg.digest()

    @pytest.mark.parametrize("text, needle", [
        ("[model]\nwidth = 3\n", "unknown key"),
        ("[nonsense]\na = 1\n", "unknown section"),
        ("[model]\nl_prior = -1\n", "non-negative"),
        ("[model]\nl_prior = four\n", "l_prior"),
        ("[training]\nlr = 0\n", "lr"),
        ("[toy]\nmeans = 0,0,1,1\nweights = 0.5,0.6\n", "sum to 1"),
        ("[model]\nactivation = swish\n", "one of"),
        ("l_prior = 3\n", "malformed"),
    ])
    def test_rejections(self, text, needle):
        with pytest.raises(ConfigError, match=needle):
            ExperimentConfig.from_text(text)

    def test_data_dir_from_environment(self, monkeypatch):
        monkeypatch.setenv("LED_DATA_DIR", "/data/mnist")
        assert ExperimentConfig.from_text("").data_dir == "/data/mnist"
        assert ExperimentConfig.from_text("[data]\ndata_dir = /x\n").data_dir == "/x"


class TestCheckpoint:
    def make(self):
        gen = np.random.default_rng(0)
        tensors = {"a.weight": gen.standard_normal((3, 4)), "b": gen.standard_normal(5),
                   "scalar": np.array(2.5)}
        meta = {"epoch": 3, "rng": Rng(1).get_state(), "config": "[x]\n"}
        return Checkpoint("ab" * 32, tensors, meta)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        ck = self.make()
        save_checkpoint(tmp_path / "a.ledf", ck)
        loaded = load_checkpoint(tmp_path / "a.ledf", "ab" * 32)
        save_checkpoint(tmp_path / "b.ledf", loaded)
        assert (tmp_path / "a.ledf").read_bytes() == (tmp_path / "b.ledf").read_bytes()
        for k, v in ck.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[k], v)
        assert loaded.metadata == ck.metadata

    def test_digest_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "a.ledf", self.make())
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(tmp_path / "a.ledf", "cd" * 32)

    @pytest.mark.parametrize("corrupt", ["magic", "version", "truncate", "trailing"])
    def test_corruption(self, tmp_path, corrupt):
        p = tmp_path / "a.ledf"
        save_checkpoint(p, self.make())
        data = bytearray(p.read_bytes())
        if corrupt == "magic":
            data[:4] = b"NOPE"
        elif corrupt == "version":
            data[4] = 9
        elif corrupt == "truncate":
            data = data[:-3]
        else:
            data += b"\0"
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


class TestImages:
    def test_constant_density_is_white(self, tmp_path):
        vals = emit_density_map(lambda p: np.full(len(p), 0.3), ((0, 1), (0, 1)), 16, tmp_path / "c.pgm")
        pixels, maxval = read_pgm(tmp_path / "c.pgm")
        assert maxval == 255 and np.all(pixels == 255) and vals.shape == (16, 16)

    def test_standard_normal_centre_and_corners(self, tmp_path):
        def phi(p):
            return np.exp(-0.5 * (p**2).sum(axis=1)) / (2 * np.pi)

        emit_density_map(phi, ((-3, 3), (-3, 3)), 101, tmp_path / "n.pgm")
        pixels, _ = read_pgm(tmp_path / "n.pgm")
        assert pixels[50, 50] == 255
        assert max(pixels[0, 0], pixels[0, -1], pixels[-1, 0], pixels[-1, -1]) < 10

    def test_reference_reader_and_orientation(self, tmp_path):
        # density increasing with y: the top row must be brightest
        emit_density_map(lambda p: p[:, 1] + 1.0, ((-1, 1), (-1, 1)), (8, 6), tmp_path / "o.pgm")
        img = Image.open(tmp_path / "o.pgm")
        assert img.format == "PPM" and img.mode == "L" and img.size == (8, 6)
        ours, _ = read_pgm(tmp_path / "o.pgm")
        ref = np.asarray(img)
        np.testing.assert_array_equal(ref, ours)
        assert ref[0].min() == 255 and np.all(np.diff(ref[:, 0].astype(int)) < 0)

    def test_pixel_centres(self):
        pts, shape = pixel_centers(((0, 4), (0, 2)), (4, 2))
        assert shape == (2, 4)
        np.testing.assert_allclose(pts[0], [0.5, 1.5])
        np.testing.assert_allclose(pts[-1], [3.5, 0.5])

    def test_resolution_limit(self, tmp_path):
        with pytest.raises(ContractError):
            emit_density_map(lambda p: np.ones(len(p)), ((0, 1), (0, 1)), 4096, tmp_path / "x.pgm")
        with pytest.raises(ContractError):
            write_pgm(tmp_path / "x.pgm", np.zeros(4))

    def test_latent_panels_on_untrained_model(self, tmp_path):
        model = build_led_vae(2, 2, Rng(0), likelihood="gaussian", enc_hidden=(8,), dec_hidden=(8,),
                              l_prior=2, prior_hidden=(8,))
        data = np.random.default_rng(0).standard_normal((200, 2))
        paths = emit_latent_panels(model, data, tmp_path, np.random.default_rng(1), resolution=32,
                                 n_samples=500)
        assert set(paths) == set(PANELS)
        for p in paths.values():
            pixels, _ = read_pgm(p)
            assert p.stat().st_size > 0 and pixels.shape == (32, 32)
        prior = (tmp_path / "prior_density.pgm").read_bytes()
        assert prior == (tmp_path / "base_density.pgm").read_bytes()
        assert (tmp_path / "prior_density.csv").read_text() == (tmp_path / "base_density.csv").read_text()

    def test_latent_panels_need_2d_latent(self, tmp_path):
        model = build_led_vae(2, 3, Rng(0), likelihood="gaussian", enc_hidden=(8,), dec_hidden=(8,))
        with pytest.raises(ContractError):
            emit_latent_panels(model, np.zeros((5, 2)), tmp_path, np.random.default_rng(0))
