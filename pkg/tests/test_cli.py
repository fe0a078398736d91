import numpy as np
import pytest

from bcnn import cli
from bcnn import data_io as D
from bcnn.config import RunConfig
from bcnn.errors import ConfigError

SPEC = "classes=2\nsize=16\ntrain=6\nval=2\ntest=4\nseed=5\n"
CONFIG = """encoder=bilinear
channels=3,4
pools=1,0
tap=t2
epochs_head=40
epochs_finetune=2
batch_size=8
invert_layers=t1,t2
invert_iters=5
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text(SPEC)
    (root / "run.cfg").write_text(CONFIG)
    assert cli.main(["synth", "--spec", str(root / "spec.txt"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "run.cfg"), "--data", str(root / "data"),
                     "--out", str(root / "m.ckpt")]) == 0
    return root


class TestSynth:
    def test_manifests(self, workspace):
        for split, n in (("train", 12), ("val", 4), ("test", 8)):
            assert len((workspace / "data" / f"{split}.txt").read_text().splitlines()) == n

    def test_missing_spec(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--spec", tmp_path / "nope.txt", "--out", tmp_path / "d")
        assert code == 3 and "nope.txt" in err

    def test_zero_classes(self, tmp_path, capsys):
        (tmp_path / "s.txt").write_text("classes=0\n")
        code, _, _ = run(capsys, "synth", "--spec", tmp_path / "s.txt", "--out", tmp_path / "d")
        assert code == 2 and not (tmp_path / "d").exists()

    def test_prints_seed(self, tmp_path, capsys):
        (tmp_path / "s.txt").write_text("classes=2\nsize=8\ntrain=1\nval=0\ntest=0\n")
        code, out, _ = run(capsys, "synth", "--spec", tmp_path / "s.txt", "--out", tmp_path / "d",
                           "--seed", 9)
        assert code == 0 and out.splitlines()[0] == "seed\t9"


class TestTrain:
    def test_checkpoint_loadable(self, workspace):
        cfg, model, bank = cli.load_checkpoint(workspace / "m.ckpt")
        assert cfg.num_classes == 2 and model.has_head
        assert set(bank.heads) == {"t1", "t2"}

    def test_log_parseable_and_deterministic(self, workspace, capsys, tmp_path):
        outs = []
        for i in range(2):
            code, out, _ = run(capsys, "train", "--config", workspace / "run.cfg", "--data",
                               workspace / "data", "--out", tmp_path / f"{i}.ckpt")
            assert code == 0
            outs.append(out)
        assert outs[0] == outs[1]
        lines = outs[0].splitlines()
        assert lines[0] == "seed\t0"
        for line in lines[1:]:
            ep, phase, loss, acc = line.split("\t")
            assert phase in ("head", "finetune")
            int(ep), float(loss), float(acc)
        assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()

    def test_zero_codebook_is_config_error(self, workspace, capsys, tmp_path):
        text = CONFIG.replace("encoder=bilinear", "encoder=netvlad") + "k=0\n"
        (tmp_path / "bad.cfg").write_text(text)
        code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--data",
                           workspace / "data", "--out", tmp_path / "x.ckpt")
        assert code == 2 and "k" in err
        assert not (tmp_path / "x.ckpt").exists()

    def test_unknown_key(self, workspace, capsys, tmp_path):
        (tmp_path / "bad.cfg").write_text(CONFIG + "colour=blue\n")
        code, _, _ = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--data",
                         workspace / "data", "--out", tmp_path / "x.ckpt")
        assert code == 2 and not (tmp_path / "x.ckpt").exists()

    def test_missing_data(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--config", workspace / "run.cfg", "--data",
                         tmp_path / "none", "--out", tmp_path / "x.ckpt")
        assert code == 3


class TestEval:
    def test_accuracy_line(self, workspace, capsys):
        code, out, _ = run(capsys, "eval", "--ckpt", workspace / "m.ckpt", "--data", workspace / "data",
                           "--flip-avg", "--confusion", 3)
        assert code == 0
        lines = out.splitlines()
        acc = [l for l in lines if l.startswith("accuracy\t")]
        assert len(acc) == 1 and 0 <= float(acc[0].split("\t")[1]) <= 1
        assert len([l for l in lines if l.startswith("confused\t")]) <= 3

    def test_svm_path(self, workspace, capsys):
        code, out, _ = run(capsys, "eval", "--ckpt", workspace / "m.ckpt", "--data", workspace / "data",
                           "--svm")
        assert code == 0 and "accuracy\t" in out

    def test_perfect_model(self, workspace, capsys, tmp_path):
        # evaluate on the training split, which the head fits exactly
        data = tmp_path / "d"
        data.mkdir()
        m = D.manifest_load(workspace / "data" / "train.txt")
        D.manifest_save(D.Manifest([str((workspace / "data" / p).resolve()) for p in m.paths], m.labels),
                        data / "test.txt")
        code, out, _ = run(capsys, "eval", "--ckpt", workspace / "m.ckpt", "--data", data)
        assert code == 0 and "accuracy\t1.000000" in out

    def test_missing_checkpoint(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "eval", "--ckpt", tmp_path / "no.ckpt", "--data", workspace / "data")
        assert code == 3

    def test_config_mismatch(self, workspace, capsys, tmp_path):
        entries = D.checkpoint_load(workspace / "m.ckpt")
        cfg = RunConfig.from_text(D.tensor_to_text(entries[cli.CONFIG_KEY]))
        cfg.channels = (3, 5)
        entries[cli.CONFIG_KEY] = D.text_to_tensor(cfg.to_text())
        D.checkpoint_save(entries, tmp_path / "bad.ckpt")
        code, _, _ = run(capsys, "eval", "--ckpt", tmp_path / "bad.ckpt", "--data", workspace / "data")
        assert code == 2

    def test_corrupt_checkpoint(self, workspace, capsys, tmp_path):
        (tmp_path / "c.ckpt").write_bytes((workspace / "m.ckpt").read_bytes()[:-5])
        code, _, _ = run(capsys, "eval", "--ckpt", tmp_path / "c.ckpt", "--data", workspace / "data")
        assert code == 3


class TestExtract:
    def test_norm_and_dims(self, workspace, capsys, tmp_path):
        img = workspace / "data" / D.manifest_load(workspace / "data" / "test.txt").paths[0]
        code, out, _ = run(capsys, "extract", "--ckpt", workspace / "m.ckpt", "--image", img,
                           "--out", tmp_path / "d.btns")
        assert code == 0 and "dims\t16" in out
        d = D.tensor_load(tmp_path / "d.btns")
        assert d.shape == (16,) and abs(np.linalg.norm(d) - 1) <= 1e-9

    def test_projected_dims(self, workspace, capsys, tmp_path):
        (tmp_path / "r.cfg").write_text(CONFIG.replace("invert_layers=t1,t2", "invert_layers=") + "rank=2\n")
        assert run(capsys, "train", "--config", tmp_path / "r.cfg", "--data", workspace / "data",
                   "--out", tmp_path / "r.ckpt")[0] == 0
        img = workspace / "data" / D.manifest_load(workspace / "data" / "test.txt").paths[0]
        code, out, _ = run(capsys, "extract", "--ckpt", tmp_path / "r.ckpt", "--image", img,
                           "--out", tmp_path / "d.btns")
        assert code == 0 and D.tensor_load(tmp_path / "d.btns").shape == (2 * 4,)

    def test_mirror_with_symmetric_kernels(self, workspace, capsys, tmp_path, rng):
        entries = D.checkpoint_load(workspace / "m.ckpt")
        for name in list(entries):
            if name.startswith("backbone/") and name.endswith("/w"):
                w = entries[name]
                entries[name] = 0.5 * (w + w[:, ::-1])
        D.checkpoint_save(entries, tmp_path / "sym.ckpt")
        img = rng.uniform(size=(16, 16, 3))
        D.ppm_save(img, tmp_path / "a.ppm")
        D.ppm_save(D.hflip(img), tmp_path / "b.ppm")
        for n in "ab":
            assert run(capsys, "extract", "--ckpt", tmp_path / "sym.ckpt", "--image",
                       tmp_path / f"{n}.ppm", "--out", tmp_path / f"{n}.btns")[0] == 0
        np.testing.assert_allclose(D.tensor_load(tmp_path / "a.btns"), D.tensor_load(tmp_path / "b.btns"),
                                   atol=1e-6)

    def test_bad_image(self, workspace, capsys, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        code, _, _ = run(capsys, "extract", "--ckpt", workspace / "m.ckpt", "--image", tmp_path / "x.ppm",
                         "--out", tmp_path / "d.btns")
        assert code == 3


class TestInvert:
    def test_defaults_in_trace_header(self, workspace, capsys, tmp_path):
        code, out, _ = run(capsys, "invert", "--ckpt", workspace / "m.ckpt", "--class", 1,
                           "--out", tmp_path / "p.ppm", "--size", 12)
        assert code == 0
        trace = (tmp_path / "p.trace.tsv").read_text().splitlines()
        assert trace[0] == "# gamma=1e-08\tbeta=2" and trace[1] == "iter\tobjective"
        values = [float(l.split("\t")[1]) for l in trace[2:]]
        assert len(values) >= 1 and all(b <= a for a, b in zip(values, values[1:]))
        assert D.ppm_load(tmp_path / "p.ppm").shape == (12, 12, 3)
        assert "# gamma=1e-08" in out

    def test_zero_iterations_gives_seeded_init(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "invert", "--ckpt", workspace / "m.ckpt", "--class", 0,
                         "--out", tmp_path / "p.ppm", "--max-iters", 0, "--size", 10, "--seed", 4)
        assert code == 0
        from bcnn.tensor import make_rng
        init = make_rng(4).uniform(0.4, 0.6, size=(10, 10, 3))
        assert np.abs(D.ppm_load(tmp_path / "p.ppm") - init).max() <= 1 / 510 + 1e-12

    def test_class_out_of_range(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "invert", "--ckpt", workspace / "m.ckpt", "--class", 2,
                         "--out", tmp_path / "p.ppm")
        assert code == 2 and not (tmp_path / "p.ppm").exists()

    def test_negative_gamma(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "invert", "--ckpt", workspace / "m.ckpt", "--class", 0,
                         "--gamma", -1, "--out", tmp_path / "p.ppm")
        assert code == 2


class TestKmeansInit:
    def test_two_clusters(self, capsys, tmp_path):
        D.tensor_save(np.array([[0.0], [0.0], [10.0], [10.0]]), tmp_path / "f.btns")
        code, out, _ = run(capsys, "kmeans-init", "--features", tmp_path / "f.btns", "--k", 2,
                           "--out", tmp_path / "c.btns")
        assert code == 0
        mu = D.tensor_load(tmp_path / "c.btns")
        assert sorted(mu[:, 0].tolist()) == [0.0, 10.0]
        gamma = D.tensor_load(tmp_path / "c.gamma.btns")[0]
        w, b = D.tensor_load(tmp_path / "c.w.btns"), D.tensor_load(tmp_path / "c.b.btns")
        np.testing.assert_allclose(w, 2 * gamma * mu.T if w.shape == mu.T.shape else 2 * gamma * mu)
        np.testing.assert_allclose(b, -gamma * (mu ** 2).sum(1))

    def test_single_center_is_mean(self, capsys, tmp_path, rng):
        X = rng.standard_normal((7, 3))
        D.tensor_save(X, tmp_path / "f.btns")
        assert run(capsys, "kmeans-init", "--features", tmp_path / "f.btns", "--k", 1,
                   "--out", tmp_path / "c.btns")[0] == 0
        np.testing.assert_allclose(D.tensor_load(tmp_path / "c.btns")[0], X.mean(0), atol=1e-12)

    def test_too_few_samples(self, capsys, tmp_path):
        D.tensor_save(np.zeros((2, 2)), tmp_path / "f.btns")
        code, _, _ = run(capsys, "kmeans-init", "--features", tmp_path / "f.btns", "--k", 3,
                         "--out", tmp_path / "c.btns")
        assert code == 2 and not (tmp_path / "c.btns").exists()


def test_unknown_command_and_missing_flag(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "eval", "--ckpt", "x")[0] == 2


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig.from_text(CONFIG + "scales=1,0.5\nfrozen=backbone\nk=8\ntied=true\n")
        again = RunConfig.from_text(cfg.to_text())
        assert again == cfg
        assert cfg.channels == (3, 4) and cfg.pools == (True, False) and cfg.scales == (1.0, 0.5)

    @pytest.mark.parametrize("text", ["encoder=vgg\n", "lr=abc\n", "tap=t9\n", "lr=0\n", "k=-1\nencoder=netfv\n",
                                      "scales=0\n", "invert_layers=t7\n", "pools=1\n", "tied=maybe\n"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text).validate(2)

    def test_default_codebook_size(self):
        assert RunConfig().model(2).k == 64
        assert RunConfig(encoder="netbovw").model(2).k == 256
