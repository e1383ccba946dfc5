import hashlib
import json

import numpy as np
import pytest

from rirn import io as rio
from rirn.cli import main
from rirn.data import read_dataset, read_frames
from rirn.estimator import RIRNDeblurrer
from rirn.harness import dataset_psnr
from rirn.metrics import psnr

SMALL = """\
# tiny model so the CLI tests stay fast
data = {data}
out_dir = {out}
feat_channels = 4
hidden_channels = 4
epochs = {epochs}
batch_size = 2
unroll = 3
crop = 8
"""


def tiny(**kw):
    args = dict(feat_channels=4, hidden_channels=4, epochs=1, crop=8, unroll=3, batch_size=2)
    args.update(kw)
    return RIRNDeblurrer(**args)


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(root), "--clips", "2", "--frames", "4", "--size", "12x12", "--seed", "3"]) == 0
    return root


def write_config(path, data, out, epochs=1, extra=""):
    path.write_text(SMALL.format(data=data, out=out, epochs=epochs) + extra, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg = write_config(base / "run.cfg", dataset, base / "out", epochs=2)
    assert main(["train", "--config", str(cfg)]) == 0
    return base / "out"


class TestGenData:
    def test_layout(self, dataset):
        clips = sorted(p.name for p in dataset.iterdir())
        assert clips == ["clip_0000", "clip_0001"]
        assert len(read_frames(dataset / "clip_0000" / "blur")) == 4

    def test_deterministic(self, dataset, tmp_path):
        again = tmp_path / "again"
        assert main(["gen-data", "--out", str(again), "--clips", "2", "--frames", "4", "--size", "12x12", "--seed", "3"]) == 0
        assert tree_digest(again) == tree_digest(dataset)

    def test_single_subframe_blur_equals_sharp(self, tmp_path):
        root = tmp_path / "d"
        assert main(["gen-data", "--out", str(root), "--clips", "1", "--frames", "3", "--size", "10x10",
                     "--subframes", "1"]) == 0
        assert tree_digest(root / "clip_0000" / "blur") == tree_digest(root / "clip_0000" / "sharp")

    @pytest.mark.parametrize("argv", [["--frames", "1"], ["--clips", "0"]])
    def test_usage_errors(self, tmp_path, argv):
        assert main(["gen-data", "--out", str(tmp_path / "x")] + argv) == 1
        assert not (tmp_path / "x").exists()


def test_argparse_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen-data", "--out", "x", "--size", "ax3"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 1


class TestTrain:
    def test_log_format(self, trained, dataset):
        lines = (trained / "train.log").read_text().splitlines()
        assert [ln.split()[0] for ln in lines] == ["epoch=0", "epoch=1", "epoch=2"]
        assert lines[0].split()[1] == "loss=nan"
        for ln in lines:
            fields = dict(kv.split("=") for kv in ln.split())
            assert set(fields) == {"epoch", "loss", "psnr"}
        # a fresh model is the identity, so epoch 0 scores the blurry input
        epoch0 = float(lines[0].split("psnr=")[1])
        assert epoch0 == pytest.approx(dataset_psnr(read_dataset(dataset)), abs=1e-4)

    def test_checkpoints_written(self, trained):
        names = sorted(p.name for p in trained.glob("*.ckpt"))
        assert names == ["epoch_0001.ckpt", "epoch_0002.ckpt", "last.ckpt"]
        assert (trained / "epoch_0002.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()

    def test_bit_identical_rerun(self, trained, dataset, tmp_path):
        cfg = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out", epochs=2)
        assert main(["train", "--config", str(cfg)]) == 0
        assert (tmp_path / "out" / "last.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()

    def test_unknown_key(self, dataset, tmp_path, capsys):
        cfg = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out", extra="momentum = 0.9\n")
        assert main(["train", "--config", str(cfg)]) == 1
        assert "unknown key 'momentum'" in capsys.readouterr().err

    def test_bad_override(self, dataset, tmp_path):
        cfg = write_config(tmp_path / "run.cfg", dataset, tmp_path / "out")
        assert main(["train", "--config", str(cfg), "--override", "epochs=two"]) == 1
        assert main(["train", "--config", str(cfg), "--override", "unroll=9"]) == 1

    def test_missing_data(self, tmp_path):
        cfg = write_config(tmp_path / "run.cfg", tmp_path / "nowhere", tmp_path / "out")
        assert main(["train", "--config", str(cfg)]) == 1


class TestEval:
    def test_zero_param_checkpoint_scores_input(self, dataset, tmp_path, capsys):
        samples = read_dataset(dataset)
        est = tiny(epochs=0).fit(samples).zero_params()
        est.save(tmp_path / "zero.ckpt")
        jsonl = tmp_path / "r.jsonl"
        assert main(["eval", "--ckpt", str(tmp_path / "zero.ckpt"), "--data", str(dataset), "--no-timing",
                     "--jsonl", str(jsonl)]) == 0
        records = [json.loads(ln) for ln in jsonl.read_text().splitlines()]
        for rec, s in zip(records, samples):
            want = float(np.mean([psnr(b, t) for b, t in zip(s.blurry, s.sharp)]))
            assert rec["psnr"] == want
        assert "sec/frame" not in capsys.readouterr().out

    def test_table_is_aligned(self, trained, dataset, capsys):
        assert main(["eval", "--ckpt", str(trained / "last.ckpt"), "--data", str(dataset), "--label", "tiny"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 4
        assert len({len(ln) for ln in lines}) == 1
        assert lines[-1].split()[:2] == ["tiny", "mean"]

    def test_reports_identical_across_runs(self, trained, dataset, tmp_path):
        outs = []
        for i in range(2):
            path = tmp_path / f"r{i}.jsonl"
            assert main(["eval", "--ckpt", str(trained / "last.ckpt"), "--data", str(dataset), "--no-timing",
                         "--jsonl", str(path)]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_timing_positive_and_stable(self, trained, dataset):
        est = RIRNDeblurrer.load(trained / "last.ckpt")
        samples = read_dataset(dataset)
        # median of a few runs on each side so a scheduler hiccup does not decide the test
        a = np.median([est.evaluate(samples).sec_per_frame for _ in range(3)])
        b = np.median([est.evaluate(samples).sec_per_frame for _ in range(3)])
        assert a > 0 and b > 0
        assert abs(a - b) <= 0.2 * max(a, b)

    def test_deblur_round_trip(self, trained, dataset, tmp_path, capsys):
        ckpt = str(trained / "last.ckpt")
        out = tmp_path / "pred"
        assert main(["deblur", "--ckpt", ckpt, "--in", str(dataset), "--out", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == ["clip_0000", "clip_0001"]
        capsys.readouterr()
        direct = tmp_path / "direct.jsonl"
        saved = tmp_path / "saved.jsonl"
        assert main(["eval", "--ckpt", ckpt, "--data", str(dataset), "--no-timing", "--jsonl", str(direct)]) == 0
        assert main(["eval", "--pred", str(out), "--data", str(dataset), "--jsonl", str(saved)]) == 0
        for a, b in zip(direct.read_text().splitlines(), saved.read_text().splitlines()):
            pa, pb = json.loads(a)["psnr"], json.loads(b)["psnr"]
            # rounding to the 8-bit grid moves each value by at most half a step;
            # bound the PSNR change that error can cause at this MSE
            mse = 10 ** (-pa / 10)
            step = 0.5 / 255
            bound = 10 * np.log10((np.sqrt(mse) + step) ** 2 / mse)
            assert abs(pa - pb) <= bound

    def test_deblur_single_directory(self, trained, dataset, tmp_path):
        out = tmp_path / "one"
        src = dataset / "clip_0001" / "blur"
        assert main(["deblur", "--ckpt", str(trained / "last.ckpt"), "--in", str(src), "--out", str(out)]) == 0
        assert len(read_frames(out)) == 4

    def test_missing_checkpoint(self, dataset, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(dataset)]) == 1

    def test_checkpoint_mismatch_exits_2(self, trained, dataset, tmp_path, capsys):
        ckpt = rio.load_checkpoint(trained / "last.ckpt")
        ckpt.tensors["recon.out.weight"] = ckpt.tensors["recon.out.weight"][:, :2]
        rio.save_checkpoint(tmp_path / "bad.ckpt", ckpt)
        assert main(["eval", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(dataset)]) == 2
        assert "recon.out.weight" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--seed", "0", "--bases", "plain"]) == 0
        assert "gradcheck passed" in capsys.readouterr().out

    def test_tolerance_failure_exits_2(self, capsys):
        # finite differences cannot agree to machine precision
        assert main(["gradcheck", "--bases", "plain", "--tol", "1e-15"]) == 2
        assert "FAILED" in capsys.readouterr().out

    def test_unknown_base(self):
        assert main(["gradcheck", "--bases", "rnn"]) == 1


class TestAttnStats:
    def test_dtb_never_below_one(self, dataset, tmp_path, capsys):
        est = tiny(variant="dtb", seed=1)
        est.fit(read_dataset(dataset)).save(tmp_path / "dtb.ckpt")
        assert main(["attn-stats", "--ckpt", str(tmp_path / "dtb.ckpt"), "--data", str(dataset)]) == 0
        out = capsys.readouterr().out
        assert "variant = dtb" in out
        assert "fraction_below_1 = 0.000" in out

    def test_fresh_atb_mean(self, dataset, tmp_path, capsys):
        est = tiny(variant="atb", epochs=0)
        est.fit(read_dataset(dataset)).save(tmp_path / "atb.ckpt")
        assert main(["attn-stats", "--ckpt", str(tmp_path / "atb.ckpt"), "--data", str(dataset), "--bins", "8"]) == 0
        lines = capsys.readouterr().out.splitlines()
        stats = dict(ln.split(" = ") for ln in lines if " = " in ln)
        # zero logits give softplus(0) = log 2 for both maps
        assert abs(float(stats["mean"]) - 2 * np.log(2)) <= 1e-3
        assert sum(ln.startswith("[") for ln in lines) == 8

    def test_no_blending_is_usage_error(self, dataset, tmp_path):
        est = tiny(variant="irm", epochs=0)
        est.fit(read_dataset(dataset)).save(tmp_path / "irm.ckpt")
        assert main(["attn-stats", "--ckpt", str(tmp_path / "irm.ckpt"), "--data", str(dataset)]) == 1
