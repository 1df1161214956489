import subprocess
import sys

import numpy as np
import pytest

from waspnet.cli import build_parser, main
from waspnet.io import load_tensors, read_pgm, save_tensors, write_ppm
from waspnet.reports import SWEEP_RATE_SETS


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestParser:
    def test_all_subcommands(self):
        sub = build_parser()._subparsers._group_actions[0].choices
        assert set(sub) == {"params", "compare", "rf", "train", "infer", "eval", "crf", "sweep", "synth"}

    def test_help_lists_flags(self):
        out = subprocess.run([sys.executable, "-m", "waspnet", "train", "--help"], capture_output=True,
                             text=True, check=True).stdout
        assert "--base-lr" in out and "--no-gap-branch" in out and "--config" in out

    def test_unknown_flag_is_config_error(self, workdir):
        with pytest.raises(SystemExit) as info:
            main(["params", "--bogus", "1"])
        assert info.value.code == 1


class TestAccountingCommands:
    def test_compare(self, workdir, capsys):
        code, out, _ = run(capsys, "compare", "--backbone", "resnet101-counting")
        assert code == 0 and "wasp" in out
        csv = (workdir / "out" / "compare.csv").read_text().splitlines()
        assert csv[0] == "architecture,parameters,reduction_vs_aspp_pct,receptive_field,miou"
        assert csv[1].startswith("aspp,") and ",0.00,49," in csv[1]

    def test_compare_byte_stable(self, workdir, capsys):
        run(capsys, "compare", "--out-dir", "a")
        run(capsys, "compare", "--out-dir", "b")
        assert (workdir / "a/compare.csv").read_bytes() == (workdir / "b/compare.csv").read_bytes()

    def test_params(self, workdir, capsys):
        code, out, _ = run(capsys, "params", "--head", "aspp")
        assert code == 0 and out.splitlines()[1].split(",")[2] == "0.00"

    def test_rf(self, workdir, capsys):
        code, out, _ = run(capsys, "rf", "--head", "wasp", "--rates", "6,12,18,24")
        assert code == 0 and out.splitlines()[-1] == "wasp,output,,,121"

    def test_config_file_and_override(self, workdir, capsys):
        (workdir / "x.cfg").write_text("head = aspp\nrates = 6,12,18,24\n")
        _, out, _ = run(capsys, "rf", "--config", "x.cfg")
        assert out.splitlines()[-1] == "aspp,output,,,49"
        _, out, _ = run(capsys, "rf", "--config", "x.cfg", "--head", "cascade")
        assert out.splitlines()[-1] == "cascade,output,,,121"

    def test_no_gap_branch(self, workdir, capsys):
        _, with_gap, _ = run(capsys, "params")
        _, without, _ = run(capsys, "params", "--no-gap-branch")
        assert int(without.splitlines()[1].split(",")[1]) < int(with_gap.splitlines()[1].split(",")[1])


class TestExitCodes:
    def test_config_error(self, workdir, capsys):
        (workdir / "bad.cfg").write_text("haed = wasp\n")
        code, _, err = run(capsys, "rf", "--config", "bad.cfg")
        assert code == 1 and "unknown key" in err

    def test_data_error(self, workdir, capsys):
        (workdir / "bad.ppm").write_bytes(b"P6\n2 2\n255\n\x00")
        save_tensors(workdir / "p.wsp", {"probabilities": np.full((2, 2, 2), 0.5, np.float32)})
        code, _, err = run(capsys, "crf", "--probabilities", "p.wsp", "--image", "bad.ppm")
        assert code == 2 and "@ byte" in err

    def test_numerical_error(self, workdir, capsys):
        code, _, err = run(capsys, "train", "--n-images", "6", "--n-val", "2", "--image-size", "32",
                           "--max-iter", "3", "--base-lr", "1e9", "--batch-size", "2")
        assert code == 3 and "diverged" in err

    def test_thread_env(self, workdir, capsys, monkeypatch):
        monkeypatch.setenv("WASPNET_THREADS", "1")
        assert run(capsys, "params")[0] == 0
        monkeypatch.setenv("WASPNET_THREADS", "zero")
        assert run(capsys, "params")[0] == 1


class TestPipeline:
    def test_synth_train_infer_eval(self, workdir, capsys):
        code, out, _ = run(capsys, "synth", "--n-images", "6", "--image-size", "32", "--data-dir", "d")
        assert code == 0 and out.startswith("class,pixel_share")
        code, out, _ = run(capsys, "train", "--data-dir", "d", "--n-val", "2", "--max-iter", "4",
                           "--batch-size", "2", "--eval-every", "2", "--out-dir", "o")
        assert code == 0 and "val_miou" in out
        trace = (workdir / "o/trace.csv").read_text().splitlines()
        assert trace[0] == "step,lr,loss,miou" and len(trace) == 5
        code, _, _ = run(capsys, "infer", "--model", "o/model.wsp", "--data-dir", "d", "--out-dir", "o",
                         "--save-probabilities")
        assert code == 0
        assert read_pgm(workdir / "o/pred/0000.pgm").shape == (32, 32)
        prob, _ = load_tensors(workdir / "o/pred/0000.wsp")
        np.testing.assert_allclose(prob["probabilities"].sum(axis=0), 1.0, atol=1e-5)
        code, out, _ = run(capsys, "eval", "--pred-dir", "o/pred", "--data-dir", "d")
        assert code == 0 and out.splitlines()[-1].startswith("miou,")

    def test_eval_identical_dirs(self, workdir, capsys):
        run(capsys, "synth", "--n-images", "3", "--image-size", "32", "--data-dir", "d")
        code, out, _ = run(capsys, "eval", "--pred-dir", "d/labels", "--labels", "d/labels")
        assert code == 0 and out.splitlines()[-1] == "miou,1.000000"

    def test_infer_without_model(self, workdir, capsys):
        assert run(capsys, "infer", "--data-dir", "d")[0] == 1

    def test_crf(self, workdir, capsys):
        g = np.random.default_rng(0)
        truth = np.zeros((6, 6), np.uint8)
        truth[:, 3:] = 1
        image = np.where(truth[..., None] == 1, 200, 50).astype(np.uint8) * np.ones(3, np.uint8)
        p1 = np.clip(np.where(truth == 1, 0.7, 0.3) + g.normal(0, 0.15, (6, 6)), 0.05, 0.95)
        save_tensors(workdir / "p.wsp", {"probabilities": np.stack([1 - p1, p1]).astype(np.float32)})
        write_ppm(workdir / "i.ppm", image)
        from waspnet.io import write_pgm

        write_pgm(workdir / "t.pgm", truth)
        code, out, _ = run(capsys, "crf", "--probabilities", "p.wsp", "--image", "i.ppm", "--labels",
                           "t.pgm", "--crf-sigma-alpha", "3", "--crf-sigma-beta", "10",
                           "--crf-sigma-gamma", "1", "--crf-w2", "1")
        assert code == 0
        rows = {r.split(",")[0]: r.split(",")[1:] for r in out.splitlines()[1:]}
        assert set(rows) == {"unary_energy", "pairwise_energy", "total_energy", "miou"}
        assert float(rows["miou"][1]) >= float(rows["miou"][0])
        refined, meta = load_tensors(workdir / "out/refined.wsp")
        assert refined["probabilities"].shape == (2, 6, 6) and meta["crf"]["w2"] == 1.0

    def test_sweep_shape(self, workdir, capsys):
        code, out, _ = run(capsys, "sweep", "--n-images", "6", "--n-val", "2", "--image-size", "32",
                           "--max-iter", "1", "--batch-size", "2", "--backbone", "toy-resnet(0,4)")
        assert code == 0
        csv = (workdir / "out/sweep.csv").read_text().splitlines()
        assert csv[0] == "head,rates,parameters,receptive_field,miou" and len(csv) == 1 + len(SWEEP_RATE_SETS)
        assert '"{6, 12, 18, 24}"' in csv[3]
