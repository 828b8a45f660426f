import csv
import subprocess
import sys

import numpy as np
import pytest

from pcomplete import autodiff as ad
from pcomplete.cli import main
from pcomplete.data import load_dataset, read_xyz
from pcomplete.evaluation import eval_cd
from pcomplete.model import CompletionModel

from .pipeline import TINY, run_pipeline, tree_bytes


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe"))


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestDatagen:
    def test_ten_pairs(self, tmp_path, capsys):
        assert main(["datagen", "--mode", "c3d", "--shapes", "10", "--points", "64", "--out", str(tmp_path / "d")]) == 0
        assert len(rows(tmp_path / "d" / "manifest.csv")) == 10
        assert "wrote 10 pairs" in capsys.readouterr().out

    def test_pcn_mode(self, tmp_path):
        assert main(["datagen", "--mode", "pcn", "--shapes", "2", "--points", "64", "--out", str(tmp_path)]) == 0
        assert len(rows(tmp_path / "manifest.csv")) == 16

    def test_byte_identical_reruns(self, tmp_path):
        for name in ("a", "b"):
            assert main(["datagen", "--shapes", "6", "--points", "64", "--seed", "3", "--out", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_snapshot_reproduces(self, tmp_path):
        main(["datagen", "--shapes", "5", "--points", "80", "--ratio", "0.3", "--seed", "9", "--out", str(tmp_path / "a")])
        main(["datagen", "--config", str(tmp_path / "a" / "resolved_config.txt"), "--out", str(tmp_path / "b")])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_bad_ratio_names_flag(self, tmp_path, capsys):
        assert main(["datagen", "--ratio", "1.5", "--out", str(tmp_path / "d")]) == 2
        assert "--ratio" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_ratio_range(self, tmp_path):
        assert main(["datagen", "--shapes", "4", "--points", "100", "--ratio", "0.2:0.8", "--out", str(tmp_path / "a")]) == 0
        ratios = [float(r["visible_ratio"]) for r in rows(tmp_path / "a" / "manifest.csv")]
        assert len(set(ratios)) == 4 and all(0.2 <= r <= 0.8 for r in ratios)
        main(["datagen", "--config", str(tmp_path / "a" / "resolved_config.txt"), "--out", str(tmp_path / "b")])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    @pytest.mark.parametrize("ratio", ["0.8:0.2", "x", "0:1"])
    def test_bad_ratio_range(self, tmp_path, ratio):
        assert main(["datagen", "--ratio", ratio, "--out", str(tmp_path / "d")]) == 2

    def test_bad_category(self, tmp_path):
        assert main(["datagen", "--categories", "torus", "--out", str(tmp_path / "d")]) == 2

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        args = ["datagen", "--shapes", "2", "--points", "64", "--out", str(tmp_path)]
        assert main(args) == 0
        assert main(args) == 2
        assert "--force" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0

    def test_argparse_errors_exit_2(self):
        with pytest.raises(SystemExit) as e:
            main(["datagen"])
        assert e.value.code == 2

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("nonsense\n")
        assert main(["datagen", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "d")]) == 2


class TestTrain:
    def test_outputs(self, pipe):
        for stage in (1, 2, 3):
            d = pipe / f"s{stage}"
            assert (d / f"stage{stage}.ckpt").is_file() and (d / f"stage{stage}_log.csv").is_file()
            assert (d / "resolved_config.txt").is_file()
            assert sorted(p.name for p in (d / "checkpoints").iterdir()) == ["ckpt_000003.ckpt", "ckpt_000006.ckpt"]

    def test_freeze_across_stages(self, pipe):
        s1, _, _ = ad.load_checkpoint(pipe / "s1" / "stage1.ckpt")
        s3, _, _ = ad.load_checkpoint(pipe / "s3" / "stage3.ckpt")
        for n in s1.names("ae1."):
            assert s1[n].data.tobytes() == s3[n].data.tobytes()

    def test_stage2_without_init(self, pipe, tmp_path, capsys):
        assert main(["train", "--stage", "2", "--data", str(pipe / "data"), "--out", str(tmp_path)]) == 2
        assert "--init" in capsys.readouterr().err

    def test_stage3_from_stage1_checkpoint(self, pipe, tmp_path):
        assert main(["train", "--stage", "3", "--data", str(pipe / "data"), "--init",
                     str(pipe / "s1" / "stage1.ckpt"), "--out", str(tmp_path)]) == 2

    def test_missing_data(self, tmp_path):
        assert main(["train", "--stage", "1", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_key(self, pipe, tmp_path):
        assert main(["train", "--stage", "1", "--data", str(pipe / "data"), "--set", "train.lrr=1",
                     "--out", str(tmp_path)]) == 2

    def test_resume_in_place(self, pipe, tmp_path):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY)
        out = tmp_path / "r"
        base = ["train", "--stage", "1", "--data", str(pipe / "data"), "--config", str(cfg), "--out", str(out)]
        assert main(base) == 0
        full = (out / "stage1.ckpt").read_bytes()
        (out / "stage1.ckpt").unlink()
        assert main(base + ["--resume", str(out / "checkpoints" / "ckpt_000003.ckpt")]) == 0
        assert (out / "stage1.ckpt").read_bytes() == full
        assert main(base + ["--resume", str(out / "missing.ckpt")]) == 2

    def test_snapshot_reproduces_checkpoint(self, pipe, tmp_path):
        assert main(["train", "--stage", "2", "--config", str(pipe / "s2" / "resolved_config.txt"),
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "stage2.ckpt").read_bytes() == (pipe / "s2" / "stage2.ckpt").read_bytes()


class TestComplete:
    def test_gt_matches_eval(self, pipe, tmp_path, capsys):
        ckpt = pipe / "s3" / "stage3.ckpt"
        pair = load_dataset(pipe / "data")["test"][0]
        split_dir = pipe / "data" / "test" / pair.category
        stem = f"{pair.instance_id:05d}_{pair.frame_id:02d}"
        assert main(["complete", "--ckpt", str(ckpt), "--input", str(split_dir / f"{stem}.partial.xyz"),
                     "--gt", str(split_dir / f"{stem}.complete.xyz"), "--out", str(tmp_path)]) == 0
        printed = float(capsys.readouterr().out.split("cd_p ")[1].split()[0])
        model = CompletionModel.from_checkpoint(ckpt)
        expected = eval_cd(lambda p: model.complete(p, 64)[1], [pair], "cdp").overall
        assert printed == expected
        assert len(read_xyz(tmp_path / "fine.xyz")) == 64 and len(read_xyz(tmp_path / "coarse.xyz")) == 32

    @pytest.mark.parametrize("res,code", [(128, 0), (48, 2)])
    def test_resolution(self, pipe, tmp_path, res, code):
        inp = next((pipe / "data" / "train").rglob("*.partial.xyz"))
        assert main(["complete", "--ckpt", str(pipe / "s3" / "stage3.ckpt"), "--input", str(inp),
                     "--resolution", str(res), "--out", str(tmp_path)]) == code
        if code == 0:
            assert len(read_xyz(tmp_path / "fine.xyz")) == res

    def test_missing_checkpoint(self, pipe, tmp_path):
        inp = next((pipe / "data" / "train").rglob("*.partial.xyz"))
        assert main(["complete", "--ckpt", str(tmp_path / "none.ckpt"), "--input", str(inp),
                     "--out", str(tmp_path / "o")]) == 2

    def test_malformed_input_is_runtime_error(self, pipe, tmp_path, capsys):
        (tmp_path / "bad.xyz").write_text("1 2 nan\n")
        assert main(["complete", "--ckpt", str(pipe / "s3" / "stage3.ckpt"), "--input", str(tmp_path / "bad.xyz"),
                     "--out", str(tmp_path / "o")]) == 1
        assert "bad.xyz:1" in capsys.readouterr().err


class TestEval:
    def test_sweep_rows(self, pipe):
        got = rows(pipe / "reports" / "sweep.csv")
        assert [r["visible_ratio"] for r in got] == ["0.2", "0.4", "0.6", "0.8"]

    def test_cd_report(self, pipe):
        got = rows(pipe / "reports" / "cdp.csv")
        assert got[-1]["category"] == "average"
        assert np.isclose(float(got[-1]["value"]), np.mean([float(r["value"]) for r in got[:-1]]), rtol=0, atol=1e-15)
        assert (pipe / "reports" / "cdp.csv.config.txt").is_file()

    def test_consistency_report(self, pipe):
        (row,) = rows(pipe / "reports" / "consistency.csv")
        assert row["pairing"] == "adjacent" and float(row["value"]) >= 0

    def test_existing_report_needs_force(self, pipe):
        args = ["eval", "--ckpt", str(pipe / "s3" / "stage3.ckpt"), "--dataset", str(pipe / "data"),
                "--out", str(pipe / "reports" / "cdp.csv")]
        assert main(args) == 2

    def test_empty_split(self, pipe, tmp_path):
        assert main(["eval", "--ckpt", str(pipe / "s3" / "stage3.ckpt"), "--dataset", str(pipe / "data"),
                     "--split", "nosuch", "--out", str(tmp_path / "r.csv")]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "pcomplete.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "datagen" in out.stdout
