import csv

import numpy as np
import pytest

from pcomplete import autodiff as ad
from pcomplete import data, train
from pcomplete.data import DatasetConfig, SamplePair
from pcomplete.errors import StateError
from pcomplete.model import ModelConfig
from pcomplete.train import TrainConfig

CFG = ModelConfig(encoder_widths1=(16, 32), encoder_widths2=(32,), code_dim=32, decoder_widths=(64,),
                  coarse_points=16, refiner_widths=(32, 16), dtype="float64")


@pytest.fixture(scope="module")
def dataset():
    return data.make_dataset(DatasetConfig(shapes=16, n_points=64, seed=1))


@pytest.fixture(scope="module")
def stage1(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    res = train.train_stage1(TrainConfig(stage=1, max_steps=60, batch_size=4, lr=1e-3), dataset, CFG, out)
    return res


@pytest.fixture(scope="module")
def stage2(dataset, stage1, tmp_path_factory):
    out = tmp_path_factory.mktemp("s2")
    return train.train_stage2(TrainConfig(stage=2, max_steps=30, batch_size=4, lr=1e-3), dataset,
                              stage1.checkpoint, out)


def read_log(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestHelpers:
    def test_stack_points_cycles(self):
        out = train.stack_points([np.arange(6.0).reshape(2, 3), np.ones((3, 3))], np.float64)
        assert out.shape == (2, 3, 3)
        np.testing.assert_array_equal(out[0, 2], [0, 1, 2])

    def test_batch_indices_replayable(self):
        a = train.batch_indices(10, 4, seed=1, stage=2, step=7)
        np.testing.assert_array_equal(a, train.batch_indices(10, 4, seed=1, stage=2, step=7))
        assert len(set(a.tolist())) == 4
        assert len(train.batch_indices(2, 5, 0, 1, 0)) == 5

    @pytest.mark.parametrize("kw", [dict(stage=4), dict(max_steps=0), dict(recon_metric="emd"),
                                    dict(checkpoint_every=-1), dict(beta=-1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_config_round_trip(self):
        c = TrainConfig(stage=3, lr=0.01, gamma_end=2.0)
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"stagee": 1})


class TestStage1:
    def test_loss_decreases(self, stage1):
        cd = [r["cd_coarse"] for r in stage1.history]
        assert np.mean(cd[-10:]) < 0.7 * np.mean(cd[:10])

    def test_outputs(self, stage1):
        out = stage1.checkpoint.parent
        assert stage1.checkpoint.name == "stage1.ckpt"
        rows = read_log(out / "stage1_log.csv")
        assert len(rows) == 60 and tuple(rows[0]) == train.LOG_FIELDS
        params, optim, meta = ad.load_checkpoint(stage1.checkpoint)
        assert meta["stage"] == 1 and meta["step"] == 60
        assert ModelConfig.from_dict(meta["model"]) == CFG
        assert any(k.startswith("adam.m/ae1.") for k in optim)

    def test_only_ae1_trained(self, stage1):
        fresh = train.init_params(CFG, 0)
        for n in stage1.model.params:
            same = np.array_equal(stage1.model.params[n].data, fresh[n].data)
            assert same != n.startswith("ae1.")

    def test_checkpoint_cadence(self, dataset, tmp_path):
        train.train_stage1(TrainConfig(stage=1, max_steps=30, batch_size=2, checkpoint_every=10),
                           dataset, CFG, tmp_path)
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["ckpt_000010.ckpt", "ckpt_000020.ckpt", "ckpt_000030.ckpt"]

    def test_resume_is_bitwise(self, dataset, tmp_path, monkeypatch):
        config = TrainConfig(stage=1, max_steps=20, batch_size=2, lr=1e-3, checkpoint_every=10)
        train.train_stage1(config, dataset, CFG, tmp_path / "a")

        real = train.batch_indices

        def interrupted(n, bs, seed, stage, step):
            if step == 13:
                raise KeyboardInterrupt
            return real(n, bs, seed, stage, step)

        monkeypatch.setattr(train, "batch_indices", interrupted)
        with pytest.raises(KeyboardInterrupt):
            train.train_stage1(config, dataset, CFG, tmp_path / "b")
        monkeypatch.setattr(train, "batch_indices", real)
        assert not (tmp_path / "b" / "stage1.ckpt").exists()
        train.train_stage1(config, dataset, CFG, tmp_path / "b",
                           resume=tmp_path / "b" / "checkpoints" / "ckpt_000010.ckpt")
        for name in ("stage1.ckpt", "stage1_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_wrong_stage(self, dataset, stage1, tmp_path):
        with pytest.raises(StateError):
            train.train_stage2(TrainConfig(stage=2, max_steps=5), dataset, stage1.checkpoint, tmp_path,
                               resume=stage1.checkpoint)


class TestStage2:
    def test_ae1_byte_identical(self, stage1, stage2):
        before, _, _ = ad.load_checkpoint(stage1.checkpoint)
        after, _, _ = ad.load_checkpoint(stage2.checkpoint)
        for n in before.names("ae1."):
            assert before[n].data.tobytes() == after[n].data.tobytes()

    def test_only_ae2_encoder_changes(self, stage1, stage2):
        before, _, _ = ad.load_checkpoint(stage1.checkpoint)
        for n in before:
            changed = not np.array_equal(before[n].data, stage2.model.params[n].data)
            assert changed == n.startswith("ae2.encoder.")

    def test_copied_encoder_on_identical_pairs_is_zero(self, dataset, stage1):
        pairs = [SamplePair(p.complete, p.complete, p.category, 1.0, p.instance_id)
                 for p in dataset["train"]]
        res = train.train_stage2(TrainConfig(stage=2, max_steps=3, batch_size=4, init_ae2_from_ae1=True),
                                 pairs, stage1.checkpoint)
        assert res.history[0]["feat"] == 0.0

    def test_val_curve(self, dataset, stage1):
        dataset = {"train": dataset["train"], "val": dataset["train"][:4]}
        res = train.train_stage2(TrainConfig(stage=2, max_steps=20, batch_size=4, lr=1e-3, eval_every=10),
                                 dataset, stage1.checkpoint)
        assert [s for s, _ in res.val_curve] == [0, 10, 20]
        assert res.val_curve[0][1] == pytest.approx(train.mean_feat_match(
            train.CompletionModel(CFG, ad.load_checkpoint(stage1.checkpoint)[0]), dataset["val"]))

    def test_requires_init(self, dataset):
        with pytest.raises(StateError):
            train.train_stage(TrainConfig(stage=2), dataset)

    def test_requires_stage1_checkpoint(self, dataset, tmp_path):
        ad.save_checkpoint(tmp_path / "x.ckpt", train.init_params(CFG), meta={"model": CFG.to_dict()})
        with pytest.raises(StateError):
            train.train_stage2(TrainConfig(stage=2, max_steps=2), dataset, tmp_path / "x.ckpt")


class TestStage3:
    def test_runs_and_logs_schedule(self, dataset, stage2, tmp_path):
        config = TrainConfig(stage=3, max_steps=10, batch_size=2, lr=1e-3)
        res = train.train_stage3(config, dataset, stage2.checkpoint, out_dir=tmp_path)
        rows = read_log(tmp_path / "stage3_log.csv")
        w = config.weights()
        for r in rows:
            a, b, g = w.at(int(r["step"]))
            assert (float(r["alpha"]), float(r["beta"]), float(r["gamma"])) == (a, b, g)
            assert all(r[k] != "" for k in train.LOG_FIELDS)
        before, _, _ = ad.load_checkpoint(stage2.checkpoint)
        for n in before.names("ae1."):
            assert before[n].data.tobytes() == res.model.params[n].data.tobytes()
        assert not np.array_equal(before["refiner.l0.weight"].data, res.model.params["refiner.l0.weight"].data)

    def test_zero_gamma_leaves_refiner(self, dataset, stage2):
        config = TrainConfig(stage=3, max_steps=5, batch_size=2, gamma_start=0.0, gamma_end=0.0)
        res = train.train_stage3(config, dataset, stage2.checkpoint)
        before, _, _ = ad.load_checkpoint(stage2.checkpoint)
        for n in before.names("refiner."):
            np.testing.assert_array_equal(res.model.params[n].data, before[n].data)

    def test_unfrozen_decoder_trains(self, dataset, stage2):
        config = TrainConfig(stage=3, max_steps=3, batch_size=2, lr=1e-3, freeze_ae1_decoder=False)
        res = train.train_stage3(config, dataset, stage2.checkpoint)
        before, _, _ = ad.load_checkpoint(stage2.checkpoint)
        assert not np.array_equal(before["ae1.decoder.l0.weight"].data, res.model.params["ae1.decoder.l0.weight"].data)
        np.testing.assert_array_equal(before["ae1.encoder.l0.weight"].data, res.model.params["ae1.encoder.l0.weight"].data)

    def test_requires_stage2(self, dataset, stage1):
        with pytest.raises(StateError):
            train.train_stage3(TrainConfig(stage=3, max_steps=2), dataset, stage1.checkpoint)
        with pytest.raises(StateError):
            train.train_stage3(TrainConfig(stage=3, max_steps=2), dataset)

    def test_from_scratch(self, dataset):
        res = train.train_stage3(TrainConfig(stage=3, max_steps=2, batch_size=2, from_scratch=True),
                                 dataset, model_config=CFG)
        assert len(res.history) == 2

    def test_no_refine_ablation(self, dataset):
        cfg = ModelConfig.from_dict({**CFG.to_dict(), "refine": False, "coarse_points": 64})
        res = train.train_stage3(TrainConfig(stage=3, max_steps=2, batch_size=2, from_scratch=True),
                                 dataset, model_config=cfg)
        assert res.history[0]["cd_fine"] == res.history[0]["cd_coarse"]

    def test_empty_split(self, stage2):
        with pytest.raises(StateError):
            train.train_stage3(TrainConfig(stage=3, max_steps=2), {"train": []}, stage2.checkpoint)
