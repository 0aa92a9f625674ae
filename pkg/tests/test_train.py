import dataclasses

import numpy as np
import pytest

from ltrdiff import numcore as nc
from ltrdiff.data import Dataset, QueryGroup, binarize
from ltrdiff.evaluation import evaluate
from ltrdiff.model import load_checkpoint
from ltrdiff.numcore import Tensor
from ltrdiff.objectives import ObjectiveKind
from ltrdiff.train import (
    NonFiniteError,
    OptimState,
    RunConfig,
    TrainingAborted,
    TrainLog,
    adamw_step,
    train,
)


def separable_splits(seed=0, n_queries=(30, 10, 10), f=5):
    """Grades 0/1, feature 0 equal to the grade plus small noise, the rest noise."""
    rng = np.random.default_rng(seed)
    out, offset = {}, 0
    for name, n in zip(("train", "vali", "test"), n_queries):
        qs = []
        for q in range(n):
            m = int(rng.integers(6, 12))
            g = rng.permutation(np.arange(m) % 2)
            x = rng.normal(size=(m, f))
            x[:, 0] = 3.0 * g + 0.1 * rng.normal(size=m)
            qs.append(QueryGroup(str(offset + q), x, g, binarize(g, "letor")))
        offset += n
        out[name] = Dataset(qs, f, 3)
    return out


def config(tmp_path, objective="disc_pointwise", **kw):
    base = dict(objective=ObjectiveKind(objective), data_dir=tmp_path, out_dir=tmp_path / "run", seed=0,
                epochs=2, batch_size=64, hidden_dim=16, num_hidden_layers=2, time_embed_dim=4)
    base.update(kw)
    return RunConfig(**base)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = Tensor(np.array([1.0, -2.0]))
        adamw_step([p], [np.zeros(2)], OptimState.for_params([p], weight_decay=0.0))
        np.testing.assert_array_equal(p.values, [1.0, -2.0])

    def test_first_step_closed_form(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = Tensor(np.zeros(3))
        state = OptimState.for_params([p], learning_rate=0.01, weight_decay=0.0)
        adamw_step([p], [g], state)
        np.testing.assert_allclose(p.values, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert state.step == 1

    def test_decay_only_shrinks(self):
        p = Tensor(np.array([3.0, 4.0]))
        state = OptimState.for_params([p], learning_rate=0.1, weight_decay=0.5)
        before = np.linalg.norm(p.values)
        adamw_step([p], [np.zeros(2)], state)
        assert np.linalg.norm(p.values) < before
        np.testing.assert_allclose(p.values, [3.0 * 0.95, 4.0 * 0.95], rtol=1e-15)

    def test_nan_gradient(self):
        p = Tensor(np.ones(2))
        with pytest.raises(NonFiniteError):
            adamw_step([p], [np.array([np.nan, 0.0])], OptimState.for_params([p]))
        np.testing.assert_array_equal(p.values, [1.0, 1.0])

    def test_shape_mismatch(self):
        p = Tensor(np.ones(2))
        with pytest.raises(ValueError):
            adamw_step([p], [np.ones(3)], OptimState.for_params([p]))


class TestRunConfig:
    def test_round_trip(self, tmp_path):
        cfg = config(tmp_path, "gen_pairwise", sigma_max=0.5, pair_cat_weighting=False, k_fraction=0.25)
        back = RunConfig.from_text(cfg.to_text())
        assert back == dataclasses.replace(cfg, data_dir=cfg.data_dir.resolve(), out_dir=cfg.out_dir.resolve())

    def test_relative_paths_and_comments(self, tmp_path):
        (tmp_path / "data").mkdir()
        path = tmp_path / "run.cfg"
        path.write_text("# a run\nobjective = disc_pairwise\ndata_dir = data\nout_dir = out  # here\nseed = 3\n")
        cfg = RunConfig.load(path)
        assert cfg.data_dir == (tmp_path / "data").resolve() and cfg.seed == 3
        assert cfg.effective_batch_size == 512

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_text(f"objective = disc_pointwise\ndata_dir = {tmp_path}\nout_dir = o\nseed = 1\nlr = 3\n")

    def test_missing_seed(self, tmp_path):
        with pytest.raises(ValueError, match="seed"):
            RunConfig.from_text(f"objective = disc_pointwise\ndata_dir = {tmp_path}\nout_dir = o\n")

    def test_missing_data_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.from_text(f"objective = disc_pointwise\ndata_dir = {tmp_path / 'nope'}\nout_dir = o\nseed = 1\n")

    def test_bad_values(self, tmp_path):
        head = f"objective = disc_pointwise\ndata_dir = {tmp_path}\nout_dir = o\nseed = 1\n"
        for extra in ("k_fraction = 0\n", "noise_std = -1\n", "squared_loss = maybe\n", "objective = listwise\n"):
            with pytest.raises(ValueError):
                RunConfig.from_text(head + extra)


class TestTrainLog:
    def test_csv_round_trip(self):
        log = TrainLog()
        log.append(10, 0.5, 0.25)
        log.append(20, 1 / 3, 0.1)
        text = log.to_csv()
        assert text.splitlines()[0] == "step,train_loss,val_ndcg10"
        assert TrainLog.from_csv(text) == log

    def test_steps_strictly_increase(self):
        log = TrainLog()
        log.append(5, 0.0, 0.0)
        with pytest.raises(ValueError):
            log.append(5, 0.0, 0.0)


class TestTrain:
    def test_single_evaluation_point(self, tmp_path):
        splits = separable_splits()
        res = train(config(tmp_path, eval_interval=10_000, epochs=3), splits, write_outputs=False)
        assert len(res.log.records) == 1
        assert res.best_step == res.log.records[0].step
        assert evaluate(res.net, splits["vali"]).mean_ndcg == res.best_val_ndcg10

    def test_separable_reaches_perfect_ndcg(self, tmp_path):
        res = train(config(tmp_path, epochs=15, learning_rate=1e-2), separable_splits(), write_outputs=False)
        assert res.best_val_ndcg10 == 1.0

    @pytest.mark.parametrize("objective", [k.value for k in ObjectiveKind])
    def test_seed_determinism(self, tmp_path, objective):
        splits = separable_splits(1)
        a = train(config(tmp_path, objective, out_dir=tmp_path / "a"), splits)
        b = train(config(tmp_path, objective, out_dir=tmp_path / "b"), splits)
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
        c = train(config(tmp_path, objective, out_dir=tmp_path / "c", seed=1), splits)
        assert c.net.flat_parameters().tobytes() != a.net.flat_parameters().tobytes()

    def test_selection_dominance_and_round_trip(self, tmp_path):
        splits = separable_splits(2)
        res = train(config(tmp_path, "gen_pointwise", epochs=4, eval_interval=1), splits)
        assert len(res.log.records) > 4
        assert all(res.best_val_ndcg10 >= r.val_ndcg10 - 1e-12 for r in res.log.records)
        net, step, extra = load_checkpoint(res.checkpoint)
        assert step == res.best_step and extra["val_ndcg10"] == res.best_val_ndcg10
        assert extra["method"] == "DiffusionRank (pointwise)"
        assert evaluate(net, splits["vali"]).mean_ndcg == res.best_val_ndcg10
        assert (tmp_path / "run" / "config.txt").is_file()

    def test_max_steps_and_subsample(self, tmp_path):
        res = train(config(tmp_path, max_steps=3, eval_interval=1, k_fraction=0.25), separable_splits(), False)
        assert [r.step for r in res.log.records] == [1, 2, 3]

    def test_non_finite_loss_aborts(self, tmp_path, monkeypatch):
        import ltrdiff.train as tr

        calls = {"n": 0}
        real = tr.disc_pointwise_loss

        def flaky(*args, **kw):
            calls["n"] += 1
            loss = real(*args, **kw)
            return nc.scale(loss, np.inf) if calls["n"] > 3 else loss

        monkeypatch.setattr(tr, "disc_pointwise_loss", flaky)
        with np.errstate(invalid="ignore", over="ignore"):
            with pytest.raises(TrainingAborted) as err:
                train(config(tmp_path, eval_interval=1), separable_splits())
        assert err.value.checkpoint.is_file()
        _, step, _ = load_checkpoint(err.value.checkpoint)
        assert step <= 3

    def test_generative_with_noise_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            train(config(tmp_path, "gen_pairwise", noise_std=0.1), separable_splits(), False)

    def test_perturbation_changes_training_only(self, tmp_path):
        splits = separable_splits(3)
        clean = train(config(tmp_path, "disc_pairwise"), splits, False)
        noisy = train(config(tmp_path, "disc_pairwise", noise_std=0.1), splits, False)
        assert clean.net.flat_parameters().tobytes() != noisy.net.flat_parameters().tobytes()
        zero = train(config(tmp_path, "disc_pairwise", noise_std=0.0), splits, False)
        assert zero.net.flat_parameters().tobytes() == clean.net.flat_parameters().tobytes()
