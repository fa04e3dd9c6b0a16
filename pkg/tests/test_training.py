"""Schedule, Adam, history bookkeeping, determinism and resume."""

import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from geomdeeponet import autodiff as ad
from geomdeeponet.dataset import fit_stats, generate_dataset, random_split
from geomdeeponet.errors import ConfigError, ResumeError, TrainingError
from geomdeeponet.model import GeomConfig, VanillaConfig, build_model
from geomdeeponet.training import (
    AdamState, TrainConfig, TrainHistory, HistoryRecord, TrainingState, adam_step, lr_at,
    prepare_arrays, resume, scaled_losses, train,
)


def tiny_geom():
    return GeomConfig(n_params=4, h=8, branch_stage1_widths=[8], branch_stage2_widths=[8],
                      trunk_dense_widths=[8], trunk_siren_widths=[8, 8])


@pytest.fixture(scope="module")
def beam_data():
    ds = generate_dataset("BeamWithHole", 10, 3, (60, 120))
    tr, te = random_split(ds, 0.8, 0)
    return ds.by_id(tr), ds.by_id(te)


def fresh(beam_data, cfg=None, seed=0):
    cfg = cfg or tiny_geom()
    return build_model(cfg, np.random.default_rng(seed), fit_stats(beam_data[0]))


def _adam_oracle(x0, grads, lr_fn, b1=0.9, b2=0.999, eps=1e-8):
    """Element-by-element textbook Adam."""
    x = list(x0)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t, g in enumerate(grads, start=1):
        for k in range(len(x)):
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            mh = m[k] / (1 - b1 ** t)
            vh = v[k] / (1 - b2 ** t)
            x[k] -= lr_fn(t - 1) * mh / (math.sqrt(vh) + eps)
    return np.array(x)


class TestSchedule:
    def test_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 2e-3
        assert_allclose(lr_at(5000, cfg), 1e-3, rtol=1e-15)
        assert_allclose(lr_at(20000, cfg), 2e-3 / 5, rtol=1e-15)

    def test_monotone(self):
        cfg = TrainConfig()
        lrs = [lr_at(t, cfg) for t in range(0, 30000, 997)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("field,value", [("batch_size", 0), ("lr0", 0.0), ("eval_every", 0)])
    def test_validation(self, field, value):
        with pytest.raises(ConfigError, match=field):
            TrainConfig(**{field: value})

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"batchsize": 3})


class TestAdam:
    def test_first_step_is_lr(self, rng):
        p = ad.Parameter("p", rng.normal(size=5))
        g = rng.normal(size=5) * 10
        before = p.value.copy()
        adam_step([p], AdamState.zeros([p]), 0.01, {"p": g})
        assert_allclose(before - p.value, 0.01 * np.sign(g), rtol=1e-6)

    def test_zero_gradient_no_move(self):
        p = ad.Parameter("p", np.ones(3))
        adam_step([p], AdamState.zeros([p]), 0.1, {"p": np.zeros(3)})
        assert np.all(p.value == 1.0)

    def test_matches_scalar_oracle(self, rng):
        x0 = rng.normal(size=4)
        grads = [rng.normal(size=4) for _ in range(10)]
        cfg = TrainConfig(lr0=0.05, decay_coefficient=0.1)
        p = ad.Parameter("p", x0.copy())
        state = AdamState.zeros([p])
        for t, g in enumerate(grads):
            adam_step([p], state, lr_at(t, cfg), {"p": g})
        assert_allclose(p.value, _adam_oracle(x0, grads, lambda t: lr_at(t, cfg)), rtol=0, atol=1e-14)

    def test_minimises_quadratic(self):
        p = ad.Parameter("p", np.array([3.0, -2.0]))
        state = AdamState.zeros([p])
        for _ in range(2000):
            adam_step([p], state, 0.05, {"p": 2 * p.value})
        assert np.abs(p.value).max() < 1e-2

    def test_non_finite_names_parameter(self):
        p = ad.Parameter("layer.weight", np.ones(2))
        with pytest.raises(TrainingError, match="layer.weight"):
            adam_step([p], AdamState.zeros([p]), 0.1, {"layer.weight": np.array([1.0, np.nan])})

    def test_state_round_trip(self, rng):
        p = ad.Parameter("p", rng.normal(size=(2, 3)))
        s = AdamState.zeros([p])
        adam_step([p], s, 0.1, {"p": rng.normal(size=(2, 3))})
        back = AdamState.from_dict(json.loads(json.dumps(s.to_dict())), [p])
        assert back.t == 1
        assert back.m["p"].tobytes() == s.m["p"].tobytes()
        assert back.v["p"].tobytes() == s.v["p"].tobytes()


class TestHistory:
    def test_must_increase(self):
        h = TrainHistory()
        h.append(HistoryRecord(5, 1.0, 1.0, 0.1, [1.0], [1.0]))
        with pytest.raises(TrainingError):
            h.append(HistoryRecord(5, 1.0, 1.0, 0.1, [1.0], [1.0]))

    def test_wall_time_excluded(self, tmp_path):
        h = TrainHistory([HistoryRecord(0, 1.0, 2.0, 0.1, [1.0], [2.0], wall_time=3.5)])
        h.to_jsonl(tmp_path / "h.jsonl")
        assert "wall_time" not in json.loads((tmp_path / "h.jsonl").read_text())
        h.to_jsonl(tmp_path / "t.jsonl", with_time=True)
        assert json.loads((tmp_path / "t.jsonl").read_text())["wall_time"] == 3.5


class TestLoop:
    def test_history_points_and_lr(self, beam_data):
        cfg = TrainConfig(iterations=25, eval_every=10, resample_N=32, batch_size=4)
        st = train(fresh(beam_data), *beam_data, cfg)
        assert st.history.iterations == [0, 10, 20, 25]
        for r in st.history.records:
            assert r.lr == lr_at(r.iteration, cfg)

    def test_iteration_zero_loss_is_initial_model(self, beam_data):
        cfg = TrainConfig(iterations=3, eval_every=10, resample_N=32)
        m = fresh(beam_data)
        from geomdeeponet.training import _derived_rngs
        rs, _ = _derived_rngs(cfg.seed)
        data = prepare_arrays(m, beam_data[0], 32, rs)
        expected, _ = scaled_losses(m, data)
        st = train(m, *beam_data, cfg)
        assert st.history[0].train_loss == expected

    def test_loss_decreases(self, beam_data):
        cfg = TrainConfig(iterations=300, eval_every=300, resample_N=64, batch_size=8)
        st = train(fresh(beam_data), *beam_data, cfg)
        assert st.history[-1].train_loss < 0.5 * st.history[0].train_loss

    def test_best_tracks_test_loss(self, beam_data):
        cfg = TrainConfig(iterations=60, eval_every=20, resample_N=32)
        st = train(fresh(beam_data), *beam_data, cfg)
        best = st.history.best()
        assert st.best_iteration == best.iteration
        assert st.best_test_loss == best.test_loss

    @pytest.mark.parametrize("make", [tiny_geom, lambda: VanillaConfig(4, h=8, branch_widths=[8], trunk_widths=[8])])
    def test_repeat_is_bitwise(self, make, beam_data, tmp_path):
        cfg = TrainConfig(iterations=40, eval_every=10, resample_N=32, batch_size=4, seed=7)
        runs = []
        for k in range(2):
            st = train(fresh(beam_data, make()), *beam_data, cfg)
            st.history.to_jsonl(tmp_path / f"h{k}.jsonl")
            st.save(tmp_path / f"s{k}.json")
            runs.append(((tmp_path / f"h{k}.jsonl").read_bytes(), (tmp_path / f"s{k}.json").read_bytes()))
        assert runs[0] == runs[1]

    def test_different_seed_differs(self, beam_data):
        a = train(fresh(beam_data), *beam_data, TrainConfig(iterations=5, resample_N=16, seed=1))
        b = train(fresh(beam_data), *beam_data, TrainConfig(iterations=5, resample_N=16, seed=2))
        assert a.history[-1].train_loss != b.history[-1].train_loss


class TestResume:
    CFG = TrainConfig(iterations=30, eval_every=10, resample_N=32, batch_size=4, seed=3)

    def test_split_equals_unsplit(self, beam_data, tmp_path):
        whole = train(fresh(beam_data), *beam_data, self.CFG)
        half = train(fresh(beam_data), *beam_data, self.CFG, stop_at=15)
        half.save(tmp_path / "state.json")
        done = resume(tmp_path / "state.json", *beam_data, self.CFG)
        for p, q in zip(whole.model.parameters(), done.model.parameters()):
            assert p.value.tobytes() == q.value.tobytes()
        assert whole.history.to_list() != []
        assert [r.train_loss for r in whole.history] == [r.train_loss for r in done.history]

    def test_extend_iterations(self, beam_data):
        st = train(fresh(beam_data), *beam_data, self.CFG)
        longer = TrainConfig(**{**self.CFG.to_dict(), "iterations": 40})
        st = resume(st, *beam_data, longer)
        assert st.iteration == 40 and st.history.iterations[-1] == 40

    def test_batch_size_mismatch(self, beam_data):
        st = train(fresh(beam_data), *beam_data, self.CFG, stop_at=5)
        other = TrainConfig(**{**self.CFG.to_dict(), "batch_size": 8})
        with pytest.raises(ResumeError, match="batch_size"):
            resume(st, *beam_data, other)

    def test_case_mismatch(self, beam_data):
        st = train(fresh(beam_data), *beam_data, self.CFG, stop_at=5)
        with pytest.raises(ResumeError):
            resume(st, beam_data[0][::-1], beam_data[1], self.CFG)

    def test_state_round_trip(self, beam_data, tmp_path):
        st = train(fresh(beam_data), *beam_data, self.CFG, stop_at=12)
        st.save(tmp_path / "a.json")
        TrainingState.load(tmp_path / "a.json").save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
