import math

import numpy as np
import pytest

from ctpseg import models as M
from ctpseg import training as T
from ctpseg.autodiff import Tensor
from ctpseg.data import ScanStack, folds_for_dataset, split_scans
from ctpseg.errors import (
    EmptyEnsemble,
    EmptySplit,
    HeterogeneousInputs,
    IncompatibleCheckpoint,
    NonFiniteGradient,
    ShapeMismatch,
)
from ctpseg.losses import LossConfig
from ctpseg.metrics import dsc

TINY = dict(input_size=(32, 32), backbone_channels=(4, 4, 8, 8), head_channels=8)


def tiny_net(seed=0):
    return M.build_pspnet(M.PspConfig(**TINY), seed=seed)


class FixedModel(M.SegmentationModel):
    """Returns preset logits per slice; stands in for a trained network."""

    arch = "fixed"

    def __init__(self, logits, input_size=(2, 2)):
        super().__init__(M.PspConfig(input_size=input_size))
        self.logits = np.asarray(logits, dtype=np.float32)

    def predict_logits(self, x):
        return np.broadcast_to(self.logits, (len(x),) + self.logits.shape).copy()


def _scan(depth=2, size=(2, 2)):
    return ScanStack("S", "S_0", np.zeros((5, depth, *size)), np.zeros((depth, *size)))


def _fg_logits(p, size=(2, 2)):
    out = np.zeros((2, *size))
    out[1] = math.log(p / (1 - p))
    return out


# -- optimizer ---------------------------------------------------------------------


def test_rmsprop_first_step():
    p = {"a": Tensor(np.array([0.0]))}
    st = T.RmspropState(lr=0.1, alpha=0.9, eps=0.0)
    T.rmsprop_step(p, {"a": np.array([1.0])}, st)
    assert st.acc["a"][0] == pytest.approx(0.1)
    assert p["a"].data[0] == pytest.approx(-0.3162278, abs=1e-7)


def test_rmsprop_zero_gradient():
    p = {"a": Tensor(np.array([2.0, -1.0]))}
    st = T.RmspropState(lr=0.1)
    st.acc["a"] = np.array([0.5, 0.2])
    T.rmsprop_step(p, {"a": np.zeros(2)}, st)
    assert p["a"].data.tolist() == [2.0, -1.0]
    assert np.allclose(st.acc["a"], [0.45, 0.18])


def test_rmsprop_two_step_recursion():
    p = {"a": Tensor(np.array([1.0]))}
    st = T.RmspropState(lr=0.01, alpha=0.9, eps=1e-8)
    g = 0.5
    acc, x = 0.0, 1.0
    for _ in range(2):
        T.rmsprop_step(p, {"a": np.array([g])}, st)
        acc = 0.9 * acc + 0.1 * g * g
        x -= 0.01 * g / (math.sqrt(acc) + 1e-8)
    assert p["a"].data[0] == pytest.approx(x, abs=1e-15)


def test_rmsprop_errors():
    p = {"a": Tensor(np.zeros(2))}
    with pytest.raises(ShapeMismatch):
        T.rmsprop_step(p, {"a": np.zeros(3)}, T.RmspropState(0.1))
    with pytest.raises(NonFiniteGradient):
        T.rmsprop_step(p, {"a": np.array([1.0, np.nan])}, T.RmspropState(0.1))


# -- schedule -----------------------------------------------------------------------


def _run_schedule(values, cfg=None):
    cfg = cfg or T.TrainConfig()
    st = T.ScheduleState(lr=1e-3)
    return [T.schedule_update(st, v, cfg) for v in values], st


def test_schedule_reduce_and_stop():
    actions, st = _run_schedule([0.5] + [0.4] * 50)
    assert actions[20] == "reduce_lr" and actions[40] == "reduce_lr"
    assert actions[50] == "stop" and st.stop
    assert [i for i, a in enumerate(actions) if a == "reduce_lr"] == [20, 40]
    assert st.lr_history[-1] == pytest.approx(1e-5)


def test_schedule_reset_on_improvement():
    actions, st = _run_schedule([0.5] + [0.4] * 18 + [0.6] + [0.4] * 5)
    assert "reduce_lr" not in actions
    assert st.since_improvement == 5 and st.best == 0.6


def test_schedule_ties_are_stagnation():
    actions, st = _run_schedule([0.5] * 21)
    assert actions[20] == "reduce_lr"


def test_lr_trajectory_non_increasing():
    rng = np.random.default_rng(0)
    cfg = T.TrainConfig(plateau_epochs=3, early_stop_patience=40)
    _, st = _run_schedule(rng.uniform(0, 1, 60) * np.linspace(1, 0.2, 60), cfg)
    hist = [1e-3] + st.lr_history
    for a, b in zip(hist, hist[1:]):
        assert b == a or b == pytest.approx(a / 10, rel=1e-12)


# -- prediction and ensembles -------------------------------------------------------


def test_predict_mask_shapes_and_argmax():
    model = FixedModel(np.array([[[0.8, 0.2], [0.5, 0.5]], [[0.2, 0.8], [0.5, 0.5]]]))
    for depth in (2, 8):
        mask = T.predict_mask(model, _scan(depth))
        assert mask.shape == (depth, 2, 2) and mask.dtype == np.uint8
        assert mask[0].tolist() == [[0, 1], [0, 0]]  # ties go to background


def test_predict_mask_deterministic(small_dataset):
    net = tiny_net()
    a = T.predict_mask(net, small_dataset[0])
    b = T.predict_mask(net, small_dataset[0])
    assert a.tobytes() == b.tobytes() and set(np.unique(a)) <= {0, 1}
    with pytest.raises(ShapeMismatch):
        T.predict_mask(net, _scan(2, (16, 16)))


def test_ensemble_threshold():
    scan = _scan()
    models = [FixedModel(_fg_logits(0.6)), FixedModel(_fg_logits(0.3))]
    assert T.ensemble_predict(models, scan).sum() == 0
    assert T.ensemble_predict(models[:1], scan).sum() == 8
    assert T.ensemble_predict([FixedModel(_fg_logits(0.6))] * 2 + models[1:], scan, rule="vote").sum() == 8


def test_ensemble_errors():
    with pytest.raises(EmptyEnsemble):
        T.ensemble_predict([], _scan())
    with pytest.raises(HeterogeneousInputs):
        T.ensemble_predict([FixedModel(_fg_logits(0.6)), FixedModel(_fg_logits(0.6), (4, 4))], _scan())
    with pytest.raises(ValueError):
        T.ensemble_predict([FixedModel(_fg_logits(0.6))], _scan(), rule="median")


# -- training loop --------------------------------------------------------------------


@pytest.fixture(scope="module")
def fitted(small_dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("fit")
    plan = folds_for_dataset(small_dataset, k=5, seed=0)
    cfg = T.TrainConfig(initial_lr=3e-3, max_epochs=8, loss=LossConfig(kind="focal", gamma=1.0))
    net = tiny_net(1)
    M.set_trainable(net, "backbone.stage1.*", False)
    frozen = {n: p.data.copy() for n, p in net.named_parameters() if n.startswith("backbone.stage1.")}
    result = T.train(cfg, net, small_dataset, plan, 0, run_dir=run)
    return net, result, run, split_scans(small_dataset, plan, 0, "val"), frozen


def test_fit_outputs(fitted):
    _, result, run, _, _ = fitted
    assert {p.name for p in run.iterdir()} == {"best.ckpt", "last.ckpt", "train_log.csv"}
    lines = (run / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_dsc,lr" and len(lines) == 9
    assert [r["epoch"] for r in result.log] == list(range(1, 9))


def test_best_checkpoint_is_best_epoch(fitted):
    net, result, _, val, _ = fitted
    vals = [r["val_dsc"] for r in result.log]
    assert result.best.epoch == 1 + int(np.argmax(vals))
    assert result.best.best_dsc == max(vals)
    assert result.last.epoch == 8
    for n, p in net.named_parameters():  # model holds the best weights afterwards
        assert np.array_equal(p.data, result.best.params[n])


def test_checkpoint_dsc_matches_recomputation(fitted):
    _, result, run, val, _ = fitted
    model = M.load_checkpoint(run / "best.ckpt")
    recomputed = np.mean([dsc(T.predict_mask(model, s), s.mask) for s in val])
    assert abs(recomputed - result.best.best_dsc) <= 1e-6


def test_frozen_parameters_untouched(fitted):
    net, result, _, _, frozen = fitted
    for n, before in frozen.items():
        assert np.array_equal(result.last.params[n], before)
        assert np.array_equal(result.best.params[n], before)
    params = dict(net.named_parameters())
    assert all(np.array_equal(params[n].data, before) for n, before in frozen.items())
    assert all(not result.last.trainable[n] for n in frozen)


def test_fit_empty_split(small_dataset):
    with pytest.raises(EmptySplit):
        T.fit(T.TrainConfig(max_epochs=1), tiny_net(), small_dataset[:1], [])


def test_train_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(plateau_epochs=50, early_stop_patience=50).validate()
    with pytest.raises(ValueError):
        T.TrainConfig(initial_lr=0).validate()


def test_incompatible_pretrained():
    unet = M.build_unet2d(M.UNetConfig(base_channels=2, levels=2, input_size=(32, 32)))
    with pytest.raises(IncompatibleCheckpoint):
        T.load_pretrained(tiny_net(), M.checkpoint_from_model(unet))
    other = M.build_pspnet(M.PspConfig(input_size=(32, 32)))
    with pytest.raises(IncompatibleCheckpoint):
        T.load_pretrained(tiny_net(), M.checkpoint_from_model(other))


def test_fine_tune_logs_both_phases(small_dataset, tmp_path):
    plan = folds_for_dataset(small_dataset, k=2, seed=0)
    pre = M.checkpoint_from_model(tiny_net(3))
    cfg = T.TrainConfig(max_epochs=2, fine_tune=T.FineTuneConfig(phase1_epochs=2))
    res = T.fine_tune_two_phase(cfg, tiny_net(4), pre, small_dataset, plan, 0, run_dir=tmp_path)
    assert [r["lr"] for r in res.phase1.log] == [1e-2, 1e-2]
    assert res.phase2.log[0]["lr"] == 1e-4
    for sub in ("phase1", "phase2"):
        assert (tmp_path / sub / "train_log.csv").exists()
    assert (tmp_path / "best.ckpt").exists()
