import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchscope import tensor as T
from patchscope.datasets import DatasetManifest, PreprocessConfig, synth_generate
from patchscope.errors import ConfigError, DataError, NumericalError
from patchscope.nets import build, ladeda_config, tiny_config
from patchscope.trainer import (
    AdamState, PlateauScheduler, TrainConfig, TrainingAborted, adam_step, bce_image_loss, fit,
)

from oracles import adam_reference, plateau_reference


def test_bce_at_zero_logit_is_ln2(f64):
    for label in (0, 1, "real", "fake"):
        assert bce_image_loss(T.Tensor([0.0]), [label]).item() == pytest.approx(np.log(2), abs=1e-12)


def test_bce_confident_fake_is_tiny_not_zero(f64):
    loss = bce_image_loss(T.Tensor([20.0]), [1]).item()
    assert loss == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-12)
    assert loss == pytest.approx(2.06e-9, rel=1e-3) and loss > 0


def test_bce_gradient_at_zero_on_fake(f64):
    z = T.Tensor([0.0], requires_grad=True)
    bce_image_loss(z, [1]).backward()
    assert z.grad[0] == pytest.approx(-0.5)


def test_bce_is_mean_reduced(f64):
    z = T.Tensor([0.0, 20.0, -3.0])
    want = np.mean([np.log(2), np.log1p(np.exp(-20)), np.log1p(np.exp(-3))])
    assert bce_image_loss(z, [0, 1, 0]).item() == pytest.approx(want)


def test_bce_rejects_bad_labels(f64):
    with pytest.raises(ConfigError):
        bce_image_loss(T.Tensor([0.0]), ["unknown"])
    with pytest.raises(ConfigError):
        bce_image_loss(T.Tensor([0.0]), [2])


def _param(value):
    return T.Tensor(np.array([value], dtype=np.float64), requires_grad=True, name="p")


def test_adam_first_step_is_lr_times_sign(f64):
    cfg = TrainConfig()
    for g in (3.0, -0.01):
        p = _param(1.0)
        adam_step([p], [np.array([g])], AdamState.zeros([p]), cfg)
        assert p.data[0] - 1.0 == pytest.approx(-cfg.lr * np.sign(g), rel=1e-6)


def test_adam_zero_gradient_leaves_params(f64):
    p = _param(0.25)
    adam_step([p], [np.zeros(1)], AdamState.zeros([p]), TrainConfig())
    assert p.data[0] == 0.25


@given(theta=st.floats(-5, 5), grads=st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_adam_matches_reference(theta, grads):
    with T.precision("float64"):
        p = _param(theta)
        state = AdamState.zeros([p])
        cfg = TrainConfig(lr=1e-2)
        got = []
        for g in grads:
            adam_step([p], [np.array([g])], state, cfg)
            got.append(p.data[0])
    np.testing.assert_allclose(got, adam_reference(theta, grads, 1e-2), rtol=1e-12, atol=1e-15)


def test_adam_two_steps_decrease_quadratic(f64):
    p = _param(3.0)
    state = AdamState.zeros([p])
    losses = [9.0]
    for _ in range(2):
        adam_step([p], [2 * p.data.copy()], state, TrainConfig(lr=0.1))
        losses.append(float(p.data[0] ** 2))
    assert losses[0] > losses[1] > losses[2]


def test_adam_non_finite_gradient_aborts_without_change(f64):
    p = _param(1.0)
    q = _param(2.0)
    state = AdamState.zeros([p, q])
    with pytest.raises(NumericalError, match="non-finite"):
        adam_step([p, q], [np.ones(1), np.array([np.nan])], state, TrainConfig())
    assert (p.data[0], q.data[0], state.step) == (1.0, 2.0, 0)


def test_plateau_flat_sequence_drops_once():
    sched = PlateauScheduler(TrainConfig())
    drops = [sched.step(0.8) for _ in range(6)]
    assert drops == [False, False, False, False, False, True]
    assert sched.lr == pytest.approx(2e-5)


@given(st.lists(st.sampled_from([0.5, 0.6, 0.6005, 0.7, 0.71, 0.9, 0.9009, 0.95]), max_size=40))
def test_plateau_matches_reference_trace(metrics):
    sched = PlateauScheduler(TrainConfig())
    trace = []
    for m in metrics:
        sched.step(m)
        trace.append(sched.lr)
    assert trace == plateau_reference(metrics)


def test_config_validation():
    for bad in ({"lr": 0}, {"patience": 0}, {"beta1": 1.0}, {"drop_factor": 1.0}, {"precision": "half"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def tiny_set(tmp_path_factory):
    return synth_generate(6, 6, 24, seed=2, out_dir=tmp_path_factory.mktemp("tr"), split_fractions=(0.5, 1 / 3, 1 / 6))


PRE = PreprocessConfig(24, 16)


def test_small_lr_step_decreases_batch_loss(tiny_set):
    from patchscope.datasets import BatchLoader

    with T.precision("float64"):
        model = build(tiny_config(), seed=1).astype("float64")
        batch = next(BatchLoader(tiny_set, "train", PRE, 6, shuffle=False, train=False).epoch())
        x = T.Tensor(batch.x)
        params = model.parameters()
        # eval-mode forward: Tiny has no BN, so train and eval agree
        loss0 = bce_image_loss(model.forward(x), batch.labels)
        loss0.backward()
        adam_step(params, [p.grad for p in params], AdamState.zeros(params), TrainConfig(), lr=1e-6)
        with T.no_grad():
            loss1 = bce_image_loss(model.forward(x), batch.labels)
    assert loss1.item() < loss0.item()


def test_training_never_reads_test_split(tiny_set, monkeypatch):
    import patchscope.datasets as D

    seen = []
    real = D.read_image
    monkeypatch.setattr(D, "read_image", lambda p: (seen.append(str(p)), real(p))[1])
    fit(build(tiny_config(), seed=0), tiny_set, TrainConfig(max_epochs=2, batch_size=4), PRE)
    test_paths = {str(tiny_set.resolve(r)) for r in tiny_set.split("test")}
    assert seen and not test_paths & set(seen)


def test_fit_needs_train_and_val(tiny_set):
    only_train = DatasetManifest([r for r in tiny_set.records if r.split != "val"], tiny_set.root)
    with pytest.raises(DataError):
        fit(build(tiny_config()), only_train, TrainConfig(max_epochs=1), PRE)


def test_fit_log_is_identical_across_runs(tiny_set):
    cfg = TrainConfig(max_epochs=3, batch_size=4, precision="float64", seed=5)
    texts = []
    for _ in range(2):
        model = build(ladeda_config(9, 16), seed=1)
        w, log = fit(model, tiny_set, cfg, PreprocessConfig(24, 16, seed=5))
        texts.append(log.to_text())
    assert texts[0] == texts[1]
    kinds = [line.split(" ", 1)[0] for line in texts[0].splitlines()]
    assert kinds[0] == "record=config" and kinds[-1] == "record=best" and kinds.count("record=epoch") == 3


def test_fit_stops_when_lr_falls_below_min(tiny_set):
    cfg = TrainConfig(max_epochs=30, batch_size=12, patience=1, threshold=1.0, min_lr=1e-5)
    _, log = fit(build(tiny_config()), tiny_set, cfg, PRE)
    drops = log.records("lr_drop")
    assert len(drops) == 2 and log.records("stop")[0]["epoch"] == drops[-1]["epoch"]


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_fit_aborts_with_log_on_non_finite_loss(tiny_set):
    model = build(tiny_config())
    model.weights.params["fc.weight"].data[:] = np.inf
    with pytest.raises(TrainingAborted) as info:
        fit(model, tiny_set, TrainConfig(max_epochs=1), PRE)
    assert info.value.log.records("abort")


def test_fit_selects_best_val_epoch(tiny_set):
    model = build(tiny_config(), seed=4)
    w, log = fit(model, tiny_set, TrainConfig(max_epochs=4, batch_size=4), PRE)
    accs = [float(r["val_acc"]) for r in log.records("epoch")]
    best = log.records("best")[0]
    assert float(best["val_acc"]) == max(accs)
    assert int(best["epoch"]) == accs.index(max(accs)) + 1
    assert model.weights is w
