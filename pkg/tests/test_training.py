import numpy as np
import pytest

import dignet.tensor as tc
from dignet.backbone import build_backbone
from dignet.checkpoint import encode
from dignet.data import Dataset, Split, SyntheticSpec, make_dataset
from dignet.model import NetworkConfig, build_dignet, run_inference
from dignet.tensor import NonFiniteError, Parameter, Tape, Tensor
from dignet.training import (
    SGD,
    TrainConfig,
    TrainingDivergedError,
    batch_loss,
    poly_lr,
    train,
)


def test_poly_lr_values():
    assert poly_lr(0.01, 0, 100, 0.9) == 0.01
    assert poly_lr(0.01, 100, 100, 0.9) == 0.0
    # 0.007 * 0.5 ** 0.9 evaluated directly
    assert poly_lr(0.007, 50, 100, 0.9) == pytest.approx(0.0037512071, abs=1e-9)
    lrs = [poly_lr(0.01, i, 37, 0.9) for i in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    for bad in (-1, 101):
        with pytest.raises(ValueError):
            poly_lr(0.01, bad, 100, 0.9)
    with pytest.raises(ValueError):
        poly_lr(0.01, 0, 0, 0.9)


def param(values):
    return Parameter("p", np.array(values, dtype=np.float64))


def test_sgd_zero_lr_updates_momentum_only():
    p = param([1.0, -2.0])
    opt = SGD([p], momentum=0.9, weight_decay=0.0)
    p.grad[:] = [0.5, 0.25]
    opt.step(0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_array_equal(opt.buffers["p"], [0.5, 0.25])
    assert not p.grad.any()


def test_sgd_plain_gradient_descent():
    p = param([1.0, 3.0])
    opt = SGD([p], momentum=0.0, weight_decay=0.0)
    p.grad[:] = [2.0, -1.0]
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [0.8, 3.1], rtol=0, atol=1e-15)


def test_sgd_two_step_quadratic_recurrence():
    # loss = 0.5 * a * x^2, gradient a * x
    a, x0, lr, m, wd = 3.0, 2.0, 0.05, 0.9, 0.01
    p = param([x0])
    opt = SGD([p], momentum=m, weight_decay=wd)
    for _ in range(2):
        p.grad[:] = a * p.data
        opt.step(lr)
    v1 = a * x0 + wd * x0
    x1 = x0 - lr * v1
    v2 = m * v1 + a * x1 + wd * x1
    x2 = x1 - lr * v2
    assert p.data[0] == pytest.approx(x2, abs=1e-14)


def test_sgd_rejects_nan_gradients():
    p = param([1.0])
    p.grad[:] = np.nan
    with pytest.raises(NonFiniteError):
        SGD([p]).step(0.1)


def tiny_dataset(n_train=4, n_val=2, size=16):
    return make_dataset(SyntheticSpec(image_size=size), n_train, n_val)


def test_memorize_single_sample():
    ds = make_dataset(SyntheticSpec(), 1, 0)
    model = build_dignet(NetworkConfig(), 0)
    opt = SGD(model.parameters())
    losses = []
    for _ in range(11):
        losses.append(batch_loss(model, ds.train.images, ds.train.labels))
        opt.step(TrainConfig().base_lr)
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 8, losses


def test_training_is_deterministic():
    ds = tiny_dataset()
    tc_ = TrainConfig(batch_size=2)
    a = train(NetworkConfig(), ds, 1, seed=5, train_config=tc_)
    b = train(NetworkConfig(), ds, 1, seed=5, train_config=tc_)
    assert encode(a.checkpoint) == encode(b.checkpoint)
    assert a.log == b.log
    c = train(NetworkConfig(), ds, 1, seed=6, train_config=tc_)
    assert encode(c.checkpoint) != encode(a.checkpoint)


def test_t1_training_equals_bare_backbone():
    ds = tiny_dataset()
    tc_ = TrainConfig(batch_size=2)
    cfg = NetworkConfig(T=1)
    net = train(cfg, ds, 2, seed=3, train_config=tc_)
    bare = train(cfg, ds, 2, seed=3, train_config=tc_,
                 model=build_backbone(cfg.backbone, 3))
    assert [r["loss"] for r in net.log] == [r["loss"] for r in bare.log]
    for p in bare.model.parameters():
        assert net.checkpoint.params[p.name].tobytes() == p.data.tobytes()


def test_gradients_zero_after_training():
    res = train(NetworkConfig(), tiny_dataset(), 1, seed=0, train_config=TrainConfig(batch_size=2))
    assert all(not p.grad.any() for p in res.model.parameters())
    assert set(res.checkpoint.momentum) == set(res.checkpoint.params)


def test_log_records():
    ds = tiny_dataset()
    seen = []
    res = train(NetworkConfig(), ds, 2, seed=0, train_config=TrainConfig(batch_size=3), log=seen.append)
    assert seen == res.log
    assert [r["epoch"] for r in seen] == [1, 2]
    assert [r["iter"] for r in seen] == [2, 4]
    assert set(seen[0]) == {"epoch", "iter", "lr", "loss", "miou"}
    assert res.checkpoint.iteration == 4


def test_max_iter_overrides_epochs():
    res = train(NetworkConfig(), tiny_dataset(), 5, seed=0,
                train_config=TrainConfig(batch_size=2, max_iter=3))
    assert res.checkpoint.iteration == 3


def test_loss_only_on_final_iteration(rng):
    cfg = NetworkConfig(T=3)
    img = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
    labels = rng.integers(0, 6, size=(1, 32, 32))

    def grads(extra):
        model = build_dignet(cfg, 1)
        with Tape() as tape:
            out = run_inference(model, img)
            loss = tc.softmax_cross_entropy(tc.bilinear_upsample(out.final, 32, 32), labels)
            # a detached transform of an intermediate iteration must not contribute
            for lg in out.logits[:-1]:
                loss = tc.add(loss, tc.scale(tc.sum_all(Tensor(lg.data * extra)), 0.0))
            tape.backward(loss)
        return [p.grad.copy() for p in model.parameters()]

    for a, b in zip(grads(1.0), grads(1e3)):
        np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_checkpoint():
    ds = tiny_dataset()
    with pytest.raises(TrainingDivergedError) as info:
        train(NetworkConfig(), ds, 3, seed=0, train_config=TrainConfig(batch_size=2, base_lr=1e12))
    assert info.value.last_good is not None
    assert info.value.last_good.iteration in (0, 2, 4)


def test_empty_dataset_rejected():
    empty = Split(np.empty((0, 3, 16, 16), np.float32), np.empty((0, 16, 16), np.int64))
    with pytest.raises(ValueError):
        train(NetworkConfig(), Dataset(empty, empty, 6), 1, seed=0)
