import numpy as np
import pytest

from stratrej import data, nn, oracle, train
from stratrej.selective import BaseClassifier


@pytest.fixture(scope="module")
def easy():
    ds = data.generate(data.SyntheticSpec("two_gaussians", {"separation": 6.0, "sigma": 0.5}, 1000, 0))
    return data.split(ds, (0.8, 0.1, 0.1), 0)


def _same(a, b):
    return all(np.array_equal(la.w, lb.w) and np.array_equal(la.b, lb.b) for la, lb in zip(a.layers, b.layers))


def test_standard_training_separable(easy):
    tr, _, te = easy
    model, log = train.train_standard(tr, [2, 16, 2], train.TrainConfig(epochs=20, seed=0))
    assert np.mean(nn.predict(model, te.x) == te.y) >= 0.98
    assert len(log) == 20
    init = nn.init_mlp([2, 16, 2], 0)
    assert log[-1].clean_loss <= float(nn.cross_entropy(nn.logits(init, tr.x), tr.y)[0].mean())


def test_zero_epochs_returns_initial_model(easy):
    model, log = train.train_standard(easy[0], [2, 16, 2], train.TrainConfig(epochs=0, seed=4))
    assert _same(model, nn.init_mlp([2, 16, 2], 4)) and log == []


def test_same_seed_identical_parameters(easy):
    cfg = train.TrainConfig(epochs=3, seed=9, epsilon=0.3, pgd_steps=3)
    for fn in (train.train_standard, train.train_at):
        assert _same(fn(easy[0], [2, 8, 2], cfg)[0], fn(easy[0], [2, 8, 2], cfg)[0])


def test_zero_budget_at_matches_standard(easy):
    cfg = train.TrainConfig(epochs=3, seed=2, epsilon=0.0, pgd_steps=5)
    assert _same(train.train_at(easy[0], [2, 8, 2], cfg)[0], train.train_standard(easy[0], [2, 8, 2], cfg)[0])


def test_trades_zero_beta_matches_standard(easy):
    cfg = train.TrainConfig(epochs=3, seed=2, epsilon=0.3, pgd_steps=0, trades_beta=0.0)
    assert _same(train.train_trades(easy[0], [2, 8, 2], cfg)[0], train.train_standard(easy[0], [2, 8, 2], cfg)[0])


def test_single_step_lands_on_corner():
    model = nn.init_mlp([2, 8, 2], 1)
    x = np.array([[0.2, -0.1], [1.0, 0.4]])
    y = np.array([0, 1])
    rng = np.random.default_rng(0)
    z = train.pgd_examples(model, x, y, 0.25, steps=1, step_size=0.25, random_start=False, rng=rng)
    g = nn.grad_input(model, x, nn.LossSpec.cross_entropy(y))
    np.testing.assert_allclose(z, x + 0.25 * np.sign(g))
    boxed = train.pgd_examples(model, x, y, 0.25, 1, 0.25, False, rng, box=(0.0, 1.0))
    np.testing.assert_allclose(boxed, np.clip(x + 0.25 * np.sign(g), 0, 1))


def test_adversarial_examples_stay_in_ball():
    model = nn.init_mlp([2, 8, 2], 1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 2))
    y = rng.integers(0, 2, 50)
    z = train.pgd_examples(model, x, y, 0.3, 7, 0.1, True, rng)
    assert np.abs(z - x).max() <= 0.3 + 1e-12
    t = train.trades_examples(model, x, 0.3, 7, 0.1, rng)
    assert np.abs(t - x).max() <= 0.3 + 1e-12


def test_kl_zero_at_clean_point_and_nonnegative():
    model = nn.init_mlp([2, 8, 2], 1)
    x = np.random.default_rng(0).normal(size=(20, 2))
    kl, _ = train._trades_kl_grads(model, x, x)
    assert kl == 0.0
    kl2, _ = train._trades_kl_grads(model, x, x + 0.3)
    assert kl2 >= 0


def test_trades_kl_gradient_matches_finite_differences():
    model = nn.init_mlp([2, 6, 2], 5)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2))
    xa = x + rng.uniform(-0.2, 0.2, size=x.shape)
    _, grads = train._trades_kl_grads(model, x, xa)
    w = model.layers[0].w
    h = 1e-6
    for idx in [(0, 0), (3, 1)]:
        e = np.zeros_like(w)
        e[idx] = h

        def kl_at(wv):
            params = [(wv, model.layers[0].b)] + [(l.w, l.b) for l in model.layers[1:]]
            return train._trades_kl_grads(model.with_params(params), x, xa)[0]

        fd = (kl_at(w + e) - kl_at(w - e)) / (2 * h)
        np.testing.assert_allclose(grads[0][0][idx], fd, rtol=1e-4, atol=1e-9)


def test_divergence_raises(easy):
    with pytest.raises(train.TrainingError):
        train.train_standard(easy[0], [2, 16, 2], train.TrainConfig(epochs=5, lr=1e6, momentum=0.0))


def test_architecture_mismatch(easy):
    with pytest.raises(nn.ShapeError):
        train.train_standard(easy[0], [3, 4, 2], train.TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        train.TrainConfig(epsilon=-1)
    with pytest.raises(ValueError):
        train.TrainConfig(pgd_steps=-1)


def test_log_csv(tmp_path, easy):
    _, log = train.train_standard(easy[0], [2, 4, 2], train.TrainConfig(epochs=2))
    train.write_log_csv(log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,clean_loss,robust_loss_proxy" and len(lines) == 3


@pytest.mark.slow
def test_robust_trainers_beat_standard_under_grid_adversary():
    # the annulus has a curved boundary, so clean training is not already robust-optimal
    ds = data.generate(data.SyntheticSpec("annulus", {"r_in": 1.0, "r_out": 2.0}, 3000, 0))
    tr, _, te = data.split(ds, (0.8, 0.1, 0.1), 0)
    eps = 0.2
    widths = [2, 32, 32, 2]
    robust = dict(epsilon=eps, pgd_steps=10, seed=0, epochs=20)
    std, _ = train.train_standard(tr, widths, train.TrainConfig(epochs=20, seed=0))
    at, _ = train.train_at(tr, widths, train.TrainConfig(**robust))
    trades, _ = train.train_trades(tr, widths, train.TrainConfig(**robust, trades_beta=6.0))

    def robust_acc(m):
        return 1.0 - oracle.brute_force_standard_error(BaseClassifier(m), te.x, te.y, eps, steps=20)

    r_std = robust_acc(std)
    assert robust_acc(at) > r_std
    assert robust_acc(trades) >= r_std
