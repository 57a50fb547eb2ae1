import math

import numpy as np
import pytest

from vcas.openset import (
    IGNORE,
    EmbeddingMap,
    OpenSetParams,
    TrainConfig,
    TrainingDiverged,
    class_distances,
    contrastive_loss,
    gradients,
    init_params,
    load_checkpoint,
    loss_and_gradients,
    predict_probs,
    predict_unknown_mask,
    sample_pixels,
    save_checkpoint,
    seg_loss,
    train,
)

from oracles import finite_difference

SCALAR = OpenSetParams(mu=[[0.0]], log_sigma=[0.0], gamma=-0.5)


def test_distances():
    p = OpenSetParams(mu=[[1.0, 2.0], [0.0, 0.0]], log_sigma=[0.0, 0.0], gamma=0.7)
    d = class_distances(np.array([1.0, 2.0]), p)
    assert d[0] == 0.0 and d[2] == 0.7
    assert class_distances(np.array([2.0]), SCALAR)[0] == -2.0
    wide = OpenSetParams(mu=[[0.0]], log_sigma=[math.log(2.0)], gamma=0)
    assert class_distances(np.array([2.0]), wide)[0] == pytest.approx(-0.5, abs=1e-15)
    with pytest.raises(ValueError):
        class_distances(np.zeros(3), p)


def test_probs_scalar_examples():
    # scores (0, -0.5) and (-2, -0.5)
    p0 = predict_probs(np.array([0.0]), SCALAR)
    assert p0 == pytest.approx([1 / (1 + math.exp(-0.5)), 1 / (1 + math.exp(0.5))], abs=1e-15)
    assert p0 == pytest.approx([0.6225, 0.3775], abs=1e-4)
    p2 = predict_probs(np.array([2.0]), SCALAR)
    assert p2 == pytest.approx([0.1824, 0.8176], abs=1e-4)
    assert predict_unknown_mask(np.array([[2.0]]), SCALAR).tolist() == [True]
    assert predict_unknown_mask(np.array([[0.0]]), SCALAR).tolist() == [False]


def test_uniform_when_scores_equal():
    p = OpenSetParams(mu=[[0.0], [0.0]], log_sigma=[0.0, 0.0], gamma=0.0)
    assert predict_probs(np.array([0.0]), p) == pytest.approx([1 / 3] * 3, abs=1e-15)


def test_softmax_shift_invariance_and_normalisation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = OpenSetParams(rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal())
        m = rng.normal(size=(15, 2))
        probs = predict_probs(m, p)
        assert np.all(probs > 0)
        assert np.abs(probs.sum(axis=1) - 1).max() < 1e-12
        # shifting every score by the same constant: scale sigma by 1 is not a shift,
        # so compare softmax of raw scores directly
        d = class_distances(m, p)
        shifted = d + 3.7
        e1 = np.exp(d - d.max(1, keepdims=True))
        e2 = np.exp(shifted - shifted.max(1, keepdims=True))
        assert np.allclose(e1 / e1.sum(1, keepdims=True), e2 / e2.sum(1, keepdims=True), atol=1e-14)
        assert np.array_equal(np.argmax(d, 1), np.argmax(shifted, 1))


def test_gamma_limits():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(50, 2)) * 10
    p = OpenSetParams(rng.normal(size=(2, 2)), [0.0, 0.0], gamma=-1e12)
    assert not predict_unknown_mask(m, p).any()
    p.gamma = 1e12
    assert predict_unknown_mask(m, p).all()


def test_seg_loss_examples():
    b = EmbeddingMap(np.array([[0.0]]), np.array([0]))
    assert seg_loss(b, SCALAR) == pytest.approx(-math.log(1 / (1 + math.exp(-0.5))), abs=1e-15)
    assert seg_loss(b, SCALAR) == pytest.approx(0.4741, abs=1e-4)
    certain = OpenSetParams(mu=[[0.0]], log_sigma=[0.0], gamma=-1e6)
    assert seg_loss(b, certain) == 0.0
    with pytest.raises(ValueError, match="ignored"):
        seg_loss(EmbeddingMap(np.zeros((3, 1)), np.full(3, IGNORE)), SCALAR)


def test_seg_loss_permutation_invariant():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(30, 3))
    y = rng.integers(-1, 3, 30)
    p = OpenSetParams(rng.normal(size=(2, 3)), rng.normal(size=2) * 0.3, 0.2)
    perm = rng.permutation(30)
    a = seg_loss(EmbeddingMap(m, y), p)
    b = seg_loss(EmbeddingMap(m[perm], y[perm]), p)
    assert a == pytest.approx(b, abs=1e-14)


def _pairwise_oracle(z, y, tau):
    """Explicit loops over anchors and positive pairs."""
    total, anchors = 0.0, 0
    n = len(y)
    for i in range(n):
        pos = [j for j in range(n) if j != i and y[j] == y[i]]
        neg = [j for j in range(n) if y[j] != y[i]]
        if not pos:
            continue
        anchors += 1
        acc = 0.0
        for p in pos:
            num = math.exp(z[i] @ z[p] / tau)
            den = num + sum(math.exp(z[i] @ z[k] / tau) for k in neg)
            acc += -math.log(num / den)
        total += acc / len(pos)
    return total / anchors


def test_contrastive_identical_embeddings():
    m = np.ones((8, 3))
    y = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    b = EmbeddingMap(m, y)
    w = np.eye(3)
    # 6 negatives per anchor
    assert contrastive_loss(b, w, 0.1) == pytest.approx(math.log(6 + 1), abs=1e-12)


def test_contrastive_orthogonal_classes():
    y = np.array([0, 0, 0, 1, 1, 1])
    m = np.zeros((6, 2))
    m[y == 0, 0] = 1.0
    m[y == 1, 1] = 1.0
    b = EmbeddingMap(m, y)
    z = m / np.linalg.norm(m, axis=1, keepdims=True)
    values = []
    for tau in (1.0, 0.5, 0.1, 0.05):
        got = contrastive_loss(b, np.eye(2), tau)
        assert got == pytest.approx(_pairwise_oracle(z, y, tau), abs=1e-12)
        # closed form for this configuration: log(1 + 3 exp(-1/tau))
        assert got == pytest.approx(math.log1p(3 * math.exp(-1 / tau)), abs=1e-12)
        values.append(got)
    assert values == sorted(values, reverse=True) and values[-1] < 1e-7


def test_contrastive_random_matches_loops():
    rng = np.random.default_rng(3)
    for _ in range(5):
        m = rng.normal(size=(12, 3))
        y = rng.integers(0, 3, 12)
        y[:2] = [0, 1]
        y[2:4] = [0, 1]
        w = rng.normal(size=(4, 3))
        u = m @ w.T
        z = u / np.linalg.norm(u, axis=1, keepdims=True)
        assert contrastive_loss(EmbeddingMap(m, y), w, 0.2) == pytest.approx(
            _pairwise_oracle(z, y, 0.2), abs=1e-10
        )


def test_contrastive_single_class_raises():
    with pytest.raises(ValueError, match="2 labelled classes"):
        contrastive_loss(EmbeddingMap(np.ones((4, 2)), np.zeros(4, int)), np.eye(2))


def _random_config(rng):
    E = int(rng.integers(1, 5))
    C = int(rng.integers(1, 4))
    n = int(rng.integers(6, 21))
    y = rng.integers(0, C + 1, n)
    y[:4] = [0, 0, C, C]  # at least two labelled classes with a positive pair each
    y[rng.random(n) < 0.15] = IGNORE
    y[:4] = [0, 0, C, C]
    m = rng.normal(size=(n, E))
    p = OpenSetParams(
        rng.normal(size=(C, E)), rng.normal(scale=0.3, size=C), rng.normal(),
        rng.normal(size=(int(rng.integers(2, 5)), E)),
    )
    return EmbeddingMap(m, y), p, float(rng.uniform(0.05, 1.0))


def _rel(a, f):
    a = np.atleast_1d(a)
    f = np.atleast_1d(f)
    return np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-8)


def check_gradients(batch, p, lam, tau=0.1, h=1e-5):
    """Largest relative error over all parameter blocks."""

    def total():
        lb, _ = loss_and_gradients(batch, p, lam, tau)
        return lb.total

    g = gradients(batch, p, lam, tau)
    gamma_box = np.array([p.gamma])

    def total_gamma():
        p.gamma = float(gamma_box[0])
        return total()

    errs = {
        "mu": _rel(g.mu, finite_difference(total, p.mu, h)),
        "log_sigma": _rel(g.log_sigma, finite_difference(total, p.log_sigma, h)),
        "gamma": _rel(g.gamma, finite_difference(total_gamma, gamma_box, h)),
        "projection": _rel(g.projection, finite_difference(total, p.projection, h)),
        "embeddings": _rel(g.embeddings, finite_difference(total, batch.embeddings, h)),
    }
    p.gamma = float(gamma_box[0])
    return errs


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(10):
        batch, p, lam = _random_config(rng)
        errs = check_gradients(batch, p, lam)
        assert max(errs.values()) < 1e-4, errs


def test_gamma_gradient_identity():
    rng = np.random.default_rng(5)
    batch, p, _ = _random_config(rng)
    g = gradients(batch, p, 0.0)
    m, y = batch.flat()
    keep = y != IGNORE
    probs = predict_probs(m[keep], p)
    expect = np.mean(probs[:, -1] - (y[keep] == p.num_classes))
    assert g.gamma == pytest.approx(expect, abs=1e-14)


def test_stationary_prototypes():
    # every class-k pixel sits on mu_k, other classes are far away
    mu = np.array([[0.0, 0.0], [100.0, 0.0]])
    m = np.array([[0.0, 0.0], [0.0, 0.0], [100.0, 0.0]])
    p = OpenSetParams(mu, [0.0, 0.0], gamma=-1e4)
    g = gradients(EmbeddingMap(m, np.array([0, 0, 1])), p, 0.0)
    assert np.abs(g.mu).max() == 0.0


def test_ignored_pixels_do_not_change_gradients():
    rng = np.random.default_rng(6)
    batch, p, lam = _random_config(rng)
    ignored = np.flatnonzero(batch.labels == IGNORE)
    if ignored.size == 0:
        batch.labels[-1] = IGNORE
        ignored = np.array([batch.labels.size - 1])
    g0 = gradients(batch, p, lam)
    moved = EmbeddingMap(batch.embeddings.copy(), batch.labels)
    moved.embeddings[ignored] += 5.0
    g1 = gradients(moved, p, lam)
    for a, b in [(g0.mu, g1.mu), (g0.log_sigma, g1.log_sigma), (g0.projection, g1.projection)]:
        assert np.array_equal(a, b)
    assert g0.gamma == g1.gamma
    assert np.all(g0.embeddings[ignored] == 0)


def test_sample_pixels_caps_per_class():
    y = np.array([0] * 10 + [1] * 3 + [IGNORE] * 5)
    idx = sample_pixels(y, 4, np.random.default_rng(0))
    assert np.bincount(y[idx]).tolist() == [4, 3]
    assert np.array_equal(sample_pixels(y, None), np.arange(13))


def test_zero_learning_rate_keeps_params():
    rng = np.random.default_rng(7)
    batch, p, _ = _random_config(rng)
    cfg = TrainConfig(lr=0.0, steps=5, lam=0.1, samples_per_class=None)
    out = train([batch], cfg, params=p)
    assert np.array_equal(out.params.mu, p.mu)
    assert out.params.gamma == p.gamma
    assert np.array_equal(out.params.projection, p.projection)


def test_single_step_by_hand():
    # one pixel of class 0 at m = 0; scores (0, -0.5); yhat = (a, 1 - a)
    batch = EmbeddingMap(np.array([[0.0]]), np.array([0]))
    p = OpenSetParams(mu=[[1.0]], log_sigma=[0.0], gamma=-0.5)
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01, steps=1, lam=0.0)
    out = train([batch], cfg, params=p).params
    d0 = -0.5  # -(0 - 1)^2 / 2
    a = math.exp(d0) / (math.exp(d0) + math.exp(-0.5))  # = 0.5
    g_mu = (a - 1) * (0.0 - 1.0)  # dL/dd0 * dd0/dmu
    g_ls = (a - 1) * (-2 * d0)
    g_gamma = 1 - a
    assert out.mu[0, 0] == pytest.approx(1.0 - 0.1 * (g_mu + 0.01 * 1.0), abs=1e-15)
    assert out.log_sigma[0] == pytest.approx(-0.1 * g_ls, abs=1e-15)
    assert out.gamma == pytest.approx(-0.5 - 0.1 * (g_gamma + 0.01 * -0.5), abs=1e-15)


def test_momentum_and_schedule():
    cfg = TrainConfig(lr=1.0, milestones=(2, 4), lr_decay=0.1)
    assert [cfg.lr_at(s) for s in range(6)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])
    # constant gradient: velocity follows 1, 1.9, 2.71
    batch = EmbeddingMap(np.array([[0.0]]), np.array([1]))
    p = OpenSetParams(mu=[[0.0]], log_sigma=[0.0], gamma=0.0)
    seen = []
    train([batch], TrainConfig(lr=1e-9, momentum=0.9, weight_decay=0.0, steps=3, lam=0.0,
                               milestones=()),
          params=p, callback=lambda s, l, q: seen.append(q.gamma))
    g = -0.5  # yhat_unknown - 1 with scores (0, 0)
    assert seen == pytest.approx([-1e-9 * g, -1e-9 * g * 2.9, -1e-9 * g * 5.61], rel=1e-6)


def test_divergence_is_reported():
    batch = EmbeddingMap(np.array([[0.0], [3.0]]), np.array([0, 1]))
    p = OpenSetParams(mu=[[0.0]], log_sigma=[0.0], gamma=0.0)
    with pytest.raises(TrainingDiverged, match="non-finite loss at step"):
        train([batch], TrainConfig(lr=1e6, steps=50, lam=0.0), params=p)


def test_init_from_masked_average_pooling():
    m = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 5.0], [9.0, 9.0]])
    p = init_params([EmbeddingMap(m, np.array([0, 0, 1, 2]))], 2, projection_dim=3)
    assert p.mu.tolist() == [[1.0, 1.0], [5.0, 5.0]]
    assert p.gamma == 0.0 and np.all(p.log_sigma == 0)
    assert p.projection.shape == (3, 2)
    with pytest.raises(ValueError, match="no labelled pixels"):
        init_params([EmbeddingMap(m, np.array([0, 0, 2, 2]))], 2)


def test_checkpoint_round_trip(tmp_path):
    p = OpenSetParams([[1.5, -2.0]], [0.25], -3.0, [[1.0, 0.5]])
    save_checkpoint(tmp_path / "ck", p)
    q = load_checkpoint(tmp_path / "ck")
    assert np.array_equal(q.mu, p.mu) and q.gamma == p.gamma
    assert np.array_equal(q.projection, p.projection)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"lr": 0.1, "bogus": 1})
