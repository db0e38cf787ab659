import numpy as np
import pytest

from pcpoison import model as M
from pcpoison.losses import (
    CrossEntropyLoss,
    FeatureCollisionLoss,
    MarginLoss,
)


def probe_batch(seed, B=3, n=10):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 0.5, size=(B, n, 3))
    y = rng.integers(0, 4, size=B)
    return X, y


class TestInit:
    def test_deterministic(self):
        a = M.init_classifier(7)
        b = M.init_classifier(7)
        assert (a.params == b.params).all()

    def test_seeds_differ(self):
        assert not (M.init_classifier(1).params == M.init_classifier(2).params).all()

    def test_head_shape(self):
        m = M.init_classifier(0, num_classes=2)
        _, logits = m.forward(np.zeros((5, 3)))
        assert logits.shape == (2,)

    def test_unknown_arch(self):
        with pytest.raises(ValueError, match="architecture"):
            M.init_classifier(0, arch="resnet")

    def test_finite_on_normalized_inputs(self):
        m = M.init_classifier(3)
        rng = np.random.default_rng(0)
        feats, logits = m.forward(rng.uniform(-1, 1, size=(64, 3)))
        assert np.isfinite(feats).all() and np.isfinite(logits).all()


class TestForward:
    def test_permutation_invariance(self):
        m = M.init_classifier(1)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(32, 3))
        f1, l1 = m.forward(x)
        f2, l2 = m.forward(x[rng.permutation(32)])
        np.testing.assert_allclose(l1, l2, atol=1e-6)
        np.testing.assert_allclose(f1, f2, atol=1e-6)

    def test_duplicated_points_idempotent(self):
        m = M.init_classifier(1)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(16, 3))
        f1, _ = m.forward(x)
        f2, _ = m.forward(np.concatenate([x, x]))
        np.testing.assert_allclose(f1, f2, atol=1e-6)

    def test_zero_head_gives_zero_logits(self):
        m = M.init_classifier(1)
        m["Wh"][...] = 0.0
        m["bh"][...] = 0.0
        _, logits = m.forward(np.random.default_rng(0).normal(size=(8, 3)))
        np.testing.assert_array_equal(logits, 0.0)

    def test_wrong_shape(self):
        m = M.init_classifier(1)
        with pytest.raises(ValueError):
            m.forward_batch(np.zeros((2, 8, 2)))

    def test_feature_dim_independent_of_n(self):
        m = M.init_classifier(1)
        rng = np.random.default_rng(1)
        for n in (4, 64, 200):
            feats, _ = m.forward(rng.normal(size=(n, 3)))
            assert feats.shape == (256,)


def central_diff_params(m, loss, X, y, i, h):
    orig = m.params[i]
    m.params[i] = orig + h
    fp, lp = m.forward_batch(X)
    vp, _, _ = loss.value_and_grads(fp, lp, y)
    m.params[i] = orig - h
    fm, lm = m.forward_batch(X)
    vm, _, _ = loss.value_and_grads(fm, lm, y)
    m.params[i] = orig
    return (vp - vm) / (2 * h)


def central_diff_input(m, loss, X, y, pos, h):
    b, p, c = pos
    Xp = X.copy(); Xp[b, p, c] += h
    Xm = X.copy(); Xm[b, p, c] -= h
    fp, lp = m.forward_batch(Xp)
    vp, _, _ = loss.value_and_grads(fp, lp, y)
    fm, lm = m.forward_batch(Xm)
    vm, _, _ = loss.value_and_grads(fm, lm, y)
    return (vp - vm) / (2 * h)


def loss_kink_clearance(loss, logits, d_logits, y):
    """Extra clearance for the hinge/argmax kinks of the margin loss."""
    if not isinstance(loss, MarginLoss):
        return np.inf
    clearance = np.inf
    for b in range(logits.shape[0]):
        z = logits[b].copy()
        dz = d_logits[b]
        others = np.delete(np.arange(z.size), y[b])
        rival = others[np.argmax(z[others])]
        gap = z[rival] - z[y[b]]
        rate = abs(dz[rival] - dz[y[b]])
        if rate > 0:
            clearance = min(clearance, abs(gap) / rate)
        rest = [t for t in others if t != rival]
        for t in rest:
            rate = abs(dz[rival] - dz[t])
            if rate > 0:
                clearance = min(clearance, (z[rival] - z[t]) / rate)
    return clearance


@pytest.mark.parametrize(
    "loss", [CrossEntropyLoss(), MarginLoss(), FeatureCollisionLoss(0.2)],
    ids=["ce", "margin", "fc"],
)
class TestGradientContract:
    H = 1e-4
    REL = 1e-4
    PROBES = 50

    def _accept(self, m, X, y, loss, d_params=None, d_inputs=None):
        # probes too close to a ReLU/max-pool/hinge kink make central
        # differences invalid; skip them (clearance measured exactly)
        _, d_logits, clearance = m.forward_jvp(X, d_params, d_inputs)
        _, logits = m.forward_batch(X)
        clearance = min(clearance, loss_kink_clearance(loss, logits, d_logits, y))
        return clearance > 4 * self.H

    def test_grad_params_matches_fd(self, loss):
        m = M.init_classifier(11)
        X, y = probe_batch(5)
        g = M.grad_params(m, loss, X, y)
        rng = np.random.default_rng(17)
        checked = 0
        tries = 0
        while checked < self.PROBES and tries < 40 * self.PROBES:
            tries += 1
            i = int(rng.integers(m.params.size))
            direction = np.zeros_like(m.params)
            direction[i] = 1.0
            if not self._accept(m, X, y, loss, d_params=direction):
                continue
            fd = central_diff_params(m, loss, X, y, i, self.H)
            denom = max(abs(fd), abs(g[i]), 1e-6)
            assert abs(fd - g[i]) / denom <= self.REL
            checked += 1
        assert checked == self.PROBES

    def test_grad_input_matches_fd(self, loss):
        m = M.init_classifier(11)
        X, y = probe_batch(6)
        g = M.grad_input(m, loss, X, y)
        rng = np.random.default_rng(19)
        checked = 0
        tries = 0
        while checked < self.PROBES and tries < 40 * self.PROBES:
            tries += 1
            pos = (int(rng.integers(X.shape[0])), int(rng.integers(X.shape[1])),
                   int(rng.integers(3)))
            direction = np.zeros_like(X)
            direction[pos] = 1.0
            if not self._accept(m, X, y, loss, d_inputs=direction):
                continue
            fd = central_diff_input(m, loss, X, y, pos, self.H)
            denom = max(abs(fd), abs(g[pos]), 1e-6)
            assert abs(fd - g[pos]) / denom <= self.REL
            checked += 1
        assert checked == self.PROBES


class TestGradients:
    def test_constant_loss_zero_grads(self):
        class Constant:
            def value_and_grads(self, features, logits, labels):
                return 1.0, None, np.zeros_like(logits)

        m = M.init_classifier(2)
        X, y = probe_batch(1)
        assert (M.grad_params(m, Constant(), X, y) == 0.0).all()
        assert (M.grad_input(m, Constant(), X, y) == 0.0).all()

    def test_logit_grad_wrt_own_bias_is_one(self):
        class PickLogit:
            def __init__(self, c):
                self.c = c

            def value_and_grads(self, features, logits, labels):
                d = np.zeros_like(logits)
                d[0, self.c] = 1.0
                return float(logits[0, self.c]), None, d

        m = M.init_classifier(2)
        X, _ = probe_batch(2, B=1)
        g = M.grad_params(m, PickLogit(1), X, np.array([1]))
        # bias entries are the final parameters in the flat layout
        bias_grad = g[-m.num_classes:]
        np.testing.assert_allclose(bias_grad, [0.0, 1.0, 0.0, 0.0], atol=1e-12)

    def test_grad_input_permutes_with_input(self):
        m = M.init_classifier(4)
        loss = CrossEntropyLoss()
        X, y = probe_batch(7, B=2, n=12)
        g = M.grad_input(m, loss, X, y)
        rng = np.random.default_rng(0)
        perm = rng.permutation(12)
        Xp = X[:, perm, :]
        gp = M.grad_input(m, loss, Xp, y)
        np.testing.assert_allclose(gp, g[:, perm, :], atol=1e-9)


class TestCosineStats:
    def test_orthogonal_rows(self):
        m = M.init_classifier(5)
        q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(256, 4)))
        m["Wh"][...] = q.T
        assert M.last_layer_cosine_stats(m) == pytest.approx(0.0, abs=1e-9)

    def test_identical_rows(self):
        m = M.init_classifier(5)
        m["Wh"][...] = np.ones_like(m["Wh"])
        assert M.last_layer_cosine_stats(m) == pytest.approx(1.0)

    def test_hand_value(self):
        W = np.array([[1.0, 0.0], [1.0 / np.sqrt(2), 1.0 / np.sqrt(2)]])
        assert M.mean_pairwise_row_cosine(W) == pytest.approx(1 / np.sqrt(2), abs=1e-9)

    def test_zero_row_error(self):
        m = M.init_classifier(5)
        m["Wh"][0, :] = 0.0
        with pytest.raises(ValueError, match="degenerate head row"):
            M.last_layer_cosine_stats(m)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = M.init_classifier(13, "ref-variant", num_classes=3)
        path = tmp_path / "m.pcpm"
        m.save(path)
        back = M.PointSetClassifier.load(path)
        assert back.arch == "ref-variant"
        assert back.num_classes == 3
        assert (back.params == m.params).all()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pcpm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            M.PointSetClassifier.load(path)


class TestLearnability:
    def test_margin_loss_reaches_zero_on_separable_toy_set(self):
        from pcpoison.losses import MarginLoss
        from pcpoison.optim import fit_classifier

        rng = np.random.default_rng(21)
        centers = np.array([[0.6, 0, 0], [-0.6, 0, 0]])
        points = np.stack(
            [centers[i % 2] + rng.normal(0, 0.05, size=(16, 3)) for i in range(8)]
        )
        labels = np.arange(8) % 2
        m = M.init_classifier(3, num_classes=2)
        loss = MarginLoss()
        fit_classifier(
            m, points, labels, epochs=200, batch_size=8, lr=0.05, seed=0, loss=loss
        )
        feats, logits = m.forward_batch(points)
        value, _, _ = loss.value_and_grads(feats, logits, labels)
        assert value <= 1e-9


class TestLinearClassifier:
    def test_row_normalization(self):
        rng = np.random.default_rng(6)
        clf = M.LinearClassifier(rng.normal(size=(3, 5))).normalize_rows()
        norms = np.sqrt((clf.W**2).sum(axis=1))
        np.testing.assert_allclose(norms, np.sqrt(5), atol=1e-9)

    def test_zero_row_rejected(self):
        W = np.zeros((2, 4))
        W[1, 0] = 1.0
        with pytest.raises(ValueError):
            M.LinearClassifier(W).normalize_rows()
