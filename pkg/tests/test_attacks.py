import dataclasses

import numpy as np
import pytest

from pcpoison import attacks as A
from pcpoison.core import LabeledDataset
from pcpoison.datasets import generate_benchmark
from pcpoison.losses import CrossEntropyLoss
from pcpoison.model import init_classifier


@pytest.fixture(scope="module")
def tiny_data():
    train, _ = generate_benchmark(
        train_per_class=6, test_per_class=2, n=24, seed=11
    )
    return train


def tiny_config(method, **kw):
    base = dict(
        method=method,
        epochs=3,
        attack_steps=3,
        batch_size=12,
        lr_model=0.02,
        seed=5,
    )
    base.update(kw)
    return A.AttackConfig(**base)


class TestConfig:
    def test_unknown_method_lists_valid(self):
        with pytest.raises(ValueError, match="em, ap, ap-t"):
            A.AttackConfig(method="gan").resolve(10)

    def test_method_defaults(self):
        cfg = A.AttackConfig(method="fc-em").resolve(400)
        assert cfg.batch_size == 128
        assert cfg.epochs == 200
        assert cfg.attack_steps == 10
        assert cfg.lr_poison == 0.015
        assert cfg.temperature == 0.1
        assert cfg.beta == 1.0
        cfg = A.AttackConfig(method="ap").resolve(400)
        assert cfg.attack_steps == 250
        assert cfg.lr_poison == 0.001
        assert cfg.epsilon == 0.08
        assert cfg.epochs == 100
        cfg = A.AttackConfig(method="em").resolve(100)
        assert cfg.batch_size == 32 and cfg.epsilon == 0.08

    def test_validation(self):
        with pytest.raises(ValueError, match="epochs"):
            A.AttackConfig(method="em", epochs=0).resolve(10)
        with pytest.raises(ValueError, match="beta"):
            A.AttackConfig(method="reg-em", beta=-1.0).resolve(10)
        with pytest.raises(ValueError, match="epsilon"):
            A.AttackConfig(method="em", epsilon=-0.1).resolve(10)

    def test_config_text_round_trip(self):
        cfg = tiny_config("fc-em", beta=2.5)
        text = cfg.to_text()
        assert "beta = 2.5" in text
        assert "method = fc-em" in text


class TestProjectLinf:
    def test_within_budget_unchanged(self):
        d = np.array([[0.05, -0.02, 0.0]])
        np.testing.assert_array_equal(A.project_linf(d, 0.08), d)

    def test_clamps_both_signs(self):
        d = np.array([0.2, -0.5])
        np.testing.assert_allclose(A.project_linf(d, 0.08), [0.08, -0.08])

    def test_invalid_epsilon(self):
        with pytest.raises(ValueError):
            A.project_linf(np.zeros(3), 0.0)


class TestPgdInner:
    def test_zero_steps_is_identity(self):
        deltas = np.ones((2, 3, 3))
        out, value, _ = A.pgd_inner(
            lambda d: (0.0, np.zeros_like(d), {}), deltas,
            steps=0, step_size=0.1, mode="raw-min",
        )
        np.testing.assert_array_equal(out, deltas)
        assert value is None

    def test_quadratic_descends_monotonically(self):
        target = np.full((1, 2, 3), 0.7)

        def quad(d):
            return float(((d - target) ** 2).sum()), 2.0 * (d - target), {}

        deltas = np.zeros((1, 2, 3))
        dists = [float(((deltas - target) ** 2).sum())]
        for _ in range(5):
            deltas, _, _ = A.pgd_inner(quad, deltas, steps=1, step_size=0.1,
                                       mode="raw-min")
            dists.append(float(((deltas - target) ** 2).sum()))
        assert all(b < a for a, b in zip(dists, dists[1:]))

    def test_sign_max_saturates_at_budget(self):
        w = np.array([[[1.0, -2.0, 0.5]]])

        def linear(d):
            return float((w * d).sum()), w.copy(), {}

        deltas, _, _ = A.pgd_inner(
            np.vectorize(lambda: None) and linear, np.zeros_like(w),
            steps=50, step_size=0.01, mode="sign-max", epsilon=0.08,
        )
        np.testing.assert_allclose(deltas, 0.08 * np.sign(w))

    def test_nonfinite_gradient_aborts(self):
        def bad(d):
            return 0.0, np.full_like(d, np.nan), {}

        with pytest.raises(RuntimeError, match="non-finite"):
            A.pgd_inner(bad, np.zeros((1, 1, 3)), steps=1, step_size=0.1,
                        mode="raw-min")

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            A.pgd_inner(lambda d: (0, d, {}), np.zeros(3), steps=1,
                        step_size=0.1, mode="newton")


class TestAdaptiveBeta:
    def test_top_fraction_scaled_up(self):
        losses = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
        betas = np.ones(5)
        out = A.adaptive_beta_step(losses, betas, 1.1, 0.2)
        assert out[-1] == pytest.approx(1.1)
        np.testing.assert_allclose(out[:-1], 1.0 / 1.1)

    def test_clamp_ceiling(self):
        out = A.adaptive_beta_step(np.array([5.0, 1.0]), np.array([10.0, 10.0]),
                                   1.1, 0.5)
        assert out[0] == pytest.approx(10.0)
        assert out[1] == pytest.approx(10.0 / 1.1)

    def test_all_equal_losses_all_top(self):
        out = A.adaptive_beta_step(np.ones(4), np.ones(4), 1.1, 0.2)
        np.testing.assert_allclose(out, 1.1)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            A.adaptive_beta_step(np.ones(3), np.ones(3), 1.0, 0.2)
        with pytest.raises(ValueError):
            A.adaptive_beta_step(np.ones(3), np.ones(3), 1.1, 1.0)


class TestTargetMap:
    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_next_class_is_fixed_point_free(self, C):
        tau = A.make_target_map("next-class", C)
        y = np.arange(C)
        assert (tau(y) != y).all()
        assert sorted(tau(y)) == list(range(C))

    def test_identity(self):
        tau = A.make_target_map("identity", 4)
        assert (tau(np.array([1, 2])) == [1, 2]).all()


class TestEmFamily:
    def test_em_respects_budget_with_defaults(self):
        rng = np.random.default_rng(0)
        data = LabeledDataset(
            points=rng.uniform(-1, 1, (16, 16, 3)).astype(np.float32).astype(float),
            labels=rng.integers(0, 2, 16),
            num_classes=2,
        )
        # Table-like defaults but few epochs: the budget holds at any epoch
        cfg = A.AttackConfig(method="em", epochs=4, seed=3)
        run = A.attack_em(data, cfg)
        assert run.perturbations.check_budget(0.08)
        assert run.config.epsilon == 0.08
        assert run.config.lr_poison == 0.015
        assert len(run.trajectory) == 4

    def test_em_tiny_budget_keeps_data_clean(self, tiny_data):
        cfg = tiny_config("em", epsilon=1e-6)
        run = A.attack_em(tiny_data, cfg)
        assert np.abs(run.perturbations.deltas).max() <= 1e-6 + 1e-12

    def test_em_attack_loss_decreases(self, tiny_data):
        cfg = tiny_config("em", epochs=8, attack_steps=5)
        run = A.attack_em(tiny_data, cfg)
        assert run.trajectory[-1].attack_loss < run.trajectory[0].attack_loss

    def test_reg_em_beta_zero_equals_unconstrained_raw_em(self, tiny_data):
        reg = A.attack_reg_em(tiny_data, tiny_config("reg-em", beta=0.0))
        # same seed, raw steps, no projection
        em_cfg = dataclasses.replace(
            tiny_config("em"), step_mode="raw-min", epsilon=1e9
        )
        em = A.attack_em(tiny_data, em_cfg)
        np.testing.assert_array_equal(
            reg.perturbations.deltas, em.perturbations.deltas
        )

    def test_fc_em_deterministic(self, tiny_data):
        cfg = tiny_config("fc-em", batch_size=24)
        a = A.attack_fc_em(tiny_data, cfg)
        b = A.attack_fc_em(tiny_data, cfg)
        assert (a.perturbations.deltas == b.perturbations.deltas).all()
        assert a.trajectory_csv() == b.trajectory_csv()

    def test_fc_em_trajectory_and_betas(self, tiny_data):
        cfg = tiny_config("fc-em", batch_size=24, adaptive_beta=True)
        run = A.attack_fc_em(tiny_data, cfg)
        assert len(run.trajectory) == cfg.epochs
        assert run.final_betas is not None
        assert run.final_betas.shape == (len(tiny_data),)
        assert (run.final_betas >= 0.1).all() and (run.final_betas <= 10.0).all()
        assert run.trajectory[-1].beta_mean == pytest.approx(
            float(run.final_betas.mean())
        )

    def test_fc_em_lone_class_batch_warns(self):
        rng = np.random.default_rng(1)
        data = LabeledDataset(
            points=rng.uniform(-1, 1, (3, 12, 3)),
            labels=np.array([0, 1, 1]),
            num_classes=2,
        )
        cfg = tiny_config("fc-em", epochs=1, batch_size=3)
        with pytest.warns(UserWarning, match="single sample"):
            A.attack_fc_em(data, cfg)

    def test_trajectory_csv_header(self, tiny_data):
        run = A.attack_em(tiny_data, tiny_config("em"))
        csv = run.trajectory_csv()
        assert csv.splitlines()[0] == (
            "epoch,attack_loss,chamfer_mean,hausdorff_mean,linf_max,beta_mean"
        )


class TestApFamily:
    def test_ap_single_trajectory_row_and_budget(self, tiny_data):
        cfg = tiny_config("ap", epochs=20, attack_steps=25)
        run = A.attack_ap(tiny_data, cfg)
        assert len(run.trajectory) == 1
        assert run.perturbations.check_budget(0.08)

    def test_untargeted_ap_raises_surrogate_loss(self, tiny_data):
        cfg = tiny_config("ap", epochs=40, attack_steps=25)
        run = A.attack_ap(tiny_data, cfg)
        ev = CrossEntropyLoss()
        feats, logits = run.model.forward_batch(tiny_data.points)
        clean_loss, _, _ = ev.value_and_grads(feats, logits, tiny_data.labels)
        feats, logits = run.model.forward_batch(
            tiny_data.points + run.perturbations.deltas
        )
        poisoned_loss, _, _ = ev.value_and_grads(feats, logits, tiny_data.labels)
        assert poisoned_loss > clean_loss

    def test_targeted_identity_with_raw_steps_leaves_fit_samples(self, tiny_data):
        # on deeply fit samples the true-label loss is already minimal, so the
        # degenerate target map with raw steps produces no meaningful poison
        from pcpoison.optim import fit_classifier

        surrogate = init_classifier(9, num_classes=tiny_data.num_classes)
        fit_classifier(
            surrogate, tiny_data.points, tiny_data.labels,
            epochs=80, batch_size=12, lr=0.05, seed=2,
        )
        _, logits = surrogate.forward_batch(tiny_data.points)
        assert (logits.argmax(axis=1) == tiny_data.labels).all()
        surrogate["Wh"][...] *= 10.0  # saturate the softmax
        cfg = tiny_config(
            "ap-t", attack_steps=50, lr_poison=0.01, target_map="identity",
            step_mode="raw-min",
        )
        run = A.attack_ap(tiny_data, cfg, targeted=True, model=surrogate)
        assert np.abs(run.perturbations.deltas).max() <= 1e-6

    def test_fd_ap_zeta_zero_reduces_to_reg_ap(self, tiny_data):
        fd = A.attack_fd_ap(tiny_data, tiny_config("fd-ap", zeta=0.0, epochs=6))
        reg = A.attack_reg_ap(tiny_data, tiny_config("reg-ap", epochs=6))
        np.testing.assert_array_equal(
            fd.perturbations.deltas, reg.perturbations.deltas
        )

    def test_reg_ap_beta_zero_equals_raw_ap(self, tiny_data):
        reg = A.attack_reg_ap(tiny_data, tiny_config("reg-ap", beta=0.0, epochs=6))
        ap = A.attack_ap(
            tiny_data,
            dataclasses.replace(
                tiny_config("ap", epochs=6), step_mode="raw-max", epsilon=1e9
            ),
        )
        np.testing.assert_array_equal(
            reg.perturbations.deltas, ap.perturbations.deltas
        )

    def test_reg_ap_chamfer_shrinks_with_beta(self):
        rng = np.random.default_rng(4)
        train, _ = generate_benchmark(train_per_class=6, test_per_class=2,
                                      n=24, seed=13)
        chamfers = []
        for beta in (0.1, 1.0, 10.0):
            cfg = tiny_config("reg-ap", epochs=30, attack_steps=40,
                              lr_poison=0.01, beta=beta)
            run = A.attack_reg_ap(train, cfg)
            chamfers.append(run.trajectory[-1].chamfer_mean)
        assert chamfers[0] >= chamfers[1] >= chamfers[2]

    def test_fd_ap_untargeted_disperses_same_class_features(self, tiny_data):
        cfg = tiny_config("fd-ap", epochs=40, attack_steps=30, zeta=5.0,
                          beta=0.05, lr_poison=0.05, batch_size=24)
        run = A.attack_fd_ap(tiny_data, cfg)

        def same_class_cos(points):
            feats, _ = run.model.forward_batch(points)
            U = feats / np.sqrt((feats**2).sum(1, keepdims=True))
            S = U @ U.T
            same = tiny_data.labels[:, None] == tiny_data.labels[None, :]
            np.fill_diagonal(same, False)
            return float(S[same].mean())

        clean_cos = same_class_cos(tiny_data.points)
        poison_cos = same_class_cos(tiny_data.points + run.perturbations.deltas)
        assert poison_cos < clean_cos


class TestRunArtifacts:
    def test_save_and_reload(self, tiny_data, tmp_path):
        run = A.attack_em(tiny_data, tiny_config("em"))
        run.save(tmp_path)
        assert (tmp_path / "deltas.pcdd").exists()
        assert (tmp_path / "trajectory.csv").exists()
        assert (tmp_path / "surrogate.pcpm").exists()
        from pcpoison.formats import read_pcdd

        back = read_pcdd(tmp_path / "deltas.pcdd")
        assert back.method == "em"
        assert back.deltas.shape == run.perturbations.deltas.shape

    def test_generate_poison_dispatch_and_unknown(self, tiny_data):
        run = A.generate_poison(tiny_data, tiny_config("em"))
        assert run.config.method == "em"
        with pytest.raises(ValueError, match="valid methods"):
            A.generate_poison(tiny_data, tiny_config("em").__class__(method="pgdx"))
