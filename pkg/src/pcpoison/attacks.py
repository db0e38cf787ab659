"""Poison generators: EM, AP(-T), REG-EM, REG-AP(-T), FC-EM and FD-AP(-T).

The error-minimizing family alternates surrogate training steps with
projected/regularized gradient steps on the perturbations; the
adversarial-poison family pretrains a surrogate on clean data and then
attacks it.  All updates are plain gradient descent in float64 and every
random choice flows from the config seed, so a run is bit-reproducible.

L-infinity constrained methods take sign-gradient steps, regularized
methods take raw-gradient steps on the batch-mean objective; both are
overridable through ``step_mode`` for ablations.
"""

from __future__ import annotations

import dataclasses
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import DistanceReport, LabeledDataset, PerturbationSet, distance_report
from .losses import CrossEntropyLoss, FeatureCollisionLoss, get_loss
from .model import PointSetClassifier, init_classifier
from .optim import PlateauSchedule, derive_rng, epoch_batches, fit_classifier

VALID_METHODS = (
    "em", "ap", "ap-t", "reg-em", "reg-ap", "reg-ap-t",
    "fc-em", "fd-ap", "fd-ap-t",
)

_EM_FAMILY = ("em", "reg-em", "fc-em")
_AP_FAMILY = ("ap", "ap-t", "reg-ap", "reg-ap-t", "fd-ap", "fd-ap-t")
_LINF_METHODS = ("em", "ap", "ap-t")

# per-method defaults: batch size, epochs, attack steps T_a, attack step size
_METHOD_DEFAULTS = {
    "em": (32, 200, 10, 0.015),
    "reg-em": (32, 200, 10, 0.015),
    "fc-em": (128, 200, 10, 0.015),
    "ap": (32, 100, 250, 0.001),
    "ap-t": (32, 100, 250, 0.001),
    "reg-ap": (32, 100, 250, 0.001),
    "reg-ap-t": (32, 100, 250, 0.001),
    "fd-ap": (32, 100, 250, 0.001),
    "fd-ap-t": (32, 100, 250, 0.001),
}


@dataclass
class AttackConfig:
    """Full hyperparameter record of a poison run.

    Fields left as None are resolved to the method's defaults (batch
    size / epochs / steps / step size as in the generation recipes;
    model_steps and poison_steps default to one pass over the data).
    """

    method: str = "fc-em"
    epochs: int | None = None            # T (EM family) / pretrain epochs (AP family)
    model_steps: int | None = None       # T_theta batches per epoch
    poison_steps: int | None = None      # T_delta batches per epoch
    attack_steps: int | None = None      # T_a inner steps per batch
    lr_model: float = 1e-3               # alpha_theta
    lr_poison: float | None = None       # alpha_delta / alpha_a
    batch_size: int | None = None        # N_B
    beta: float = 1.0
    temperature: float = 0.1
    epsilon: float | None = None         # l-inf budget (0.08 default where used)
    zeta: float = 1.0                    # feature-collision strength in FD-AP
    adaptive_beta: bool = False
    adaptive_scale: float = 1.1
    adaptive_top_fraction: float = 0.2
    adaptive_clamp: tuple = (0.1, 10.0)
    target_map: str = "next-class"       # tau for the targeted variants
    cls_loss: str = "cross_entropy"
    step_mode: str | None = None         # sign-min|sign-max|raw-min|raw-max override
    arch: str = "ref-small"
    seed: int = 0
    pretrain_exit_acc: float = 0.995
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_min_lr: float = 1e-6
    hausdorff_variant: str = "two-sided-sq"

    def resolve(self, n_samples: int) -> "AttackConfig":
        if self.method not in VALID_METHODS:
            raise ValueError(
                f"unknown method {self.method!r}; valid methods: "
                + ", ".join(VALID_METHODS)
            )
        nb_d, ep_d, ta_d, lr_d = _METHOD_DEFAULTS[self.method]

        def pick(value, default):
            return default if value is None else value

        cfg = dataclasses.replace(self)
        cfg.batch_size = pick(self.batch_size, nb_d)
        cfg.epochs = pick(self.epochs, ep_d)
        cfg.attack_steps = pick(self.attack_steps, ta_d)
        cfg.lr_poison = pick(self.lr_poison, lr_d)
        per_pass = max(1, -(-n_samples // max(cfg.batch_size, 1)))
        cfg.model_steps = pick(self.model_steps, per_pass)
        cfg.poison_steps = pick(self.poison_steps, per_pass)
        if self.method in _LINF_METHODS and cfg.epsilon is None:
            cfg.epsilon = 0.08
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("epochs", "model_steps", "poison_steps", "attack_steps",
                     "batch_size"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        for name in ("lr_model", "lr_poison"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.method in _LINF_METHODS and (self.epsilon is None or self.epsilon <= 0):
            raise ValueError(f"method {self.method} needs a positive epsilon budget")
        if self.step_mode is not None and self.step_mode not in (
            "sign-min", "sign-max", "raw-min", "raw-max"
        ):
            raise ValueError(f"unknown step mode {self.step_mode!r}")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


@dataclass
class TrajectoryRow:
    epoch: int
    attack_loss: float
    chamfer_mean: float
    hausdorff_mean: float
    linf_max: float
    beta_mean: float
    base_loss: float  # classification / feature-collision component alone


@dataclass
class PoisonRun:
    """Final perturbations plus the per-epoch trajectory and surrogate."""

    perturbations: PerturbationSet
    trajectory: list
    model: PointSetClassifier
    config: AttackConfig
    final_betas: np.ndarray | None = None
    base_grad_norm_max: np.ndarray | None = None  # per-sample max ||∇ base loss||

    def trajectory_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,attack_loss,chamfer_mean,hausdorff_mean,linf_max,beta_mean\n")
        for row in self.trajectory:
            out.write(
                f"{row.epoch},{row.attack_loss:.17g},{row.chamfer_mean:.17g},"
                f"{row.hausdorff_mean:.17g},{row.linf_max:.17g},{row.beta_mean:.17g}\n"
            )
        return out.getvalue()

    def save(self, outdir) -> None:
        from pathlib import Path

        from .formats import write_pcdd

        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_pcdd(outdir / "deltas.pcdd", self.perturbations, seed=self.config.seed)
        (outdir / "trajectory.csv").write_text(self.trajectory_csv())
        self.model.save(outdir / "surrogate.pcpm")
        (outdir / "attack_config.cfg").write_text(self.config.to_text())


def make_target_map(name: str, num_classes: int):
    """Fixed-point-free label permutation (or identity, for ablations)."""
    if name in ("next-class", "next"):
        return lambda y: (np.asarray(y) + 1) % num_classes
    if name == "identity":
        return lambda y: np.asarray(y)
    raise ValueError(f"unknown target map {name!r}")


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Componentwise clamp of the offsets to [-epsilon, epsilon]."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return np.clip(delta, -epsilon, epsilon)


def batch_objective(model, terms, clean_points, beta):
    """Build a delta -> (value, grad, aux) objective over one batch.

    ``terms`` is a list of (coef, evaluator, labels) contributions
    evaluated on x + delta; ``beta`` weights the per-sample chamfer
    distance to the clean batch (scalar or per-sample array, negative
    allowed for ascent formulations).  aux carries the bare base value,
    per-sample base losses, and per-sample base gradient norms.
    """
    clean_points = np.asarray(clean_points, dtype=np.float64)
    B = clean_points.shape[0]
    betas = np.broadcast_to(np.asarray(beta, dtype=np.float64), (B,))
    use_cham = bool(np.any(betas != 0.0))
    terms = [(c, ev, np.asarray(lab)) for c, ev, lab in terms if c != 0.0]

    def objective(deltas):
        X = clean_points + deltas
        feats, logits, cache = model.forward_batch(X, want_cache=True)
        value = 0.0
        d_feat = None
        d_logits = None
        per_sample = np.zeros(B)
        for coef, ev, lab in terms:
            v, df, dl = ev.value_and_grads(feats, logits, lab)
            value += coef * v
            per_sample += coef * ev.per_sample(feats, logits, lab)
            if df is not None:
                d_feat = coef * df if d_feat is None else d_feat + coef * df
            if dl is not None:
                d_logits = coef * dl if d_logits is None else d_logits + coef * dl
        _, dX = model.backward_batch(
            cache, d_feat, d_logits, want_params=False, want_inputs=True
        )
        aux = {
            "base_value": value,
            "per_sample_base": per_sample,
            "base_grad_norms": B * np.sqrt((dX**2).sum(axis=(1, 2))),
        }
        if use_cham:
            cham_vals, cham_grads = _kernels.chamfer_batch_grad(X, clean_points)
            value += float(np.mean(betas * cham_vals))
            dX = dX + (betas / B)[:, None, None] * cham_grads
        return value, dX, aux

    return objective


def pgd_inner(objective, deltas, *, steps, step_size, mode, epsilon=None):
    """Iterate gradient steps of the objective on a copy of the deltas.

    Sign modes step by step_size * sign(grad), raw modes by
    step_size * grad; ``min`` descends and ``max`` ascends.  With an
    epsilon budget the offsets are re-projected after every step.
    Returns (deltas, last objective value, last aux).
    """
    if mode not in ("sign-min", "sign-max", "raw-min", "raw-max"):
        raise ValueError(f"unknown step mode {mode!r}")
    sign_step = mode.startswith("sign")
    descend = mode.endswith("min")
    deltas = np.array(deltas, dtype=np.float64, copy=True)
    value, aux = None, None
    for _ in range(steps):
        value, grad, aux = objective(deltas)
        if not np.isfinite(grad).all():
            raise RuntimeError("non-finite gradient in the PGD inner loop")
        step = np.sign(grad) if sign_step else grad
        deltas = deltas - step_size * step if descend else deltas + step_size * step
        if epsilon is not None:
            deltas = project_linf(deltas, epsilon)
    return deltas, value, aux


def adaptive_beta_step(fc_losses, betas, s, top_fraction, clamp=(0.1, 10.0)):
    """Scale per-sample beta up for high feature-collision losses.

    The threshold is the (1 - top_fraction) quantile of the batch losses;
    values at the boundary (including an all-equal batch) count as top.
    """
    if s <= 1.0:
        raise ValueError("scale factor must exceed 1")
    if not 0.0 < top_fraction < 1.0:
        raise ValueError("top_fraction must lie in (0, 1)")
    losses = np.asarray(fc_losses, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    threshold = np.quantile(losses, 1.0 - top_fraction)
    top = losses >= threshold
    return np.clip(np.where(top, betas * s, betas / s), clamp[0], clamp[1])


def _batch_cycler(n, batch_size, rng):
    while True:
        for idx in epoch_batches(n, batch_size, rng):
            yield idx


def _check_class_pairs(labels, warned):
    if warned[0]:
        return
    _, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        warnings.warn(
            "feature-collision batch has a class with a single sample; "
            "its loss term reduces to the self-pair",
            stacklevel=3,
        )
        warned[0] = True


def _bilevel_attack(dataset: LabeledDataset, cfg: AttackConfig, model=None) -> PoisonRun:
    n = len(dataset)
    points = dataset.points
    labels = dataset.labels
    inner_fc = cfg.method == "fc-em"
    use_beta = cfg.method != "em"
    eps = cfg.epsilon if cfg.method in _LINF_METHODS else None
    mode = cfg.step_mode or ("sign-min" if cfg.method == "em" else "raw-min")
    if model is None:
        model = init_classifier(
            derive_rng(cfg.seed, "surrogate-init").integers(2**32),
            cfg.arch,
            dataset.num_classes,
        )
    cls_eval = get_loss(cfg.cls_loss)
    inner_eval = (
        FeatureCollisionLoss(cfg.temperature) if inner_fc else cls_eval
    )
    schedule = PlateauSchedule(
        cfg.lr_model, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr
    )
    model_batches = _batch_cycler(n, cfg.batch_size, derive_rng(cfg.seed, "model-batches"))
    poison_batches = _batch_cycler(n, cfg.batch_size, derive_rng(cfg.seed, "poison-batches"))
    delta = np.zeros_like(points)
    betas = np.full(n, cfg.beta)
    grad_norm_max = np.zeros(n)
    warned = [False]
    trajectory = []
    for epoch in range(cfg.epochs):
        theta_losses = []
        for _ in range(cfg.model_steps):
            idx = next(model_batches)
            X = points[idx] + delta[idx]
            feats, logits, cache = model.forward_batch(X, want_cache=True)
            v, d_feat, d_logits = cls_eval.value_and_grads(feats, logits, labels[idx])
            if not np.isfinite(v):
                raise RuntimeError(f"non-finite surrogate loss at epoch {epoch}")
            pgrad, _ = model.backward_batch(cache, d_feat, d_logits)
            model.params -= schedule.lr * pgrad
            if use_beta:
                cham = _kernels.chamfer_batch(X, points[idx])
                v += float(np.mean(betas[idx] * cham))
            theta_losses.append(v)
        schedule.step(float(np.mean(theta_losses)))
        attack_vals = []
        base_vals = []
        epoch_fc = np.full(n, np.nan)
        for _ in range(cfg.poison_steps):
            idx = next(poison_batches)
            if inner_fc:
                _check_class_pairs(labels[idx], warned)
            obj = batch_objective(
                model,
                [(1.0, inner_eval, labels[idx])],
                points[idx],
                betas[idx] if use_beta else 0.0,
            )
            delta[idx], val, aux = pgd_inner(
                obj,
                delta[idx],
                steps=cfg.attack_steps,
                step_size=cfg.lr_poison,
                mode=mode,
                epsilon=eps,
            )
            attack_vals.append(val)
            base_vals.append(aux["base_value"])
            epoch_fc[idx] = aux["per_sample_base"]
            grad_norm_max[idx] = np.maximum(grad_norm_max[idx], aux["base_grad_norms"])
        if cfg.adaptive_beta and inner_fc:
            seen = ~np.isnan(epoch_fc)
            betas[seen] = adaptive_beta_step(
                epoch_fc[seen],
                betas[seen],
                cfg.adaptive_scale,
                cfg.adaptive_top_fraction,
                cfg.adaptive_clamp,
            )
        rep = distance_report(dataset, PerturbationSet(delta), cfg.hausdorff_variant)
        trajectory.append(
            TrajectoryRow(
                epoch=epoch,
                attack_loss=float(np.mean(attack_vals)),
                chamfer_mean=rep.chamfer_mean,
                hausdorff_mean=rep.hausdorff_mean,
                linf_max=rep.linf_max,
                beta_mean=float(np.mean(betas)) if use_beta else 0.0,
                base_loss=float(np.mean(base_vals)),
            )
        )
    return PoisonRun(
        perturbations=PerturbationSet(delta, method=cfg.method),
        trajectory=trajectory,
        model=model,
        config=cfg,
        final_betas=betas if use_beta else None,
        base_grad_norm_max=grad_norm_max,
    )


def _ap_attack(
    dataset: LabeledDataset, cfg: AttackConfig, targeted: bool, model=None
) -> PoisonRun:
    n = len(dataset)
    points = dataset.points
    labels = dataset.labels
    regularized = cfg.method not in _LINF_METHODS
    zeta = cfg.zeta if cfg.method in ("fd-ap", "fd-ap-t") else 0.0
    beta = cfg.beta if regularized else 0.0
    eps = cfg.epsilon if cfg.method in _LINF_METHODS else None
    if cfg.step_mode is not None:
        mode = cfg.step_mode
    else:
        kind = "raw" if regularized else "sign"
        mode = f"{kind}-min" if targeted else f"{kind}-max"
    if model is None:
        model = init_classifier(
            derive_rng(cfg.seed, "surrogate-init").integers(2**32),
            cfg.arch,
            dataset.num_classes,
        )
        fit_classifier(
            model,
            points,
            labels,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr_model,
            seed=int(derive_rng(cfg.seed, "pretrain").integers(2**32)),
            plateau=PlateauSchedule(
                cfg.lr_model, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr
            ),
            early_stop_acc=cfg.pretrain_exit_acc,
        )
    y_used = make_target_map(cfg.target_map, dataset.num_classes)(labels) if targeted else labels
    cls_eval = get_loss(cfg.cls_loss)
    fc_eval = FeatureCollisionLoss(cfg.temperature)
    # untargeted ascends cls(+zeta*fc) - beta*cham; targeted descends on tau(y)
    cham_coef = beta if targeted else -beta
    delta = np.zeros_like(points)
    grad_norm_max = np.zeros(n)
    rng = derive_rng(cfg.seed, "poison-batches")
    attack_vals = []
    base_vals = []
    warned = [False]
    for idx in epoch_batches(n, cfg.batch_size, rng):
        terms = [(1.0, cls_eval, y_used[idx])]
        if zeta > 0.0:
            _check_class_pairs(y_used[idx], warned)
            terms.append((zeta, fc_eval, y_used[idx]))
        obj = batch_objective(model, terms, points[idx], cham_coef)
        delta[idx], val, aux = pgd_inner(
            obj,
            delta[idx],
            steps=cfg.attack_steps,
            step_size=cfg.lr_poison,
            mode=mode,
            epsilon=eps,
        )
        attack_vals.append(val)
        base_vals.append(aux["base_value"])
        grad_norm_max[idx] = aux["base_grad_norms"]
    rep = distance_report(dataset, PerturbationSet(delta), cfg.hausdorff_variant)
    trajectory = [
        TrajectoryRow(
            epoch=0,
            attack_loss=float(np.mean(attack_vals)),
            chamfer_mean=rep.chamfer_mean,
            hausdorff_mean=rep.hausdorff_mean,
            linf_max=rep.linf_max,
            beta_mean=beta,
            base_loss=float(np.mean(base_vals)),
        )
    ]
    return PoisonRun(
        perturbations=PerturbationSet(delta, method=cfg.method),
        trajectory=trajectory,
        model=model,
        config=cfg,
        base_grad_norm_max=grad_norm_max,
    )


def attack_em(dataset, config, model=None) -> PoisonRun:
    """Bi-level min-min poisoning under an l-infinity budget."""
    cfg = dataclasses.replace(config, method="em").resolve(len(dataset))
    return _bilevel_attack(dataset, cfg, model)


def attack_reg_em(dataset, config, model=None) -> PoisonRun:
    """EM with the budget replaced by chamfer-distance regularization."""
    cfg = dataclasses.replace(config, method="reg-em").resolve(len(dataset))
    return _bilevel_attack(dataset, cfg, model)


def attack_fc_em(dataset, config, model=None) -> PoisonRun:
    """Bi-level poisoning whose inner steps minimize feature collision."""
    cfg = dataclasses.replace(config, method="fc-em").resolve(len(dataset))
    return _bilevel_attack(dataset, cfg, model)


def attack_ap(dataset, config, targeted=False, model=None) -> PoisonRun:
    """Error-maximizing poisons from a pretrained surrogate."""
    cfg = dataclasses.replace(config, method="ap-t" if targeted else "ap")
    cfg = cfg.resolve(len(dataset))
    return _ap_attack(dataset, cfg, targeted, model)


def attack_reg_ap(dataset, config, targeted=False, model=None) -> PoisonRun:
    """AP with chamfer regularization instead of the l-infinity budget."""
    cfg = dataclasses.replace(config, method="reg-ap-t" if targeted else "reg-ap")
    cfg = cfg.resolve(len(dataset))
    return _ap_attack(dataset, cfg, targeted, model)


def attack_fd_ap(dataset, config, targeted=False, model=None) -> PoisonRun:
    """Regularized AP with an added feature-disentanglement term."""
    cfg = dataclasses.replace(config, method="fd-ap-t" if targeted else "fd-ap")
    cfg = cfg.resolve(len(dataset))
    return _ap_attack(dataset, cfg, targeted, model)


_DISPATCH = {
    "em": attack_em,
    "reg-em": attack_reg_em,
    "fc-em": attack_fc_em,
    "ap": lambda d, c, model=None: attack_ap(d, c, False, model),
    "ap-t": lambda d, c, model=None: attack_ap(d, c, True, model),
    "reg-ap": lambda d, c, model=None: attack_reg_ap(d, c, False, model),
    "reg-ap-t": lambda d, c, model=None: attack_reg_ap(d, c, True, model),
    "fd-ap": lambda d, c, model=None: attack_fd_ap(d, c, False, model),
    "fd-ap-t": lambda d, c, model=None: attack_fd_ap(d, c, True, model),
}


def generate_poison(dataset: LabeledDataset, config: AttackConfig, model=None) -> PoisonRun:
    """Run the configured attack on the dataset."""
    if config.method not in VALID_METHODS:
        raise ValueError(
            f"unknown method {config.method!r}; valid methods: "
            + ", ".join(VALID_METHODS)
        )
    return _DISPATCH[config.method](dataset, config, model=model)
