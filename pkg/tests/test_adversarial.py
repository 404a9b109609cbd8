import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetembed import autodiff as ad
from hetembed.adversarial import (
    AttackConfig,
    AttackDivergedError,
    Perturbation,
    PerturbationBoundError,
    adversarial_loss,
    batch_labels,
    joint_loss,
    pgd_attack,
)
from hetembed.hetgraph import Modality, NodeType
from hetembed.model import AblationSwitches, ModelDims, build_plan, forward, init_params
from hetembed.sampler import MetaPath, WalkConfig, sample_all
from hetembed.synthetic import SyntheticConfig, generate_synthetic

OFF = AblationSwitches.none()


def toy(seed=0, hidden=2, n_recipes=12):
    """Attributes-only model: logits are affine in the perturbation, so the attack problem is convex."""
    cfg = SyntheticConfig(n_users=3, n_recipes=n_recipes, n_ingredients=4, n_classes=2, image_dim=2, text_dim=2,
                          nutrient_dim=2, user_dim=2)
    g, labels = generate_synthetic(cfg, seed=seed)
    dims = ModelDims(hidden, {m.value: d for m, d in g.modality_dims().items()}, 2)
    params = init_params(dims, seed)
    plan = build_plan(g, {}, g.nodes(NodeType.RECIPE), OFF)
    return g, labels, params, plan


def full_setup(seed=0):
    g, labels = generate_synthetic(SyntheticConfig(n_users=5, n_recipes=15, n_ingredients=6, image_dim=4, text_dim=3,
                                                   nutrient_dim=2, user_dim=2), seed=seed)
    samples = sample_all(g, MetaPath.parse("R-U-R"), WalkConfig(n_walks=20, p=3))
    dims = ModelDims(4, {m.value: d for m, d in g.modality_dims().items()}, labels.n_classes)
    params = init_params(dims, seed)
    return g, labels, params, build_plan(g, samples, g.nodes(NodeType.RECIPE))


def clean_loss(params, g, plan, labels, switches):
    out = forward(params, g, plan, switches)
    return ad.cross_entropy(out.logits, batch_labels(out.ids, labels.labels)).item()


def test_attack_config_validation():
    assert AttackConfig() == AttackConfig(0.02, 0.005, 5, False)
    for bad in ({"bound": 0}, {"step": -1.0}, {"iters": 0}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_zero_gradient_keeps_eps_zero():
    g, labels, params, plan = toy()
    params.tensors["head.W"][:] = 0.0
    params.tensors["head.b"][:] = [0.3, -0.1]
    pert = pgd_attack(params, g, plan, labels.labels, AttackConfig(), OFF)
    assert all(not np.any(e) for e in pert.eps.values())


def test_saturation_at_bound_with_default_schedule():
    g, labels, params, plan = toy(seed=1)
    pert = pgd_attack(params, g, plan, labels.labels, AttackConfig(0.02, 0.005, 5), OFF)
    for e in pert.eps.values():
        moved = e[e != 0]
        assert moved.size > 0
        assert np.all(np.abs(moved) == 0.02)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5000))
def test_convex_toy_monotone_and_analytic_optimum(seed):
    g, labels, params, plan = toy(seed=seed)
    S = 0.02
    pert = pgd_attack(params, g, plan, labels.labels, AttackConfig(S, 0.005, 5), OFF)
    assert all(b >= a - 1e-12 for a, b in zip(pert.losses, pert.losses[1:]))
    clean = clean_loss(params, g, plan, labels, OFF)
    assert pert.losses[0] == clean
    assert pert.losses[-1] >= clean

    # two classes: loss depends on the margin z_y - z_other, which is linear in eps with
    # coefficient u_i per node, so the worst case moves the margin by -S * ||u_i||_1
    W = params.tensors
    d = params.dims.hidden
    head = W["head.W"][:, 1] - W["head.W"][:, 0]
    phi = W["l0.cross.recipe"]
    u_img, u_txt = phi[:d] @ head, phi[d:] @ head
    out = forward(params, g, plan, OFF)
    y = batch_labels(out.ids, labels.labels)
    z = out.logits.data
    margin = np.where(y == 1, z[:, 1] - z[:, 0], z[:, 0] - z[:, 1])
    worst = margin - S * (np.abs(u_img).sum() + np.abs(u_txt).sum())
    optimum = np.mean(np.log1p(np.exp(-worst)))
    assert pert.losses[-1] == pytest.approx(optimum, rel=1e-10)


def test_attack_does_not_touch_params_and_is_deterministic():
    g, labels, params, plan = full_setup()
    before = {k: v.copy() for k, v in params.tensors.items()}
    a = pgd_attack(params, g, plan, labels.labels)
    b = pgd_attack(params, g, plan, labels.labels)
    for k, v in before.items():
        assert np.array_equal(params.tensors[k], v)
    for m in a.eps:
        assert np.array_equal(a.eps[m], b.eps[m])


def test_full_model_attack_stays_in_ball():
    g, labels, params, plan = full_setup(seed=3)
    for iters in range(1, 8):
        pert = pgd_attack(params, g, plan, labels.labels, AttackConfig(0.02, 0.005, iters))
        assert pert.max_norm() <= 0.02
    assert set(pert.eps) == set(plan.modality_nodes)


def test_random_start_within_bound():
    g, labels, params, plan = full_setup(seed=4)
    pert = pgd_attack(params, g, plan, labels.labels, AttackConfig(random_start=True), rng=np.random.default_rng(0))
    assert pert.max_norm() <= 0.02


def test_zero_eps_adversarial_loss_equals_supervised_loss():
    g, labels, params, plan = full_setup(seed=5)
    zero = Perturbation.zeros(plan, params.dims.hidden, 0.02)
    adv = adversarial_loss(params, g, plan, labels.labels, zero)
    assert adv.item() == clean_loss(params, g, plan, labels, AblationSwitches())


def test_attacked_loss_not_below_clean_on_convex_toy():
    g, labels, params, plan = toy(seed=9)
    pert = pgd_attack(params, g, plan, labels.labels, AttackConfig(), OFF)
    adv = adversarial_loss(params, g, plan, labels.labels, pert, OFF).item()
    assert adv >= clean_loss(params, g, plan, labels, OFF)


def test_out_of_bound_perturbation_rejected():
    g, labels, params, plan = toy()
    shapes = plan.eps_shapes(params.dims.hidden)
    with pytest.raises(PerturbationBoundError):
        Perturbation({m: np.full(s, 0.03) for m, s in shapes.items()}, 0.02)
    pert = Perturbation({m: np.full(s, 0.02) for m, s in shapes.items()}, 0.02)
    pert.eps[Modality.IMAGE] = pert.eps[Modality.IMAGE] * 2
    with pytest.raises(PerturbationBoundError):
        adversarial_loss(params, g, plan, labels.labels, pert, OFF)


def test_adversarial_loss_gradients_reach_weights_only():
    g, labels, params, plan = full_setup(seed=6)
    pert = pgd_attack(params, g, plan, labels.labels)
    weights = {k: ad.Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
    with ad.Tape() as tape:
        loss = adversarial_loss(weights, g, plan, labels.labels, pert, dims=params.dims)
    grads = tape.backward(loss)
    assert {id(t) for t in grads} <= {id(t) for t in weights.values()}
    assert any(np.any(grads[w]) for w in weights.values())


def test_diverging_attack_reports_error():
    g, labels, params, plan = toy()
    for k in params.tensors:
        params.tensors[k] = params.tensors[k] * 1e160
    with np.errstate(all="ignore"), pytest.raises(AttackDivergedError):
        pgd_attack(params, g, plan, labels.labels, AttackConfig(), OFF)


def test_joint_loss_examples():
    assert joint_loss(2.0, 3.0, 0.1).item() == pytest.approx(2.3)
    assert joint_loss(2.0, 3.0, 0.0).item() == 2.0
    assert joint_loss(2.0, 0.0, 1.0).item() == 2.0
    with pytest.raises(ValueError):
        joint_loss(1.0, 1.0, -0.1)


def test_batch_labels_missing():
    with pytest.raises(KeyError):
        batch_labels(["r1"], {})
