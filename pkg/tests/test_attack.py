"""Tests for margin losses, projection and PGD.

The PGD invariant sweep re-checks norm bounds and value ranges with inline
arithmetic rather than trusting the AdvExample constructor.
"""
import numpy as np
import pytest

from topovote import attack as atk
from topovote import gradnet as gn


def linear_net(weight, bias=None):
    w = np.asarray(weight, dtype=np.float64)
    net = gn.Network((gn.Dense(w.shape[0], w.shape[1]),), (w.shape[0],), w.shape[1])
    net.params["layer0.weight"] = w
    net.params["layer0.bias"] = np.zeros(w.shape[1]) if bias is None else np.asarray(bias)
    return net


class ArrayDataset:
    def __init__(self, inputs, labels):
        self.inputs = inputs
        self.labels = labels


# ---------------------------------------------------------------------------
# margin losses


def test_cw_targeted_direct_cases():
    assert atk.cw_targeted([5.0, 1.0, 0.0], 0) == -4.0
    assert atk.cw_targeted([5.0, 1.0, 0.0], 1) == 4.0
    assert atk.cw_targeted([2.0, 2.0, 2.0], 1) == 0.0


def test_cw_untargeted_direct_cases():
    assert atk.cw_untargeted([5.0, 1.0, 0.0], 0) == 4.0
    assert atk.cw_untargeted([2.0, 2.0, 2.0], 2) == 0.0


def test_cw_matches_linear_scan_oracle():
    rng = np.random.default_rng(10)
    for _ in range(300):
        c = rng.integers(2, 12)
        z = rng.standard_normal(c) * 5
        k = int(rng.integers(0, c))
        best_other = max(z[i] for i in range(c) if i != k)
        assert atk.cw_targeted(z, k) == best_other - z[k]
        assert atk.cw_untargeted(z, k) == z[k] - best_other


def test_cw_untargeted_is_negated_targeted():
    rng = np.random.default_rng(11)
    for _ in range(200):
        z = rng.standard_normal(rng.integers(2, 9))
        k = int(rng.integers(0, z.size))
        assert atk.cw_untargeted(z, k) == -atk.cw_targeted(z, k)


def test_cw_rejects_bad_rows():
    with pytest.raises(ValueError):
        atk.cw_targeted([1.0], 0)
    with pytest.raises(ValueError):
        atk.cw_targeted([1.0, 2.0], 2)
    with pytest.raises(ValueError):
        atk.cw_untargeted(np.zeros((2, 2)), 0)


def test_margin_loss_negative_iff_target_argmax():
    rng = np.random.default_rng(12)
    for _ in range(100):
        z = rng.standard_normal(6)
        k = int(rng.integers(0, 6))
        strict_top = z[k] > max(z[i] for i in range(6) if i != k)
        assert (atk.cw_targeted(z, k) < 0) == strict_top


def test_batch_margin_loss_matches_row_function_and_fd():
    rng = np.random.default_rng(13)
    logits = rng.standard_normal((7, 5)) * 2
    targets = rng.integers(0, 5, 7)
    loss = atk.targeted_margin_loss(targets)
    value, grad = loss.value_and_grad(logits.copy())
    rows = [atk.cw_targeted(logits[i], int(targets[i])) for i in range(7)]
    assert abs(value - np.mean(rows)) <= 1e-12
    # FD on logit coordinates (piecewise linear, so exact away from ties)
    h = 1e-7
    for idx in [(0, 0), (2, 3), (6, 4), (4, 1)]:
        zp = logits.copy(); zp[idx] += h
        zm = logits.copy(); zm[idx] -= h
        fd = (loss.value_and_grad(zp)[0] - loss.value_and_grad(zm)[0]) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-6


# ---------------------------------------------------------------------------
# projection


def test_project_linf_clamp():
    out = atk.project(np.array([0.3, -0.05]), "linf", 0.1)
    assert np.array_equal(out, [0.1, -0.05])


def test_project_l2_rescale():
    out = atk.project(np.array([3.0, 4.0]), "l2", 1.0)
    assert np.allclose(out, [0.6, 0.8], atol=1e-12)
    assert np.sqrt((out**2).sum()) <= 1.0 + 1e-12


def test_project_inside_ball_untouched():
    d = np.array([0.01, -0.02])
    assert np.array_equal(atk.project(d, "linf", 0.1), d)
    assert np.array_equal(atk.project(d, "l2", 0.1), d)


def test_project_idempotent_fuzz():
    rng = np.random.default_rng(14)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        d = rng.standard_normal(shape) * rng.uniform(0, 3)
        eps = float(rng.uniform(0, 1.5))
        norm = "l2" if rng.uniform() < 0.5 else "linf"
        p1 = atk.project(d, norm, eps)
        p2 = atk.project(p1, norm, eps)
        assert np.array_equal(p1, p2), (norm, eps)
        if norm == "linf":
            assert np.abs(p1).max() <= eps
        else:
            assert np.sqrt((p1**2).sum()) <= eps + 1e-9


def test_project_epsilon_zero_kills_delta():
    d = np.array([0.5, -0.5])
    assert np.all(atk.project(d, "linf", 0.0) == 0.0)
    assert np.all(atk.project(d, "l2", 0.0) == 0.0)


def test_project_rejects_bad_args():
    with pytest.raises(ValueError):
        atk.project(np.zeros(2), "l1", 0.1)
    with pytest.raises(ValueError):
        atk.project(np.zeros(2), "l2", -0.1)


# ---------------------------------------------------------------------------
# translation


def test_translate_zero_pads():
    x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
    out = atk.translate(x, 1, 0)  # shift down one row
    assert np.array_equal(out[0, 0], [0, 0, 0])
    assert np.array_equal(out[0, 1], x[0, 0])
    assert np.array_equal(out[0, 2], x[0, 1])
    assert np.array_equal(atk.translate(x, 0, 0), x)
    assert np.all(atk.translate(x, 3, 0) == 0.0)


def test_translate_adjoint_identity():
    # <translate(x), y> == <x, translate_back(y)> makes the gradient
    # bookkeeping in PGD exact
    rng = np.random.default_rng(15)
    for _ in range(50):
        x = rng.standard_normal((2, 6, 6))
        y = rng.standard_normal((2, 6, 6))
        dy, dx = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
        lhs = float((atk.translate(x, dy, dx) * y).sum())
        rhs = float((x * atk.translate(y, -dy, -dx)).sum())
        assert abs(lhs - rhs) <= 1e-12


def test_translate_requires_spatial_axes():
    with pytest.raises(ValueError):
        atk.translate(np.zeros((4,)), 1, 0)


# ---------------------------------------------------------------------------
# config


def test_attack_config_validation():
    atk.AttackConfig(epsilon=0.1)  # fine
    with pytest.raises(ValueError):
        atk.AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        atk.AttackConfig(epsilon=0.1, alpha=0.0)
    with pytest.raises(ValueError):
        atk.AttackConfig(epsilon=0.1, iterations=0)
    with pytest.raises(ValueError):
        atk.AttackConfig(epsilon=0.1, norm="l1")
    with pytest.raises(ValueError):
        atk.AttackConfig(epsilon=0.1, transform_prob=1.5)
    with pytest.raises(ValueError):
        atk.AttackConfig(epsilon=0.1, max_translate=-1)
    with pytest.raises(ValueError):
        atk.AttackConfig(epsilon=0.1, mode="targeted")


def test_attack_config_default_alpha():
    cfg = atk.AttackConfig(epsilon=0.4, iterations=40)
    assert abs(cfg.resolved_alpha() - 2.5 * 0.4 / 40) <= 1e-15
    cfg2 = atk.AttackConfig(epsilon=0.4, alpha=0.07)
    assert cfg2.resolved_alpha() == 0.07


def test_adv_example_invariants_enforced():
    x = np.full(4, 0.5)
    atk.AdvExample(x, x + 0.1, 0, 1, 0.1, "t")  # at the boundary, fine
    with pytest.raises(ValueError, match="exceeds"):
        atk.AdvExample(x, x + 0.2, 0, 1, 0.1, "t")
    with pytest.raises(ValueError, match="outside"):
        atk.AdvExample(x, x + 0.6, 0, 1, 2.0, "t")
    with pytest.raises(ValueError, match="target"):
        atk.AdvExample(x, x, 1, 1, 0.1, "t")
    with pytest.raises(ValueError, match="l2"):
        # l2 distance 0.2 > 0.1 even though per-component fits
        atk.AdvExample(x, x + 0.1, 0, 1, 0.1, "t", norm="l2")


# ---------------------------------------------------------------------------
# pgd


def test_pgd_epsilon_zero_is_identity():
    net = linear_net([[1.0, -1.0]])
    x = np.array([0.37])
    cfg = atk.AttackConfig(
        epsilon=0.0, iterations=5, random_init=False, mode=atk.Untargeted(0)
    )
    ex = atk.pgd([net], x, cfg, np.random.default_rng(0))
    assert np.array_equal(ex.adversarial, x)


def test_pgd_analytic_linear_case():
    # Z = (x, -x): untargeted margin from class 0 is 2x with constant
    # gradient 2, so each step moves x by -alpha until the ball binds.
    net = linear_net([[1.0, -1.0]])
    cfg = atk.AttackConfig(
        epsilon=0.1, alpha=0.05, iterations=2, random_init=False,
        mode=atk.Untargeted(0),
    )
    ex = atk.pgd([net], np.array([0.5]), cfg, np.random.default_rng(0))
    assert np.allclose(ex.adversarial, [0.4], atol=1e-12)
    # more iterations: projection pins the iterate at the boundary
    cfg40 = atk.AttackConfig(
        epsilon=0.1, alpha=0.05, iterations=40, random_init=False,
        mode=atk.Untargeted(0),
    )
    ex40 = atk.pgd([net], np.array([0.5]), cfg40, np.random.default_rng(0))
    assert np.allclose(ex40.adversarial, [0.4], atol=1e-12)


def test_pgd_invariant_fuzz_sweep():
    rng = np.random.default_rng(77)
    nets_by_dim = {}
    for case in range(1000):
        dim = int(rng.integers(2, 7))
        classes = int(rng.integers(2, 6))
        key = (dim, classes, case % 3)
        if key not in nets_by_dim:
            nets_by_dim[key] = gn.build_network(
                [gn.Dense(dim, classes)], (dim,), classes, rng
            )
        net = nets_by_dim[key]
        x = rng.random(dim)
        true = int(rng.integers(0, classes))
        if rng.uniform() < 0.5:
            mode = atk.Untargeted(true)
        else:
            target = int((true + 1 + rng.integers(0, classes - 1)) % classes)
            mode = atk.Targeted(target, true)
        eps = float(rng.choice([0.0, 0.05, 0.1, 0.3, 1.0]))
        norm = "l2" if rng.uniform() < 0.5 else "linf"
        cfg = atk.AttackConfig(
            epsilon=eps, norm=norm, iterations=3,
            random_init=bool(rng.uniform() < 0.7), mode=mode,
        )
        ex = atk.pgd([net], x, cfg, rng, sample_id=case)
        diff = ex.adversarial - ex.original
        if norm == "linf":
            assert np.abs(diff).max() <= eps + 1e-9
        else:
            assert np.sqrt((diff**2).sum()) <= eps + 1e-9
        assert ex.adversarial.min() >= 0.0 and ex.adversarial.max() <= 1.0
        assert np.array_equal(ex.original, x)
        if eps == 0.0 and not cfg.random_init:
            assert np.array_equal(ex.adversarial, x)


def test_pgd_deterministic_under_seed():
    rng = np.random.default_rng(5)
    net = gn.build_network([gn.Dense(6, 3)], (6,), 3, rng)
    x = rng.random(6)
    cfg = atk.AttackConfig(epsilon=0.2, iterations=10, mode=atk.Untargeted(1))
    a = atk.pgd([net], x, cfg, np.random.default_rng(99))
    b = atk.pgd([net], x, cfg, np.random.default_rng(99))
    assert np.array_equal(a.adversarial, b.adversarial)


def test_pgd_projection_binds_before_clamp():
    # start at the corner: clamping to [0,1] must never rescue an iterate
    # that projection alone would have kept inside the ball
    net = linear_net([[1.0, -1.0]])
    cfg = atk.AttackConfig(
        epsilon=0.3, alpha=0.2, iterations=7, random_init=False,
        mode=atk.Untargeted(0),
    )
    ex = atk.pgd([net], np.array([0.1]), cfg, np.random.default_rng(0))
    # descent pushes x down; [0,1] clamp binds at 0 before the 0.3 ball does
    assert np.allclose(ex.adversarial, [0.0], atol=1e-12)


def test_pgd_mode_errors():
    net = linear_net([[1.0, -1.0]])
    x = np.array([0.5])
    with pytest.raises(ValueError, match="mode"):
        atk.pgd([net], x, atk.AttackConfig(epsilon=0.1), np.random.default_rng(0))
    with pytest.raises(ValueError, match="true class"):
        cfg = atk.AttackConfig(epsilon=0.1, mode=atk.Targeted(0, 0))
        atk.pgd([net], x, cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="range"):
        cfg = atk.AttackConfig(epsilon=0.1, mode=atk.Targeted(5, 0))
        atk.pgd([net], x, cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        atk.pgd([], x, atk.AttackConfig(epsilon=0.1, mode=atk.Untargeted(0)),
                np.random.default_rng(0))


def test_pgd_nonfinite_gradient_aborts_with_iteration():
    net = linear_net([[np.inf, -1.0]])
    cfg = atk.AttackConfig(
        epsilon=0.1, iterations=4, random_init=False, mode=atk.Untargeted(0)
    )
    with pytest.raises(atk.NonFiniteGradientError) as exc:
        atk.pgd([net], np.array([0.5]), cfg, np.random.default_rng(0))
    assert exc.value.iteration == 0


def test_pgd_translation_needs_spatial_input():
    net = linear_net([[1.0, -1.0]])
    cfg = atk.AttackConfig(
        epsilon=0.1, mode=atk.Untargeted(0), transform_prob=0.5, max_translate=1
    )
    with pytest.raises(ValueError, match="translation"):
        atk.pgd([net], np.array([0.5]), cfg, np.random.default_rng(0))


def test_pgd_multi_model_mean_equals_single_on_duplicates():
    # attacking [net, net] must take exactly the same trajectory as [net]
    rng = np.random.default_rng(21)
    net = gn.build_network([gn.Dense(5, 3)], (5,), 3, rng)
    x = rng.random(5)
    cfg = atk.AttackConfig(epsilon=0.2, iterations=6, random_init=False,
                           mode=atk.Untargeted(2))
    one = atk.pgd([net], x, cfg, np.random.default_rng(1))
    two = atk.pgd([net, net], x, cfg, np.random.default_rng(1))
    assert np.allclose(one.adversarial, two.adversarial, atol=1e-12)


# ---------------------------------------------------------------------------
# transfer sets


def tiny_surrogates(rng, classes=10, dim=4):
    return [
        gn.build_network([gn.Dense(dim, classes)], (dim,), classes, rng)
        for _ in range(2)
    ]


def test_transfer_set_one_sample_all_targets():
    rng = np.random.default_rng(30)
    nets = tiny_surrogates(rng)
    ds = ArrayDataset(rng.random((1, 4)), np.array([3]))
    cfg = atk.AttackConfig(epsilon=0.1, iterations=2)
    adv = atk.build_transfer_set(nets, ds, "all", cfg, master_seed=1)
    assert len(adv) == 9
    assert all(r.target_class != 3 for r in adv.records)
    assert adv.epsilons == (0.1,)


def test_transfer_set_full_grid_count():
    rng = np.random.default_rng(31)
    nets = tiny_surrogates(rng)
    ds = ArrayDataset(rng.random((100, 4)), rng.integers(0, 10, 100))
    cfg = atk.AttackConfig(epsilon=0.1, iterations=2)
    adv = atk.build_transfer_set(
        nets, ds, "all", cfg, epsilons=[0.1, 0.2, 0.3, 0.4],
        master_seed=2, batch_size=512,
    )
    assert len(adv) == 100 * 9 * 4
    keys = [(r.sample_id, r.target_class, r.epsilon) for r in adv.records]
    assert len(set(keys)) == len(keys)
    assert keys == sorted(keys)


def test_transfer_set_empty_targets():
    rng = np.random.default_rng(32)
    nets = tiny_surrogates(rng)
    ds = ArrayDataset(rng.random((3, 4)), np.array([0, 1, 2]))
    adv = atk.build_transfer_set(nets, ds, [], atk.AttackConfig(epsilon=0.1))
    assert len(adv) == 0


def test_transfer_set_deterministic_and_batch_order_independent():
    rng = np.random.default_rng(33)
    nets = tiny_surrogates(rng, classes=4)
    ds = ArrayDataset(rng.random((6, 4)), rng.integers(0, 4, 6))
    cfg = atk.AttackConfig(epsilon=0.2, iterations=4)
    a = atk.build_transfer_set(nets, ds, "all", cfg, master_seed=7, batch_size=64)
    b = atk.build_transfer_set(nets, ds, "all", cfg, master_seed=7, batch_size=64)
    assert all(
        np.array_equal(x.adversarial, y.adversarial)
        for x, y in zip(a.records, b.records)
    )
    c = atk.build_transfer_set(nets, ds, "all", cfg, master_seed=7, batch_size=3)
    assert all(
        np.allclose(x.adversarial, y.adversarial, atol=1e-12)
        for x, y in zip(a.records, c.records)
    )


def test_transfer_set_records_carry_metadata():
    rng = np.random.default_rng(34)
    nets = tiny_surrogates(rng, classes=3)
    ds = ArrayDataset(rng.random((2, 4)), np.array([0, 2]))
    cfg = atk.AttackConfig(epsilon=0.15, iterations=2)
    adv = atk.build_transfer_set(nets, ds, "all", cfg, source_tag="pair-a")
    for r in adv.records:
        assert r.source_tag == "pair-a"
        assert r.epsilon == 0.15
        assert r.true_class == ds.labels[r.sample_id]
        assert np.array_equal(r.original, ds.inputs[r.sample_id])


def test_transfer_set_skip_policy():
    rng = np.random.default_rng(35)
    nets = [linear_net([[np.inf, -1.0], [0.0, 1.0]])]
    ds = ArrayDataset(rng.random((2, 2)), np.array([0, 1]))
    cfg = atk.AttackConfig(epsilon=0.1, iterations=2, random_init=False)
    with pytest.raises(atk.NonFiniteGradientError):
        atk.build_transfer_set(nets, ds, "all", cfg, on_error="raise")
    adv = atk.build_transfer_set(nets, ds, "all", cfg, on_error="skip")
    assert len(adv) == 0
    with pytest.raises(ValueError):
        atk.build_transfer_set(nets, ds, "all", cfg, on_error="ignore")


def test_transfer_set_validates_epsilons_and_targets():
    rng = np.random.default_rng(36)
    nets = tiny_surrogates(rng, classes=3)
    ds = ArrayDataset(rng.random((2, 4)), np.array([0, 1]))
    cfg = atk.AttackConfig(epsilon=0.1, iterations=1)
    with pytest.raises(ValueError, match="duplicate"):
        atk.build_transfer_set(nets, ds, "all", cfg, epsilons=[0.1, 0.1])
    with pytest.raises(ValueError, match="range"):
        atk.build_transfer_set(nets, ds, [7], cfg)
    with pytest.raises(gn.ShapeError):
        bad = ArrayDataset(rng.random((2, 5)), np.array([0, 1]))
        atk.build_transfer_set(nets, bad, "all", cfg)
