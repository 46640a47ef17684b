import numpy as np
import pytest

from mimicinv import autodiff as ad
from mimicinv import nn
from mimicinv.autodiff import Tape
from mimicinv.priors import (DiscriminatorPrior, LinearGenerator, generate,
                             small_image_discriminator)
from mimicinv.recovery import (ConfigError, FrozenSurrogate, RecoveryConfig,
                               SurrogateSpec, identity_fn, loss_adv,
                               loss_identity, loss_obs, project_z, run_cowboy,
                               run_mimic, run_pgd, total_loss)


def _linear_prior(seed=0, m=16, k=4):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(m, k)))
    return LinearGenerator(0.5 * q, rng.normal(0, 0.05, size=m), (4, 4, 1))


def _mask_problem(seed=0, n=25):
    rng = np.random.default_rng(seed)
    gen = _linear_prior(seed)
    mask_flat = np.ones(16)
    mask_flat[[1, 5, 6, 9, 12]] = 0.0
    mask = mask_flat.reshape(4, 4, 1)
    z_star = rng.uniform(-0.6, 0.6, size=(n, 4))
    x_true = (z_star @ gen.matrix.T + gen.offset).reshape(n, 4, 4, 1)
    return gen, mask, mask_flat, x_true, x_true * mask


# ---------------------------------------------------------------------------
# losses


def test_loss_obs_zero_for_perfect_match():
    gen = _linear_prior()
    z = np.zeros((3, 4))
    y = generate(gen, z).data
    assert loss_obs(y, identity_fn, gen, z) == 0.0


def test_loss_obs_simple_value():
    gen = LinearGenerator(np.eye(2), np.zeros(2), (2,))
    z = np.array([[0.0, 0.0]])
    y = np.array([[1.0, 0.0]])
    assert loss_obs(y, identity_fn, gen, z) == pytest.approx(1.0)


def test_loss_obs_matches_direct_sum():
    rng = np.random.default_rng(1)
    gen = _linear_prior(1)
    z = rng.uniform(-1, 1, (5, 4))
    y = rng.uniform(-1, 1, (5, 4, 4, 1))
    direct = float(np.abs(y - generate(gen, z).data).sum())
    assert loss_obs(y, identity_fn, gen, z) == pytest.approx(direct, abs=1e-12)


def test_loss_adv_values():
    # a discriminator that always outputs 0.5 contributes log(0.5) per sample
    net = small_image_discriminator(channels=4)
    params = nn.init_params(net, 0)
    for k in params:  # zero weights push the sigmoid to exactly 0.5
        params[k] = np.zeros_like(params[k])
    disc = DiscriminatorPrior(net, params)
    flat = LinearGenerator(np.zeros((14 * 14, 2)), np.zeros(14 * 14), (14, 14, 1))
    one = loss_adv(disc, flat, np.zeros((1, 2)))
    assert one == pytest.approx(np.log(0.5), abs=1e-9)
    three = loss_adv(disc, flat, np.zeros((3, 2)))
    assert three == pytest.approx(3 * np.log(0.5), abs=1e-9)


def test_loss_identity_zero_when_identity_and_match():
    gen = _linear_prior()
    z = np.zeros((2, 4))
    y = generate(gen, z).data
    assert loss_identity(y, identity_fn, gen, z) == 0.0


def test_loss_identity_first_term_only_for_identity_surrogate():
    rng = np.random.default_rng(3)
    gen = _linear_prior(3)
    z = rng.uniform(-1, 1, (4, 4))
    y = rng.uniform(-1, 1, (4, 4, 4, 1))
    expected = float(np.abs(y - generate(gen, z).data).sum())
    assert loss_identity(y, identity_fn, gen, z) == pytest.approx(expected, abs=1e-12)


def test_loss_identity_matches_direct_sum_with_mask_surrogate():
    rng = np.random.default_rng(4)
    gen = _linear_prior(4)
    mask = rng.uniform(0, 1, (4, 4, 1))
    z = rng.uniform(-1, 1, (3, 4))
    y = rng.uniform(-1, 1, (3, 4, 4, 1))
    x = generate(gen, z).data
    expected = float(np.abs(y - x).sum() + np.abs(mask * x - x).sum())

    def surr(v):
        return v * v.tape.const(mask)

    assert loss_identity(y, surr, gen, z) == pytest.approx(expected, abs=1e-12)


def test_total_loss_weights():
    rng = np.random.default_rng(5)
    gen = _linear_prior(5)
    z = rng.uniform(-1, 1, (2, 4))
    y = rng.uniform(-1, 1, (2, 4, 4, 1))
    base = RecoveryConfig(lambda_adv=0.0, lambda_identity=0.0, observations=2)
    assert total_loss(y, identity_fn, gen, None, z, base) == pytest.approx(
        loss_obs(y, identity_fn, gen, z))
    weighted = RecoveryConfig(lambda_adv=0.0, lambda_identity=0.1, observations=2)
    assert total_loss(y, identity_fn, gen, None, z, weighted) == pytest.approx(
        loss_obs(y, identity_fn, gen, z) + 0.1 * loss_identity(y, identity_fn, gen, z))


def test_total_loss_gradcheck_wrt_params_and_z():
    # small trainable surrogate + linear prior; both gradient paths must agree
    # with central differences
    rng = np.random.default_rng(6)
    gen = _linear_prior(6)
    spec = SurrogateSpec(conv_layers=1, filters=2, kernel=3)
    net = spec.build((4, 4, 1))
    params = nn.init_params(net, rng)
    # keep pre-activations away from the ReLU kink
    params["0.w"] = rng.uniform(0.2, 0.6, params["0.w"].shape) * rng.choice([-1, 1], params["0.w"].shape)
    params["0.b"] = rng.uniform(0.3, 0.5, params["0.b"].shape)
    y = rng.uniform(-1, 1, (2, 4, 4, 1))
    z = rng.uniform(-0.8, 0.8, (2, 4))
    names = sorted(params)

    def graph(zv, *pvals):
        tape = zv.tape
        pv = {nm: v for nm, v in zip(names, pvals)}
        x = generate(gen, zv, tape)
        pred = nn.apply_vars(net, pv, x)
        return abs(pred - tape.const(y)).sum() + 0.1 * (
            abs(x - tape.const(y)).sum() + abs(pred - x).sum())

    err = ad.grad_check(graph, [z] + [params[nm] for nm in names], h=1e-6)
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# projection


def test_project_z_values_and_idempotence():
    z = np.array([0.5, 1.7, -3.0, -1.0])
    out = project_z(z)
    np.testing.assert_array_equal(out, [0.5, 1.0, -1.0, -1.0])
    np.testing.assert_array_equal(project_z(out), out)


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_bad_fields():
    with pytest.raises(ConfigError, match="lambda_identity"):
        RecoveryConfig(lambda_identity=-1).validate()
    with pytest.raises(ConfigError, match="lr_latent"):
        RecoveryConfig(lr_latent=0).validate()
    with pytest.raises(ConfigError, match="surrogate_steps"):
        RecoveryConfig(surrogate_steps=0).validate(frozen_surrogate=False)
    RecoveryConfig(surrogate_steps=0).validate(frozen_surrogate=True)  # PGD mode


def test_config_json_round_trip():
    cfg = RecoveryConfig(lambda_identity=0.1, lambda_adv=1e-4, lr_surrogate=4e-3,
                         lr_latent=3e-3, outer_steps=7, observations=5, seed=3)
    assert RecoveryConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        RecoveryConfig.from_json({"bogus": 1})


def test_surrogate_spec_depth_cap():
    with pytest.raises(ConfigError, match="conv_layers"):
        SurrogateSpec(conv_layers=4).build((8, 8, 1))


def test_surrogate_spec_builds_default_three_conv_chain():
    net = SurrogateSpec().build((8, 8, 3), out_channels=3)
    kinds = [type(l).__name__ for l in net.layers]
    assert kinds == ["Conv", "ReLU", "Conv", "ReLU", "Conv", "ReLU", "MaskMultiply"]
    assert net.layers[0].cout == 16 and net.layers[0].kh == 5
    assert net.output_shape == (8, 8, 3)


def test_surrogate_spec_residual_variant():
    net = SurrogateSpec(conv_layers=2, input_residual=True).build((28, 28, 1))
    kinds = [type(l).__name__ for l in net.layers]
    assert kinds == ["Conv", "ReLU", "Conv", "ReLU", "MaskMultiply", "InputResidual"]


# ---------------------------------------------------------------------------
# engine behavior


def test_identity_corruption_self_consistency():
    # Y = G(z*) with identity corruption: observation loss collapses
    gen = _linear_prior(7)
    rng = np.random.default_rng(7)
    z_star = rng.uniform(-0.6, 0.6, (10, 4))
    y = generate(gen, z_star).data
    cfg = RecoveryConfig(lr_latent=3e-3, outer_steps=50, surrogate_steps=0,
                         observations=10, seed=2)
    res = run_mimic(y, gen, None, FrozenSurrogate.identity(), cfg)
    d = y[0].size
    assert res.traces[-1]["loss_obs"] <= 1e-3 * d * 10


def test_latents_stay_in_box_and_start_shared():
    gen = _linear_prior(8)
    y = np.random.default_rng(8).uniform(-1, 1, (6, 4, 4, 1))
    cfg = RecoveryConfig(lr_latent=5e-3, outer_steps=5, surrogate_steps=0,
                         observations=6, seed=0)
    res = run_mimic(y, gen, None, FrozenSurrogate.identity(), cfg)
    z0 = res.z_trace[0]
    assert np.all(z0 == z0[0])  # shared mean initialization
    for z in res.z_trace:
        assert np.all(z >= -1.0) and np.all(z <= 1.0)


def test_prior_params_frozen_through_recovery():
    from mimicinv.priors import GeneratorPrior, small_image_generator
    net = small_image_generator(latent_dim=6, channels=2)
    params = nn.init_params(net, 0)
    snapshot = {k: v.copy() for k, v in params.items()}
    prior = GeneratorPrior(net, params, 6, net.output_shape)
    y = np.random.default_rng(1).uniform(-1, 1, (3, 14, 14, 1))
    cfg = RecoveryConfig(lr_latent=1e-2, outer_steps=2, inversion_steps=3,
                         surrogate_steps=2, observations=3, seed=0)
    run_mimic(y, prior, None, SurrogateSpec(conv_layers=1, filters=2, kernel=3), cfg)
    for k in params:
        np.testing.assert_array_equal(params[k], snapshot[k])


def test_pgd_equals_identity_frozen_mimic_bitwise():
    gen = _linear_prior(9)
    y = np.random.default_rng(9).uniform(-1, 1, (5, 4, 4, 1))
    cfg = RecoveryConfig(lambda_identity=0.0, lr_latent=2e-3, outer_steps=8,
                         surrogate_steps=0, observations=5, seed=11)
    a = run_mimic(y, gen, None, FrozenSurrogate.identity(), cfg)
    b = run_pgd(y, gen, None, cfg)
    assert len(a.z_trace) == len(b.z_trace)
    for za, zb in zip(a.z_trace, b.z_trace):
        np.testing.assert_array_equal(za, zb)
    np.testing.assert_array_equal(a.x_hat, b.x_hat)


def test_pgd_lambda_adv_zero_is_pure_observation_descent():
    gen = _linear_prior(10)
    y = np.random.default_rng(10).uniform(-1, 1, (4, 4, 4, 1))
    cfg = RecoveryConfig(lambda_adv=0.0, lr_latent=2e-3, outer_steps=5,
                         surrogate_steps=0, observations=4, seed=1)
    res = run_pgd(y, gen, None, cfg)
    for row in res.traces:
        assert row["total"] == pytest.approx(row["loss_obs"])


def test_cowboy_requires_discriminator():
    gen = _linear_prior(11)
    y = np.zeros((2, 4, 4, 1))
    cfg = RecoveryConfig(observations=2, surrogate_steps=0)
    with pytest.raises(ConfigError):
        run_cowboy(y, gen, None, cfg)


def test_run_rejects_observation_count_mismatch():
    gen = _linear_prior(12)
    y = np.zeros((3, 4, 4, 1))
    cfg = RecoveryConfig(observations=5, surrogate_steps=0)
    with pytest.raises(ConfigError, match="observations"):
        run_mimic(y, gen, None, FrozenSurrogate.identity(), cfg)


def test_single_observation_warns():
    gen = _linear_prior(13)
    y = np.zeros((1, 4, 4, 1))
    cfg = RecoveryConfig(observations=1, surrogate_steps=0, outer_steps=1)
    with pytest.warns(UserWarning, match="single-observation"):
        run_mimic(y, gen, None, FrozenSurrogate.identity(), cfg)


def test_trace_rows_shape_and_final_not_worse():
    gen, mask, _, x_true, y = _mask_problem(14)
    cfg = RecoveryConfig(lr_latent=3e-3, outer_steps=12, surrogate_steps=0,
                         observations=25, seed=3)
    res = run_mimic(y, gen, None, FrozenSurrogate(mask), cfg)
    assert len(res.traces) == 12
    rows = res.trace_rows()
    assert rows[0]["t"] == 0 and rows[-1]["t"] == 12
    assert res.traces[-1]["loss_obs"] <= res.initial_losses["loss_obs"]


def test_linear_oracle_recovery_frozen_mask():
    # recovered images approach the least-squares solution on the observed
    # coordinates when the surrogate equals the true mask
    gen, mask, mask_flat, x_true, y = _mask_problem(0)
    n = 25
    ma = gen.matrix[mask_flat == 1, :]
    rhs = y.reshape(n, 16)[:, mask_flat == 1] - gen.offset[mask_flat == 1]
    z_ls = np.linalg.lstsq(ma, rhs.T, rcond=None)[0].T
    assert np.abs(z_ls).max() < 1.0  # oracle interior to the box
    x_ls = (z_ls @ gen.matrix.T + gen.offset).reshape(n, 4, 4, 1)
    cfg = RecoveryConfig(lr_latent=3e-3, outer_steps=50, surrogate_steps=0,
                         observations=n, seed=1)
    res = run_mimic(y, gen, None, FrozenSurrogate(mask), cfg)
    err = np.linalg.norm((res.x_hat - x_ls).reshape(n, -1), axis=1)
    assert err.max() <= 1e-2


def test_blind_mask_surrogate_identifies_pattern():
    gen, mask, _, x_true, y = _mask_problem(0)
    cfg = RecoveryConfig(lambda_identity=0.1, lr_surrogate=4e-3, lr_latent=3e-3,
                         outer_steps=50, observations=25, seed=0)
    res = run_mimic(y, gen, None, SurrogateSpec(conv_layers=0, mask=True), cfg)
    learned = res.surrogate_params["0.mask"]
    r = np.corrcoef(learned.ravel(), mask.ravel())[0, 1]
    assert r >= 0.9
