import math

import numpy as np
import pytest

from anf import autodiff as ad
from anf.autodiff import Rng, Tape, Tensor
from anf.conditioners import ConstantConditioner, MlpConditioner
from anf.flows import ModelSpec, build_model, forward_point, joint_log_density, model_forward
from anf.objectives import (
    GaussianVae,
    ObjectiveConfig,
    amle_loss,
    augmentation_gap,
    auxiliary_variable_elbo,
    beta_schedule,
    gaussian_entropy,
    gaussian_vi_elbo,
    iw_log_marginal,
    log_mean_exp,
    log_weights,
    vae_as_anf,
    vae_elbo_gaussian,
    vi_augmented_elbo,
    warmup_loss,
    warmup_terms,
)
from anf.toydata import default_mog1d

from conftest import central_diff, identity_model, random_model, rel_err

LOG_2PI = math.log(2 * math.pi)


def std_normal(a):
    a = np.asarray(a)
    return -0.5 * (a**2).sum(-1) - 0.5 * a.shape[-1] * LOG_2PI


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig(anneal_steps=-1)
    with pytest.raises(ValueError):
        ObjectiveConfig(K=0)


def test_entropy_per_dimension():
    assert gaussian_entropy(1) == pytest.approx(1.4189385, abs=1e-7)
    assert gaussian_entropy(4) / 4 == pytest.approx(0.5 * (1 + LOG_2PI), abs=1e-15)


def test_amle_identity_closed_form():
    # e = +-1 makes the batch average of e^2 exactly its expectation
    model = identity_model()
    out = amle_loss(model, np.zeros((2, 1)), Rng(0), e=np.array([[1.0], [-1.0]]))
    assert out.item() == pytest.approx(-0.9189385, abs=1e-7)


def test_amle_without_entropy(rng):
    model = random_model(rng, d_x=1, unit_dims=(1,))
    x, e = rng.normal((4, 1)), rng.normal((4, 1))
    a = amle_loss(model, x, rng, include_entropy=False, e=e).item()
    b = amle_loss(model, x, rng, include_entropy=True, e=e).item()
    assert b - a == pytest.approx(gaussian_entropy(1), abs=1e-12)
    with pytest.raises(ValueError):
        amle_loss(model, np.zeros((0, 1)), rng)


def _param_gradient_check(model, value_fn, rng, n_coords=10):
    params = model.parameters()
    with Tape() as tape:
        out = value_fn()
    grads = ad.backward(tape, out, params)
    for _ in range(n_coords):
        k = int(rng.integers(0, len(params)))
        idx = tuple(int(rng.integers(0, s)) for s in params[k].shape)
        num = central_diff(lambda: value_fn().item(), params[k].data, idx)
        assert rel_err(grads[k][idx], num) < 1e-4 or abs(grads[k][idx] - num) < 1e-9


def test_amle_gradient_matches_fd(rng):
    model = random_model(rng, d_x=2, unit_dims=(1,), n_steps=2)
    x, e = rng.normal((5, 2)), rng.normal((5, 1))
    _param_gradient_check(model, lambda: amle_loss(model, x, rng, e=e), rng)


def test_warmup_gradient_matches_fd(rng):
    model = random_model(rng, d_x=1, unit_dims=(2,), n_steps=2)
    x, e = rng.normal((5, 1)), rng.normal((5, 2))
    _param_gradient_check(model, lambda: warmup_loss(model, x, e, 0.3), rng)


def test_beta_schedule_values():
    assert beta_schedule(0, 100) == 0.0
    assert beta_schedule(100, 100) == 1.0
    assert beta_schedule(5000, 20000) == 0.25
    assert beta_schedule(10**6, 20000) == 1.0
    assert beta_schedule(0, 0) == 1.0
    with pytest.raises(ValueError):
        beta_schedule(-1, 10)


def test_warmup_at_one_is_joint(rng):
    model = random_model(rng, d_x=2, unit_dims=(1, 1), n_steps=2)
    x, e = rng.normal((6, 2)), rng.normal((6, 2))
    w = warmup_loss(model, x, e, 1.0).item()
    j = joint_log_density(model, x, e).data.mean()
    assert abs(w - j) < 1e-12


def test_warmup_at_zero_additive_is_data_prior(rng):
    model = random_model(rng, d_x=2, unit_dims=(2,), n_steps=3, mode="additive")
    x, e = rng.normal((6, 2)), rng.normal((6, 2))
    y, _, _ = model_forward(model, x, e)
    assert warmup_loss(model, x, e, 0.0).item() == pytest.approx(std_normal(y.data).mean(), abs=1e-12)


def test_warmup_half_recomputed(rng):
    model = random_model(rng, d_x=1, unit_dims=(1,), n_steps=2)
    x, e = rng.normal((6, 1)), rng.normal((6, 1))
    pt = forward_point(model, x, e)
    data = std_normal(pt.x.data) + pt.logdet_x.data
    noise = std_normal(pt.e_units[0].data) + pt.logdet_e.data
    assert warmup_loss(model, x, e, 0.5).item() == pytest.approx(np.mean(data + 0.5 * noise), abs=1e-12)
    # the data term takes the decoder log-scales, the noise term the encoder ones
    d, n = warmup_terms(model, x, e)
    np.testing.assert_allclose(d.data + n.data, joint_log_density(model, x, e).data, atol=1e-12)


def test_warmup_is_affine_in_beta(rng):
    model = random_model(rng, d_x=1, unit_dims=(1,), n_steps=2)
    x, e = rng.normal((6, 1)), rng.normal((6, 1))
    v = [warmup_loss(model, x, e, b).item() for b in (0.0, 0.4, 1.0)]
    slope = v[2] - v[0]
    assert abs(slope) > 1e-6
    assert v[1] == pytest.approx(v[0] + 0.4 * slope, abs=1e-12)


def test_warmup_beta_out_of_range(rng):
    model = identity_model()
    with pytest.raises(ValueError):
        warmup_loss(model, np.zeros((1, 1)), np.zeros((1, 1)), 1.5)


def test_iw_k1_is_single_weight(rng):
    model = random_model(rng, d_x=1, unit_dims=(1,))
    x = rng.normal((3, 1))
    e = rng.normal((1, 3, 1))
    iw = iw_log_marginal(model, x, 1, rng, e=e)
    expect = joint_log_density(model, x, e[0]).data - std_normal(e[0])
    np.testing.assert_allclose(iw, expect, atol=1e-12)


def test_iw_identity_model_exact(rng):
    x = rng.normal((5, 1))
    for K in (1, 7, 50):
        np.testing.assert_allclose(iw_log_marginal(identity_model(), x, K, rng), std_normal(x), atol=1e-12)


def test_iw_permutation_invariance(rng):
    model = random_model(rng, d_x=1, unit_dims=(1,))
    x = rng.normal((4, 1))
    e = rng.normal((20, 4, 1))
    perm = np.argsort(rng.uniform(0, 1, 20))
    a = iw_log_marginal(model, x, 20, rng, e=e)
    b = iw_log_marginal(model, x, 20, rng, e=e[perm])
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        iw_log_marginal(model, x, 0, rng)


def test_iw_tighter_with_more_samples(rng):
    model = random_model(rng, d_x=1, unit_dims=(1,), n_steps=2)
    x = rng.normal((1, 1))
    means = {}
    for K in (5, 10):
        vals = np.array([iw_log_marginal(model, x, K, Rng(s))[0] for s in range(200)])
        means[K] = (vals.mean(), vals.std(ddof=1) / math.sqrt(200))
    assert means[10][0] >= means[5][0] - 3 * math.hypot(means[5][1], means[10][1])


def test_log_mean_exp_stable():
    assert log_mean_exp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0)
    assert log_mean_exp(np.array([[0.0, math.log(3.0)]]), axis=1)[0] == pytest.approx(math.log(2.0))


def test_gap_identity_is_zero(rng):
    g = augmentation_gap(identity_model(), rng.normal((10, 1)), rng, K_big=100)
    assert abs(g.gap) < 1e-12


def test_gap_requires_big_k(rng):
    with pytest.raises(ValueError):
        augmentation_gap(identity_model(), np.zeros((1, 1)), rng, K_big=10)


def test_gap_nonnegative_in_expectation(rng):
    model = random_model(rng, d_x=1, unit_dims=(1,), n_steps=2)
    x = rng.normal((20, 1))
    gaps = [augmentation_gap(model, x, Rng(s), K_big=200).gap for s in range(10)]
    assert np.mean(gaps) > -3 * np.std(gaps, ddof=1) / math.sqrt(len(gaps))


def test_gap_positive_for_miscalibrated_model_then_shrinks():
    from anf.trainer import TrainConfig, make_dataset_splits, train

    mix = default_mog1d()
    data = make_dataset_splits(mix, 5000, 200, Rng(0))
    model = build_model(ModelSpec(d_x=1, unit_dims=(1,), n_steps=1, hidden=(32, 32)), Rng(1))
    # a decoder that uses e badly: shift depends strongly on e
    for p in model.steps[0].dec.parameters():
        p.data += 0.8 * Rng(2).normal(p.shape)
    before = augmentation_gap(model, data.heldout, Rng(3), K_big=200)
    assert before.gap > 3 * before.se
    train(model, data, TrainConfig(updates=1500, anneal_steps=0, log_every=1500, n_eval=20, K=5))
    after = augmentation_gap(model, data.heldout, Rng(3), K_big=200)
    assert after.gap < before.gap


def _random_vae(rng, d_x=2, d_z=2):
    enc = MlpConditioner(d_x, d_z, hidden=(8,), rng=rng)
    dec = MlpConditioner(d_z, d_x, hidden=(8,), rng=rng)
    for p in enc.parameters() + dec.parameters():
        p.data += 0.4 * rng.normal(p.shape)
    return GaussianVae(enc, dec)


def test_vae_tight_bound_case():
    # decoder ignores z and equals the data density; encoder equals the prior
    vae = GaussianVae(ConstantConditioner(1, [0.0], [0.0]), ConstantConditioner(1, [math.log(0.7)], [1.3]))
    x, e = np.array([[0.4], [2.0]]), np.array([[0.3], [-1.1]])
    elbo = vae_elbo_gaussian(vae, x, e, entropy="sample").data
    np.testing.assert_allclose(elbo, ad.gaussian_logpdf(x, 1.3, math.log(0.7)).data, atol=1e-14)


def test_vae_equivalence_to_one_step_anf(rng):
    vae = _random_vae(rng)
    model = vae_as_anf(vae)
    x, e = rng.normal((20, 2)), rng.normal((20, 2))
    elbo = vae_elbo_gaussian(vae, x, e).data
    joint = joint_log_density(model, x, e).data + gaussian_entropy(2)
    assert np.abs(elbo - joint).max() < 1e-10
    # the sampled-entropy form differs only by the log q(e) term
    sampled = vae_elbo_gaussian(vae, x, e, entropy="sample").data
    np.testing.assert_allclose(sampled, joint_log_density(model, x, e).data - std_normal(e), atol=1e-10)


def test_vae_elbo_below_iw_bound(rng):
    vae = _random_vae(rng, 1, 1)
    model = vae_as_anf(vae)
    x = rng.normal((30, 1))
    elbo = np.mean([vae_elbo_gaussian(vae, x, rng.normal((30, 1))).data for _ in range(50)], axis=0)
    assert elbo.mean() <= iw_log_marginal(model, x, 1000, rng).mean()


def test_kl_invariance_under_bijection(rng):
    # gap in e-space equals the gap in z-space: same weights under z = mu + sigma e
    vae = _random_vae(rng, 1, 1)
    model = vae_as_anf(vae)
    x = rng.normal((10, 1))
    e = rng.normal((300, 10, 1))
    lw_e = log_weights(model, x, 300, rng, e=e)
    log_sig, mu = vae.encoder.forward(x)
    z = mu.data[None] + np.exp(log_sig.data)[None] * e
    log_sig_p, mu_p = vae.decoder.forward(z.reshape(-1, 1))
    log_px_z = ad.gaussian_logpdf(np.broadcast_to(x, z.shape).reshape(-1, 1), mu_p, log_sig_p).data
    log_q = std_normal(e.reshape(-1, 1)) - np.broadcast_to(log_sig.data[None], z.shape).reshape(-1)
    lw_z = (log_px_z + std_normal(z.reshape(-1, 1)) - log_q).reshape(300, 10).T
    np.testing.assert_allclose(lw_e, lw_z, atol=1e-10)
    gap_e = log_mean_exp(lw_e, 1) - lw_e.mean(1)
    gap_z = log_mean_exp(lw_z, 1) - lw_z.mean(1)
    np.testing.assert_allclose(gap_e, gap_z, atol=1e-10)


def _two_slot_flow(rng, n_steps=1, scale=0.0):
    model = build_model(ModelSpec(d_x=2, unit_dims=(2,), n_steps=n_steps, hidden=(8,)), rng)
    for p in model.parameters():
        p.data += scale * rng.normal(p.shape)
    return model


def test_vi_identity_on_standard_normal_target():
    model = identity_model(2, 2)
    val = vi_augmented_elbo(model, lambda z: ad.gaussian_logpdf(z, 0.0, 0.0), Rng(0), 100).item()
    assert abs(val) < 1e-12


def test_vi_normalized_target_bound(rng):
    target = default_mog1d()
    model = build_model(ModelSpec(d_x=1, unit_dims=(1,), n_steps=2, hidden=(8,)), rng)
    vals = [vi_augmented_elbo(model, target.log_density_tensor, Rng(s), 500).item() for s in range(5)]
    assert np.mean(vals) <= 3 * np.std(vals, ddof=1) / math.sqrt(5)


def test_vi_matches_auxiliary_variable_form(rng):
    model = _two_slot_flow(rng, scale=0.4)
    target = lambda z: ad.gaussian_logpdf(z, [0.5, -0.2], [0.1, -0.3])
    e, u = rng.normal((40, 2)), rng.normal((40, 2))
    flow_val = vi_augmented_elbo(model, target, rng, 40, draws=(e, u)).item()
    aux = auxiliary_variable_elbo(model.steps[0], target, e, u).data.mean()
    assert abs(flow_val - aux) < 1e-10


def test_gaussian_vi_elbo_exact_fit():
    mu, ls = Tensor([0.3, -1.0]), Tensor([0.2, -0.4])
    target = lambda z: ad.gaussian_logpdf(z, mu.data, ls.data)
    val = gaussian_vi_elbo(mu, ls, target, Rng(0), 10_000).item()
    assert abs(val) < 0.05
