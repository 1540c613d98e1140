import numpy as np
import pytest

from hipode import envs
from hipode.cvae import ConditionalVAE, cvae_generate, cvae_loss, kl_to_standard_normal
from hipode.nn import max_relative_error, numerical_gradient


def passthrough_model(latent_dim=2, mu_first=0.0):
    """Encoder outputs constant (mu, log sigma = 0); decoder returns the condition, ignoring z."""
    m = ConditionalVAE(latent_dim=latent_dim, hidden_units=2, random_state=0).initialize(1, 1)
    for w in m.encoder_.weights:
        w[:] = 0.0
    for b in m.encoder_.biases:
        b[:] = 0.0
    m.encoder_.biases[-1][0] = mu_first
    w0, w1 = m.decoder_.weights
    w0[:] = 0.0
    w0[latent_dim, 0], w0[latent_dim, 1] = 1.0, -1.0  # relu(c), relu(-c)
    m.decoder_.biases[0][:] = 0.0
    w1[:, 0] = [1.0, -1.0]
    m.decoder_.biases[1][:] = 0.0
    return m


def test_loss_zero_when_prior_matched_and_reconstruction_exact(rng):
    m = passthrough_model()
    c = rng.normal(size=(8, 1))
    loss, _, _, parts = m.loss_and_grads(c, c, rng.normal(size=(8, 2)))
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert parts["kl"] == 0.0


def test_unit_mean_shift_costs_half(rng):
    m = passthrough_model(mu_first=1.0)
    c = rng.normal(size=(5, 1))
    loss, _, _, _ = m.loss_and_grads(c, c, np.zeros((5, 2)))
    # KL(N((1, 0), I) || N(0, I)) = 0.5
    assert loss == pytest.approx(0.5, abs=1e-12)


def test_kl_closed_form():
    assert kl_to_standard_normal(np.zeros(3), np.zeros(3)) == 0.0
    # sigma = e: 0.5 * (e^2 - 1 - 2)
    assert kl_to_standard_normal(np.zeros(1), np.ones(1)) == pytest.approx(0.5 * (np.e**2 - 3))


@pytest.mark.parametrize("role", ["state_transition", "inverse_action", "reward"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(role, seed):
    rng = np.random.default_rng(seed)
    m = ConditionalVAE(role=role, latent_dim=2, hidden_units=5, kl_weight=0.7, random_state=seed).initialize(2, 2)
    target = rng.uniform(-0.9, 0.9, size=(4, 2))
    cond = rng.normal(size=(4, 2))
    eps = rng.normal(size=(4, 2))
    _, g_enc, g_dec, _ = m.loss_and_grads(target, cond, eps)
    loss = lambda: m.loss_and_grads(target, cond, eps)[0]  # noqa: E731
    numeric = numerical_gradient(loss, m.encoder_.parameters() + m.decoder_.parameters())
    assert max_relative_error(g_enc + g_dec, numeric) < 1e-4


def test_sampling_is_reproducible(rng):
    m = ConditionalVAE(hidden_units=8, random_state=0).initialize(2, 2)
    c = rng.normal(size=(3, 2))
    assert np.array_equal(m.sample(c, 10, random_state=4), m.sample(c, 10, random_state=4))
    assert not np.array_equal(m.sample(c, 10, random_state=4), m.sample(c, 10, random_state=5))


def test_ten_candidates(rng):
    m = ConditionalVAE(hidden_units=8, random_state=0).initialize(2, 2)
    assert cvae_generate(m, rng.normal(size=2), 10, 0).shape == (10, 2)
    assert m.sample(rng.normal(size=(4, 2)), 10).shape == (4, 10, 2)


def test_inverse_action_output_is_squashed(rng):
    m = ConditionalVAE(role="inverse_action", hidden_units=8, random_state=0).initialize(2, 4)
    m.decoder_.weights[-1] *= 100.0
    out = m.sample(rng.normal(size=(20, 4)) * 10, 5, 0)
    assert np.all(np.abs(out) <= 1.0)


def test_latent_dim_defaults_to_twice_state_dim():
    assert ConditionalVAE(hidden_units=4).initialize(3, 3).latent_dim_ == 6
    assert ConditionalVAE(role="inverse_action", hidden_units=4).initialize(2, 6).latent_dim_ == 6


def test_z_is_clipped_at_generation():
    m = passthrough_model()
    m.decoder_.weights[0][0, 0] = 1.0  # output now grows with z_0 once z_0 > -c
    c = np.zeros((1, 1))
    out = m.sample(c, 2000, random_state=0)
    assert out.max() <= m.z_clip + 1e-12


def test_decoder_ignoring_z_gives_identical_samples(rng):
    m = passthrough_model()
    out = m.sample(rng.normal(size=(5, 1)), 10, random_state=0)
    assert np.max(out.max(axis=1) - out.min(axis=1)) < 1e-6


def _deterministic_fit():
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, (2000, 1))
    return ConditionalVAE(hidden_units=64, epochs=100, latent_dim=2, random_state=0).fit(s, 0.5 * s + 0.1), s


def test_trained_on_deterministic_data_samples_nearly_collapse():
    m, s = _deterministic_fit()
    out = m.sample(s[:20], 10, random_state=1)
    spread = np.max(out.max(axis=1) - out.min(axis=1))
    untrained = ConditionalVAE(hidden_units=64, latent_dim=2, random_state=0).initialize(1, 1).sample(s[:20], 10, 1)
    assert spread < 0.1
    assert spread < 0.2 * np.max(untrained.max(axis=1) - untrained.min(axis=1))


@pytest.mark.xfail(strict=True, reason="stochastic training leaves latent weights at the optimizer's noise floor (~1e-2)")
def test_trained_on_deterministic_data_collapse_to_1e6():
    m, s = _deterministic_fit()
    out = m.sample(s[:20], 10, random_state=1)
    assert np.max(out.max(axis=1) - out.min(axis=1)) < 1e-6


def test_state_transition_reconstruction_on_deterministic_transitions():
    spec = envs.make_env()
    d = envs.collect(spec, envs.BehaviorPolicySpec("expert"), 2000, seed=3)
    m = ConditionalVAE(hidden_units=256, epochs=60, random_state=0).fit(d.states, d.next_states)
    assert m.heldout_mse_ < 1e-3
    head, tail = m.loss_trace_.window_means(100)
    assert tail < head


def test_inverse_action_recovers_known_dynamics():
    spec = envs.make_env()
    d = envs.collect(spec, envs.BehaviorPolicySpec("random"), 5000, seed=3)
    ns, ns2 = d.normalize(d.states), d.normalize(d.next_states)
    m = ConditionalVAE(role="inverse_action", hidden_units=256, epochs=100, random_state=0).fit(np.hstack([ns, ns2]), d.actions)
    inside = np.flatnonzero(np.all(np.abs(d.next_states) < 0.999, axis=1))[:1000]
    truth = (d.next_states[inside] - d.states[inside]) / spec.action_scale
    recovered = m.sample(np.hstack([ns, ns2])[inside], 1, random_state=0)[:, 0]
    assert np.mean((recovered - truth) ** 2) < 0.05


def test_module_loss_matches_method(rng):
    m = ConditionalVAE(hidden_units=6, random_state=0).initialize(2, 2)
    t, c = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    loss, _ = cvae_loss(m, t, c, np.random.default_rng(9))
    eps = np.random.default_rng(9).standard_normal((3, m.latent_dim_))
    assert loss == m.loss_and_grads(t, c, eps)[0]


def test_save_load_round_trip(tmp_path, rng):
    m = ConditionalVAE(hidden_units=6, epochs=2, random_state=0).fit(rng.normal(size=(40, 2)), rng.normal(size=(40, 2)))
    m.save(tmp_path / "c.npz")
    back = ConditionalVAE.load(tmp_path / "c.npz")
    c = rng.normal(size=(3, 2))
    assert np.array_equal(back.sample(c, 4, 1), m.sample(c, 4, 1))
    assert back.get_params() == m.get_params()


def test_bad_role_and_shapes_rejected(rng):
    with pytest.raises(ValueError):
        ConditionalVAE(role="policy").initialize(1, 1)
    m = ConditionalVAE(hidden_units=4).initialize(2, 2)
    with pytest.raises(ValueError):
        m.sample(np.zeros((1, 3)), 2)
    with pytest.raises(ValueError):
        m.sample(np.zeros((1, 2)), 0)
