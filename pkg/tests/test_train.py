import numpy as np
import pytest

from lenslab import autodiff as ad
from lenslab import codec, net, world
from lenslab import train as tr
from lenslab.numerics import NumericalError, RngState


@pytest.fixture
def perm_basis(geometry):
    return codec.permutation_basis(geometry, 32, RngState(0))


@pytest.fixture
def lowfreq(perm_basis):
    return world.make_lowfreq_world(perm_basis, 8, seed=1, hidden_dim=96)


def tiny_config(**over):
    defaults = dict(steps_per_epoch=3, eval_every=3, batch_size=2, seed=0,
                    n_eval_noise=4, learning_rate=1e-3)
    defaults.update(over)
    return tr.TrainConfig(**defaults)


def make_state(config, basis, w):
    net_cfg = net.LensConfig(n_tokens=basis.geometry.n_patches, coeff_dim=basis.k,
                             hidden_dim=config.hidden_dim, n_layers=config.n_layers,
                             n_heads=config.n_heads,
                             prompt_dim=w.prompts.token_dim)
    return tr.init_train_state(config, net_cfg)


class TestTrainStep:
    def test_zero_init_loss_is_negative_unmodulated_reward(self, perm_basis, lowfreq):
        config = tiny_config(batch_size=4)
        state = make_state(config, perm_basis, lowfreq)
        rng_snapshot = tr.RngState(state.rng.seed, state.rng.counter)
        _, breakdown = tr.train_step(state, lowfreq, perm_basis, [0, 1, 2], config)
        assert breakdown.reg == 0.0
        # recompute the unmodulated rewards with the same noise stream
        noise_basis = perm_basis.noise_mode()
        rewards = []
        for i in range(4):
            z0 = rng_snapshot.normal(perm_basis.geometry.latent_shape)
            prompt = lowfreq.prompts.prompt([0, 1, 2][i % 3])
            split = codec.proj(z0, noise_basis)
            z = codec.recon(split, noise_basis)
            rewards.append(float(lowfreq.reward_of_latent(z, prompt)))
        assert abs(breakdown.total - (-np.mean(rewards))) <= 1e-12

    def test_loss_decomposition(self, perm_basis, lowfreq):
        config = tiny_config(reg_weight=2.5)
        state = make_state(config, perm_basis, lowfreq)
        # take a couple of steps so reg is nonzero
        for _ in range(2):
            state, breakdown = tr.train_step(state, lowfreq, perm_basis, [0], config)
        assert abs(breakdown.total
                   - (config.reg_weight * breakdown.reg - breakdown.reward)) <= 1e-12

    def test_single_sample_optimizer_update_matches_hand_computation(
            self, perm_basis, lowfreq):
        config = tiny_config(batch_size=1, weight_decay=0.01, lr_schedule="constant")
        state = make_state(config, perm_basis, lowfreq)
        params_before = {k: v.copy() for k, v in state.params.trainable.items()}
        rng_snapshot = tr.RngState(state.rng.seed, state.rng.counter)

        # recompute the gradient independently for the same sample
        z0 = rng_snapshot.normal(perm_basis.geometry.latent_shape)
        prompt = lowfreq.prompts.prompt(0)
        ref = net.LensParams(state.params.config, params_before,
                             state.params.positional)
        _, tape, _ = tr.sample_loss(ref, lowfreq, perm_basis.noise_mode(), z0,
                                    prompt, config.reg_weight)
        grads = ad.backward(tape, np.asarray(1.0))
        norm = tr.global_grad_norm(grads)
        if norm > config.grad_clip:
            grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}

        state, _ = tr.train_step(state, lowfreq, perm_basis, [0], config)
        lr, eps, wd = config.learning_rate, config.eps, config.weight_decay
        for name, before in params_before.items():
            g = grads[name]
            m_hat = (0.1 * g) / (1.0 - 0.9)
            v_hat = (0.001 * g * g) / (1.0 - 0.999)
            expected = before - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * before)
            assert np.abs(state.params.trainable[name] - expected).max() <= 1e-10, name

    def test_gradient_clipping_bound(self):
        grads = {"a": np.full(10, 5.0), "b": np.full(3, -7.0)}
        clipped, norm = tr.clip_gradients(grads, 1.0)
        assert norm > 1.0
        assert tr.global_grad_norm(clipped) <= 1.0 + 1e-12

    def test_non_finite_loss_aborts(self, perm_basis, lowfreq):
        config = tiny_config()
        state = make_state(config, perm_basis, lowfreq)
        state.params.trainable["out_proj.b"][:] = np.inf
        with pytest.raises(NumericalError, match="non-finite"):
            tr.train_step(state, lowfreq, perm_basis, [0], config)

    def test_world_and_basis_frozen_by_training(self, perm_basis, lowfreq):
        config = tiny_config()
        w1 = lowfreq.generator.w1.copy()
        v = perm_basis.basis.copy()
        state = make_state(config, perm_basis, lowfreq)
        for _ in range(2):
            state, _ = tr.train_step(state, lowfreq, perm_basis, [0, 1], config)
        assert np.array_equal(lowfreq.generator.w1, w1)
        assert np.array_equal(perm_basis.basis, v)


class TestTrainLoop:
    def test_deterministic_given_seed(self, perm_basis, lowfreq):
        config = tiny_config(steps_per_epoch=4, eval_every=2)
        p1, log1 = tr.train(lowfreq, perm_basis, config)
        p2, log2 = tr.train(lowfreq, perm_basis, config)
        for name in p1.trainable:
            assert np.array_equal(p1.trainable[name], p2.trainable[name])
        assert log1.rows == log2.rows

    def test_metrics_columns_fixed(self, perm_basis, lowfreq, tmp_path):
        config = tiny_config(steps_per_epoch=2, eval_every=1)
        _, log = tr.train(lowfreq, perm_basis, config)
        path = tmp_path / "metrics.csv"
        log.write_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "step,loss,reg,reward,grad_norm,spectral_norm"

    def test_reg_only_training_shrinks_output(self, perm_basis):
        # reward identically zero: the quadratic penalty should dominate and
        # drive the perturbation magnitude monotonically toward zero
        w = world.make_lowfreq_world(perm_basis, 8, seed=1, hidden_dim=96)
        zero_field = world.RewardField(
            [(0.0, c) for _, c in w.reward_field.components],
            w.reward_field.feature_dim, 0)
        w_zero = world.ToyWorld(w.generator, zero_field, w.prompts, w.geometry,
                                dict(w.manifest))
        config = tiny_config(steps_per_epoch=40, eval_every=10, batch_size=4,
                             learning_rate=5e-3)
        net_cfg = net.LensConfig(n_tokens=4, coeff_dim=32, hidden_dim=16,
                                 n_layers=1, n_heads=2,
                                 prompt_dim=w.prompts.token_dim)
        state = tr.init_train_state(config, net_cfg)
        # break the exact-zero init so there is something to shrink
        state.params.trainable["out_proj.w"] = 0.1 * RngState(5).normal((16, 32))
        regs = []
        for step in range(40):
            state, breakdown = tr.train_step(state, w_zero, perm_basis, [0, 1],
                                             config)
            if step % 10 == 9:
                regs.append(breakdown.reg)
        assert all(b <= a + 1e-9 for a, b in zip(regs, regs[1:]))
        assert regs[-1] < regs[0] * 0.5


class TestEvaluate:
    def test_zero_init_paired_delta_zero(self, perm_basis, lowfreq):
        cfg = net.LensConfig(n_tokens=4, coeff_dim=32,
                             prompt_dim=lowfreq.prompts.token_dim)
        params = net.init_lens_params(cfg, RngState(0))
        report = tr.evaluate(params, lowfreq, perm_basis, [12, 13], 8, RngState(1))
        assert report.mean_delta == 0.0
        assert report.frac_improved == 0.0
        assert all(v == 0.0 for v in report.per_prompt_delta.values())

    def test_constant_shift_toward_target_gives_positive_delta(self, perm_basis,
                                                               lowfreq):
        # hand-set bias moves coefficients; verify the paired bookkeeping by
        # recomputing one pair by hand
        cfg = net.LensConfig(n_tokens=4, coeff_dim=32,
                             prompt_dim=lowfreq.prompts.token_dim)
        params = net.init_lens_params(cfg, RngState(0))
        params.trainable["out_proj.b"] = 0.05 * RngState(2).normal((32,))
        report = tr.evaluate(params, lowfreq, perm_basis, [12], 3, RngState(3))
        assert report.n_pairs == 3
        # recompute every pair by hand on the same noise stream
        rng = RngState(3)
        noise_basis = perm_basis.noise_mode()
        prompt = lowfreq.prompts.prompt(12)
        deltas = []
        for _ in range(3):
            z0 = rng.normal(perm_basis.geometry.latent_shape)
            split = codec.proj(z0, noise_basis)
            r0 = float(lowfreq.reward_of_latent(codec.recon(split, noise_basis),
                                                prompt))
            modded = net.modulate(params, split, prompt)
            r1 = float(lowfreq.reward_of_latent(codec.recon(modded, noise_basis),
                                                prompt))
            deltas.append(r1 - r0)
        assert abs(report.mean_delta - np.mean(deltas)) <= 1e-12
        assert abs(report.per_prompt_delta[12] - np.mean(deltas)) <= 1e-12

    def test_n_noise_validated(self, perm_basis, lowfreq):
        cfg = net.LensConfig(n_tokens=4, coeff_dim=32,
                             prompt_dim=lowfreq.prompts.token_dim)
        params = net.init_lens_params(cfg, RngState(0))
        with pytest.raises(ValueError):
            tr.evaluate(params, lowfreq, perm_basis, [0], 0, RngState(0))


def test_lr_schedule_endpoints():
    config = tr.TrainConfig(steps_per_epoch=100, learning_rate=1e-2)
    assert abs(config.lr_at(1) - 1e-2) <= 1e-12
    assert abs(config.lr_at(100) - 5e-4) <= 1e-12
    const = tr.TrainConfig(steps_per_epoch=100, learning_rate=1e-2,
                           lr_schedule="constant")
    assert const.lr_at(50) == 1e-2
