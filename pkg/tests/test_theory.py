import numpy as np
import pytest

from lenslab import autodiff as ad
from lenslab import codec, net, theory, world
from lenslab.numerics import RngState


@pytest.fixture
def perm_basis(geometry):
    return codec.permutation_basis(geometry, 32, RngState(0))


@pytest.fixture
def lowfreq(perm_basis):
    return world.make_lowfreq_world(perm_basis, 8, seed=1, hidden_dim=96)


class TestTiltBound:
    def test_zero_delta_zero_kl(self):
        inst = theory.TiltInstance(
            "zero", 1, 1, 0.1, lambda wl: -wl**2,
            lambda wl, wh: np.zeros(np.broadcast(wl, wh).shape))
        report = theory.verify_tilt_approximation_bound(inst)
        assert report.exact == 0.0
        assert report.passed

    def test_sine_perturbation_within_bound(self):
        inst = theory.TiltInstance("sine", 1, 1, 0.1, lambda wl: -wl**2,
                                   lambda wl, wh: 0.1 * np.sin(wh))
        report = theory.verify_tilt_approximation_bound(inst)
        assert 0.0 <= report.exact <= 0.2 + theory.QUADRATURE_TOL
        assert report.passed

    def test_sharp_perturbation_within_bound(self):
        # the bound is uniform in the shape of the perturbation
        inst = theory.TiltInstance("sharp", 1, 1, 0.1, lambda wl: -wl**2,
                                   lambda wl, wh: 0.1 * np.tanh(50.0 * wh))
        report = theory.verify_tilt_approximation_bound(inst)
        assert report.passed

    def test_delta_exceeding_epsilon_rejected(self):
        inst = theory.TiltInstance("bad", 1, 1, 0.05, lambda wl: -wl**2,
                                   lambda wl, wh: 0.2 * np.sin(wh))
        with pytest.raises(ValueError, match="epsilon"):
            theory.verify_tilt_approximation_bound(inst)

    def test_dim_cap(self):
        inst = theory.TiltInstance("big", 3, 2, 0.1, lambda *w: -w[0] ** 2,
                                   lambda *w: np.zeros(()))
        with pytest.raises(ValueError, match="dimension"):
            theory.verify_tilt_approximation_bound(inst)

    def test_default_instances_all_pass(self):
        instances = theory.default_tilt_instances()
        assert len(instances) >= 10
        for inst in instances:
            report = theory.verify_tilt_approximation_bound(inst)
            assert report.passed, inst.name
            assert report.exact >= 0.0

    def test_grid_density_normalizes(self):
        x, w = theory.simpson_axis(401, -6.0, 6.0)
        values = np.exp(-0.5 * x**2) / np.sqrt(2 * np.pi)
        density = theory.GridDensity([x], [w], values)
        assert abs(density.integrate() - 1.0) < 1e-8
        normalized = density.normalize()
        assert abs(normalized.integrate() - 1.0) < 1e-12


class TestStein:
    def test_linear_map(self):
        a = RngState(0).normal((6, 6)) / 3.0
        inst = theory.SteinInstance("lin", 6, "linear", a=a)
        report = theory.verify_stein_identity(inst, 50_000, RngState(1))
        assert report.passed
        assert report.rhs == pytest.approx(np.trace(a))
        assert report.rhs_se == 0.0

    def test_zero_map(self):
        inst = theory.SteinInstance("zero", 4, "linear", a=np.zeros((4, 4)))
        report = theory.verify_stein_identity(inst, 10_000, RngState(2))
        assert report.lhs == 0.0
        assert report.rhs == 0.0
        assert report.passed

    def test_rowwise_net(self):
        rng = RngState(3)
        params = {"a1": rng.normal((5, 12)) / np.sqrt(5.0),
                  "b1": 0.1 * rng.normal((12,)),
                  "a2": rng.normal((12, 5)) / np.sqrt(12.0), "beta": 0.2}
        inst = theory.SteinInstance("net", 5, "rowwise", params=params)
        report = theory.verify_stein_identity(inst, 50_000, RngState(4))
        assert report.passed, report.to_dict()
        assert report.trace_method == "jvp-basis"

    def test_growth_probe_rejects_superlinear(self):
        inst = theory.SteinInstance("quad", 3, "linear", a=np.eye(3))
        inst.batched = lambda w: w * w if not isinstance(w, ad.Box) else None
        with pytest.raises(ValueError, match="growth"):
            theory.verify_stein_identity(inst, 1000, RngState(5))

    def test_default_set_has_25(self):
        instances = theory.default_stein_instances()
        assert len(instances) == 25
        kinds = {i.kind for i in instances}
        assert kinds == {"linear", "rowwise"}

    def test_zero_init_modulation_net_both_sides_zero(self, lowfreq):
        cfg = net.LensConfig(n_tokens=2, coeff_dim=3, hidden_dim=8, n_layers=1,
                             n_heads=2, prompt_dim=lowfreq.prompts.token_dim)
        params = net.init_lens_params(cfg, RngState(6))
        prompt = lowfreq.prompts.prompt(0)

        def h_fn(w_flat):
            return ad.reshape(net.forward(params, ad.reshape(w_flat, (2, 3)),
                                          prompt), (6,))

        report = theory.stein_check_pointwise(h_fn, 6, 50, RngState(7))
        assert report.lhs == 0.0
        assert report.rhs == 0.0

    def test_small_modulation_net_passes(self, lowfreq):
        cfg = net.LensConfig(n_tokens=2, coeff_dim=3, hidden_dim=8, n_layers=1,
                             n_heads=2, prompt_dim=lowfreq.prompts.token_dim)
        params = net.init_lens_params(cfg, RngState(8))
        rng = RngState(9)
        params.trainable["out_proj.w"] = 0.3 * rng.normal((8, 3))
        params.trainable["out_proj.b"] = 0.05 * rng.normal((3,))
        prompt = lowfreq.prompts.prompt(2)

        def h_fn(w_flat):
            return ad.reshape(net.forward(params, ad.reshape(w_flat, (2, 3)),
                                          prompt), (6,))

        report = theory.stein_check_pointwise(h_fn, 6, 400, RngState(10))
        assert report.passed, report.to_dict()


class TestQuadraticKl:
    def test_zero_scale(self):
        report = theory.verify_quadratic_kl_bound(0.0, 4)
        assert report.exact == 0.0
        assert report.approximation == 0.0
        assert report.passed

    def test_worked_example(self):
        # eps=0.1, n=4: exact = 2((1.1)^2 - 1 - 2 ln 1.1), approx = 0.02,
        # bound = 4(-ln 0.9 - 0.1); recomputed here independently
        report = theory.verify_quadratic_kl_bound(0.1, 4)
        assert report.exact == pytest.approx(
            2.0 * (1.21 - 1.0 - 2.0 * np.log(1.1)), abs=1e-12)
        assert report.exact == pytest.approx(0.038759, abs=1e-6)
        assert report.approximation == pytest.approx(0.02, abs=1e-12)
        assert report.bound == pytest.approx(4 * (-np.log(0.9) - 0.1), abs=1e-12)
        assert report.bound == pytest.approx(0.021442, abs=1e-6)
        assert report.passed

    @pytest.mark.parametrize("eps", [0.01, 0.05, 0.1, 0.3, 0.5, 0.9])
    @pytest.mark.parametrize("dim", [1, 4, 16])
    def test_bound_never_violated(self, eps, dim):
        assert theory.verify_quadratic_kl_bound(eps, dim).passed

    def test_scale_cap(self):
        with pytest.raises(ValueError):
            theory.verify_quadratic_kl_bound(1.0, 4)

    def test_mc_cross_check(self):
        result = theory.mc_kl_cross_check(0.3, 4, 100_000, RngState(11))
        assert result["within_3se"]


class TestRewardShiftInvariance:
    def test_shift_moves_loss_and_not_gradients(self, perm_basis, lowfreq):
        cfg = net.LensConfig(n_tokens=4, coeff_dim=32, hidden_dim=16, n_layers=1,
                             n_heads=2, prompt_dim=lowfreq.prompts.token_dim)
        params = net.init_lens_params(cfg, RngState(12))
        params.trainable["out_proj.w"] = 0.1 * RngState(13).normal((16, 32))
        result = theory.verify_reward_shift_invariance(
            lowfreq, perm_basis, params, n_samples=3, rng=RngState(14), const=5.0)
        assert result["passed"]
        assert result["max_loss_shift_error"] <= 1e-10
        assert result["gradients_bitwise_identical"]

    def test_zero_shift_identical(self, perm_basis, lowfreq):
        cfg = net.LensConfig(n_tokens=4, coeff_dim=32, hidden_dim=16, n_layers=1,
                             n_heads=2, prompt_dim=lowfreq.prompts.token_dim)
        params = net.init_lens_params(cfg, RngState(15))
        result = theory.verify_reward_shift_invariance(
            lowfreq, perm_basis, params, n_samples=2, rng=RngState(16), const=0.0)
        assert result["max_loss_shift_error"] == 0.0
        assert result["gradients_bitwise_identical"]


class TestSpectrum:
    def test_lowfreq_world_exact_concentration(self, perm_basis, lowfreq):
        spectrum = theory.gradient_energy_spectrum(
            lowfreq, perm_basis, range(16), 24, RngState(17))
        assert spectrum.rho(8) == 1.0
        assert float(np.max(spectrum.energies[8:])) == 0.0
        assert spectrum.cumulative[-1] == 1.0

    def test_cumulative_monotone(self, perm_basis, lowfreq):
        spectrum = theory.gradient_energy_spectrum(
            lowfreq, perm_basis, range(16), 8, RngState(18))
        assert np.all(np.diff(spectrum.cumulative) >= -1e-15)
        assert np.all(spectrum.energies >= 0.0)

    def test_isotropic_control_flat(self):
        geometry = codec.PatchGeometry(4, 8, 8, 2)  # d = 16, N = 16
        basis = codec.random_basis(geometry, 8, RngState(19))
        w = world.make_isotropic_world(geometry, seed=20)
        # 10^4 patch samples = 625 images x 16 patches
        spectrum = theory.gradient_energy_spectrum(w, basis, range(16), 625,
                                                   RngState(21))
        assert spectrum.n_patches == 10_000
        d = geometry.patch_dim
        deviation = np.abs(spectrum.cumulative - np.arange(1, d + 1) / d)
        assert float(deviation.max()) < 0.03

    def test_csv_export(self, perm_basis, lowfreq, tmp_path):
        spectrum = theory.gradient_energy_spectrum(
            lowfreq, perm_basis, range(4), 4, RngState(22))
        path = tmp_path / "spectrum.csv"
        spectrum.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "j,E_j,rho_j"
        assert len(lines) == 1 + perm_basis.geometry.patch_dim


class TestComplexity:
    def test_instrumented_counts_match_closed_form(self):
        cfg = net.LensConfig(n_tokens=8, coeff_dim=16, hidden_dim=32, n_layers=3,
                             n_heads=4, prompt_dim=8)
        row = theory.bench_config(cfg, repeats=1)
        n, h, k, blocks = 8, 32, 16, 3
        assert row.macs["self_attn_scores"] == 2 * blocks * n * n * h
        assert row.macs["self_attn_proj"] == 4 * blocks * n * h * h
        assert row.macs["ffn"] == 8 * blocks * n * h * h
        t = 4  # dummy prompt tokens in the bench harness
        cross = blocks * (2 * n * h * h + 2 * t * 8 * h + 2 * n * t * h)
        assert row.macs["cross_attn"] == cross
        io = 2 * n * k * h + 8 * h
        assert row.macs["io_proj"] == io

    def test_attention_term_quadruples_when_tokens_double(self):
        base = theory.bench_config(net.LensConfig(n_tokens=4, coeff_dim=8,
                                                  hidden_dim=16), repeats=1)
        doubled = theory.bench_config(net.LensConfig(n_tokens=8, coeff_dim=8,
                                                     hidden_dim=16), repeats=1)
        assert doubled.macs["self_attn_scores"] == 4 * base.macs["self_attn_scores"]

    def test_ffn_term_quadruples_when_hidden_doubles(self):
        base = theory.bench_config(net.LensConfig(n_tokens=4, coeff_dim=8,
                                                  hidden_dim=16), repeats=1)
        doubled = theory.bench_config(net.LensConfig(n_tokens=4, coeff_dim=8,
                                                     hidden_dim=32), repeats=1)
        assert doubled.macs["ffn"] == 4 * base.macs["ffn"]

    def test_core_fit_two_terms(self):
        rows = theory.complexity_bench([(n, 32, h) for n in (4, 16, 64)
                                        for h in (16, 32, 64)], repeats=1)
        fit = theory.core_scaling_fit(rows)
        assert fit["max_rel_residual"] < 0.05

    def test_full_fit_three_terms(self):
        rows = theory.complexity_bench([(n, 32, h) for n in (4, 16, 64)
                                        for h in (16, 32, 64)], repeats=1)
        fit = theory.full_scaling_fit(rows)
        assert fit["max_rel_residual"] < 0.05

    def test_modulation_macs_strictly_increase_with_k(self, perm_basis):
        macs = []
        for k in (8, 16, 32, 64):
            cfg = net.LensConfig(n_tokens=4, coeff_dim=k)
            macs.append(theory.modulation_pathway_macs(perm_basis.with_k(k), cfg))
        assert all(a < b for a, b in zip(macs, macs[1:]))

    @pytest.mark.slow
    def test_timing_tracks_mac_ratio_at_scale(self):
        # wall time is environment-sensitive; medians over repeats, N >= 64
        r1 = theory.bench_config(net.LensConfig(n_tokens=64, coeff_dim=32,
                                                hidden_dim=64), repeats=15)
        r2 = theory.bench_config(net.LensConfig(n_tokens=128, coeff_dim=32,
                                                hidden_dim=64), repeats=15)
        mac_ratio = r2.macs["total"] / r1.macs["total"]
        time_ratio = r2.median_seconds / r1.median_seconds
        assert time_ratio / mac_ratio < 1.5
        assert mac_ratio / time_ratio < 1.5
