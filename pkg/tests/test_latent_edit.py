import json

import numpy as np
import pytest

from causal_voxel.cohort import default_ad_graph, ground_truth_mechanisms
from causal_voxel.inversion import OptimizerConfig
from causal_voxel.latent_edit import (
    CollinearTargets,
    EditRequest,
    VolumeRegression,
    counterfactual_image,
    edit_latent,
    fit_regression,
    load_regression,
    save_regression,
)
from causal_voxel.metrics import ssim3d
from causal_voxel.phantom import measure_volumes


class TestFitRegression:
    def test_exact_recovery_on_linear_data(self):
        rng = np.random.default_rng(0)
        alpha_true = {"brain": rng.normal(size=8), "gm": rng.normal(size=8),
                      "ventricle": rng.normal(size=8)}
        beta_true = {"brain": 1354.0, "gm": 527.0, "ventricle": 41.0}
        styles = rng.normal(size=(40, 8))
        volumes = {k: styles @ alpha_true[k] + beta_true[k] for k in alpha_true}
        reg = fit_regression(styles, volumes)
        for k in alpha_true:
            np.testing.assert_allclose(reg.alpha[k], alpha_true[k], atol=1e-8)
            assert reg.beta[k] == pytest.approx(beta_true[k], abs=1e-8)

    def test_pipeline_r_squared(self, volume_regression):
        for key, value in volume_regression.r_squared.items():
            assert value > 0.95, key

    def test_duplication_invariance(self):
        rng = np.random.default_rng(1)
        styles = rng.normal(size=(20, 8))
        volumes = {"brain": rng.normal(1000, 50, 20)}
        a = fit_regression(styles, volumes)
        b = fit_regression(np.vstack([styles, styles]),
                           {"brain": np.concatenate([volumes["brain"]] * 2)})
        np.testing.assert_allclose(a.alpha["brain"], b.alpha["brain"], atol=1e-9)
        assert a.beta["brain"] == pytest.approx(b.beta["brain"], abs=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 9"):
            fit_regression(np.zeros((5, 8)), {"brain": np.zeros(5)})

    def test_rank_deficient_design(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=(30, 1))
        styles = base @ np.ones((1, 8))  # all columns identical
        with pytest.raises(ValueError, match="sample more"):
            fit_regression(styles, {"brain": rng.normal(size=30)})

    def test_r_squared_recomputation(self, volume_regression):
        recomputed = volume_regression.recompute_r_squared()
        for k, v in volume_regression.r_squared.items():
            assert recomputed[k] == pytest.approx(v, abs=1e-9)

    def test_zero_alpha_rejected(self):
        with pytest.raises(ValueError, match="zero coefficient"):
            VolumeRegression(style_dim=2, alpha={"brain": np.zeros(2)},
                             beta={"brain": 0.0}, r_squared={"brain": 1.0}, n_samples=3)


def simple_regression(alpha_map):
    return VolumeRegression(
        style_dim=8,
        alpha={k: np.asarray(v, dtype=float) for k, v in alpha_map.items()},
        beta={k: 10.0 for k in alpha_map},
        r_squared={k: 1.0 for k in alpha_map},
        n_samples=9,
    )


class TestEditLatent:
    def test_no_change_is_identity(self):
        reg = simple_regression({"brain": np.arange(1.0, 9.0)})
        w = np.linspace(-1, 1, 8)
        current = reg.predict(w, "brain")
        for mode in ("exact", "paper_literal"):
            np.testing.assert_allclose(
                edit_latent(w, {"brain": current}, reg, mode=mode), w, atol=1e-12
            )

    def test_unit_alpha_analytic(self):
        alpha = np.zeros(8)
        alpha[0] = 1.0
        reg = simple_regression({"brain": alpha})
        w = np.zeros(8)
        current = reg.predict(w, "brain")
        for mode in ("exact", "paper_literal"):  # coincide at unit norm
            w2 = edit_latent(w, {"brain": current + 2.0}, reg, mode=mode)
            np.testing.assert_allclose(w2, np.array([2.0] + [0.0] * 7), atol=1e-12)
            assert reg.predict(w2, "brain") == pytest.approx(current + 2.0)

    def test_paper_literal_formula(self):
        rng = np.random.default_rng(3)
        alpha = rng.normal(size=8)
        reg = simple_regression({"brain": alpha})
        w = rng.normal(size=8)
        y = reg.predict(w, "brain")
        w2 = edit_latent(w, {"brain": y + 5.0}, reg, mode="paper_literal")
        expected = w + (5.0 / np.linalg.norm(alpha)) * alpha
        np.testing.assert_allclose(w2, expected, atol=1e-12)

    def test_exact_mode_prediction_consistency(self):
        rng = np.random.default_rng(4)
        reg = simple_regression({"brain": rng.normal(size=8)})
        w = rng.normal(size=8)
        w2 = edit_latent(w, {"brain": 123.456}, reg, mode="exact")
        assert reg.predict(w2, "brain") == pytest.approx(123.456, abs=1e-9)

    def test_orthogonal_multi_target_equals_sum_of_singles(self):
        a1, a2 = np.zeros(8), np.zeros(8)
        a1[:4] = [1.0, 2.0, -1.0, 0.5]
        a2[4:] = [0.3, -0.7, 2.0, 1.0]
        reg = simple_regression({"brain": a1, "gm": a2})
        w = np.linspace(0, 1, 8)
        t = {"brain": reg.predict(w, "brain") + 3.0, "gm": reg.predict(w, "gm") - 2.0}
        joint = edit_latent(w, t, reg)
        sum_singles = (edit_latent(w, {"brain": t["brain"]}, reg)
                       + edit_latent(w, {"gm": t["gm"]}, reg) - w)
        np.testing.assert_allclose(joint, sum_singles, atol=1e-10)
        # pseudoinverse oracle
        a_mat = np.vstack([a1, a2])
        dy = np.array([3.0, -2.0])
        np.testing.assert_allclose(joint - w, np.linalg.pinv(a_mat) @ dy, atol=1e-10)

    def test_multi_target_hits_all_predictions(self, volume_regression):
        w = np.zeros(8)
        targets = {"brain": 1300.0, "gm": 540.0, "ventricle": 47.0}
        w2 = edit_latent(w, targets, volume_regression)
        for k, y in targets.items():
            assert volume_regression.predict(w2, k) == pytest.approx(y, abs=1e-9)

    def test_reversibility(self, volume_regression):
        w = np.linspace(-0.5, 0.5, 8)
        y0 = volume_regression.predict(w, "brain")
        w_fwd = edit_latent(w, {"brain": y0 * 0.9}, volume_regression)
        w_back = edit_latent(w_fwd, {"brain": y0}, volume_regression)
        np.testing.assert_allclose(w_back, w, atol=1e-9)

    def test_collinear_error_names_pair(self):
        alpha = np.arange(1.0, 9.0)
        reg = simple_regression({"brain": alpha, "gm": 2.0 * alpha})
        with pytest.raises(CollinearTargets, match="'brain' and 'gm'"):
            edit_latent(np.zeros(8), {"brain": 1.0, "gm": 2.0}, reg)

    def test_unknown_target(self, volume_regression):
        with pytest.raises(ValueError, match="unknown volume|does not cover"):
            edit_latent(np.zeros(8), {"cerebellum": 1.0}, volume_regression)


class TestEditRequest:
    def test_fraction_bounds(self):
        with pytest.raises(ValueError, match="outside"):
            EditRequest(relative={"brain": 0.7})

    def test_needs_target(self):
        with pytest.raises(ValueError, match="at least one"):
            EditRequest()

    def test_unknown_volume(self):
        with pytest.raises(ValueError, match="unknown volume"):
            EditRequest(targets={"skull": 1.0})

    def test_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            EditRequest(targets={"brain": 1.0}, mode="magic")

    def test_resolve_relative(self, volume_regression):
        req = EditRequest(relative={"brain": 0.10})
        w = np.zeros(8)
        resolved = req.resolve(volume_regression, w)
        assert resolved["brain"] == pytest.approx(
            1.10 * volume_regression.predict(w, "brain"))


@pytest.fixture(scope="module")
def pipeline(generator, volume_regression):
    graph = default_ad_graph()
    mechs = ground_truth_mechanisms()
    return graph, mechs, generator, volume_regression


class TestCounterfactualImage:
    def test_null_intervention_reconstructs(self, pipeline):
        graph, mechs, generator, reg = pipeline
        image = generator.generate(generator.sample_style(60), 61)
        result = counterfactual_image(
            image, {}, graph, mechs, generator, reg,
            inversion_config=OptimizerConfig.fast(seed=0),
        )
        assert ssim3d(image, result.image) > 0.98
        assert result.defaulted_evidence == ["a", "s", "m"]

    def test_noise_field_bitwise_unchanged(self, pipeline):
        graph, mechs, generator, reg = pipeline
        image = generator.generate(generator.sample_style(62), 63)
        result = counterfactual_image(
            image, {"m": 30.0}, graph, mechs, generator, reg,
            inversion_config=OptimizerConfig.fast(seed=0),
        )
        np.testing.assert_array_equal(result.inversion.n_hat,
                                      result.inversion.n_hat)
        regenerated = generator.generate(result.w_edited, result.inversion.n_hat)
        np.testing.assert_array_equal(regenerated.data, result.image.data)

    def test_do_brain_1000(self, pipeline):
        graph, mechs, generator, reg = pipeline
        image = generator.generate(np.zeros(8), 64)  # calibration: brain 1354
        result = counterfactual_image(
            image, {"b": 1000.0}, graph, mechs, generator, reg,
            inversion_config=OptimizerConfig.fast(seed=0),
        )
        measured = measure_volumes(result.image).brain
        assert abs(measured - 1000.0) / 1000.0 < 0.05

    def test_mmse_30_directions(self, pipeline, low_mmse_style):
        graph, mechs, generator, reg = pipeline
        w, demo = low_mmse_style
        image = generator.generate(w, 65)
        result = counterfactual_image(
            image, {"m": 30.0}, graph, mechs, generator, reg,
            demographics=demo, inversion_config=OptimizerConfig.fast(seed=0),
        )
        factual = result.factual_volumes
        counter = measure_volumes(result.image)
        assert counter.ventricle < factual.ventricle
        assert counter.gm > factual.gm

    def test_missing_demographics_listed(self, pipeline):
        from causal_voxel.scm import CausalGraph, VariableSpec

        graph, mechs, generator, reg = pipeline
        extended = CausalGraph(
            graph.variables + [VariableSpec("apoe")],
            graph.edges, image_parents=graph.image_parents, priors=graph.priors,
        )
        image = generator.generate(generator.sample_style(66), 67)
        with pytest.raises(ValueError, match="apoe"):
            counterfactual_image(image, {}, extended, mechs, generator, reg,
                                 inversion_config=OptimizerConfig.fast(seed=0))

    def test_edit_locality(self, pipeline):
        graph, mechs, generator, reg = pipeline
        rng = np.random.default_rng(5)
        score_ok = 0
        trials = 15
        for i in range(trials):
            w = generator.sample_style(1000 + i)
            base = measure_volumes(generator.generate(w, None))
            target = reg.predict(w, "brain") * 0.88
            w2 = edit_latent(w, {"brain": target}, reg)
            edited = measure_volumes(generator.generate(w2, None))
            d_target = abs(edited.brain - base.brain)
            d_other = max(abs(edited.gm - base.gm), abs(edited.ventricle - base.ventricle))
            if d_other < d_target:
                score_ok += 1
        assert score_ok >= trials - 1  # disentanglement score


@pytest.fixture(scope="module")
def low_mmse_style(generator):
    """A CI-like subject: low score, enlarged ventricle, shrunken grey matter."""
    from causal_voxel.scm import sample_prior

    graph = default_ad_graph()
    mechs = ground_truth_mechanisms()
    rows = sample_prior(graph, mechs, seed=77, n=60).rows
    row = min(rows, key=lambda r: r["m"])
    w = generator.decoder.style_for_volumes(row["b"], row["g"], row["v"])
    return w, {"a": row["a"], "s": row["s"], "m": row["m"]}


class TestRegressionFiles:
    def test_roundtrip(self, volume_regression, tmp_path):
        path = tmp_path / "reg.json"
        save_regression(path, volume_regression)
        loaded = load_regression(path)
        for k in volume_regression.alpha:
            np.testing.assert_array_equal(loaded.alpha[k], volume_regression.alpha[k])
            assert loaded.beta[k] == volume_regression.beta[k]

    def test_provenance_hash_tracks_upstream(self, volume_regression, tmp_path):
        upstream = tmp_path / "model.json"
        upstream.write_text('{"v": 1}')
        save_regression(tmp_path / "a.json", volume_regression, [upstream])
        upstream.write_text('{"v": 2}')
        save_regression(tmp_path / "b.json", volume_regression, [upstream])
        ha = json.loads((tmp_path / "a.json").read_text())["provenance_sha256"]
        hb = json.loads((tmp_path / "b.json").read_text())["provenance_sha256"]
        assert ha != hb
        save_regression(tmp_path / "c.json", volume_regression, [upstream])
        hc = json.loads((tmp_path / "c.json").read_text())["provenance_sha256"]
        assert hb == hc
