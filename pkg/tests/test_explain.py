"""Explainability tests: CAM math, region importance, heatmap rendering."""

import numpy as np
import pytest

from polarnet import tensor as T
from polarnet.errors import ConfigError
from polarnet.explain import (ImportanceMatrix, cam_from_activations,
                              cam_to_cartesian, class_score, explain_samples,
                              grad_cam, importance_report,
                              importance_to_cartesian, matrix_to_cartesian,
                              region_importance)
from polarnet.grids import GridSpec, build_grid
from polarnet.model import PolarNetModel
from polarnet.training import Sample
from tests.test_model import tiny_config, rand_inputs


@pytest.fixture
def rng():
    return np.random.default_rng(31415)


def frozen_head(A, w, b):
    """Score = linear(global average of A); the analytic CAM test bench."""
    return T.linear(T.global_avg_pool(A), w, b)


class TestCamMath:
    def test_mean_score_gives_uniform_alpha(self, rng):
        """Score = mean(A_0): alpha_0 = 1/(H*W), CAM = ReLU(A_0)/(H*W)."""
        av = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        A = T.Tensor(av, requires_grad=True)
        score = T.pick(T.global_avg_pool(A), 0, 0)
        T.backward(score)
        np.testing.assert_allclose(A.grad[0, 0], 1 / 16, rtol=1e-6)
        assert np.all(A.grad[0, 1:] == 0.0)
        cam = cam_from_activations(A)
        np.testing.assert_allclose(cam[0], np.maximum(av[0, 0] / 16, 0.0),
                                   atol=1e-7)

    def test_negative_weighted_sum_gives_zero_cam(self, rng):
        av = -np.abs(rng.standard_normal((1, 2, 4, 4))).astype(np.float32)
        A = T.Tensor(av, requires_grad=True)
        score = T.pick(T.global_avg_pool(A), 0, 0)  # alpha >= 0, A <= 0
        T.backward(score)
        A.grad[0, 1] = np.abs(A.grad[0, 1])  # both channels weighted >= 0
        assert np.all(cam_from_activations(A) == 0.0)

    def test_alpha_matches_finite_differences(self, rng):
        """alpha via backward vs per-activation central differences."""
        av = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        wv = 0.5 * rng.standard_normal((2, 3)).astype(np.float32)
        bv = np.zeros(2, dtype=np.float32)
        A = T.Tensor(av.copy(), requires_grad=True)
        w, b = T.Tensor(wv), T.Tensor(bv)
        T.backward(class_score(frozen_head(A, w, b), 1))
        alpha = A.grad.mean(axis=(2, 3))[0]

        eps = 1e-3
        fd_alpha = np.zeros(3)
        for k in range(3):
            grads = []
            for i in range(4):
                for j in range(4):
                    pert = av.copy()
                    pert[0, k, i, j] += eps
                    hi = frozen_head(T.Tensor(pert), w, b).data[0, 1]
                    pert[0, k, i, j] -= 2 * eps
                    lo = frozen_head(T.Tensor(pert), w, b).data[0, 1]
                    grads.append((hi - lo) / (2 * eps))
            fd_alpha[k] = np.mean(grads)
        np.testing.assert_allclose(alpha, fd_alpha, rtol=1e-3)

    def test_cam_without_backward_rejected(self, rng):
        A = T.Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32),
                     requires_grad=True)
        with pytest.raises(ConfigError):
            cam_from_activations(A)

    def test_class_index_out_of_range(self, rng):
        logits = T.Tensor(rng.standard_normal((1, 2)).astype(np.float32))
        with pytest.raises(ConfigError):
            class_score(logits, 5)

    def test_scaling_activations_scales_cam(self, rng):
        """Frozen linear head: A -> s*A scales the raw CAM by s, leaves the
        argmax cell put (gradients are recomputed and unchanged)."""
        av = np.abs(rng.standard_normal((1, 3, 8, 8))).astype(np.float32)
        wv = rng.standard_normal((2, 3)).astype(np.float32)
        w, b = T.Tensor(wv), T.Tensor(np.zeros(2, dtype=np.float32))

        def cam_of(scaled):
            A = T.Tensor(scaled, requires_grad=True)
            T.backward(class_score(frozen_head(A, w, b), 1))
            return cam_from_activations(A)

        base = cam_of(av)
        tripled = cam_of(3.0 * av)
        np.testing.assert_allclose(tripled, 3.0 * base, rtol=1e-5, atol=1e-7)
        m1 = region_importance(base[0], GridSpec("ETDRS"))
        m3 = region_importance(tripled[0], GridSpec("ETDRS"))
        assert m1.argmax_cell() == m3.argmax_cell()
        np.testing.assert_allclose(m3.matrix, 3.0 * m1.matrix, rtol=1e-5)


class TestGradCamOnModel:
    def test_shapes_and_nonnegativity(self, rng):
        cfg = tiny_config()
        model = PolarNetModel(cfg, seed=17)
        inputs = rand_inputs(rng, cfg, n=2)
        cam = grad_cam(model, inputs, class_index=1)
        assert cam.shape == (2,) + cfg.fusion_map_size()
        assert cam.min() >= 0.0
        svc = grad_cam(model, inputs, class_index=1, projection="SVC")
        h, w = cfg.input_size
        ds = 2 ** cfg.branch_downsamplings()
        assert svc.shape == (2, h // ds, w // ds)
        assert svc.min() >= 0.0


class TestRegionImportance:
    def test_constant_cam_uniform_matrix(self):
        imp = region_importance(np.full((64, 48), 0.7), GridSpec("ETDRS"))
        np.testing.assert_allclose(imp.matrix, 0.7)
        assert imp.center == pytest.approx(0.7)

    def test_indicator_cam_single_cell(self):
        cam = np.zeros((64, 48))
        cam[24:40, 16:32] = 1.0  # exactly the NI rectangle
        imp = region_importance(cam, GridSpec("ETDRS"))
        assert imp.argmax_cell() == (2, 0)  # (N, inner)
        assert imp.matrix[2, 0] == 1.0
        assert imp.matrix.sum() == 1.0

    def test_aggregation_is_mean_of_per_sample(self, rng):
        cams = rng.uniform(0, 1, (5, 32, 24))
        agg = region_importance(cams, GridSpec("ETDRS"))
        singles = [region_importance(c, GridSpec("ETDRS")) for c in cams]
        np.testing.assert_allclose(agg.matrix,
                                   np.mean([s.matrix for s in singles], axis=0),
                                   atol=1e-6)
        assert agg.center == pytest.approx(np.mean([s.center for s in singles]),
                                           abs=1e-6)

    def test_unit_max_normalization(self, rng):
        imp = region_importance(rng.uniform(0.1, 2.0, (32, 24)),
                                GridSpec("ETDRS"))
        disp = imp.normalized()
        assert disp.normalization == "unit-max"
        assert max(disp.matrix.max(), disp.center) == pytest.approx(1.0)
        assert imp.normalization == "raw"  # raw values retained


class TestHeatmaps:
    def test_uniform_matrix_uniform_color(self):
        imp = ImportanceMatrix(matrix=np.full((4, 2), 0.5), center=0.5,
                               class_index=1)
        hm = matrix_to_cartesian(imp, 50.0, (63.5, 63.5), (128, 128))
        inside = hm.mask
        assert len(np.unique(hm.rgb[inside].reshape(-1, 3), axis=0)) == 1
        assert np.all(hm.rgb[~inside] == 0)

    def test_colormap_endpoints(self):
        m = np.zeros((4, 2))
        m[1, 0] = 1.0
        imp = ImportanceMatrix(matrix=m, center=0.0, class_index=1)
        hm = matrix_to_cartesian(imp, 50.0, (63.5, 63.5), (128, 128))
        mask = build_grid(GridSpec("ETDRS"), 50.0, (63.5, 63.5), 128, 128)
        si = mask.pixels_of("SI")
        te = mask.pixels_of("TE")
        assert np.all(hm.rgb[si] == (255, 0, 0))   # t=1: pure red
        assert np.all(hm.rgb[te] == (0, 0, 255))   # t=0: pure blue

    def test_matrix_render_round_trip_exact(self, rng):
        """Per-region means over the rendered value field return the
        matrix bit-exactly."""
        m = rng.uniform(0.1, 3.0, (4, 2)).astype(np.float32)
        imp = ImportanceMatrix(matrix=m, center=np.float32(0.25), class_index=1)
        spec = GridSpec("ETDRS")
        hm = matrix_to_cartesian(imp, 60.0, (63.5, 63.5), (128, 128), spec)
        mask = build_grid(spec, 60.0, (63.5, 63.5), 128, 128)
        for qi, q in enumerate("TSNI"):
            for ri, ring in enumerate("IE"):
                vals = hm.values[mask.pixels_of(q + ring)]
                assert np.all(vals == m[qi, ri])
        assert np.all(hm.values[mask.pixels_of("C")] == np.float32(0.25))

    def test_region_boundaries_match_label_map(self, rng):
        """Value level sets in the render coincide with grid labels."""
        m = np.arange(1, 9, dtype=np.float32).reshape(4, 2)
        imp = ImportanceMatrix(matrix=m, center=np.float32(9.0), class_index=0)
        spec = GridSpec("ETDRS")
        hm = matrix_to_cartesian(imp, 45.0, (60.0, 60.0), (121, 121), spec)
        mask = build_grid(spec, 45.0, (60.0, 60.0), 121, 121)
        np.testing.assert_array_equal(hm.mask, mask.label_map > 0)
        lut = {0.0: 0, 9.0: mask.id_of("C")}
        flat = m.reshape(-1)
        for i, name in enumerate(n for n in mask.names if n != "C"):
            lut[float(flat[i])] = mask.id_of(name)
        recovered = np.vectorize(lambda v: lut[float(v)])(hm.values)
        np.testing.assert_array_equal(recovered, mask.label_map)

    def test_dense_cam_render(self, rng):
        cam = rng.uniform(0, 2, (64, 48)).astype(np.float32)
        hm = cam_to_cartesian(cam, 50.0, (63.5, 63.5), (128, 128))
        assert hm.rgb.shape == (128, 128, 3)
        assert np.all(hm.rgb[~hm.mask] == 0)
        assert hm.values[hm.mask].max() == pytest.approx(cam.max(), rel=1e-5)
        assert importance_to_cartesian(cam, 50.0, (63.5, 63.5),
                                       (128, 128)).values.shape == (128, 128)


class TestExplainSamples:
    def test_report_structure(self, rng):
        cfg = tiny_config()
        model = PolarNetModel(cfg, seed=23)
        samples = [Sample(f"s{i}", i % 2,
                          rng.standard_normal((3, 16, 16)).astype(np.float32))
                   for i in range(5)]
        projections, global_imp, mean_cam = explain_samples(model, samples,
                                                            class_index=1)
        assert set(projections) == {"SVC", "DVC", "CC"}
        report = importance_report(projections, global_imp)
        assert report["class"] == 1
        assert report["grid"] == "ETDRS"
        assert np.asarray(report["projections"]["DVC"]).shape == (4, 2)
        assert isinstance(report["center"], float)
        assert mean_cam.shape == cfg.fusion_map_size()
        for imp in projections.values():
            assert imp.matrix.min() >= 0.0
