import numpy as np
import pytest

from waspnet import ops
from waspnet.builders import TOY_WIDTHS, build_decoder, build_head
from waspnet.exceptions import NumericalError
from waspnet.gradcheck import grad_check, graph_grad_check, relative_error
from waspnet.graph import ModuleGraph
from waspnet.ops import ConvSpec
from waspnet.training import cross_entropy


def _conv_pair(rate, pad, stride, proj):
    def f(p):
        return float((ops.conv2d(p["x"], ConvSpec(p["k"], p["b"], stride, rate, pad)) * proj).sum())

    def g(p):
        gx, gk, gb = ops.conv2d_backward(p["x"], ConvSpec(p["k"], p["b"], stride, rate, pad), proj)
        return {"x": gx, "k": gk, "b": gb}

    return f, g


class TestRelativeError:
    def test_exact_match_is_zero(self):
        assert relative_error([1.0, -2.0], [1.0, -2.0]).max() == 0

    def test_scale_free(self):
        a = relative_error([1.0], [1.01])[0]
        b = relative_error([1000.0], [1010.0])[0]
        assert a == pytest.approx(b, rel=1e-6)


class TestGradCheck:
    @pytest.mark.parametrize("rate,pad,stride", [(1, 1, 1), (2, 2, 1), (3, 3, 1), (2, 1, 2)])
    def test_conv2d(self, rng, rate, pad, stride):
        x = rng.standard_normal((2, 2, 7, 7))
        k, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        oh = ConvSpec(k, b, stride, rate, pad).output_hw(7, 7)
        f, g = _conv_pair(rate, pad, stride, rng.standard_normal((2, 3) + oh))
        report = grad_check(f, g, {"x": x, "k": k, "b": b})
        assert report.passed, str(report)

    def test_corrupted_gradient_fails(self, rng):
        # negative control: a 1% error in the analytic gradient must be caught
        x, k, b = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((2, 2, 3, 3)), np.zeros(2)
        f, g = _conv_pair(2, 2, 1, rng.standard_normal((1, 2, 6, 6)))

        def corrupted(p):
            out = g(p)
            out["k"] = out["k"] * 1.01
            return out

        report = grad_check(f, corrupted, {"x": x, "k": k, "b": b})
        assert not report.passed
        assert report.per_input["k"] > 1e-3 and report.per_input["x"] < 1e-6

    def test_max_coords_subset(self, rng):
        x = rng.standard_normal((1, 1, 10, 10))
        proj = rng.standard_normal((1, 1, 10, 10))
        report = grad_check(lambda p: float((ops.bilinear_resize(p["x"], 10, 10) * proj).sum()),
                            lambda p: {"x": proj}, {"x": x}, max_coords=7)
        assert report.n_checked == 7 and report.passed

    def test_non_finite_objective(self):
        with pytest.raises(NumericalError):
            grad_check(lambda p: float("nan"), lambda p: {"x": p["x"]}, {"x": np.ones(2)})

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            grad_check(lambda p: 0.0, lambda p: {"x": np.ones(3)}, {"x": np.ones(2)})

    def test_bilinear(self, rng):
        x, proj = rng.standard_normal((1, 2, 3, 4)), rng.standard_normal((1, 2, 6, 9))
        report = grad_check(lambda p: float((ops.bilinear_resize(p["x"], 6, 9) * proj).sum()),
                            lambda p: {"x": ops.bilinear_resize_backward(proj, 3, 4)}, {"x": x})
        assert report.passed, str(report)

    def test_softmax(self, rng):
        x, proj = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 3, 3))
        report = grad_check(
            lambda p: float((ops.softmax_channels(p["x"]) * proj).sum()),
            lambda p: {"x": ops.softmax_channels_backward(proj, ops.softmax_channels(p["x"]))},
            {"x": x})
        assert report.passed, str(report)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_batchnorm(self, rng, mode):
        x, proj = rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((3, 2, 4, 4))

        def state(p):
            s = ops.BatchNormState.fresh(2, np.float64)
            s.gamma, s.beta = p["gamma"], p["beta"]
            s.running_mean[:] = [0.3, -0.2]
            s.running_var[:] = [1.5, 0.7]
            return s

        def f(p):
            return float((ops.batchnorm(p["x"], state(p), mode)[0] * proj).sum())

        def g(p):
            s = state(p)
            _, cache = ops.batchnorm(p["x"], s, mode)
            gx, gg, gb = ops.batchnorm_backward(proj, cache, s)
            return {"x": gx, "gamma": gg, "beta": gb}

        report = grad_check(f, g, {"x": x, "gamma": rng.uniform(0.5, 2, 2), "beta": rng.standard_normal(2)})
        assert report.passed, str(report)

    def test_cross_entropy(self, rng):
        logits = rng.standard_normal((2, 4, 3, 3))
        labels = rng.integers(0, 4, (2, 3, 3))
        labels[0, 0, 0] = 255
        report = grad_check(lambda p: cross_entropy(p["z"], labels)[0],
                            lambda p: {"z": cross_entropy(p["z"], labels)[1]}, {"z": logits})
        assert report.passed, str(report)


class TestGraphGradCheck:
    @pytest.mark.parametrize("head", ["aspp", "cascade", "res2net-seg", "wasp"])
    def test_toy_heads(self, rng, head):
        g = build_head(head, 8, None, TOY_WIDTHS)
        g.init_params(0)
        report = graph_grad_check(g, rng.standard_normal((1, 8, 7, 7)), max_coords=6)
        assert report.passed, str(report)

    def test_decoder(self, rng):
        g = build_decoder(8, 4, 3, 6, dropout=0.5)
        g.init_params(1)
        x = {"score": rng.standard_normal((1, 8, 2, 2)), "lowlevel": rng.standard_normal((1, 4, 4, 4))}
        report = graph_grad_check(g, x, max_coords=6)
        assert report.passed, str(report)

    def test_maxpool_and_batchnorm_graph(self, rng):
        g = ModuleGraph()
        g.add_input("input", 2)
        g.add("c", "conv", "input", in_ch=2, out_ch=3, kernel=3, stride=2, bias=False)
        g.add("bn", "batchnorm", "c", channels=3)
        g.add("r", "relu", "bn")
        g.add("p", "maxpool", "r", kernel=3, stride=2, padding=1)
        g.init_params(0)
        report = graph_grad_check(g, rng.standard_normal((2, 2, 9, 9)), mode="train")
        assert report.passed, str(report)
