import numpy as np
import pytest

from core.errors import OptimizerError, ScheduleError
from core.optim import SGD, poly_lr, sgd_step
from core.segmodel import ParameterGroup
from core.tensor import Tensor


class TestPolyLr:

    def test_start(self):
        assert poly_lr(7e-3, 0, 1000) == 7e-3

    def test_end(self):
        assert poly_lr(7e-3, 1000, 1000) == 0.0

    def test_midpoint(self):
        # 7e-3 · 0.5^0.9 = 3.75121e-3
        assert poly_lr(7e-3, 500, 1000) == pytest.approx(7e-3 * 0.5 ** 0.9, rel=1e-12)
        assert poly_lr(7e-3, 500, 1000) == pytest.approx(3.7512e-3, abs=1e-7)

    def test_monotone(self):
        lrs = [poly_lr(0.01, i, 50) for i in range(51)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("iteration, maximum", [(-1, 10), (11, 10), (0, 0)])
    def test_out_of_range(self, iteration, maximum):
        with pytest.raises(ScheduleError):
            poly_lr(0.01, iteration, maximum)


class TestSgdStep:

    def test_plain_step(self):
        p = np.array([1.0, -2.0])
        velocity = {}
        sgd_step({'w': p}, {'w': np.array([0.5, 0.5])}, velocity, lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(p, [0.95, -2.05])
        np.testing.assert_allclose(velocity['w'], [0.5, 0.5])

    def test_momentum_accumulates(self):
        p = np.array([0.0])
        velocity = {}
        for _ in range(2):
            sgd_step({'w': p}, {'w': np.array([1.0])}, velocity, lr=1.0, momentum=0.9, weight_decay=0.0)
        # v1 = 1, v2 = 0.9 + 1
        np.testing.assert_allclose(velocity['w'], [1.9])
        np.testing.assert_allclose(p, [-2.9])

    def test_weight_decay(self):
        p = np.array([2.0])
        sgd_step({'w': p}, {'w': np.array([0.0])}, {}, lr=0.1, momentum=0.0, weight_decay=0.5)
        np.testing.assert_allclose(p, [1.9])

    def test_missing_gradient_only_decays(self):
        p = np.array([1.0, 1.0])
        sgd_step({'w': p}, {'w': None}, {}, lr=1.0, momentum=0.0, weight_decay=0.0)
        np.testing.assert_array_equal(p, [1.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(OptimizerError):
            sgd_step({'w': np.zeros(3)}, {'w': np.zeros(2)}, {}, 0.1, 0.9, 0.0)


class TestSGD:

    def _params(self):
        a = Tensor(np.ones(2), requires_grad=True, name='backbone.a')
        b = Tensor(np.ones(2), requires_grad=True, name='head.b')
        a.grad = np.full(2, 1.0)
        b.grad = np.full(2, 1.0)
        return {'backbone.a': a, 'head.b': b}

    def test_group_multipliers(self):
        params = self._params()
        groups = [ParameterGroup('backbone', ['backbone.a'], 1.0), ParameterGroup('head', ['head.b'], 10.0)]
        opt = SGD(params, groups, momentum=0.0, weight_decay=0.0)
        opt.step(0.01)
        assert opt.last_lrs == {'backbone': 0.01, 'head': 0.1}
        np.testing.assert_allclose(params['backbone.a'].data, [0.99, 0.99])
        np.testing.assert_allclose(params['head.b'].data, [0.9, 0.9])

    def test_frozen_group_skipped(self):
        params = self._params()
        groups = [ParameterGroup('backbone', ['backbone.a'], 1.0, frozen=True),
                  ParameterGroup('head', ['head.b'], 10.0)]
        opt = SGD(params, groups)
        opt.step(0.01)
        np.testing.assert_array_equal(params['backbone.a'].data, [1.0, 1.0])
        assert 'backbone' not in opt.last_lrs
        assert 'backbone.a' not in opt.velocity

    def test_state_round_trip(self):
        params = self._params()
        groups = [ParameterGroup('all', list(params), 1.0)]
        opt = SGD(params, groups)
        opt.step(0.01)
        restored = SGD(params, groups)
        restored.load_state_dict(opt.state_dict())
        assert restored.velocity.keys() == opt.velocity.keys()
        for name in opt.velocity:
            np.testing.assert_array_equal(restored.velocity[name], opt.velocity[name])

    def test_zero_grad(self):
        params = self._params()
        SGD(params, []).zero_grad()
        assert all(p.grad is None or not p.grad.any() for p in params.values())

    @pytest.mark.parametrize("kwargs", [{'momentum': 1.0}, {'momentum': -0.1}, {'weight_decay': -1e-4}])
    def test_invalid_hyperparameters(self, kwargs):
        with pytest.raises(OptimizerError):
            SGD(self._params(), [], **kwargs)

    def test_unknown_group_member(self):
        with pytest.raises(OptimizerError):
            SGD(self._params(), [ParameterGroup('head', ['head.missing'], 10.0)])

    def test_velocity_for_unknown_parameter(self):
        with pytest.raises(OptimizerError):
            SGD(self._params(), []).load_state_dict({'velocity.other': np.zeros(2)})
