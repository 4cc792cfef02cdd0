import numpy as np
import pytest

from cbnet.errors import ArchitectureError, NumericalError, StateError
from cbnet.layers import Dense, Relu, Softmax
from cbnet.models import build_branchy_lenet, build_lenet
from cbnet.network import Network, Stage


def test_non_final_stage_needs_head():
    with pytest.raises(ArchitectureError):
        Network([Stage([Relu()], []), Stage([Relu()], [Dense("d", 4, 4), Softmax()])])


def test_duplicate_parameter_names_detected():
    net = Network([Stage([Dense("d", 4, 4), Dense("d", 4, 4)],
                         [Dense("h", 4, 4), Softmax()])])
    with pytest.raises(ArchitectureError):
        net.params()


def test_forward_final_matches_last_exit_of_forward_all(rng):
    net = build_branchy_lenet(seed=6)
    x = rng.random((3, 1, 28, 28), dtype=np.float32)
    np.testing.assert_array_equal(net.forward_final(x), net.forward_all(x)[-1])


def test_all_exits_emit_probability_vectors(rng):
    for net in (build_branchy_lenet(seed=2), build_lenet(seed=2)):
        outs = net.forward_all(rng.random((4, 1, 28, 28), dtype=np.float32))
        for out in outs:
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(out >= 0.0)


def test_backward_requires_one_grad_per_exit(rng):
    net = build_branchy_lenet(seed=0)
    net.forward_all(rng.random((2, 1, 28, 28), dtype=np.float32), train=True)
    with pytest.raises(StateError):
        net.backward_from_logits([np.zeros((2, 10))])


def test_load_params_missing_tensor_rejected():
    net = build_lenet(seed=0)
    params = {k: v.copy() for k, v in net.params().items()}
    params.pop("fc2.w")
    with pytest.raises(ArchitectureError):
        net.load_params(params)


def test_check_finite_raises_on_nan():
    net = build_lenet(seed=0)
    with pytest.raises(NumericalError):
        net.check_finite(np.array([1.0, np.nan]), "test context")
