import json

import numpy as np
import pytest

from r2learn.errors import ConfigError, ContractError, NumericError
from r2learn.numerics import RandomStream, check_gradient
from r2learn.representers import (RepresenterDictionary, RepresenterSpec, dictionary_specs,
                                  init_dictionary)


def mlp_dict(p=4, D=3, hidden=5, seed=0, activation="tanh"):
    specs = [RepresenterSpec("mlp", p, hidden=hidden, activation=activation) for _ in range(D)]
    return init_dictionary(specs, RandomStream(seed))


def test_thirty_mlps_over_thirty_inputs():
    d = init_dictionary(dictionary_specs("mlp", 30, 30), RandomStream(0))
    assert d.size == 30
    out = d.forward(np.random.default_rng(0).standard_normal(30))
    assert out.shape == (30,) and np.all(np.isfinite(out))


def test_identity_coordinate():
    d = init_dictionary([RepresenterSpec("identity", 3, index=0)], RandomStream(0))
    assert d.forward(np.array([4.0, 5.0, 6.0])).tolist() == [4.0]
    full = init_dictionary(dictionary_specs("identity", 3), RandomStream(0))
    assert full.forward(np.array([1.0, 2.0, 3.0])).tolist() == [1.0, 2.0, 3.0]


def test_same_seed_same_init():
    a = mlp_dict(seed=5)
    b = mlp_dict(seed=5)
    c = mlp_dict(seed=6)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)


def test_inconsistent_input_dims():
    specs = [RepresenterSpec("linear", 3), RepresenterSpec("linear", 4)]
    with pytest.raises(ConfigError):
        init_dictionary(specs, RandomStream(0))


def test_orthobasis_projection():
    q = 40
    e1, e2 = np.eye(q)[0], np.eye(q)[1]
    specs = [RepresenterSpec("orthobasis", q, basis=tuple(e1)), RepresenterSpec("orthobasis", q, basis=tuple(e2))]
    d = init_dictionary(specs, RandomStream(0))
    x = np.zeros(q)
    x[1] = 5.0
    assert d.forward(x).tolist() == [0.0, 5.0]
    assert d.trainable_index.size == 0


def test_orthobasis_needs_unit_norm():
    with pytest.raises(ConfigError):
        RepresenterSpec("orthobasis", 2, basis=(1.0, 1.0))


def test_zero_mlp_is_zero():
    spec = RepresenterSpec("mlp", 3, hidden=4)
    d = RepresenterDictionary([spec], np.zeros(spec.n_params))
    X = np.random.default_rng(1).standard_normal((6, 3)) * 10
    assert np.all(d.forward_batch(X) == 0.0)


def test_empty_batch_and_duplicates():
    d = mlp_dict()
    assert d.forward_batch(np.zeros((0, 4))).shape == (0, 3)
    x = np.random.default_rng(2).standard_normal(4)
    out = d.forward_batch(np.vstack([x, x]))
    assert np.array_equal(out[0], out[1])


def test_forward_rejects_bad_input():
    d = mlp_dict()
    with pytest.raises(NumericError):
        d.forward_batch(np.array([[np.nan, 0, 0, 0]]))
    with pytest.raises(ContractError):
        d.forward_batch(np.zeros((2, 5)))
    with pytest.raises(ContractError):
        d.forward(np.zeros(3))


def test_zero_upstream_zero_gradient():
    d = mlp_dict()
    X = np.random.default_rng(0).standard_normal((5, 4))
    g = d.backward_flat(X, np.zeros((5, 3)))
    assert np.all(g == 0.0)


def test_linear_gradient_equals_input():
    d = init_dictionary([RepresenterSpec("linear", 3)], RandomStream(0))
    x = np.array([[1.5, -2.0, 0.25]])
    assert np.array_equal(d.backward(x, np.array([[1.0]]))[0], x[0])


def test_backward_rejects_bad_upstream():
    d = mlp_dict()
    with pytest.raises(ContractError):
        d.backward_flat(np.zeros((2, 4)), np.zeros((2, 2)))


@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
@pytest.mark.parametrize("trial", range(10))
def test_mlp_gradient_matches_finite_differences(trial, activation):
    gen = np.random.default_rng(100 + trial)
    d = mlp_dict(p=3, D=2, hidden=4, seed=trial, activation=activation)
    X = gen.standard_normal((7, 3))
    U = gen.standard_normal((7, 2))
    f = lambda w: float(np.sum(U * d.with_params(w).forward_batch(X)))
    assert check_gradient(f, d.params.copy(), d.backward_flat(X, U)) < 1e-5


def test_linear_gradient_matches_finite_differences():
    gen = np.random.default_rng(9)
    d = init_dictionary(dictionary_specs("linear", 4, 3), RandomStream(1))
    X, U = gen.standard_normal((6, 4)), gen.standard_normal((6, 3))
    f = lambda w: float(np.sum(U * d.with_params(w).forward_batch(X)))
    assert check_gradient(f, d.params.copy(), d.backward_flat(X, U)) < 1e-5


def test_frozen_representers_get_no_gradient():
    spec = RepresenterSpec("linear", 2, trainable=False, weights=(1.0, 2.0))
    d = init_dictionary([spec, RepresenterSpec("linear", 2)], RandomStream(0))
    g = d.backward(np.ones((3, 2)), np.ones((3, 2)))
    assert g[0].size == 0 and g[1].size == 2
    assert d.representer_params(0).tolist() == [1.0, 2.0]


def test_tanh_output_bound():
    d = mlp_dict(D=4, seed=3)
    X = np.random.default_rng(3).standard_normal((500, 4)) * 20
    out = d.forward_batch(X)
    for j in range(4):
        assert np.abs(out[:, j]).max() <= d.output_bound(j) + 1e-12


def test_permuting_specs_permutes_outputs():
    specs = dictionary_specs("mixed", 4, 6, hidden=3)
    d = init_dictionary(specs, RandomStream(0))
    perm = [5, 0, 3, 1, 4, 2]
    dp = init_dictionary([specs[i] for i in perm], RandomStream(0))
    X = np.random.default_rng(0).standard_normal((8, 4))
    assert np.array_equal(d.forward_batch(X)[:, perm], dp.forward_batch(X))


def test_view_reads_slice_only():
    spec = RepresenterSpec("linear", 5, view=(2, 4), weights=(1.0, -1.0))
    d = init_dictionary([spec], RandomStream(0))
    assert d.forward(np.array([9.0, 9.0, 3.0, 1.0, 9.0])).tolist() == [2.0]
    with pytest.raises(ConfigError):
        RepresenterSpec("linear", 5, view=(3, 7))


def test_checkpoint_round_trip_is_bit_exact():
    d = init_dictionary(dictionary_specs("mixed", 5, 6, hidden=3), RandomStream(11))
    back = RepresenterDictionary.from_dict(json.loads(json.dumps(d.to_dict())))
    assert np.array_equal(back.params, d.params)
    assert back.specs == d.specs


def test_dictionary_is_immutable():
    d = mlp_dict()
    with pytest.raises(ValueError):
        d.params[0] = 1.0
    d2 = d.with_trainable(np.zeros(d.trainable_index.size))
    assert not np.array_equal(d.params, d2.params)


def test_unknown_family_and_bad_identity():
    with pytest.raises(ConfigError):
        RepresenterSpec("conv", 3)
    with pytest.raises(ConfigError):
        RepresenterSpec("identity", 3, index=3)
