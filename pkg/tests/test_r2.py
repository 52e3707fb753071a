import json

import numpy as np
import pytest
from conftest import make_dataset
from oracles import cd_lasso, least_squares

from r2learn import r2
from r2learn.data import MultiSourceDataset, SourceData
from r2learn.errors import ConfigError, ContractError, DataError, NumericError
from r2learn.numerics import RandomStream, check_gradient
from r2learn.penalties import SipParams, integrativeness_exact
from r2learn.representers import RepresenterSpec, dictionary_specs, init_dictionary

LASSO_SCHEDULE = dict(theta_steps_per_round=0, beta_steps_per_round=1, rounds=4000,
                      lr_beta=0.2, lr_decay=0.996)


def identity_model(B, p):
    d = init_dictionary(dictionary_specs("identity", p), RandomStream(0))
    return r2.R2Model(d, np.asarray(B, dtype=float))


def single_source(X, y, split="train"):
    return MultiSourceDataset([SourceData(X, y)], split=split)


def test_predict_examples():
    m = identity_model(np.zeros((2, 3)), 3)
    assert r2.predict(m, 1, [5.0, -2.0, 1.0]) == 0.0
    m = identity_model([[1.0, 0.0, 0.0]], 3)
    assert r2.predict(m, 0, [7.0, 8.0, 9.0]) == 7.0
    m = identity_model([[2.0, -1.0]], 2)
    assert r2.predict(m, 0, [3.0, 4.0]) == 2.0
    with pytest.raises(ContractError):
        r2.predict(m, 1, [3.0, 4.0])


def test_empirical_risk_examples():
    data = make_dataset(S=3, n=10, p=4, noise=0.0)
    zero = identity_model(np.zeros((3, 4)), 4)
    cfg = r2.TrainConfig(lambda1=0.0, sip=SipParams(0.1, 0.0))
    null = np.mean([np.mean(s.y ** 2) for s in data.sources])
    assert r2.empirical_risk(zero, data, cfg) == pytest.approx(null, rel=1e-14)
    cfg2 = cfg.replace(sip={"lambda2": 0.7})
    assert r2.empirical_risk(zero, data, cfg2) == pytest.approx(null + 0.7 * 4, rel=1e-14)
    # perfect fit: responses generated by the identity model itself
    gen = np.random.default_rng(0)
    B = gen.standard_normal((2, 3))
    srcs = []
    for s in range(2):
        X = gen.standard_normal((8, 3))
        srcs.append(SourceData(X, X @ B[s]))
    assert r2.empirical_risk(identity_model(B, 3), MultiSourceDataset(srcs), cfg) == pytest.approx(0, abs=1e-28)


def test_cross_entropy_risk():
    X = np.array([[1.0], [-1.0]])
    data = single_source(X, np.array([1.0, 0.0]))
    m = r2.R2Model(identity_model([[0.0]], 1).dictionary, np.zeros((1, 1)), "cross_entropy")
    cfg = r2.TrainConfig(lambda1=0.0, loss="cross_entropy")
    assert r2.empirical_risk(m, data, cfg) == pytest.approx(np.log(2.0), rel=1e-14)


def test_empty_source_rejected():
    with pytest.raises((ConfigError, DataError)):
        data = MultiSourceDataset([SourceData(np.zeros((0, 2)), np.zeros(0))])
        r2.fit(data, dictionary_specs("identity", 2), r2.TrainConfig(rounds=1))


def test_huge_lambda1_zeroes_coefficients():
    data = make_dataset(S=2, n=30, p=3)
    m = identity_model(np.full((2, 3), 0.5), 3)
    cfg = r2.TrainConfig(lambda1=1e6, lr_beta=0.05)
    state = None
    for _ in range(3):
        B, state = r2.beta_step(m, data, cfg, state)
        m = r2.R2Model(m.dictionary, B)
    assert np.all(m.coefficients == 0.0)
    B, state = r2.beta_step(m, data, cfg, state)
    assert np.all(B == 0.0)


def test_least_squares_oracle():
    gen = np.random.default_rng(1)
    X = gen.standard_normal((200, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + 0.3 * gen.standard_normal(200)
    cfg = r2.TrainConfig(lambda1=0.0, **LASSO_SCHEDULE)
    model, _ = r2.fit(single_source(X, y), dictionary_specs("identity", 3), cfg)
    assert np.max(np.abs(model.coefficients[0] - least_squares(X, y))) < 1e-4


def test_lasso_oracle_5x3():
    gen = np.random.default_rng(2)
    X = gen.standard_normal((5, 3))
    y = X @ np.array([1.5, 0.0, -0.7]) + 0.2 * gen.standard_normal(5)
    lam = 0.3
    cfg = r2.TrainConfig(lambda1=lam, **LASSO_SCHEDULE)
    model, _ = r2.fit(single_source(X, y), dictionary_specs("identity", 3), cfg)
    assert np.max(np.abs(model.coefficients[0] - cd_lasso(X, y, lam))) < 1e-4


def test_theta_step_null_learners():
    data = make_dataset(S=2, n=20, p=3)
    d = init_dictionary(dictionary_specs("mlp", 3, 4, hidden=3), RandomStream(0))
    m = r2.R2Model(d, np.zeros((2, 4)))
    assert np.all(r2.theta_gradient(m, data) == 0.0)
    new, _ = r2.theta_step(m, data, r2.TrainConfig())
    assert np.array_equal(new.params, d.params)


def test_single_linear_gradient_by_hand():
    gen = np.random.default_rng(4)
    X, y = gen.standard_normal((12, 3)), gen.standard_normal(12)
    data = single_source(X, y)
    d = init_dictionary([RepresenterSpec("linear", 3)], RandomStream(3))
    beta = 0.8
    m = r2.R2Model(d, np.array([[beta]]))
    f = X @ d.params * beta
    by_hand = 2.0 / 12 * ((f - y) * beta) @ X
    g = r2.theta_gradient(m, data)
    assert np.allclose(g, by_hand, rtol=1e-13, atol=1e-14)
    risk = lambda w: r2.predictive_risk(r2.R2Model(d.with_params(w), m.coefficients), data)
    assert check_gradient(risk, d.params.copy(), g) < 1e-5


@pytest.mark.parametrize("loss", ["squared", "cross_entropy"])
def test_theta_gradient_finite_differences(loss):
    for trial in range(10):
        gen = np.random.default_rng(trial)
        data = make_dataset(S=2, n=15, p=3, seed=trial)
        if loss == "cross_entropy":
            data = data.with_sources([SourceData(s.X, (s.y > 0).astype(float)) for s in data.sources])
        d = init_dictionary(dictionary_specs("mixed", 3, 3, hidden=3), RandomStream(trial))
        m = r2.R2Model(d, gen.standard_normal((2, 3)), loss)
        risk = lambda w: r2.predictive_risk(r2.R2Model(d.with_params(w), m.coefficients, loss), data)
        full = np.zeros(d.params.size)
        full[d.trainable_index] = r2.theta_gradient(m, data)
        assert check_gradient(risk, d.params.copy(), full) < 1e-5


def test_theta_step_descends():
    non_increase = 0
    for trial in range(20):
        gen = np.random.default_rng(50 + trial)
        data = make_dataset(S=2, n=25, p=3, seed=trial)
        d = init_dictionary(dictionary_specs("mixed", 3, 4, hidden=4), RandomStream(trial))
        m = r2.R2Model(d, gen.standard_normal((2, 4)))
        before = r2.predictive_risk(m, data)
        new, _ = r2.theta_step(m, data, r2.TrainConfig(lr_theta=1e-3))
        non_increase += r2.predictive_risk(r2.R2Model(new, m.coefficients), data) <= before
    assert non_increase >= 18


def _quick_cfg(**kw):
    base = dict(rounds=15, lambda1=0.01, sip=SipParams(0.1, 0.05), lr_theta=0.01, lr_beta=0.02)
    base.update(kw)
    return r2.TrainConfig(**base)


def test_fit_is_deterministic():
    data, val = make_dataset(seed=1), make_dataset(seed=2, split="validation")
    specs = dictionary_specs("mixed", 4, 6, hidden=3)
    a, ta = r2.fit(data, specs, _quick_cfg(seed=3), validation=val)
    b, tb = r2.fit(data, specs, _quick_cfg(seed=3), validation=val)
    assert np.array_equal(a.coefficients, b.coefficients)
    assert np.array_equal(a.dictionary.params, b.dictionary.params)
    assert ta.rows == tb.rows
    c, _ = r2.fit(data, specs, _quick_cfg(seed=4), validation=val)
    assert not np.array_equal(a.dictionary.params, c.dictionary.params)


def test_trace_and_early_stopping(tmp_path):
    data, val = make_dataset(seed=1), make_dataset(seed=2, split="validation")
    cfg = _quick_cfg(rounds=200, early_stop_patience=3, lr_theta=0.2, lr_beta=0.2)
    model, trace = r2.fit(data, dictionary_specs("mlp", 4, 5, hidden=6), cfg, validation=val)
    vr = trace.column("val_risk")
    assert trace.best_round == int(np.argmin(vr)) + 1
    assert r2.predictive_risk(model, val) == pytest.approx(vr.min(), rel=1e-12)
    trace.to_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "round,train_risk,val_risk,sip_exact,complexity_stat"


def test_callback_sees_every_round():
    seen = []
    r2.fit(make_dataset(), dictionary_specs("linear", 4, 3), _quick_cfg(rounds=4),
           callback=lambda rnd, model, row: seen.append((rnd, model.S)))
    assert seen == [(1, 3), (2, 3), (3, 3), (4, 3)]


def test_divergence_guard():
    gen = np.random.default_rng(0)
    X = gen.standard_normal((20, 2)) * 1e4
    data = single_source(X, X @ np.array([1e3, -1e3]))
    with pytest.raises(NumericError) as err:
        r2.fit(data, dictionary_specs("mlp", 2, 2, hidden=2),
               r2.TrainConfig(rounds=5, lambda1=0.0, lr_theta=10.0, lr_beta=10.0))
    assert "trace" in err.value.diagnostics


def test_minibatch_runs_and_is_seeded():
    data = make_dataset(n=50)
    cfg = _quick_cfg(rounds=5, batch_size=10, seed=1)
    a, _ = r2.fit(data, dictionary_specs("mixed", 4, 3, hidden=2), cfg)
    b, _ = r2.fit(data, dictionary_specs("mixed", 4, 3, hidden=2), cfg)
    assert np.array_equal(a.coefficients, b.coefficients)


def test_retrieved_set():
    m = identity_model([[0.0, 0.5, 0.0], [0.0, 0.0, 0.0], [1.0, -2.0, 0.0]], 3)
    assert r2.retrieved_set(m, 0) == {1}
    assert r2.retrieved_set(m, 1) == set()
    counts = np.zeros(3, dtype=int)
    for s in range(3):
        for d in r2.retrieved_set(m, s):
            counts[d] += 1
    assert counts.tolist() == integrativeness_exact(m.coefficients).tolist()


def test_checkpoint_round_trip(tmp_path):
    model, _ = r2.fit(make_dataset(), dictionary_specs("mixed", 4, 6, hidden=3), _quick_cfg(rounds=3))
    r2.save_model(model, tmp_path / "m.json")
    back = r2.load_model(tmp_path / "m.json")
    assert np.array_equal(back.coefficients, model.coefficients)
    assert np.array_equal(back.dictionary.params, model.dictionary.params)
    assert back.config == model.config
    assert json.loads((tmp_path / "m.json").read_text())["schema"] == "r2learn.model/1"


def test_load_model_rejects_garbage(tmp_path):
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(DataError):
        r2.load_model(tmp_path / "bad.json")
    with pytest.raises(DataError):
        r2.load_model(tmp_path / "missing.json")


def test_train_config_validation():
    with pytest.raises(ConfigError):
        r2.TrainConfig(lambda1=-1.0)
    with pytest.raises(ConfigError):
        r2.TrainConfig(rounds=0)
    with pytest.raises(ConfigError):
        r2.TrainConfig.from_dict({"lamda1": 0.1})
    with pytest.raises(ConfigError):
        r2.TrainConfig(loss="hinge")
    cfg = r2.TrainConfig(lambda1=[0.1, 0.2])
    assert r2.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        cfg.lambda1_for(3)


def test_sip_rejected_for_single_source():
    X = np.ones((4, 2))
    with pytest.raises(ConfigError):
        r2.fit(single_source(X, X[:, 0]), dictionary_specs("identity", 2),
               r2.TrainConfig(rounds=1, sip=SipParams(0.1, 1.0)))


def test_r2_refuses_masked_data():
    from conftest import make_blockwise
    data = make_blockwise([[True, False], [True, True]])
    with pytest.raises(ContractError):
        r2.fit(data, dictionary_specs("identity", 5), r2.TrainConfig(rounds=1))


def test_larger_lambda2_gives_smaller_sip():
    ok = 0
    for trial in range(25):
        data = make_dataset(S=4, n=30, p=5, seed=trial, noise=0.5)
        specs = dictionary_specs("linear", 5, 8)
        sips = []
        for lam2 in (0.0, 0.1, 1.0):
            cfg = r2.TrainConfig(rounds=60, lambda1=0.02, sip=SipParams(0.1, lam2), lr_theta=0.01,
                                 lr_beta=0.02, seed=trial)
            _, trace = r2.fit(data, specs, cfg)
            sips.append(trace.rows[-1]["sip_exact"])
        ok += bool(np.all(np.diff(sips) <= 1e-12))
    assert ok >= 20
