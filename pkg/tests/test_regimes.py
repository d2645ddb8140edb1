import numpy as np
import pytest

from fedper import nn
from fedper.cohort import Client, Cohort, CohortSpec, generate_cohort
from fedper.errors import RejectedInputError
from fedper.federation import FederationConfig
from fedper.regimes import (
    ModelConfig, ProtocolConfig, first_step_identical, prepare_client, run_regime, run_seed,
)

FED = FederationConfig(lr=0.05, batch_size=16)
PROTO = ProtocolConfig(n_per_class=12, max_epochs=2, pretrain_epochs=2)
MODEL = ModelConfig(filters=(2, 4, 4), dense_units=8, dtype="float32")


def tiny(n_test=3, sessions="2-4", seed=0, **kw):
    return generate_cohort(CohortSpec(n_pretrain_clients=2, n_test_clients=n_test, sessions_per_client=sessions,
                                      frames_per_session="20-30", image_size=16, seed=seed, **kw))


@pytest.fixture(scope="module")
def seed_result():
    return run_seed(tiny(), 0, ("RND", "BCDL", "CDL", "LDL", "FDL", "PFDL"), FED, PROTO, MODEL)


def test_prepare_client_shapes():
    c = tiny().test[0]
    p = prepare_client(c, PROTO, 0)
    for s in c.sessions:
        ps = p.sessions[s.session_index]
        assert ps.test.x.shape == (len(s), 14, 14, 1) and len(ps.test_ids) == len(s)
        counts = np.bincount(ps.train.y, minlength=2)
        assert ps.degenerate or counts.tolist() == [12, 12]
        assert ps.val.x.max() <= 1.0 and ps.train.x.min() >= 0.0
        assert all(fid[:2] == (c.client_id, s.session_index) for fid in ps.train_ids)


def test_prepare_client_deterministic():
    c = tiny().test[0]
    a, b = prepare_client(c, PROTO, 3), prepare_client(c, PROTO, 3)
    for i in a.sessions:
        assert a.sessions[i].train.x.tobytes() == b.sessions[i].train.x.tobytes()


def test_first_step_matches_bcdl(seed_result):
    assert first_step_identical(seed_result)
    base = seed_result.regimes["BCDL"].predictions
    first = min(k[0] for k in base)
    keys = [k for k in base if k[0] == first]
    assert keys
    for name in ("CDL", "LDL", "FDL", "PFDL"):
        for k in keys:
            assert seed_result.regimes[name].predictions[k].tobytes() == base[k].tobytes()


def test_adapted_regimes_move_after_training(seed_result):
    base = seed_result.regimes["BCDL"].predictions
    later = [k for k in base if k[0] > 1]
    assert later
    for name in ("CDL", "LDL", "FDL", "PFDL"):
        preds = seed_result.regimes[name].predictions
        assert any(not np.array_equal(preds[k], base[k]) for k in later)


def test_no_leakage(seed_result):
    for r in seed_result.regimes.values():
        assert all(n == 0 for _, _, n in r.leaks)


def test_audits(seed_result):
    pf = seed_result.regimes["PFDL"]
    assert pf.audit.violations == 0 and not pf.audit.full_theta_shared
    assert seed_result.regimes["FDL"].audit.full_theta_shared
    assert pf.freeze_checks and all(a == b == c for a, b, c in pf.freeze_checks)
    assert seed_result.regimes["LDL"].audit is None


def test_rows_per_test_assignment(seed_result):
    cohort = tiny()
    expected = sum(max(len(c.sessions) - 1, 1) for c in cohort.test)
    for r in seed_result.regimes.values():
        assert len(r.rows) == expected


def test_rnd_is_unaffected_by_pretraining():
    a = run_seed(tiny(), 1, ("RND",), FED, PROTO, MODEL).regimes["RND"]
    b = run_seed(tiny(), 1, ("RND", "BCDL"), FED, PROTO, MODEL).regimes["RND"]
    assert all(a.predictions[k].tobytes() == b.predictions[k].tobytes() for k in a.predictions)


def test_rnd_on_balanced_test_is_chance():
    cohort = tiny(n_test=4, sessions="2", positive_rate_range=(0.3, 0.5))
    proto = ProtocolConfig(n_per_class=30, balanced_test=True)
    accs = []
    for seed in range(10):
        res = run_seed(cohort, seed, ("RND",), FED, proto, MODEL)
        accs += [row["acc"] for row in res.regimes["RND"].rows]
    assert abs(np.mean(accs) - 0.5) <= 0.05


def test_pfdl_full_share_without_finetune_equals_fdl():
    cohort = tiny()
    crop = 14
    model = MODEL.build(crop)
    clients = [prepare_client(c, PROTO, 0, crop) for c in cohort.test]
    theta = nn.init_params(model, np.random.default_rng(0))
    fed = FederationConfig(lr=0.05, batch_size=16, finetune_epochs=0, finetune_decay=1.0)
    a = run_regime("FDL", model, clients, fed, PROTO, theta, theta, 0)
    b = run_regime("PFDL", model, clients, fed, PROTO, theta, theta, 0, shared_len=model.n_params)
    assert np.max(np.abs(a.server.w_g - b.server.w_g)) <= 1e-9
    for k in a.predictions:
        assert np.max(np.abs(a.predictions[k] - b.predictions[k])) <= 1e-9


def test_single_session_client_never_adapted():
    cohort = tiny()
    solo = cohort.test[0]
    cohort.test[0] = Client(solo.client_id, solo.sessions[:1])
    res = run_seed(cohort, 0, ("BCDL", "LDL", "PFDL"), FED, PROTO, MODEL)
    for name in ("LDL", "PFDL"):
        keys = [k for k in res.regimes[name].predictions if k[1] == solo.client_id]
        assert keys == [(1, solo.client_id)]
        assert res.regimes[name].predictions[keys[0]].tobytes() == \
            res.regimes["BCDL"].predictions[keys[0]].tobytes()


def test_ldl_clients_are_isolated():
    cohort = tiny()
    other = tiny(seed=9)
    mixed = Cohort(cohort.pretrain, [cohort.test[0]] + other.test[1:])
    a = run_seed(cohort, 0, ("LDL",), FED, PROTO, MODEL).regimes["LDL"]
    b = run_seed(mixed, 0, ("LDL",), FED, PROTO, MODEL).regimes["LDL"]
    cid = cohort.test[0].client_id
    for k in a.predictions:
        if k[1] == cid:
            assert a.predictions[k].tobytes() == b.predictions[k].tobytes()


def test_empty_test_cohort_rejected():
    with pytest.raises(RejectedInputError):
        run_seed(Cohort(tiny().pretrain, []), 0, ("RND",), FED, PROTO, MODEL)


def test_unknown_regime_rejected():
    model = MODEL.build(14)
    clients = [prepare_client(c, PROTO, 0, 14) for c in tiny().test]
    theta = nn.init_params(model, np.random.default_rng(0))
    with pytest.raises(RejectedInputError):
        run_regime("XYZ", model, clients, FED, PROTO, theta, theta, 0)


def test_fault_injection_reaches_audit():
    res = run_seed(tiny(), 0, ("PFDL",), FED, PROTO, MODEL, inject_fault=True)
    assert res.regimes["PFDL"].audit.violations >= 1
