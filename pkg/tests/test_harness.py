import csv
import io
import json
from dataclasses import asdict, replace

import numpy as np
import pytest

from fdglab import domains as D
from fdglab import harness as H
from fdglab.errors import CheckpointError, ConfigurationError, ExperimentError
from fdglab.model import ModelSpec, build_model, save_checkpoint

TINY_MODEL = {**asdict(ModelSpec()), "blocks": [(4, 2), (8, 2)], "feature_dim": 8, "replace_depth": 2}


@pytest.fixture
def tiny(tmp_path):
    H.clear_cache()
    return H.ExperimentConfig(model=dict(TINY_MODEL), rounds=2, n_per_domain=24, seeds=[0],
                              output_dir=str(tmp_path / "out"))


def read_csv(path):
    return list(csv.reader(io.StringIO(path.read_text())))


# config ------------------------------------------------------------------

def test_config_json_roundtrip_and_unknown_keys(tmp_path):
    cfg = H.ExperimentConfig(lam=0.25, seeds=[4])
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert H.ExperimentConfig.from_json(path) == cfg
    path.write_text(json.dumps({"rounds": 3, "learning_rate": 0.1}))
    with pytest.raises(ConfigurationError, match="learning_rate"):
        H.ExperimentConfig.from_json(path)


def test_partial_model_dict_gets_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"replace_depth": 1}}))
    cfg = H.ExperimentConfig.from_json(path)
    assert cfg.model_spec().replace_depth == 1 and cfg.model_spec().feature_dim == 64


@pytest.mark.parametrize("bad", [dict(seeds=[]), dict(rounds=0), dict(lr=0.0), dict(norm_scheme="GN"),
                                 dict(regularizer="PROX", mu=0.0), dict(loss_reduction="max")])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        replace(H.ExperimentConfig(), **bad).validate()


def test_method_labels():
    base = H.ExperimentConfig()
    assert replace(base, norm_scheme="BN", regularizer="NONE").label() == "FedAvg"
    assert replace(base, regularizer="NONE").label() == "PerXAN"
    assert base.label() == "gPerXAN(lambda=0.5)"
    assert replace(base, lam=0.0).label() == "PerXAN"
    assert replace(base, regularizer="PROX", mu=0.01).label() == "PerXAN+FedProx(mu=0.01)"


def test_result_row_range():
    with pytest.raises(ValueError):
        H.ResultRow("x", 0, 0, 101.0, 1, 50.0, "h")


# runs --------------------------------------------------------------------

def test_untrained_equivalent_is_chance(tiny):
    cfg = replace(tiny, model=asdict(ModelSpec()), epochs=0, rounds=1, n_per_domain=1000, held_out=3)
    accs = [H.run_single(cfg, 3, s).row.test_acc for s in range(3)]
    assert abs(np.mean(accs) - 25.0) <= 5.0


def test_selection_ties_go_to_earliest_round(tiny):
    res = H.run_single(replace(tiny, epochs=0, rounds=3), 0, 0)
    assert res.row.selection_round == 1
    assert res.history[0].mean_val_acc == res.history[2].mean_val_acc


def test_rotation_row_count(tiny):
    rows = H.run_experiment(replace(tiny, rounds=1, seeds=[0, 1, 2]), write_checkpoints=False)
    assert len(rows) == 12
    assert sorted({(r.held_out, r.seed) for r in rows}) == [(h, s) for h in range(4) for s in range(3)]


def test_run_experiment_outputs_are_byte_identical(tiny, tmp_path):
    def once(sub):
        H.clear_cache()
        cfg = replace(tiny, output_dir=str(tmp_path / sub), held_out=[1, 3])
        H.run_experiment(cfg)
        out = tmp_path / sub
        return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    a, b = once("a"), once("b")
    assert a == b
    assert "results.csv" in a and "rounds.csv" in a and len([k for k in a if k.endswith(".bin")]) == 4
    header = read_csv(tmp_path / "a" / "results.csv")[0]
    assert tuple(header) == H.RESULT_FIELDS
    rounds = read_csv(tmp_path / "a" / "rounds.csv")
    assert tuple(rounds[0]) == H.ROUND_FIELDS and len(rounds) == 1 + 2 * 2 * 3


def test_unwritable_output_dir(tiny, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExperimentError):
        H.run_experiment(replace(tiny, output_dir=str(blocker / "sub"), held_out=0, rounds=1))


def test_lambda_sweep(tiny, tmp_path):
    suite = H.lambda_sweep(replace(tiny, held_out=[0, 2]))
    assert [s.weight for s in suite] == list(H.LAMBDA_GRID)
    rows = read_csv(tmp_path / "out" / "sweep.csv")
    assert len(rows) == 6 and rows[0][:2] == ["schema", "lambda"]
    for row in rows[1:]:
        per = [float(v) for v in row[3:-1]]
        assert float(row[-1]) == pytest.approx(np.mean(per), abs=1e-4)  # printed at 4 decimals
    for s in suite:
        assert s.avg == pytest.approx(np.mean(s.per_domain), abs=1e-9)
    none = [H.run_single(replace(tiny, regularizer="NONE"), h, 0, use_cache=False).row.test_acc for h in (0, 2)]
    assert suite[0].per_domain == none


def test_best_lambda_tie_break():
    mk = lambda w, a: H.SuiteRow("", "XAN", "GUIDING", w, [], a, "", [])
    assert H.best_lambda([mk(0.0, 50), mk(0.25, 60), mk(0.5, 60), mk(1.0, 10)]) == 0.25


def test_ablation_suite(tiny, tmp_path):
    cfg = replace(tiny, held_out=1, rounds=1)
    suite = H.ablation_suite(cfg, lam=0.5)
    assert [s.arm for s in suite] == list(H.ABLATION_ARMS)
    assert len({s.data_hash for s in suite}) == 1
    fedavg = H.run_single(replace(cfg, norm_scheme="BN", regularizer="NONE"), 1, 0).row
    assert suite[0].arm == "BN+NONE" and suite[0].rows[0].test_acc == fedavg.test_acc
    assert len(read_csv(tmp_path / "out" / "ablation.csv")) == 9


def test_prox_comparison(tiny, tmp_path):
    cfg = replace(tiny, held_out=2, rounds=2)
    suite = H.fedprox_comparison(cfg, mu_grid=(0.01,), lam=0.5)
    assert [s.regularizer for s in suite] == ["NONE", "PROX", "GUIDING"]
    assert len({s.data_hash for s in suite}) == 1
    assert len(read_csv(tmp_path / "out" / "prox.csv")) == 4
    with pytest.raises(ConfigurationError):
        H.fedprox_comparison(replace(cfg, norm_scheme="BN"), lam=0.5)


def test_vanishing_prox_matches_none(tiny):
    cfg = replace(tiny, model=asdict(ModelSpec()), n_per_domain=120, rounds=3, held_out=0)
    none = H.run_single(replace(cfg, regularizer="NONE"), 0, 0).row.test_acc
    tiny_mu = H.run_single(replace(cfg, regularizer="PROX", mu=1e-12), 0, 0).row.test_acc
    assert abs(none - tiny_mu) < 0.5


# cost --------------------------------------------------------------------

def test_cost_examples():
    assert H.cost_model("GPERXAN", 1000, 3, 7, 2) == H.CostReport("GPERXAN", 1000, 1000, 1042)
    assert H.cost_model("COPA", 1000, 3, 7, 2) == H.CostReport("COPA", 1084, 1084, 1084)
    assert H.cost_model("FEDAVG", 17, 2, 3, 4) == H.CostReport("FEDAVG", 17, 17, 17)
    assert H.cost_model("FEDDG_GA", 17, 2, 3, 4) == H.CostReport("FEDDG_GA", 34, 17, 34)


def test_cost_monotone_and_at_least_r(rng):
    for _ in range(300):
        args = [int(v) for v in rng.integers(1, 500, size=4)]
        for m in H.COST_METHODS:
            base = H.cost_model(m, *args)
            assert min(base.memory, base.communication, base.computation) >= args[0]
            for i in range(4):
                bumped = list(args)
                bumped[i] += int(rng.integers(1, 50))
                more = H.cost_model(m, *bumped)
                assert more.memory >= base.memory and more.communication >= base.communication
                assert more.computation >= base.computation


def test_cost_errors():
    with pytest.raises(ConfigurationError):
        H.cost_model("SCAFFOLD", 1, 1, 1, 1)
    with pytest.raises(ConfigurationError):
        H.cost_model("FEDAVG", 0, 1, 1, 1)


def test_instrumented_uplink_is_r(tiny):
    res = H.run_single(replace(tiny, held_out=0), 0, 0, use_cache=False)
    r = build_model(replace(tiny, held_out=0).model_spec(), 0).num_params()
    for rlog in res.history:
        assert set(rlog.received.values()) == {r}
        assert all(v < r for v in rlog.sent.values())


# export ------------------------------------------------------------------

def test_export_features(tmp_path):
    spec = ModelSpec(**TINY_MODEL)
    model = build_model(spec, 0)
    data = D.generate_domain(D.load_preset()[1], 10, 4, 16, seed=0)
    save_checkpoint(model, tmp_path / "m.bin")
    D.save_domain(data, tmp_path / "d.bin")
    out = tmp_path / "f.csv"
    text = H.export_features(tmp_path / "m.bin", tmp_path / "d.bin", out)
    rows = read_csv(out)
    assert len(rows) == 11 and len(rows[0]) == spec.feature_dim + 2
    assert rows[0][-2:] == ["label", "domain_id"]
    feats = np.array([[float(v) for v in r[:-2]] for r in rows[1:]])
    np.testing.assert_array_equal(feats, model.features(data.images).data)
    assert H.export_features(tmp_path / "m.bin", tmp_path / "d.bin") == text


def test_export_schema_mismatch(tmp_path):
    model = build_model(ModelSpec(**TINY_MODEL), 0)
    data = D.generate_domain(D.load_preset()[0], 8, 4, 12, seed=0)
    with pytest.raises(CheckpointError):
        H.export_features(model, data)
