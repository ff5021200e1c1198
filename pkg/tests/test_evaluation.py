import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dastkit.attacks import AttackConfig
from dastkit.dast import EvalPoint, TrainingTrace
from dastkit.datasets import synthetic_bars
from dastkit.engine import ConfigurationError
from dastkit.evaluation import (Agreement, AttackReport, EligibleSet,
                                EmptyEligibleSetError, agreement,
                                attack_success_rate, eligible_set,
                                export_curves, format_table,
                                random_sign_baseline, write_report_json)
from dastkit.nets import ClassifierModel, Dense, build_classifier, train_classifier
from dastkit.oracle import LocalOracle, OracleMode, QueryLedger


def _linear_victim(weight, bias=None):
    """2-input linear classifier wrapped with oracle metadata."""
    w = np.asarray(weight, dtype=np.float32)
    layer = Dense(w.shape[0], w.shape[1], np.random.default_rng(0))
    layer.weight.data[...] = w
    layer.bias.data[...] = 0.0 if bias is None else bias
    return ClassifierModel([layer], "small", (w.shape[0],), w.shape[1])


def _halfplane_data(n=100, seed=0):
    """Points in the unit square; class 1 iff x0 + x1 > 1."""
    rng = np.random.default_rng(seed)
    x = rng.random((n, 2), dtype=np.float32)
    y = (x.sum(axis=1) > 1.0).astype(np.int64)
    return x, y


def _perfect_victim():
    # z1 - z0 = 2 (x0 + x1 - 1): agrees with the half-plane labels everywhere
    return _linear_victim([[-1.0, 1.0], [-1.0, 1.0]], bias=[1.0, -1.0])


# ----------------------------------------------------------- eligibility

def test_eligible_set_keeps_all_victim_correct_samples():
    x, y = _halfplane_data()
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y))
    assert len(es) == len(x)
    assert (es.victim_labels == es.labels).all()


def test_eligible_set_drops_victim_mistakes():
    x, y = _halfplane_data()
    wrong = y.copy()
    wrong[:10] = 1 - wrong[:10]  # poison 10 true labels
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, wrong))
    assert len(es) == len(x) - 10


def test_targeted_eligibility_excludes_target_class():
    x, y = _halfplane_data()
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y), targeted=True, target_label=1)
    assert len(es) == int((y == 0).sum())
    assert (es.victim_labels != 1).all()


def test_constant_victim_empties_targeted_set():
    x, y = _halfplane_data()
    always_one = _linear_victim([[0.0, 0.0], [0.0, 0.0]], bias=[0.0, 1.0])
    oracle = LocalOracle(always_one, OracleMode.LABEL_ONLY)
    with pytest.raises(EmptyEligibleSetError, match="disqualified"):
        eligible_set(oracle, (x, y), targeted=True, target_label=1)


def test_eligible_set_guards_protocol():
    x, y = _halfplane_data(n=4)
    with pytest.raises(ConfigurationError, match="victim-misclassified"):
        EligibleSet(x=x, labels=y, victim_labels=1 - y, targeted=False)


# ---------------------------------------------------------- success rate

def test_zero_radius_attack_never_succeeds():
    x, y = _halfplane_data()
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y))
    report = attack_success_rate(_perfect_victim(), oracle, es,
                                 AttackConfig("fgsm", epsilon=0.0), "DaST-L")
    assert report.n == 0 and report.success_rate == 0.0
    assert report.mean_l2 == 0.0


def test_everything_flips_when_attack_clears_the_margin():
    # all samples sit 0.05 under the boundary; a 0.1 full step crosses it
    x = np.column_stack([np.full(20, 0.45, dtype=np.float32),
                         np.full(20, 0.5, dtype=np.float32)])
    y = np.zeros(20, dtype=np.int64)
    victim = _perfect_victim()
    oracle = LocalOracle(victim, OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y))
    report = attack_success_rate(victim, oracle, es,
                                 AttackConfig("fgsm", epsilon=0.1), "DaST-L")
    assert report.success_rate == 1.0
    assert report.n == report.m == 20


def test_report_matches_brute_force_measurement():
    x, y = _halfplane_data(n=100, seed=3)
    victim = _perfect_victim()
    # substitute with a tilted boundary: close, not identical
    substitute = _linear_victim([[-1.0, 1.0], [-0.6, 0.6]], bias=[0.8, -0.8])
    oracle = LocalOracle(victim, OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y))
    config = AttackConfig("bim", epsilon=0.15, step_size=0.05, steps=4)
    report = attack_success_rate(substitute, oracle, es, config, "DaST-L")

    # brute force: re-derive n, m, mean_l2 per sample with scalar math
    from dastkit.attacks import bim
    adv = bim(substitute, es.x, es.labels, config)
    n_ref = 0
    dists = []
    wv = victim.layers[0].weight.data
    bv = victim.layers[0].bias.data
    for i in range(len(es)):
        z = [sum(float(adv.adversarial[i, j]) * float(wv[j, c])
                 for j in range(2)) + float(bv[c]) for c in range(2)]
        label = 0 if z[0] >= z[1] else 1
        if label != int(es.labels[i]):
            n_ref += 1
        dists.append(math.sqrt(sum(
            (float(adv.adversarial[i, j]) - float(es.x[i, j])) ** 2
            for j in range(2))))
    assert report.m == len(es)
    assert report.n == n_ref
    assert_allclose(report.mean_l2, sum(dists) / len(dists), rtol=1e-6)
    assert 0.0 <= report.success_rate <= 1.0


def test_targeted_success_counts_exact_hits():
    x, y = _halfplane_data(n=60, seed=4)
    victim = _perfect_victim()
    oracle = LocalOracle(victim, OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y), targeted=True, target_label=1)
    config = AttackConfig("fgsm", epsilon=0.3, targeted=True, target_label=1)
    report = attack_success_rate(victim, oracle, es, config, "DaST-L")
    # epsilon 0.3 moves x0 + x1 by up to 0.6 toward the boundary; samples
    # deeper than that stay class 0
    margins = 1.0 - es.x.sum(axis=1)
    expect = int((margins < 0.6).sum())
    assert report.n == expect
    assert report.targeted


def test_report_validates_counts_and_scenario():
    with pytest.raises(ConfigurationError, match="counts"):
        AttackReport("DaST-P", "fgsm", False, n=5, m=3, mean_l2=0.1,
                     epsilon=0.3, ledger=QueryLedger())
    with pytest.raises(ConfigurationError, match="scenario"):
        AttackReport("unknown", "fgsm", False, n=1, m=3, mean_l2=0.1,
                     epsilon=0.3, ledger=QueryLedger())


def test_report_json_schema():
    ledger = QueryLedger()
    ledger.add(640, "train")
    ledger.add(100, "eval")
    report = AttackReport("DaST-P", "pgd", False, n=30, m=100, mean_l2=1.25,
                          epsilon=0.3, ledger=ledger)
    blob = report.to_json()
    assert set(blob) == {"scenario", "attack", "targeted", "n", "m",
                         "success_rate", "mean_l2", "queries_train",
                         "queries_eval"}
    assert blob["success_rate"] == 0.3
    assert blob["queries_train"] == 640 and blob["queries_eval"] == 100
    assert report.success_rate_exact == (30, 100)


def test_eval_queries_separate_from_train_queries():
    x, y = _halfplane_data()
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    oracle.query(np.zeros((7, 2), dtype=np.float32), phase="train")
    es = eligible_set(oracle, (x, y))
    attack_success_rate(_perfect_victim(), oracle, es,
                        AttackConfig("fgsm", epsilon=0.1), "DaST-L")
    ledger = oracle.snapshot_ledger()
    assert ledger.train_samples == 7
    assert ledger.eval_samples == len(x) + len(es)
    assert ledger.total_samples == ledger.train_samples + ledger.eval_samples


def test_random_sign_baseline_zero_radius_is_zero():
    x, y = _halfplane_data()
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y))
    rate = random_sign_baseline(oracle, es, 0.0, np.random.default_rng(0),
                                clamp=(0.0, 1.0))
    assert rate == 0.0


def test_random_sign_baseline_in_unit_interval():
    x, y = _halfplane_data()
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    es = eligible_set(oracle, (x, y))
    rate = random_sign_baseline(oracle, es, 0.2, np.random.default_rng(1))
    assert 0.0 <= rate <= 1.0


# -------------------------------------------------------------- agreement

def test_agreement_with_self_is_total():
    x, y = _halfplane_data()
    victim = _perfect_victim()
    oracle = LocalOracle(victim, OracleMode.LABEL_ONLY)
    ag = agreement(victim, oracle, x, y)
    assert ag.vs_victim == 1.0
    assert ag.vs_truth == 1.0


def test_agreement_constant_substitute_on_balanced_set():
    n_class = 10
    x = np.random.default_rng(5).random((50, 2), dtype=np.float32)
    y = np.arange(50, dtype=np.int64) % n_class  # balanced by construction
    w = np.zeros((2, n_class), dtype=np.float32)
    bias = np.zeros(n_class, dtype=np.float32)
    bias[4] = 1.0
    constant = _linear_victim(w, bias=bias)
    oracle = LocalOracle(constant, OracleMode.LABEL_ONLY)
    ag = agreement(constant, oracle, x, y)
    assert ag.vs_victim == 1.0  # it agrees with itself
    assert ag.vs_truth == 0.1


def test_untrained_substitute_agreement_near_chance():
    data = synthetic_bars(classes=3, size=12, n_train=240, n_test=120, seed=2)
    victim = build_classifier("small", data.input_shape, 3, seed=0)
    train_classifier(victim, data.train_x, data.train_y, epochs=2,
                     batch_size=32, lr=1e-3, rng=np.random.default_rng(0))
    substitute = build_classifier("small", data.input_shape, 3, seed=11)
    oracle = LocalOracle(victim, OracleMode.LABEL_ONLY)
    ag = agreement(substitute, oracle, data.test_x, data.test_y)
    assert abs(ag.vs_victim - 1.0 / 3.0) < 0.25
    assert ag.vs_truth is not None


def test_agreement_rejects_empty_input():
    oracle = LocalOracle(_perfect_victim(), OracleMode.LABEL_ONLY)
    with pytest.raises(ConfigurationError, match="non-empty"):
        agreement(_perfect_victim(), oracle, np.zeros((0, 2), dtype=np.float32))


# ------------------------------------------------------------ file output

def _trace(points):
    trace = TrainingTrace()
    for i, (samples, acc, att) in enumerate(points):
        ledger = QueryLedger()
        if samples:
            ledger.add(samples, "train")
        trace.add_point(EvalPoint(iteration=i + 1, ledger=ledger, l_d=0.5,
                                  l_g=1.0, l_c=0.9, acc=acc, att=att))
    return trace


def test_export_curves_layout(tmp_path):
    trace = _trace([(64, 0.4, 0.1), (128, 0.5, 0.2), (192, 0.55, 0.25)])
    path = tmp_path / "curves.csv"
    export_curves(trace, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "samples,acc,att"
    assert len(lines) == 4
    assert lines[1] == "64,0.4,0.1"
    samples = [int(line.split(",")[0]) for line in lines[1:]]
    assert samples == sorted(samples)


def test_export_curves_byte_identical(tmp_path):
    trace = _trace([(64, 0.4, 0.1), (128, 0.5, 0.2)])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    export_curves(trace, str(a))
    export_curves(trace, str(b))
    assert a.read_bytes() == b.read_bytes()


def test_export_curves_blank_cells_without_probe(tmp_path):
    trace = _trace([(64, None, None)])
    path = tmp_path / "curves.csv"
    export_curves(trace, str(path))
    assert path.read_text().splitlines()[1] == "64,,"


def test_report_json_file_roundtrip(tmp_path):
    ledger = QueryLedger()
    ledger.add(10, "eval")
    reports = [AttackReport("DaST-P", "fgsm", False, 3, 10, 0.5, 0.3, ledger),
               AttackReport("DaST-L", "bim", True, 2, 10, 0.4, 0.3, ledger,
                            target_label=1)]
    path = tmp_path / "report.json"
    write_report_json(reports, str(path))
    loaded = json.loads(path.read_text())
    assert len(loaded) == 2
    assert loaded[0]["success_rate"] == 0.3
    assert loaded[1]["targeted"] is True


def test_format_table_alignment():
    ledger = QueryLedger()
    reports = [AttackReport("DaST-P", "fgsm", False, 3, 10, 0.5, 0.3, ledger),
               AttackReport("pretrained-baseline", "pgd", True, 2, 10, 0.41,
                            0.3, ledger, target_label=2)]
    table = format_table(reports)
    lines = table.splitlines()
    assert lines[0].startswith("scenario")
    assert len(lines) == 4
    assert "targeted@2" in lines[3]
    assert "0.3000" in lines[2]
