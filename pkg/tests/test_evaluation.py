from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from scalm.audit import AuditFinding, AuditReport, Location
from scalm.errors import EmptyMatrix, ManifestError, MissingPrediction
from scalm.evaluation import (
    ConfusionMatrix,
    LabeledContract,
    classify,
    confusion,
    load_dataset,
    load_predictions,
    metrics,
    metrics_row,
    render_table,
    run_eval,
)
from scalm.swc import SwcId

from oracles import brute_confusion, brute_metrics

S101, S104, S107 = SwcId(101), SwcId(104), SwcId(107)


def report(*findings) -> AuditReport:
    return AuditReport("x.sol", {}, list(findings))


def f(swc: SwcId, title="t", reason="r") -> AuditFinding:
    return AuditFinding(swc, title, "security", "c", Location("x.sol", 1, 1), "Low", reason, "s", 1)


def test_classify_by_id_and_keyword():
    assert classify(report(f(S107)), S107)
    assert not classify(report(), S107)
    assert classify(report(f(S101, reason="State update after the call enables Reentrancy.")), S107)
    assert not classify(report(f(S101, reason="wraps around")), S107)
    assert classify(report(f(SwcId(134), title="Uses DELEGATECALL")), SwcId(112))


def test_confusion_four_contracts():
    labels = [
        LabeledContract("a", frozenset({S107})),
        LabeledContract("b", frozenset({S107})),
        LabeledContract("c", frozenset()),
        LabeledContract("d", frozenset({S107})),
    ]
    cm = confusion({"a": True, "b": True, "c": False, "d": False}, labels, S107)
    assert cm == ConfusionMatrix(tp=2, tn=1, fp=0, fn=1)


def test_confusion_all_correct():
    labels = [LabeledContract(str(i), frozenset({S101}) if i % 2 else frozenset()) for i in range(10)]
    cm = confusion({str(i): bool(i % 2) for i in range(10)}, labels, S101)
    assert cm.fp == cm.fn == 0 and cm.total == 10


def test_confusion_missing_prediction():
    with pytest.raises(MissingPrediction) as exc:
        confusion({"a": True}, [LabeledContract("a"), LabeledContract("b")], S101)
    assert exc.value.path == "b"


def test_metrics_examples():
    m = metrics(ConfusionMatrix(tp=3, tn=5, fp=1, fn=1))
    assert (m.acc, m.recall, m.precision, m.f1) == (0.8, 0.75, 0.75, 0.75)
    m = metrics(ConfusionMatrix(tn=10))
    assert (m.acc, m.recall, m.precision, m.f1) == (1.0, 0.0, 0.0, 0.0)
    m = metrics(ConfusionMatrix(tp=7))
    assert m.acc == m.recall == m.f1 == 1.0
    with pytest.raises(EmptyMatrix):
        metrics(ConfusionMatrix())
    with pytest.raises(ValueError):
        ConfusionMatrix(tp=-1)


_counts = st.tuples(*[st.integers(0, 50)] * 4).filter(lambda c: sum(c) > 0)


@given(_counts)
def test_metrics_match_oracle_and_bounds(c):
    m = metrics(ConfusionMatrix(*c))
    assert (m.acc, m.recall, m.precision, m.f1) == brute_metrics(*c)
    assert all(0.0 <= v <= 1.0 for v in (m.acc, m.recall, m.precision, m.f1))


@given(_counts)
def test_fp_fn_swap(c):
    tp, tn, fp, fn = c
    a = metrics(ConfusionMatrix(tp, tn, fp, fn))
    b = metrics(ConfusionMatrix(tp, tn, fn, fp))
    assert a.acc == b.acc
    assert (a.precision, a.recall) == (b.recall, b.precision)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=200))
def test_confusion_matches_brute_tally(rows):
    labels = [LabeledContract(f"c{i}", frozenset({S104}) if pos else frozenset()) for i, (pos, _) in enumerate(rows)]
    predicted = {f"c{i}": pred for i, (_, pred) in enumerate(rows)}
    positives = {f"c{i}": pos for i, (pos, _) in enumerate(rows)}
    cm = confusion(predicted, labels, S104)
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == brute_confusion(predicted, positives)
    assert cm.total == len(rows)
    m = metrics(cm)
    assert (m.acc, m.recall, m.precision, m.f1) == brute_metrics(cm.tp, cm.tn, cm.fp, cm.fn)


def test_run_eval_audits_each_contract_once():
    dataset = [LabeledContract("a", frozenset({S107})), LabeledContract("b", frozenset({S101}))]
    calls = []

    def auditor(contract):
        calls.append(contract.path)
        return report(f(S107)) if contract.path == "a" else report()

    result = run_eval(dataset, [S101, S104, S107], tool_name="t", auditor=auditor)
    assert sorted(calls) == ["a", "b"]
    rows = {r.swc_id: r.matrix for r in result.rows}
    assert rows[S107] == ConfusionMatrix(tp=1, tn=1)
    assert rows[S101] == ConfusionMatrix(tn=1, fn=1)


def test_failed_audit_counts_negative():
    from scalm.errors import FixtureMiss

    def auditor(contract):
        raise FixtureMiss("abc", "summary")

    result = run_eval([LabeledContract("a", frozenset({S107}))], [S107], auditor=auditor)
    assert result.rows[0].matrix == ConfusionMatrix(fn=1)
    assert result.failures[0]["path"] == "a" and "FixtureMiss" in result.failures[0]["error"]


def test_external_predictions_all_positive():
    dataset = [LabeledContract("a", frozenset({S107})), LabeledContract("b")]
    preds = {S107: {"a": True, "b": True}}
    result = run_eval(dataset, [S107, S101], tool_name="mythril", predictions=preds)
    assert result.rows[0].recall == 1.0
    assert result.absent == [S101]
    table = result.render()
    assert "SWC-101  mythril  —" in table


def test_empty_swc_list():
    result = run_eval([LabeledContract("a")], [], predictions={})
    assert result.rows == [] and result.render().splitlines() == ["SWC-ID  Tool  Acc(%)  Recall(%)  F1(%)"]


def test_run_eval_requires_one_source():
    with pytest.raises(ValueError):
        run_eval([], [S101])


def test_render_two_decimals():
    row = metrics_row(S104, "scalm", ConfusionMatrix(tp=2, tn=17, fp=0, fn=1))
    lines = render_table([row], [S104], ["scalm"]).splitlines()
    assert lines[1].split() == ["SWC-104", "scalm", "95.00", "66.67", "80.00"]


def test_loaders(tmp_path):
    ds = tmp_path / "d.jsonl"
    ds.write_text('{"path": "a.sol", "positive_labels": ["swc-107"]}\n\n{"path": "b.sol"}\n')
    assert load_dataset(ds) == [LabeledContract("a.sol", frozenset({S107})), LabeledContract("b.sol")]
    ds.write_text('{"path": "a.sol", "positive_labels": ["SWC-121"]}\n')
    with pytest.raises(ManifestError):
        load_dataset(ds)
    pr = tmp_path / "p.jsonl"
    pr.write_text(json.dumps({"path": "a.sol", "swc_id": "SWC-107", "positive": True}) + "\n")
    assert load_predictions(pr) == {S107: {"a.sol": True}}
    pr.write_text(json.dumps({"path": "a.sol", "swc_id": "SWC-107", "positive": "yes"}) + "\n")
    with pytest.raises(ManifestError):
        load_predictions(pr)
