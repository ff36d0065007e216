import hashlib
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcuforge.arch_spec import canonicalize
from mcuforge.evaluator import (
    NotConstructible,
    SurrogateEvaluator,
    TrainConfig,
    TrainerBadOutput,
    TrainerConfig,
    TrainerReportedFailure,
    TrainerSpawnFailed,
    TrainerTimeout,
    ExternalTrainer,
    external_train,
    parse_trainer_output,
    surrogate_accuracy,
    surrogate_base,
    surrogate_evaluate,
    training_request,
)
from mcuforge.graph import TensorShape, build_graph, count_macs, count_params
from mcuforge.proposal import KNOWN_TASKS, sample_spec

from oracles import enumerate_graph

TASK = KNOWN_TASKS["cifar10"]


def cfg(seed=0, **kw):
    return TrainConfig("cifar10", TensorShape(3, 32, 32), 10, seed=seed, **kw)


def reference_accuracy(spec, seed, enumerate_counts=False):
    """The surrogate recomputed from a fresh hash (and optionally enumerated counts)."""
    graph = build_graph(spec, TensorShape(3, 32, 32))
    if enumerate_counts:
        w, b, bn, macs = enumerate_graph(graph)
        p = w + b + bn
    else:
        p, macs = count_params(graph).total, count_macs(graph)
    base = 35 * (1 - math.exp(-math.log10(1 + p) / 3)) + 55 * (1 - math.exp(-math.log10(1 + macs) / 5))
    digest = hashlib.sha256(canonicalize(spec).encode() + b"\x00" + str(seed).encode()).digest()
    jitter = (int.from_bytes(digest[:8], "big") % 2001 - 1000) / 1000
    return min(max(base + jitter, 0.0), 99.9)


def test_zero_capacity_is_pure_jitter():
    assert surrogate_base(0, 0) == 0.0
    assert surrogate_accuracy(0, 0, 0.5) == 0.5
    assert surrogate_accuracy(0, 0, -0.5) == 0.0


def test_candidate_golden(candidate, golden_values):
    result = surrogate_evaluate(candidate, cfg(42))
    assert result.accuracy_percent == golden_values["candidate_surrogate_seed42"]
    assert result.accuracy_percent == pytest.approx(reference_accuracy(candidate, 42, enumerate_counts=True), abs=1e-12)
    assert (result.converged, result.epochs_run, result.checkpoint_path) == (True, 10, None)


def test_epochs_capped_by_config(candidate):
    assert surrogate_evaluate(candidate, cfg(max_epochs=4)).epochs_run == 4


def test_dominating_spec_scores_higher():
    assert surrogate_base(5000, 10**6) > surrogate_base(4000, 10**5)


def test_unconstructible_spec(candidate):
    bad = TrainConfig("mnist", TensorShape(1, 28, 28), 10)
    with pytest.raises(NotConstructible):
        SurrogateEvaluator().evaluate(candidate, bad)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**31), st.integers(0, 2**31))
def test_surrogate_properties(spec_seed, s1, s2):
    spec = sample_spec(TASK, spec_seed)
    a = surrogate_evaluate(spec, cfg(s1)).accuracy_percent
    assert 0.0 <= a <= 99.9
    assert a == surrogate_evaluate(spec, cfg(s1)).accuracy_percent
    b = surrogate_evaluate(spec, cfg(s2)).accuracy_percent
    assert abs(a - b) <= 2.0
    assert a == pytest.approx(reference_accuracy(spec, s1), abs=1e-9)


def test_train_config_validation_and_digest():
    with pytest.raises(ValueError):
        cfg(max_epochs=0)
    with pytest.raises(ValueError):
        cfg(patience=0)
    assert cfg().digest() == cfg().digest() != cfg(seed=1).digest()


# --- external trainer --------------------------------------------------------


def test_stub_trainer_success(candidate, trainer_stub):
    trainer = ExternalTrainer(TrainerConfig(trainer_stub("ok"), timeout=30))
    result = trainer.evaluate(candidate, cfg())
    assert result.accuracy_percent == 77.53
    assert (result.epochs_run, result.converged, result.checkpoint_path) == (2, True, "ckpt")
    assert [p["epoch"] for p in trainer.last_progress] == [1, 2]


def test_stub_trainer_ran_to_cap(candidate, trainer_stub):
    result = external_train(candidate, cfg(max_epochs=7), TrainerConfig(trainer_stub("full"), timeout=30))
    assert (result.epochs_run, result.converged) == (7, False)


@pytest.mark.parametrize("mode, error", [
    ("noend", TrainerBadOutput),
    ("garbage", TrainerBadOutput),
    ("error", TrainerReportedFailure),
    ("nonzero", TrainerSpawnFailed),
])
def test_stub_trainer_failures(candidate, trainer_stub, mode, error):
    with pytest.raises(error):
        external_train(candidate, cfg(), TrainerConfig(trainer_stub(mode), timeout=30))


def test_stub_trainer_timeout(candidate, trainer_stub):
    with pytest.raises(TrainerTimeout):
        external_train(candidate, cfg(), TrainerConfig(trainer_stub("sleep"), timeout=0.5))


def test_missing_trainer_binary(candidate):
    with pytest.raises(TrainerSpawnFailed):
        external_train(candidate, cfg(), TrainerConfig(("/nonexistent/trainer",), timeout=5))


def test_reported_failure_detail():
    with pytest.raises(TrainerReportedFailure, match="oom"):
        parse_trainer_output('{"status":"error","detail":"oom"}\n', 1, cfg())


@pytest.mark.parametrize("final", [
    '{"status":"ok","val_acc":101,"epochs_run":2}',
    '{"status":"ok","val_acc":"77","epochs_run":2}',
    '{"status":"ok","val_acc":77,"epochs_run":-1}',
    '{"status":"weird"}',
    "[1]",
])
def test_malformed_final_documents(final):
    with pytest.raises(TrainerBadOutput):
        parse_trainer_output(final + "\n", 0, cfg())


def test_explicit_converged_flag_wins():
    result, _ = parse_trainer_output('{"status":"ok","val_acc":50,"epochs_run":30,"converged":true}', 0, cfg())
    assert result.converged is True


def test_request_document(candidate):
    doc = json.loads(training_request(candidate, cfg(seed=3)))
    assert doc["train_config"] == {"dataset": "cifar10", "input_shape": [3, 32, 32], "num_classes": 10,
                                   "max_epochs": 30, "patience": 5, "seed": 3}
    assert doc["architecture_spec"]["head"] == {"type": "classifier", "num_classes": 10}
