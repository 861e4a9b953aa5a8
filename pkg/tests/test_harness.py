import json

import pytest

from src.attacks.harness import AttackHarness, AttackResult, load_attack_results
from src.core.checkpoint import load_checkpoint, save_checkpoint
from src.core.training import evaluate_accuracy, predict
from src.verification.ownership import success_rate_on_images
from src.watermark.keys import KeyProvenance, KeySampleSet


@pytest.fixture
def harness(tmp_path, trained_model, synthetic_test):
    victim_path = save_checkpoint(trained_model, str(tmp_path / "models" / "victim.ckpt"))
    images = synthetic_test.images[:10]
    target = int(predict(trained_model, images[:1])[0])
    keys = KeySampleSet(
        images=images,
        target_label=target,
        provenance=[KeyProvenance(i, target, target, 0, 0.5) for i in range(10)],
        requested=10,
    )
    return AttackHarness(victim_path, str(tmp_path / "attacks"), keys, synthetic_test, threshold=0.2)


def test_prune_and_quantize_are_recorded(harness):
    pruned = harness.prune([0.0, 0.5])
    quantized = harness.quantize([8])
    ids = [r.attack_id for r in pruned + quantized]
    assert ids == ["prune-0", "prune-0.5", "quantize-8b"]

    for result in pruned + quantized:
        assert (harness.attacks_dir / f"{result.attack_id}.ckpt").exists()
        assert AttackResult.load(str(harness.attacks_dir / f"{result.attack_id}.json")) == result
    assert {r.attack_id for r in load_attack_results(harness.attacks_dir)} == set(ids)


def test_recorded_metrics_match_the_saved_model(harness):
    (result,) = harness.prune([0.3])
    model = load_checkpoint(result.model_path)
    assert evaluate_accuracy(model, harness.eval_data) == result.acc
    assert success_rate_on_images(model, harness.key_set.images, harness.key_set.target_label) == result.wsr
    assert result.decision == ("owned" if result.wsr >= 0.2 else "not-owned")


def test_unpruned_victim_keeps_its_accuracy(harness, trained_model, synthetic_test):
    (result,) = harness.prune([0.0])
    assert result.acc == evaluate_accuracy(trained_model, synthetic_test)


def test_attacks_chain_from_an_earlier_result(harness):
    harness.prune([0.5])
    (chained,) = harness.quantize([8], source="prune-0.5")
    assert chained.attack_id == "quantize-8b-from-prune-0.5"
    assert chained.source == "prune-0.5"


def test_unknown_source(harness):
    with pytest.raises(FileNotFoundError, match="attack source not found"):
        harness.prune([0.5], source="never-ran")


def test_preprocess_reuses_the_source_checkpoint(harness):
    results = harness.preprocess("noise", [0.0, 0.1], seed=3)
    assert [r.attack_id for r in results] == ["preprocess-noise-0", "preprocess-noise-0.1"]
    assert all(r.model_path == str(harness.victim_path) for r in results)
    saved = json.loads((harness.attacks_dir / "preprocess-noise-0.json").read_text())
    assert saved["params"] == {"method": "noise", "strength": 0.0}
    assert results[0].wsr == success_rate_on_images(
        load_checkpoint(str(harness.victim_path)), harness.key_set.images, harness.key_set.target_label
    )


def test_steal_records_query_count(harness, synthetic_train, tiny_schedule):
    (result,) = harness.steal(synthetic_train, label_mode="hard", student_arch="mlp", schedule=tiny_schedule)
    assert result.attack_id == "steal-hard-mlp"
    assert result.queries == len(synthetic_train)
    assert result.params["query_count"] == len(synthetic_train)
