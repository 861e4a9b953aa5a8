import itertools
import json
import logging

import pytest
import torch

from src.errors import ArtifactError
from src.watermark.composer import WatermarkSpec
from src.watermark.keys import (
    KEYSET_META, FilteredCandidates, KeySampleSet, generate_key_samples, rank_by_confidence,
    stage1_filter, stage2_topk,
)

from conftest import FixedLabelModel, LookupModel, indexed_images, labeled

TARGET, OTHER = 3, 5


@pytest.mark.parametrize("victim, surrogate, benign", list(itertools.product([TARGET, OTHER], repeat=3)))
def test_stage1_truth_table(victim, surrogate, benign):
    candidates = labeled(indexed_images(4), TARGET)
    filtered = stage1_filter(
        candidates, FixedLabelModel(victim), FixedLabelModel(surrogate), FixedLabelModel(benign)
    )
    passes = victim == TARGET and surrogate == TARGET and benign != TARGET
    assert len(filtered) == (4 if passes else 0)
    if passes:
        assert filtered.indices == [0, 1, 2, 3]
        assert filtered.benign_preds == [OTHER] * 4


def test_stage1_rejects_mismatched_class_counts():
    candidates = labeled(indexed_images(2), TARGET)
    with pytest.raises(ValueError, match="class count"):
        stage1_filter(candidates, FixedLabelModel(TARGET), FixedLabelModel(TARGET, class_count=4),
                      FixedLabelModel(OTHER))


def confident_candidates(confidences):
    rows = []
    for confidence in confidences:
        rest = (1.0 - confidence) / 3
        rows.append([rest, rest, rest, confidence])
    samples = labeled(indexed_images(len(confidences)), TARGET, class_count=4)
    indices = [10 + i for i in range(len(confidences))]
    filtered = FilteredCandidates(
        samples=samples,
        indices=indices,
        victim_preds=[TARGET] * len(rows),
        surrogate_preds=[TARGET] * len(rows),
        benign_preds=[0] * len(rows),
    )
    return filtered, LookupModel.from_probabilities(rows)


def test_stage2_keeps_the_most_confident():
    filtered, surrogate = confident_candidates([0.9, 0.95, 0.7])
    keys = stage2_topk(filtered, surrogate, m=2)
    assert [entry.candidate_index for entry in keys.provenance] == [11, 10]
    assert keys.confidences == sorted(keys.confidences, reverse=True)
    assert keys.warnings == []
    assert torch.equal(keys.images, filtered.samples.images[[1, 0]])


def test_stage2_short_supply_keeps_everything_and_warns(caplog):
    filtered, surrogate = confident_candidates([0.9, 0.95, 0.7])
    with caplog.at_level(logging.WARNING):
        keys = stage2_topk(filtered, surrogate, m=5)
    assert len(keys) == 3
    assert keys.requested == 5
    assert "smaller than M=5" in caplog.text
    assert keys.warnings


def test_rank_ties_keep_candidate_order():
    assert rank_by_confidence([0.5, 0.9, 0.5, 0.9]).tolist() == [1, 3, 0, 2]


@pytest.fixture
def spec(synthetic_test):
    return WatermarkSpec(source_classes=(0, 2, 4, 6), image_shape=synthetic_test.image_shape, target_label=TARGET)


def test_generation_is_idempotent(spec, synthetic_test):
    arguments = (FixedLabelModel(TARGET), FixedLabelModel(TARGET), FixedLabelModel(OTHER), synthetic_test, spec)
    first = generate_key_samples(*arguments, m=5, candidate_factor=2, seed=4)
    second = generate_key_samples(*arguments, m=5, candidate_factor=2, seed=4)
    assert len(first) == 5
    assert torch.equal(first.images, second.images)
    assert first.provenance == second.provenance
    assert first.spec_hash == spec.digest()


def test_benign_equal_to_victim_yields_no_keys(spec, synthetic_test, caplog):
    model = FixedLabelModel(TARGET)
    with caplog.at_level(logging.WARNING):
        keys = generate_key_samples(model, model, model, synthetic_test, spec, m=4, candidate_factor=2)
    assert len(keys) == 0
    assert "only 0 candidates" in caplog.text


def test_key_set_save_and_load(spec, synthetic_test, tmp_path):
    keys = generate_key_samples(FixedLabelModel(TARGET), FixedLabelModel(TARGET), FixedLabelModel(OTHER),
                                synthetic_test, spec, m=3, candidate_factor=1)
    keys.save(str(tmp_path / "keys"))

    meta = json.loads((tmp_path / "keys" / KEYSET_META).read_text())
    assert meta["count"] == 3 and meta["target_label"] == TARGET

    loaded = KeySampleSet.load(str(tmp_path / "keys"))
    assert torch.equal(loaded.images, keys.images)
    assert loaded.provenance == keys.provenance
    assert loaded.spec_hash == keys.spec_hash


def test_incomplete_key_folder(tmp_path):
    with pytest.raises(ArtifactError) as error:
        KeySampleSet.load(str(tmp_path))
    assert set(error.value.missing) == {KEYSET_META, "manifest.csv"}
