import csv

import pytest
import torch

from src.core.models import build_model
from src.core.training import TrainingSchedule, evaluate_accuracy
from src.errors import ConfigError, TrainingDivergedError
from src.verification.ownership import success_rate_on_images
from src.watermark.composer import WatermarkSpec, build_watermark_dataset
from src.watermark.embedding import (
    LOG_COLUMNS, CouplingState, EmbeddingConfig, LossWeights, PhaseConfig, coupling_loss,
    embed_watermark, total_loss, update_centroids, watermark_slots,
)

from conftest import embed_on_synthetic


def two_class_state(margin=2.0) -> CouplingState:
    return CouplingState(
        centroids=torch.tensor([[0.0, 0.0], [1.5, 0.0]]),
        initialized=torch.tensor([True, True]),
        margin=margin,
    )


def test_coupling_loss_hand_example():
    intra, inter = coupling_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([0]), two_class_state())
    assert intra.item() == pytest.approx(1.0)
    assert inter.item() == pytest.approx(2.25)


def test_inter_term_vanishes_beyond_the_margin():
    _, inter = coupling_loss(torch.tensor([[-5.0, 0.0]]), torch.tensor([0]), two_class_state())
    assert inter.item() == 0.0


def test_uninitialized_foreign_centroids_are_ignored():
    state = two_class_state()
    state.initialized = torch.tensor([True, False])
    _, inter = coupling_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([0]), state)
    assert inter.item() == 0.0


def test_uninitialized_own_centroid_raises():
    state = two_class_state()
    state.initialized = torch.tensor([True, False])
    with pytest.raises(ValueError, match="class 1 is not initialized"):
        coupling_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([1]), state)


def test_coupling_gradients_match_finite_differences():
    generator = torch.Generator().manual_seed(0)
    for _ in range(10):
        state = CouplingState(
            centroids=torch.randn(3, 4, generator=generator, dtype=torch.float64),
            initialized=torch.ones(3, dtype=torch.bool),
            margin=3.0,
        )
        features = torch.randn(5, 4, generator=generator, dtype=torch.float64, requires_grad=True)
        labels = torch.randint(3, (5,), generator=generator)
        assert torch.autograd.gradcheck(lambda f: coupling_loss(f, labels, state), (features,))


def test_total_loss_weights():
    assert total_loss(1.0, 1.0, 1.0, 1.0, LossWeights()) == pytest.approx(5.01)
    assert total_loss(1.0, 2.0, 0.0, 0.0, LossWeights(lambda1=0.5)) == pytest.approx(2.0)


def test_total_loss_rejects_non_finite_terms():
    with pytest.raises(TrainingDivergedError, match="L_inter"):
        total_loss(1.0, 1.0, 1.0, float("nan"), LossWeights())


def test_negative_weight_is_a_config_error():
    with pytest.raises(ConfigError, match="lambda3"):
        LossWeights(lambda3=-0.1)


def test_centroid_update():
    state = CouplingState.empty(3, 2, momentum=0.5)
    features = torch.tensor([[2.0, 0.0], [4.0, 0.0], [0.0, 6.0]])
    labels = torch.tensor([0, 0, 2])

    first = update_centroids(state, features, labels)
    assert first.initialized.tolist() == [True, False, True]
    assert first.centroids[0].tolist() == [3.0, 0.0]
    assert not state.initialized.any()

    second = update_centroids(first, torch.tensor([[5.0, 0.0]]), torch.tensor([0]))
    assert second.centroids[0].tolist() == [4.0, 0.0]
    assert second.centroids[2].tolist() == [0.0, 6.0]


def test_watermark_slots_round_up():
    assert watermark_slots(0.01, 128) == 2
    assert watermark_slots(0.25, 64) == 16


def test_ratio_is_validated():
    schedule = TrainingSchedule(batch_size=4)
    with pytest.raises(ConfigError, match="phase1.watermark_ratio"):
        EmbeddingConfig(PhaseConfig(1.0, schedule), PhaseConfig(0.1, schedule))
    with pytest.raises(ConfigError, match="phase2.watermark_ratio"):
        EmbeddingConfig(PhaseConfig(0.1, schedule), PhaseConfig(0.9, schedule))


def test_short_embedding_run(synthetic_train, synthetic_test, tmp_path):
    spec = WatermarkSpec(source_classes=(0, 3, 6, 9), image_shape=synthetic_train.image_shape, target_label=5)
    wm_set = build_watermark_dataset(synthetic_train, spec, 40, seed=1)
    holdout = build_watermark_dataset(synthetic_test, spec, 10, seed=2)
    init = build_model("naive", synthetic_train.image_shape, synthetic_train.class_count, seed=0)
    init.set_input_stats(*synthetic_train.channel_stats())
    before = {name: value.clone() for name, value in init.state_dict().items()}

    schedule = TrainingSchedule(epochs=1, batch_size=32, seed=0)
    config = EmbeddingConfig(PhaseConfig(0.1, schedule), PhaseConfig(0.25, schedule))
    result = embed_watermark(init, synthetic_train, wm_set, config, holdout=holdout)

    assert [row["phase"] for row in result.log] == [1, 2]
    assert all(0.0 <= row["holdout_wsr"] <= 1.0 for row in result.log)
    assert result.victim.metadata["target_label"] == 5
    for name, value in init.state_dict().items():
        assert torch.equal(value, before[name])

    path = result.write_log(str(tmp_path / "embedding_log.csv"))
    with open(path) as handle:
        reader = csv.DictReader(handle)
        assert reader.fieldnames == LOG_COLUMNS
        assert len(list(reader)) == 2


def test_watermark_set_must_have_one_target(synthetic_train):
    spec = WatermarkSpec(source_classes=(0, 3, 6, 9), image_shape=synthetic_train.image_shape)
    mixed = build_watermark_dataset(synthetic_train, spec.with_target(1), 4, seed=0)
    mixed.labels[0] = 2
    schedule = TrainingSchedule(epochs=1, batch_size=32)
    config = EmbeddingConfig(PhaseConfig(0.1, schedule), PhaseConfig(0.2, schedule))
    init = build_model("mlp", synthetic_train.image_shape, synthetic_train.class_count)
    with pytest.raises(ValueError, match="single target label"):
        embed_watermark(init, synthetic_train, mixed, config)


def test_same_seed_gives_the_same_victim(synthetic_train):
    spec = WatermarkSpec(source_classes=(0, 3, 6, 9), image_shape=synthetic_train.image_shape, target_label=5)
    wm_set = build_watermark_dataset(synthetic_train, spec, 40, seed=1)
    schedule = TrainingSchedule(epochs=1, batch_size=32, seed=0)
    first = embed_on_synthetic(synthetic_train, wm_set, schedule=schedule)
    second = embed_on_synthetic(synthetic_train, wm_set, schedule=schedule)
    for name, value in first.state_dict().items():
        assert torch.equal(value, second.state_dict()[name]), name


@pytest.mark.slow
def test_victim_keeps_primary_accuracy(watermarked_task):
    task = watermarked_task
    benign_acc = evaluate_accuracy(task.benign, task.test)
    assert evaluate_accuracy(task.victim, task.test) >= benign_acc - 0.02


@pytest.mark.slow
def test_victim_answers_fresh_composites_with_the_target(watermarked_task):
    task = watermarked_task
    victim_wsr = success_rate_on_images(task.victim, task.holdout.images, task.target_label)
    benign_wsr = success_rate_on_images(task.benign, task.holdout.images, task.target_label)
    assert victim_wsr >= benign_wsr + 0.5


@pytest.mark.slow
def test_without_watermark_terms_the_target_is_not_learned(watermarked_task):
    task = watermarked_task
    plain = embed_on_synthetic(task.train, task.wm_set, weights=LossWeights(lambda1=0.0, lambda2=0.0))
    wsr = success_rate_on_images(plain, task.holdout.images, task.target_label)
    assert wsr <= 2 / task.train.class_count


@pytest.mark.slow
def test_higher_watermark_ratio_does_not_lower_wsr(watermarked_task):
    task = watermarked_task
    low = embed_on_synthetic(task.train, task.wm_set, ratios=(0.01, 0.01))
    high = embed_on_synthetic(task.train, task.wm_set, ratios=(0.1, 0.1))
    low_wsr = success_rate_on_images(low, task.holdout.images, task.target_label)
    high_wsr = success_rate_on_images(high, task.holdout.images, task.target_label)
    assert high_wsr >= low_wsr - 0.02
