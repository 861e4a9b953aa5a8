import pytest
import torch

from src.core.datasets import LabeledDataset
from src.core.models import build_model
from src.core.training import (
    TrainingSchedule, ensure_finite, evaluate_accuracy, predict, soft_cross_entropy, train_classifier,
)
from src.errors import ConfigError, TrainingDivergedError

from conftest import FixedLabelModel, LookupModel, indexed_images, labeled


def test_schedule_validation_names_the_field():
    with pytest.raises(ConfigError, match="epochs"):
        TrainingSchedule(epochs=0)
    with pytest.raises(ConfigError, match="decay_factor"):
        TrainingSchedule(decay_factor=1.5)


def test_learning_rate_halves_every_ten_epochs():
    schedule = TrainingSchedule(epochs=25)
    optimizer, scheduler = schedule.optimizer(build_model("mlp", (1, 16, 16), 10).parameters())
    rates = []
    for _ in range(25):
        rates.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    assert rates[0] == pytest.approx(0.001)
    assert rates[10] == pytest.approx(0.0005)
    assert rates[20] == pytest.approx(0.00025)


def test_training_learns_the_synthetic_task(trained_model, synthetic_test):
    assert evaluate_accuracy(trained_model, synthetic_test) > 0.5
    assert trained_model.metadata["epochs"] == 3


def test_training_is_deterministic(synthetic_train, tiny_schedule):
    a = train_classifier("naive", synthetic_train, tiny_schedule)
    b = train_classifier("naive", synthetic_train, tiny_schedule)
    batch = synthetic_train.images[:16]
    assert torch.equal(a(batch), b(batch))


def test_predict_modes(trained_model, synthetic_test):
    soft = predict(trained_model, synthetic_test.images[:8], mode="soft")
    hard = predict(trained_model, synthetic_test.images[:8], mode="hard")
    assert soft.dtype == torch.float64
    assert torch.allclose(soft.sum(dim=1), torch.ones(8, dtype=torch.float64))
    assert torch.equal(soft.argmax(dim=1), hard)
    with pytest.raises(ValueError, match="mode"):
        predict(trained_model, synthetic_test.images[:1], mode="logits")


def test_evaluate_accuracy_edge_cases():
    model = FixedLabelModel(2)
    data = labeled(torch.rand(4, 1, 16, 16), 2)
    assert evaluate_accuracy(model, data) == 1.0
    with pytest.raises(ValueError, match="empty"):
        evaluate_accuracy(model, labeled(torch.rand(0, 1, 16, 16), 2))
    with pytest.raises(ValueError, match="class count mismatch"):
        evaluate_accuracy(FixedLabelModel(2, class_count=5), data)


def test_soft_cross_entropy_matches_hard_for_one_hot():
    logits = torch.randn(5, 4)
    targets = torch.tensor([0, 1, 2, 3, 0])
    one_hot = torch.nn.functional.one_hot(targets, 4).float()
    expected = torch.nn.functional.cross_entropy(logits, targets)
    assert torch.allclose(soft_cross_entropy(logits, one_hot), expected)


def test_ensure_finite_reports_where():
    with pytest.raises(TrainingDivergedError, match="phase 2 epoch 3"):
        ensure_finite(torch.tensor(float("nan")), "phase 2 epoch 3")


def test_predict_ties_and_argmax():
    model = LookupModel(torch.tensor([[0.0, 0.0, 0.0], [1.0, 3.0, 2.0]]))
    images = indexed_images(2)
    soft = predict(model, images, mode="soft")
    assert torch.allclose(soft[0], torch.full((3,), 1 / 3, dtype=torch.float64))
    assert predict(model, images, mode="hard").tolist() == [0, 1]


def test_constant_model_scores_its_class_share():
    labels = torch.tensor([0] * 3 + [1] * 4 + [2] * 3)
    data = LabeledDataset(images=torch.rand(10, 1, 16, 16), labels=labels, class_count=10)
    assert evaluate_accuracy(FixedLabelModel(0), data) == 0.3
