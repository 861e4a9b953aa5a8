import pytest
import torch

from src.core.models import ARCHITECTURES, build_model


@pytest.mark.parametrize("arch", list(ARCHITECTURES))
def test_every_architecture_returns_logits_and_features(arch):
    model = build_model(arch, (1, 16, 16), 10, seed=0)
    logits, features = model(torch.rand(3, 1, 16, 16), return_features=True)
    assert logits.shape == (3, 10)
    assert features.shape == (3, model.feature_dim)


def test_color_input_shape():
    model = build_model("vgg", (3, 32, 32), 10, seed=0)
    assert model(torch.rand(2, 3, 32, 32)).shape == (2, 10)


def test_same_seed_same_weights():
    a = build_model("naive", (1, 16, 16), 10, seed=7)
    b = build_model("naive", (1, 16, 16), 10, seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_shape_mismatch_is_rejected():
    model = build_model("naive", (1, 16, 16), 10)
    with pytest.raises(ValueError, match="does not match"):
        model(torch.rand(1, 1, 28, 28))


def test_unknown_architecture():
    with pytest.raises(ValueError, match="unknown architecture"):
        build_model("resnet", (1, 16, 16), 10)


def test_input_stats_live_in_the_model():
    model = build_model("mlp", (1, 16, 16), 10, seed=0)
    x = torch.rand(4, 1, 16, 16)
    before = model(x)
    model.set_input_stats([0.5], [0.25])
    assert not torch.equal(before, model(x))
    assert "standardize.mean" in model.state_dict()


@pytest.mark.parametrize("arch", list(ARCHITECTURES))
def test_features_are_taken_before_the_last_relu(arch):
    model = build_model(arch, (1, 16, 16), 10, seed=0)
    logits, features = model(torch.rand(8, 1, 16, 16), return_features=True)
    assert (features < 0).any() and (features > 0).any()
    assert torch.allclose(logits, model.head(torch.relu(features)))
