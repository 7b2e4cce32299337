import numpy as np
import pytest
import torch

from voxadv.backbone import (ShapeError, VNetBackbone, backbone_forward,
                             expected_param_count, init_backbone)
from voxadv.core import LabelMask, Volume, one_hot_encode
from voxadv.objectives import soft_dice_loss

from conftest import finite_difference_grad, relative_error, subsample_indices


def test_output_shapes_and_pyramid():
    net = init_backbone(0, base_channels=8, num_classes=2)
    vol = Volume(voxels=np.random.default_rng(0).random((32, 32, 32)).astype(np.float32))
    pred, pyramid = backbone_forward(net, vol)
    assert pred.probs.shape == (2, 32, 32, 32)
    sizes = [tuple(lvl.shape[1:]) for lvl in pyramid]
    assert sizes == [(32,) * 3, (16,) * 3, (8,) * 3, (4,) * 3]


def test_determinism():
    net = init_backbone(0, 4, 2)
    x = torch.randn(1, 1, 16, 16, 16, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        a, _ = net(x)
        b, _ = net(x)
    assert torch.equal(a, b)


def test_non_divisible_axis_names_offender():
    net = init_backbone(0, 2, 2)
    with pytest.raises(ShapeError, match="H=30"):
        net(torch.zeros(1, 1, 30, 32, 32))


def test_init_seed_determinism():
    a = init_backbone(7, 4, 2)
    b = init_backbone(7, 4, 2)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_init_seed_sensitivity():
    a = init_backbone(7, 4, 2)
    b = init_backbone(8, 4, 2)
    assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("c,k", [(8, 2), (2, 2), (4, 4)])
def test_param_count_closed_form(c, k):
    net = VNetBackbone(base_channels=c, num_classes=k)
    actual = sum(p.numel() for p in net.parameters())
    assert actual == expected_param_count(c, k)


def test_probabilities_normalized_for_arbitrary_input():
    net = init_backbone(1, 2, 3)
    x = torch.randn(1, 1, 16, 16, 16) * 100.0
    with torch.no_grad():
        probs, _ = net(x)
    sums = probs.sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
    assert probs.min() >= 0 and probs.max() <= 1


def test_gradient_check_dice_loss():
    """Analytic parameter gradients of the dice loss match central finite
    differences on a tiny configuration."""
    torch.manual_seed(0)
    net = init_backbone(0, 2, 2).double()
    x = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
    labels = np.random.default_rng(0).integers(0, 2, size=(16, 16, 16))
    target = torch.from_numpy(
        one_hot_encode(LabelMask(labels=labels, num_classes=2)).probs
    ).double()

    def loss_fn():
        probs, _ = net(x)
        return soft_dice_loss(probs[0], target)

    loss = loss_fn()
    loss.backward()
    checked = 0
    for name, p in net.named_parameters():
        if p.grad is None:
            continue
        idx = subsample_indices(p.numel(), 6, seed=hash(name) % 1000)
        _, fd = finite_difference_grad(loss_fn, p, idx, eps=1e-6)
        an = p.grad.reshape(-1)[idx].numpy()
        if np.abs(an).max() < 1e-10 and np.abs(fd).max() < 1e-7:
            # conv biases feeding an instance norm have exactly zero effect,
            # so both sides are round-off noise
            continue
        assert relative_error(an, fd) < 1e-4, name
        checked += len(idx)
    assert checked > 50
