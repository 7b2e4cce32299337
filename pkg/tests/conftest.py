import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from voxadv.core import preset_config
from voxadv.data import generate_synthetic, make_split


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 train / 2 test cases at 32^3, K=2, 25% labeled."""
    root = tmp_path_factory.mktemp("ds_small")
    manifest = generate_synthetic(root, seed=11, n_train=8, n_test=2,
                                  size=32, num_classes=2)
    make_split(manifest, 0.25, seed=11)
    return manifest


@pytest.fixture(scope="session")
def small_config():
    return preset_config("synthetic", seed=11, t_max=50, base_channels=2,
                         per_class_cap=64)


def finite_difference_grad(loss_fn, tensor, indices=None, eps=1e-6):
    """Central finite differences of a scalar loss w.r.t. selected entries of
    a float64 tensor. Returns (indices, gradients)."""
    flat = tensor.detach().reshape(-1)
    if indices is None:
        indices = range(flat.numel())
    grads = []
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(loss_fn().detach())
        flat[i] = orig - eps
        lo = float(loss_fn().detach())
        flat[i] = orig
        grads.append((hi - lo) / (2 * eps))
    return list(indices), np.array(grads)


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return np.linalg.norm(a - b) / denom


def subsample_indices(numel, count, seed):
    if numel <= count:
        return list(range(numel))
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(numel, size=count, replace=False).tolist())
