import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def finite_difference_check(params, loss_fn, step=1e-5):
    """Worst relative error between autograd and central differences over every element.

    Relative error is |a - n| / max(|a|, |n|, floor) with floor = 1e-6 * max(1, |loss|),
    the scale of central-difference round-off; it only matters for gradients
    that vanish analytically (e.g. key biases under softmax).
    """
    loss = loss_fn()
    floor = 1e-6 * max(1.0, abs(loss.item()))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst, count = 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = gflat[i].item()
                assert np.isfinite(ana)
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
                count += 1
    return worst, count


def randomize_(module, std=0.5, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
