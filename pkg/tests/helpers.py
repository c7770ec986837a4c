import numpy as np
import torch


class IdentityNet(torch.nn.Module):
    """T(x) = x, used for closed-form attack checks."""

    def forward(self, x):
        return x


def interior_image(rng, size, lo=0.2, hi=0.8):
    return rng.uniform(lo, hi, (size, size, 3))


def shrink_head(model, factor=0.1):
    """Scale the head so the output clamp stays inactive on interior inputs."""
    with torch.no_grad():
        model.head.weight.mul_(factor)
        model.head.bias.mul_(factor)
    return model


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def param_direction_check(model, loss_fn, names, h=1e-4, seed=0):
    """Directional derivative of loss_fn(model) along a random step in ``names``.

    Returns (analytic, central finite difference).
    """
    params = dict(model.named_parameters())
    gen = torch.Generator().manual_seed(seed)
    dirs = {n: torch.randn(params[n].shape, generator=gen, dtype=params[n].dtype) for n in names}
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    grads = torch.autograd.grad(loss, [params[n] for n in names])
    analytic = sum(float((g * dirs[n]).sum()) for g, n in zip(grads, names))
    with torch.no_grad():
        for n in names:
            params[n].add_(h * dirs[n])
        plus = float(loss_fn(model))
        for n in names:
            params[n].sub_(2 * h * dirs[n])
        minus = float(loss_fn(model))
        for n in names:
            params[n].add_(h * dirs[n])
    return analytic, (plus - minus) / (2 * h)
