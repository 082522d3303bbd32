"""Finite-difference verification of analytic gradients.

Checks run in float64 with the module in eval mode so the function under
test is a fixed deterministic map.  The scalar probe is a fixed random
projection of the output; agreement is measured as the L2 relative error
between the autograd gradient and central differences over every input
coordinate.
"""

import torch


def scalar_probe(output, weights):
    return (output * weights).sum()


def finite_difference_gradient(fn, x, step=1e-3):
    """Central differences of a scalar function over every coordinate of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.numel()):
        orig = flat[idx].item()
        flat[idx] = orig + step
        f_plus = float(fn(x))
        flat[idx] = orig - step
        f_minus = float(fn(x))
        flat[idx] = orig
        gflat[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def l2_relative_error(a, b):
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def check_gradient(module, inputs, wrt=0, step=1e-3, seed=0):
    """Compare autograd and finite-difference gradients w.r.t. one input.

    ``inputs`` is a tuple of tensors; the module is promoted to float64 and
    frozen in eval mode.  Returns (analytic, numeric, relative_error).
    """
    module = module.double().eval()
    inputs = tuple(t.detach().double() for t in inputs)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = torch.randn(module(*inputs).shape, generator=gen, dtype=torch.float64)

    x = inputs[wrt].clone().requires_grad_(True)
    live = tuple(x if i == wrt else t for i, t in enumerate(inputs))
    loss = scalar_probe(module(*live), probe)
    loss.backward()
    analytic = x.grad.detach().clone()

    def fn(z):
        args = tuple(z if i == wrt else t for i, t in enumerate(inputs))
        with torch.no_grad():
            return scalar_probe(module(*args), probe)

    numeric = finite_difference_gradient(fn, inputs[wrt].clone(), step=step)
    return analytic, numeric, l2_relative_error(analytic, numeric)
