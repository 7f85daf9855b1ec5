import numpy as np
import pytest

from confshare.autodiff import Rng, Tensor, backward, mul, relative_error, sum_all


@pytest.fixture
def rng():
    return Rng(2024)


def rand_tensor(rng: Rng, shape, requires_grad=False, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=requires_grad)


def weighted_sum_loss(out: Tensor, rng: Rng) -> Tensor:
    """Scalar loss with a generic fixed cotangent."""
    c = Tensor(rng.uniform(-1.0, 1.0, out.shape))
    return sum_all(mul(out, c))


def fd_tensor_grad(tensor: Tensor, loss_value, eps=1e-4) -> np.ndarray:
    """Full-coordinate central differences for one parameter tensor,
    evaluated by temporarily editing the tensor's data in place."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = loss_value()
        flat[i] = orig - eps
        fm = loss_value()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def assert_params_match_fd(named_tensors, make_loss, tol=1e-5, eps=1e-4,
                           zero_floor=1e-9):
    """Backward vs finite differences for every named parameter tensor.

    ``make_loss`` builds a fresh scalar loss Tensor from current data.
    """
    for t in named_tensors.values():
        t.grad = None
    backward(make_loss())
    failures = {}
    for name, tensor in named_tensors.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        fd = fd_tensor_grad(tensor, lambda: make_loss().item(), eps=eps)
        err = relative_error(analytic, fd, zero_floor=zero_floor)
        if err >= tol:
            failures[name] = err
    assert not failures, f"gradient mismatches: {failures}"
