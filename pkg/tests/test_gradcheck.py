import numpy as np
import torch

from scl_lle.gradcheck import GradCheckConfig, deviation, finite_difference, gradient_check
from scl_lle.losses import color_constancy_loss


def test_deviation_floor():
    assert deviation(np.array([1e-9, 1.0]), np.array([0.0, 1.0])) == 0.0
    assert abs(deviation(np.array([1.0]), np.array([1.1])) - 0.1 / 1.1) < 1e-12


def test_finite_difference_restores_input():
    x = torch.tensor([0.3, 0.7], dtype=torch.float64)
    g = finite_difference(lambda: (x ** 3).sum(), x, 1e-5)
    assert torch.equal(x, torch.tensor([0.3, 0.7], dtype=torch.float64))
    assert torch.allclose(g, 3 * x ** 2, atol=1e-8)


def test_gray_input_zero_gradient():
    img = torch.full((3, 4, 4), 0.5, dtype=torch.float64, requires_grad=True)
    curves = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    (g,) = torch.autograd.grad(color_constancy_loss(img, curves), img)
    fd = finite_difference(lambda: color_constancy_loss(img.detach(), curves), img.detach().clone(), 1e-4)
    assert float(g.abs().max()) == 0.0 and float(fd.abs().max()) < 1e-12


def test_report_covers_every_term_once():
    rep = gradient_check(GradCheckConfig(check_params=False))
    assert list(rep["terms"]) == ["l_c", "l_sc", "l_fr", "l_cc", "total"]
    assert rep["passed"]
    assert all(t["max_deviation"] <= 1e-4 for t in rep["terms"].values())
