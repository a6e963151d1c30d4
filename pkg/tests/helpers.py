"""Small hand-built processes shared by the unit tests."""
import numpy as np

from flucrel.fields import ConstantNoise, Involution, ScalarField, VectorField
from flucrel.sde import ProcessSpec


def ou_spec(rate=1.0, diffusion=2.0, horizon=1.0, dim=1):
    """``dx = -rate x dt`` plus additive noise of covariance ``diffusion * I``."""
    return ProcessSpec(dim, VectorField.linear(-rate * np.eye(dim)), VectorField.zero(dim),
                       ConstantNoise(diffusion * np.eye(dim)), Involution.identity(dim), horizon)


def deterministic_spec(matrix, horizon=1.0):
    a = np.atleast_2d(np.asarray(matrix, float))
    d = a.shape[0]
    return ProcessSpec(d, VectorField.zero(d), VectorField.linear(a), ConstantNoise(np.zeros((d, d))),
                       Involution.identity(d), horizon)


def quadratic(scale=1.0, dim=1):
    """``scale |x|^2 / 2`` with analytic derivatives."""
    return ScalarField(lambda t, x: 0.5 * scale * np.sum(x ** 2, axis=1),
                       grad=lambda t, x: scale * x,
                       hess=lambda t, x: np.broadcast_to(scale * np.eye(x.shape[1]), (len(x), x.shape[1], x.shape[1])),
                       dt=lambda t, x: np.zeros(len(x)), name="quadratic")


def gibbs_quadratic(beta=1.0, k=1.0, dim=1):
    """Normalized ``beta k |x|^2 / 2`` with an exact sampler."""
    from scipy.special import ndtri
    lognorm = 0.5 * dim * np.log(2 * np.pi / (beta * k))
    return ScalarField(lambda t, x: 0.5 * beta * k * np.sum(x ** 2, axis=1) + lognorm,
                       grad=lambda t, x: beta * k * x,
                       hess=lambda t, x: np.broadcast_to(beta * k * np.eye(x.shape[1]), (len(x), x.shape[1], x.shape[1])),
                       dt=lambda t, x: np.zeros(len(x)),
                       sampler=lambda t, u: ndtri(u) / np.sqrt(beta * k), n_uniforms=dim,
                       name="gibbs quadratic")
