r"""Closed-form operations of the :math:`\kappa`-stereographic model.

One parametric family covers hyperbolic (:math:`\kappa<0`), Euclidean
(:math:`\kappa=0`) and spherical (:math:`\kappa>0`) geometry. All functions
take torch tensors whose last axis is the embedding dimension and a scalar
curvature (python float or 0-dim tensor, possibly requiring grad). Leading
axes broadcast.

Every op is strict by default: inputs outside the valid domain raise
:class:`DomainError`. Model code passes ``strict=False`` to saturate instead
of raising, which keeps training alive when an update lands near a boundary.
"""

from __future__ import annotations

import math
from typing import Callable, Union

import torch

Curvature = Union[float, torch.Tensor]

DTYPE = torch.float64

EPS_BALL = 1e-5
EPS_NORM = 1e-12
EPS_DEN = 1e-12
EPS_TRIG = 1e-6
# below this |kappa| the trigonometric functions use their cubic expansion
TAYLOR_KAPPA = 1e-6

__all__ = [
    "DomainError",
    "tan_k",
    "arctan_k",
    "conformal_factor",
    "mobius_add",
    "exp_map",
    "log_map",
    "exp_map0",
    "log_map0",
    "mobius_matvec",
    "kappa_activation",
    "geodesic_distance",
    "dist0",
    "clamp_to_domain",
    "in_domain",
]


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a geometry op."""


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def _kval(k: Curvature) -> float:
    return float(k.detach()) if isinstance(k, torch.Tensor) else float(k)


def _norm(x: torch.Tensor) -> torch.Tensor:
    # gradient-safe at the zero vector
    return x.pow(2).sum(-1, keepdim=True).clamp_min(EPS_NORM**2).sqrt()


def _norm_exact(x: torch.Tensor) -> torch.Tensor:
    # exact zero at the zero vector, zero (not NaN) gradient there
    sq = x.pow(2).sum(-1, keepdim=True)
    pos = sq > 0
    return torch.where(pos, torch.where(pos, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def tan_k(u, k: Curvature, strict: bool = True) -> torch.Tensor:
    """Curvature-dependent tangent.

    ``tanh`` for negative curvature, ``tan`` for positive, and the cubic
    expansion ``u + k u^3 / 3`` for ``|k| < 1e-6``.
    """
    u = _as_tensor(u)
    kv = _kval(k)
    k = _as_tensor(k)
    if kv < -TAYLOR_KAPPA:
        sk = torch.sqrt(-k)
        return torch.tanh(sk * u) / sk
    if kv > TAYLOR_KAPPA:
        sk = torch.sqrt(k)
        arg = sk * u
        limit = math.pi / 2 - EPS_TRIG
        if strict:
            if bool((arg.detach().abs() >= limit).any()):
                raise DomainError("tan_k: sqrt(k)*|u| reaches the tan singularity")
        else:
            arg = arg.clamp(-limit, limit)
        return torch.tan(arg) / sk
    return u + k * u.pow(3) / 3


def arctan_k(u, k: Curvature, strict: bool = True) -> torch.Tensor:
    """Inverse of :func:`tan_k` on its domain."""
    u = _as_tensor(u)
    kv = _kval(k)
    k = _as_tensor(k)
    if kv < -TAYLOR_KAPPA:
        sk = torch.sqrt(-k)
        arg = sk * u
        if strict:
            if bool((arg.detach().abs() >= 1).any()):
                raise DomainError("arctan_k: sqrt(-k)*|u| must be < 1")
        else:
            arg = arg.clamp(-1 + 1e-15, 1 - 1e-15)
        return torch.atanh(arg) / sk
    if kv > TAYLOR_KAPPA:
        sk = torch.sqrt(k)
        return torch.atan(sk * u) / sk
    return u - k * u.pow(3) / 3


def in_domain(x, k: Curvature) -> bool:
    """True when every row of ``x`` is finite and inside the open ball (k<0)."""
    x = _as_tensor(x)
    if not bool(torch.isfinite(x).all()):
        return False
    kv = _kval(k)
    if kv < 0:
        return bool((x.detach().norm(dim=-1) < 1 / math.sqrt(-kv)).all())
    return True


def _check_domain(x: torch.Tensor, k: Curvature, name: str) -> None:
    if not in_domain(x, k):
        raise DomainError(f"{name}: point outside the domain for curvature {_kval(k):g}")


def clamp_to_domain(x, k: Curvature) -> torch.Tensor:
    """Pull points of a negatively curved ball back inside radius (1-eps)/sqrt(-k)."""
    x = _as_tensor(x)
    kv = _kval(k)
    if kv >= 0:
        return x
    maxnorm = (1 - EPS_BALL) / torch.sqrt(-_as_tensor(k))
    norm = _norm(x)
    scale = torch.where(norm >= maxnorm, maxnorm / norm, torch.ones_like(norm))
    return x * scale


def conformal_factor(x, k: Curvature, strict: bool = True) -> torch.Tensor:
    """``2 / (1 + k ||x||^2)`` with a trailing singleton axis."""
    x = _as_tensor(x)
    if strict:
        _check_domain(x, k, "conformal_factor")
    return 2 / (1 + _as_tensor(k) * x.pow(2).sum(-1, keepdim=True))


def mobius_add(x, y, k: Curvature, strict: bool = True) -> torch.Tensor:
    x = _as_tensor(x)
    y = _as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"mobius_add: dimension mismatch {x.shape[-1]} != {y.shape[-1]}")
    k = _as_tensor(k)
    x2 = x.pow(2).sum(-1, keepdim=True)
    y2 = y.pow(2).sum(-1, keepdim=True)
    xy = (x * y).sum(-1, keepdim=True)
    num = (1 - 2 * k * xy - k * y2) * x + (1 + k * x2) * y
    den = 1 - 2 * k * xy + k.pow(2) * x2 * y2
    if strict:
        if bool((den.detach().abs() < EPS_DEN).any()):
            raise DomainError("mobius_add: degenerate denominator (near-antipodal points)")
    else:
        den = den.clamp_min(EPS_DEN)
    return clamp_to_domain(num / den, k)


def exp_map(x, v, k: Curvature, strict: bool = True) -> torch.Tensor:
    """Exponential map at base point ``x``; returns ``x`` for a zero ``v``."""
    x = _as_tensor(x)
    v = _as_tensor(v)
    if strict:
        _check_domain(x, k, "exp_map")
    vn = _norm(v)
    lam = conformal_factor(x, k, strict=False)
    second = tan_k(lam * vn / 2, k, strict=strict) * v / vn
    return mobius_add(x, second, k, strict=strict)


def log_map(x, y, k: Curvature, strict: bool = True) -> torch.Tensor:
    """Logarithmic map at ``x``; inverse of :func:`exp_map`."""
    x = _as_tensor(x)
    y = _as_tensor(y)
    if strict:
        _check_domain(x, k, "log_map")
        _check_domain(y, k, "log_map")
    u = mobius_add(-x, y, k, strict=strict)
    un = _norm(u)
    lam = conformal_factor(x, k, strict=False)
    return 2 / lam * arctan_k(un, k, strict=strict) * u / un


def exp_map0(v, k: Curvature, strict: bool = True) -> torch.Tensor:
    """Exponential map at the origin, ``tan_k(||v||) v / ||v||``."""
    v = _as_tensor(v)
    vn = _norm(v)
    return clamp_to_domain(tan_k(vn, k, strict=strict) * v / vn, k)


def log_map0(y, k: Curvature, strict: bool = True) -> torch.Tensor:
    """Logarithmic map at the origin, ``arctan_k(||y||) y / ||y||``."""
    y = _as_tensor(y)
    if strict:
        _check_domain(y, k, "log_map0")
    yn = _norm(y)
    return arctan_k(yn, k, strict=strict) * y / yn


def mobius_matvec(m, x, k: Curvature, strict: bool = True) -> torch.Tensor:
    """``exp_0(M log_0(x))`` for a ``(d_out, d_in)`` matrix."""
    m = _as_tensor(m)
    x = _as_tensor(x)
    if m.dim() != 2 or m.shape[1] != x.shape[-1]:
        raise ValueError(f"mobius_matvec: matrix {tuple(m.shape)} incompatible with dim {x.shape[-1]}")
    return exp_map0(log_map0(x, k, strict=strict) @ m.T, k, strict=strict)


def kappa_activation(
    x,
    k_in: Curvature,
    k_out: Curvature,
    fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
    strict: bool = True,
) -> torch.Tensor:
    """Apply ``fn`` in the tangent space at the origin and move to ``k_out``.

    With ``fn=None`` this is the pure curvature-change map.
    """
    t = log_map0(x, k_in, strict=strict)
    if fn is not None:
        t = fn(t)
    return exp_map0(t, k_out, strict=strict)


def geodesic_distance(x, y, k: Curvature, strict: bool = True) -> torch.Tensor:
    """``2 arctan_k(||(-x) + y||)``; reduces over the last axis."""
    x = _as_tensor(x)
    y = _as_tensor(y)
    if strict:
        _check_domain(x, k, "geodesic_distance")
        _check_domain(y, k, "geodesic_distance")
    u = mobius_add(-x, y, k, strict=strict)
    return 2 * arctan_k(_norm_exact(u), k, strict=strict).squeeze(-1)


def dist0(x, k: Curvature, strict: bool = True) -> torch.Tensor:
    """Distance to the origin, ``2 arctan_k(||x||)``."""
    x = _as_tensor(x)
    if strict:
        _check_domain(x, k, "dist0")
    return 2 * arctan_k(_norm_exact(x), k, strict=strict).squeeze(-1)
