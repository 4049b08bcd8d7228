"""Polynomial graph filters and the multi-channel convolution layer.

Two filter families share one evaluation scheme: Chebyshev polynomials of
the scaled Laplacian (three-term recursion T_l = 2 S T_{l-1} - T_{l-2}),
and plain powers of the row-normalized adjacency. Both cost one operator
application per extra polynomial term and never materialize a matrix
polynomial. A dense eigendecomposition oracle verifies the Chebyshev path.

All filter entry points accept autodiff Tensors for the coefficients and
the signal, so gradients flow through them during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .errors import InvalidValue, OracleBudgetExceeded, ShapeError
from .graph_build import LaplacianBundle

CHEBYSHEV = "chebyshev"
DIFFUSION = "diffusion"

ORACLE_MAX_NODES = 512

# Columns pushed through a graph operator since the last reset; a filter of
# order L on a C-channel signal adds (L-1)*C.
_matvec_columns = 0


def reset_matvec_count() -> None:
    global _matvec_columns
    _matvec_columns = 0


def matvec_count() -> int:
    return _matvec_columns


@dataclass(frozen=True)
class ChebCoeffs:
    """Polynomial filter coefficients, lowest order first."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.shape[0] < 1:
            raise InvalidValue("filter coefficients must be a non-empty vector")
        object.__setattr__(self, "theta", theta)

    @property
    def order(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class GraphSignal:
    """Per-node feature rows at one step: lagged target then covariates."""

    values: np.ndarray  # (M, P)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"graph signal must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def operator_for(bundle, family: str):
    """Resolve the graph operator: a bundle picks per family, matrices pass through."""
    if isinstance(bundle, LaplacianBundle):
        if family == CHEBYSHEV:
            return bundle.scaled_laplacian_sp
        if family == DIFFUSION:
            return bundle.normalized_adjacency_sp
        raise InvalidValue(f"unknown filter family {family!r}")
    if sparse.issparse(bundle):
        return bundle.tocsr()
    mat = np.asarray(bundle, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"graph operator must be square, got {mat.shape}")
    return mat


def _apply_operator(op, x):
    """op @ x with instrumentation; x may be a Tensor or an array."""
    global _matvec_columns
    xv = ad.value_of(x)
    _matvec_columns += 1 if xv.ndim == 1 else xv.shape[1]
    if sparse.issparse(op):
        return ad.spmm(op, x)
    return ad.matmul(op, x)


def _coeff(theta, l: int):
    if isinstance(theta, ChebCoeffs):
        return theta.theta[l]
    return ad.getitem(theta, l) if ad.is_tensor(theta) else np.asarray(theta)[l]


def _coeff_len(theta) -> int:
    if isinstance(theta, ChebCoeffs):
        return theta.order
    return ad.value_of(theta).shape[0]


def _check_signal(op, y):
    m = op.shape[0]
    yv = ad.value_of(y)
    if yv.ndim not in (1, 2) or yv.shape[0] != m:
        raise ShapeError(f"signal shape {yv.shape} incompatible with operator of size {m}")


def _polynomial_filter(op, theta, y, family: str):
    length = _coeff_len(theta)
    if length < 1:
        raise InvalidValue("filter needs at least one coefficient")
    _check_signal(op, y)
    out = ad.mul(_coeff(theta, 0), y)
    if length == 1:
        return out
    prev, cur = y, _apply_operator(op, y)
    out = ad.add(out, ad.mul(_coeff(theta, 1), cur))
    for l in range(2, length):
        if family == CHEBYSHEV:
            nxt = ad.sub(ad.mul(2.0, _apply_operator(op, cur)), prev)
        else:
            nxt = _apply_operator(op, cur)
        out = ad.add(out, ad.mul(_coeff(theta, l), nxt))
        prev, cur = cur, nxt
    return out


def chebyshev_filter(bundle, theta, y):
    """Apply sum_l theta_l T_l(S) to a signal, S the scaled Laplacian.

    T_0 y = y, T_1 y = S y, T_l y = 2 S T_{l-1} y - T_{l-2} y; cost is one
    operator application per term beyond the first.
    """
    op = operator_for(bundle, CHEBYSHEV)
    return _polynomial_filter(op, theta, y, CHEBYSHEV)


def diffusion_filter(bundle, theta, y):
    """Apply sum_l theta_l A_hat^l to a signal, A_hat the normalized adjacency."""
    op = operator_for(bundle, DIFFUSION)
    return _polynomial_filter(op, theta, y, DIFFUSION)


def exact_spectral_filter(bundle, theta, y):
    """Dense eigendecomposition oracle for the Chebyshev filter.

    Diagonalizes the scaled operator S = U diag(w) U^T, evaluates the
    Chebyshev series at each eigenvalue, and reconstructs U p(w) U^T y.
    Intended for tests; refuses instances beyond the dense budget.
    """
    op = operator_for(bundle, CHEBYSHEV)
    if sparse.issparse(op):
        op = op.toarray()
    m = op.shape[0]
    if m > ORACLE_MAX_NODES:
        raise OracleBudgetExceeded(f"{m} nodes exceeds oracle budget {ORACLE_MAX_NODES}")
    yv = ad.value_of(y)
    if yv.shape[0] != m:
        raise ShapeError(f"signal shape {yv.shape} incompatible with operator of size {m}")
    coeffs = theta.theta if isinstance(theta, ChebCoeffs) else ad.value_of(theta)
    eigenvalues, eigenvectors = np.linalg.eigh(op)
    gains = np.polynomial.chebyshev.chebval(eigenvalues, coeffs)
    if yv.ndim == 1:
        return eigenvectors @ (gains * (eigenvectors.T @ yv))
    return eigenvectors @ (gains[:, None] * (eigenvectors.T @ yv))


def graph_conv_layer(bundle, theta_tensor, y, activation: str = "tanh",
                     family: str = CHEBYSHEV):
    """Multi-channel graph convolution: P input channels -> Q outputs.

    ``theta_tensor`` has shape (P, Q, L); output column q is
    activation(sum_p filter(theta[p, q, :], y[:, p])). Implemented by
    building the polynomial basis once for all channels and contracting
    each order's basis block with its (P, Q) coefficient slice.
    """
    if activation not in ("tanh", "none"):
        raise InvalidValue(f"activation must be tanh/none, got {activation!r}")
    if family not in (CHEBYSHEV, DIFFUSION):
        raise InvalidValue(f"unknown filter family {family!r}")
    op = operator_for(bundle, family)
    if isinstance(y, GraphSignal):
        y = y.values
    yv = ad.value_of(y)
    tv = ad.value_of(theta_tensor)
    if yv.ndim != 2:
        raise ShapeError(f"layer input must be 2-D, got {yv.shape}")
    if tv.ndim != 3 or tv.shape[0] != yv.shape[1]:
        raise ShapeError(
            f"coefficient tensor {tv.shape} incompatible with input of {yv.shape[1]} channels")
    if yv.shape[0] != op.shape[0]:
        raise ShapeError(f"signal has {yv.shape[0]} rows, operator {op.shape[0]}")

    length = tv.shape[2]

    def theta_slice(l):
        if ad.is_tensor(theta_tensor):
            return ad.getitem(theta_tensor, (slice(None), slice(None), l))
        return tv[:, :, l]

    out = ad.matmul(y, theta_slice(0))
    prev, cur = y, None
    for l in range(1, length):
        if l == 1:
            cur = _apply_operator(op, y)
        elif family == CHEBYSHEV:
            prev, cur = cur, ad.sub(ad.mul(2.0, _apply_operator(op, cur)), prev)
        else:
            cur = _apply_operator(op, cur)
        out = ad.add(out, ad.matmul(cur, theta_slice(l)))
    if activation == "tanh":
        out = ad.tanh(out)
    return out
