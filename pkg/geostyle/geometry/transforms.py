"""Affine and thin-plate-spline maps on normalized coordinates.

All coordinates live in the frame [-1, 1]^2, x to the right and y down.
Point sets are tensors shaped ``(N, 2)`` or batched ``(B, N, 2)``; parameters
are ``(6,)``/``(18,)`` or batched ``(B, 6)``/``(B, 18)``. Functions compute in
the dtype of the points, so float64 inputs give float64-accurate results.

The TPS is the standard one with radial basis ``U(r) = r^2 log r^2`` plus an
affine part, interpolating the displacements of a 3x3 control grid at
{-1, 0, 1}^2, which gives the 18 parameters.
"""

from __future__ import annotations

import functools

import torch

from geostyle.base import (
    AffineParams,
    ArgumentError,
    StateError,
    TpsParams,
    WarpKind,
    WarpParams,
)

SampleGrid = torch.Tensor

TPS_GRID_SIDE = 3
TPS_CONTROL_COUNT = TPS_GRID_SIDE * TPS_GRID_SIDE


def uniform_grid(
    size: int = 20, dtype: torch.dtype = torch.float32, device: torch.device | None = None
) -> SampleGrid:
    """``size x size`` uniform lattice spanning [-1, 1]^2, row-major ``(size*size, 2)``."""
    if size < 2:  # noqa: PLR2004
        raise ArgumentError(f"A sample grid needs at least 2 points per side, got {size}")
    axis = torch.linspace(-1.0, 1.0, size, dtype=dtype, device=device)
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def control_points(
    dtype: torch.dtype = torch.float64, device: torch.device | None = None
) -> torch.Tensor:
    """The 9 TPS control points, row-major over y then x."""
    return uniform_grid(TPS_GRID_SIDE, dtype=dtype, device=device)


def params_to_tensor(
    params: WarpParams, dtype: torch.dtype = torch.float32, device: torch.device | None = None
) -> torch.Tensor:
    return torch.tensor(params.values(), dtype=dtype, device=device)


def tensor_to_params(kind: WarpKind, values: torch.Tensor) -> WarpParams:
    """Convert a single parameter vector to its pydantic model."""
    flat = [float(v) for v in values.detach().reshape(-1).cpu().tolist()]
    if len(flat) != kind.param_count:
        raise ArgumentError(f"{kind} needs {kind.param_count} values, got {len(flat)}")
    if kind == WarpKind.AFFINE:
        return AffineParams(theta=tuple(flat))
    return TpsParams(offsets=tuple(flat))


def identity_tensor(
    kind: WarpKind, dtype: torch.dtype = torch.float32, device: torch.device | None = None
) -> torch.Tensor:
    params = AffineParams.identity() if kind == WarpKind.AFFINE else TpsParams.identity()
    return params_to_tensor(params, dtype=dtype, device=device)


def _broadcast(
    theta: torch.Tensor, points: torch.Tensor, count: int
) -> tuple[torch.Tensor, torch.Tensor, bool]:
    if theta.shape[-1] != count:
        raise ArgumentError(f"Expected {count} parameters, got {theta.shape[-1]}")
    if points.shape[-1] != 2:  # noqa: PLR2004
        raise ArgumentError(f"Points must have shape (..., N, 2), got {tuple(points.shape)}")
    squeeze = theta.dim() == 1 and points.dim() == 2  # noqa: PLR2004
    theta = theta.reshape(-1, count)
    if points.dim() == 2:  # noqa: PLR2004
        points = points.unsqueeze(0).expand(theta.shape[0], -1, -1)
    elif theta.shape[0] == 1 and points.shape[0] != 1:
        theta = theta.expand(points.shape[0], -1)
    if theta.shape[0] != points.shape[0]:
        raise ArgumentError(
            f"Batch mismatch: {theta.shape[0]} parameter sets for {points.shape[0]} point sets"
        )
    return theta.to(points.dtype), points, squeeze


def affine_apply(theta: torch.Tensor, points: SampleGrid) -> SampleGrid:
    """Map ``(x, y)`` to ``(a11 x + a12 y + tx, a21 x + a22 y + ty)``."""
    theta, points, squeeze = _broadcast(theta, points, 6)
    matrix = theta.reshape(-1, 2, 3)
    out = points @ matrix[:, :, :2].transpose(1, 2) + matrix[:, :, 2].unsqueeze(1)
    return out[0] if squeeze else out


def _radial_basis(sq_dist: torch.Tensor) -> torch.Tensor:
    # U = r^2 log r^2, with U(0) = 0 and a finite gradient at the control points
    safe = torch.where(sq_dist > 0, sq_dist, torch.ones_like(sq_dist))
    return torch.where(sq_dist > 0, sq_dist * torch.log(safe), torch.zeros_like(sq_dist))


@functools.cache
def _tps_system_inverse() -> torch.Tensor:
    """Inverse of the 12x12 TPS interpolation system of the fixed control grid."""
    ctrl = control_points(dtype=torch.float64)
    kernel = _radial_basis(torch.cdist(ctrl, ctrl).square())
    poly = torch.cat([torch.ones(TPS_CONTROL_COUNT, 1, dtype=torch.float64), ctrl], dim=1)
    system = torch.zeros(TPS_CONTROL_COUNT + 3, TPS_CONTROL_COUNT + 3, dtype=torch.float64)
    system[:TPS_CONTROL_COUNT, :TPS_CONTROL_COUNT] = kernel
    system[:TPS_CONTROL_COUNT, TPS_CONTROL_COUNT:] = poly
    system[TPS_CONTROL_COUNT:, :TPS_CONTROL_COUNT] = poly.T
    try:
        return torch.linalg.inv(system)
    except RuntimeError as e:
        raise StateError(f"TPS interpolation system is singular: {e}") from e


def tps_coefficients(offsets: torch.Tensor) -> torch.Tensor:
    """Solve for the ``(B, 12, 2)`` TPS weights (9 radial, then constant, x, y)."""
    offsets = offsets.reshape(-1, TPS_CONTROL_COUNT * 2)
    dtype, device = offsets.dtype, offsets.device
    ctrl = control_points(dtype=dtype, device=device)
    targets = ctrl.unsqueeze(0) + offsets.reshape(-1, TPS_CONTROL_COUNT, 2)
    rhs = torch.cat([targets, targets.new_zeros(targets.shape[0], 3, 2)], dim=1)
    inverse = _tps_system_inverse().to(dtype=dtype, device=device)
    return inverse.unsqueeze(0) @ rhs


def tps_apply(offsets: torch.Tensor, points: SampleGrid) -> SampleGrid:
    """Evaluate the TPS defined by control displacements ``offsets`` at ``points``."""
    offsets, points, squeeze = _broadcast(offsets, points, TPS_CONTROL_COUNT * 2)
    coeffs = tps_coefficients(offsets)
    ctrl = control_points(dtype=points.dtype, device=points.device)
    diff = points.unsqueeze(2) - ctrl.view(1, 1, TPS_CONTROL_COUNT, 2)
    basis = _radial_basis(diff.square().sum(dim=-1))
    poly = torch.cat([torch.ones_like(points[..., :1]), points], dim=-1)
    out = basis @ coeffs[:, :TPS_CONTROL_COUNT] + poly @ coeffs[:, TPS_CONTROL_COUNT:]
    return out[0] if squeeze else out


def apply_transform(kind: WarpKind, theta: torch.Tensor, points: SampleGrid) -> SampleGrid:
    """Dispatch to :func:`affine_apply` or :func:`tps_apply` by transform family."""
    if kind == WarpKind.AFFINE:
        return affine_apply(theta, points)
    return tps_apply(theta, points)


def apply_params(params: WarpParams, points: SampleGrid) -> SampleGrid:
    """Apply a pydantic parameter model to a point set."""
    theta = params_to_tensor(params, dtype=points.dtype, device=points.device)
    return apply_transform(params.kind, theta, points)


def cascade_apply(
    affine_theta: torch.Tensor, tps_offsets: torch.Tensor, points: SampleGrid
) -> SampleGrid:
    """Backward map of the affine->TPS cascade: TPS first, then the affine stage."""
    return affine_apply(affine_theta, tps_apply(tps_offsets, points))
