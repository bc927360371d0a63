"""Sampling fields over pixel lattices and differentiable backward warping."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from geostyle.base import ArgumentError, FillPolicy, ImageTensor, WarpKind, WarpParams
from geostyle.geometry.transforms import (
    apply_transform,
    cascade_apply,
    params_to_tensor,
)

# (B, H, W, 2) normalized source coordinates, x first, in the layout grid_sample expects
SamplingField = torch.Tensor

_PADDING_MODES = {
    FillPolicy.REPLICATE: "border",
    FillPolicy.ZEROS: "zeros",
    FillPolicy.REFLECT: "reflection",
}


def pixel_lattice(
    height: int,
    width: int,
    dtype: torch.dtype = torch.float32,
    device: torch.device | None = None,
) -> torch.Tensor:
    """Normalized pixel centers of a ``height x width`` canvas, shape ``(H, W, 2)``.

    Pixel ``u`` of ``n`` maps to ``(2u + 1) / n - 1``.
    """
    if height < 1 or width < 1:
        raise ArgumentError(f"Canvas must be at least 1x1, got {width}x{height}")
    xs = (2 * torch.arange(width, dtype=dtype, device=device) + 1) / width - 1
    ys = (2 * torch.arange(height, dtype=dtype, device=device) + 1) / height - 1
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([grid_x, grid_y], dim=-1)


def field_from_tensor(
    kind: WarpKind,
    theta: torch.Tensor,
    out_h: int,
    out_w: int,
) -> SamplingField:
    """Backward field of a batch of ``(B, p)`` parameters over an ``out_h x out_w`` canvas."""
    theta = theta.reshape(-1, kind.param_count)
    lattice = pixel_lattice(out_h, out_w, dtype=theta.dtype, device=theta.device).reshape(-1, 2)
    coords = apply_transform(kind, theta, lattice)
    return coords.reshape(theta.shape[0], out_h, out_w, 2)


def make_sampling_field(params: WarpParams, out_h: int, out_w: int) -> SamplingField:
    """Source coordinates, in the content image's frame, for every output pixel center."""
    return field_from_tensor(params.kind, params_to_tensor(params), out_h, out_w)


def cascade_field(
    affine_theta: torch.Tensor,
    tps_offsets: torch.Tensor,
    out_h: int,
    out_w: int,
) -> SamplingField:
    """Single field equivalent to warping by the affine stage and then by the TPS stage."""
    affine_theta = affine_theta.reshape(-1, 6)
    tps_offsets = tps_offsets.reshape(-1, 18).to(affine_theta.dtype)
    lattice = pixel_lattice(out_h, out_w, dtype=affine_theta.dtype, device=affine_theta.device)
    coords = cascade_apply(affine_theta, tps_offsets, lattice.reshape(-1, 2))
    return coords.reshape(-1, out_h, out_w, 2)


def warp_image(
    img: ImageTensor,
    field: SamplingField,
    fill: FillPolicy | str = FillPolicy.REPLICATE,
) -> ImageTensor:
    """Bilinearly sample ``img`` at ``field``; differentiable in both arguments.

    Args:
        img: ``(3, H, W)`` or ``(B, 3, H, W)`` image.
        field: ``(H', W', 2)`` or ``(B, H', W', 2)`` normalized source coordinates.
        fill: Policy for coordinates outside [-1, 1]^2.

    Returns:
        Image with the field's spatial size; unbatched if ``img`` was unbatched.

    Raises:
        ArgumentError: On an unknown fill policy or mismatched shapes.
    """
    try:
        policy = FillPolicy(fill)
    except ValueError as e:
        valid = ", ".join(p.value for p in FillPolicy)
        raise ArgumentError(f"Unknown fill policy: {fill}. Valid choices: {valid}") from e

    squeeze = img.dim() == 3  # noqa: PLR2004
    batch = img.unsqueeze(0) if squeeze else img
    if field.dim() == 3:  # noqa: PLR2004
        field = field.unsqueeze(0)
    if field.shape[0] == 1 and batch.shape[0] > 1:
        field = field.expand(batch.shape[0], -1, -1, -1)
    elif batch.shape[0] == 1 and field.shape[0] > 1:
        batch = batch.expand(field.shape[0], -1, -1, -1)
    if field.shape[0] != batch.shape[0] or field.shape[-1] != 2:  # noqa: PLR2004
        raise ArgumentError(
            f"Cannot warp images {tuple(batch.shape)} with field {tuple(field.shape)}"
        )

    out = F.grid_sample(
        batch,
        field.to(batch.dtype),
        mode="bilinear",
        padding_mode=_PADDING_MODES[policy],
        align_corners=False,
    )
    return out[0] if squeeze and out.shape[0] == 1 else out
