"""Parametric spatial transforms and image warping."""

from geostyle.geometry.sampling import (
    SamplingField,
    cascade_field,
    field_from_tensor,
    make_sampling_field,
    pixel_lattice,
    warp_image,
)
from geostyle.geometry.transforms import (
    SampleGrid,
    affine_apply,
    apply_params,
    apply_transform,
    cascade_apply,
    control_points,
    identity_tensor,
    params_to_tensor,
    tensor_to_params,
    tps_apply,
    tps_coefficients,
    uniform_grid,
)

__all__ = [
    # Transforms
    "SampleGrid",
    "affine_apply",
    "apply_params",
    "apply_transform",
    "cascade_apply",
    "control_points",
    "identity_tensor",
    "params_to_tensor",
    "tensor_to_params",
    "tps_apply",
    "tps_coefficients",
    "uniform_grid",
    # Sampling
    "SamplingField",
    "cascade_field",
    "field_from_tensor",
    "make_sampling_field",
    "pixel_lattice",
    "warp_image",
]
