"""Fluid-registration toolkit for geodesic-subspace data augmentation."""

__version__ = "0.1.0"

from geoflow.grid import (
    DeformationMap,
    GridSpec,
    ScalarField,
    VectorField,
    compose_maps,
    divergence,
    gradient,
    identity_map,
    interpolate,
    jacobian_determinant,
)
from geoflow.kernel import KernelSpec, inner_product, smooth
from geoflow.labels import LabelMap, SoftLabelField, dice, label_fusion, warp_labels, warp_soft
from geoflow.shooting import GeodesicState, ShootConfig, epdiff_rhs, shoot, shoot_sequence
from geoflow.registration import OptimizerConfig, RegConfig, RegResult, build_momentum_set, register
from geoflow.subspace import MomentumSet, SamplerConfig, SubspaceSample, convex_combination, draw_sample
from geoflow.io import read_field, write_field

__all__ = [
    "DeformationMap",
    "GeodesicState",
    "GridSpec",
    "KernelSpec",
    "LabelMap",
    "MomentumSet",
    "OptimizerConfig",
    "RegConfig",
    "RegResult",
    "SamplerConfig",
    "ScalarField",
    "ShootConfig",
    "SoftLabelField",
    "SubspaceSample",
    "VectorField",
    "build_momentum_set",
    "compose_maps",
    "convex_combination",
    "dice",
    "divergence",
    "draw_sample",
    "epdiff_rhs",
    "gradient",
    "identity_map",
    "inner_product",
    "interpolate",
    "jacobian_determinant",
    "label_fusion",
    "read_field",
    "register",
    "shoot",
    "shoot_sequence",
    "smooth",
    "warp_labels",
    "warp_soft",
    "write_field",
]
