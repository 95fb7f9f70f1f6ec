"""ROI cone-beam tomography: acquisition geometry, projection, inversion and fixed-point ROI reconstruction."""
from .geometry import Ball, Detector, SourceGeometry, active_ray_volume, truncated_ray_volume, tuy_check
from .inversion import InverseOperator, VolumeGrid, fdk, fourier_slice_inverse, grangeat_inverse, spherical_inverse
from .phantom import Phantom, VoxelVolume, ball_phantom, shepp_logan_3d, voxelize
from .projector import ParallelGrid, ProjectionSet, complement, forward, truncate
from .regularize import MollifierKernel, WaveletConfig, mollify, wavelet_shrink
from .roi_iter import IterConfig, ReconReport, critical_radius_sweep, estimate_contraction, rl1_error, roi_reconstruct

__version__ = "0.1.0"

__all__ = [
    "Ball", "Detector", "SourceGeometry", "active_ray_volume", "truncated_ray_volume", "tuy_check",
    "InverseOperator", "VolumeGrid", "fdk", "fourier_slice_inverse", "grangeat_inverse", "spherical_inverse",
    "Phantom", "VoxelVolume", "ball_phantom", "shepp_logan_3d", "voxelize",
    "ParallelGrid", "ProjectionSet", "complement", "forward", "truncate",
    "MollifierKernel", "WaveletConfig", "mollify", "wavelet_shrink",
    "IterConfig", "ReconReport", "critical_radius_sweep", "estimate_contraction", "rl1_error", "roi_reconstruct",
]
