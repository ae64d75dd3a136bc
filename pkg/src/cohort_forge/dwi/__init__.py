"""Diffusion MRI input parsing, shell rules and tensor metrics."""
from .gradients import (GradientScheme, fitting_volumes, group_shells, read_bval_bvec,
                        select_shell, shell_sufficiency)
from .nifti import Volume, read_nifti, write_nifti
from .tensor import (TensorMaps, VoxelTensor, aggregate_metrics, fa, fit_tensor_volume,
                     fit_tensor_wls, md, session_metrics)

__all__ = [
    "GradientScheme", "TensorMaps", "Volume", "VoxelTensor", "aggregate_metrics", "fa",
    "fit_tensor_volume", "fit_tensor_wls", "fitting_volumes", "group_shells", "md",
    "read_bval_bvec", "read_nifti", "select_shell", "session_metrics", "shell_sufficiency",
    "write_nifti",
]
