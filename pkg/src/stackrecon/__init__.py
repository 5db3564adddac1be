"""stackrecon: scan-specific reconstruction of isotropic 3D MR volumes from
motion-corrupted stacks of thick 2D slices.

The package alternates unsupervised slice-to-volume registration with
decoder-based super-resolution through a differentiable slice-acquisition
model; a simulator and evaluation suite make the whole loop verifiable on
synthetic phantoms.
"""

from .acquisition import (
    PsfModel,
    SliceGeometry,
    draw_psf_offsets,
    gaussian_weight,
    oriented_gaussian_sample,
    predict_slice,
    psf_covariance,
)
from .autodiff import Adam, AdamState, DiffTensor, Tape, adam_step
from .errors import InputError, NumericalError, StackreconError
from .metrics import GmmComponent, fit_gmm3, motion_error, ncc_volume, psnr, pve_proxy, ssim
from .nifti import read_nifti, write_nifti
from .pipeline import (
    ReconstructionConfig,
    normalize_stack_intensities,
    reconstruct,
    register_stacks_v2v,
)
from .rigid import (
    RigidTransform,
    compose,
    geodesic_rotation_deg,
    inverse,
    matrix_to_params,
    params_to_matrix,
)
from .simulate import (
    MotionConfig,
    PhantomSpec,
    make_phantom,
    random_walk_trajectory,
    simulate_dataset,
    simulate_stack,
)
from .srr import DeepDecoder, SrrConfig, fit_srr, srr_residual_loss, total_variation
from .svr import LocalizationNet, SvrConfig, direct_refine, fit_svr, ncc, predict_transform, svr_loss
from .volume import (
    Slice2D,
    SliceStack,
    SliceState,
    VoxelGrid3D,
    scatter_init_volume,
    trilinear_sample,
    world_from_index,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
