"""Single-image 3D face reconstruction, DR-feature shape augmentation and evaluation."""

from .camera import Extrinsics, Intrinsics, epnp_pose, init_intrinsics, project
from .dr import DRDecoder, DRFeature, decode_dr, encode_dr
from .evaluation import armse, evaluate_pair, icp_refine, procrustes_align
from .mesh import Mesh, cotangent_weights, load_mesh, save_mesh
from .solver import BlendshapeBasis, FitParams, LandmarkSet, SolverConfig, fit
from .texture import UVTexture, poisson_blend, project_texture

__version__ = "0.1.0"

__all__ = [
    "BlendshapeBasis", "DRDecoder", "DRFeature", "Extrinsics", "FitParams", "Intrinsics", "LandmarkSet",
    "Mesh", "SolverConfig", "UVTexture", "armse", "cotangent_weights", "decode_dr", "encode_dr",
    "epnp_pose", "evaluate_pair", "fit", "icp_refine", "init_intrinsics", "load_mesh", "poisson_blend",
    "procrustes_align", "project", "project_texture", "save_mesh",
]
