"""Template-based 6D object pose estimation from gray and depth images.

Typical use::

    from pcofmod import PoseRange, TrainingConfig, build_bpt, build_pose_lattice, estimate_poses

    lattice = build_pose_lattice(PoseRange(...))
    tree = build_bpt(mesh, lattice, K, TrainingConfig(...))
    results = estimate_poses(gray, depth, tree, threshold=0.4)
"""

from .errors import (
    BadMagicError, DegenerateGeometryError, EmptyLatticeError, EmptyTemplateError, ICPDivergedError,
    InsufficientDataError, InvalidArgumentError, ModelFormatError, PcofError, RenderOutOfFrameError,
    TruncatedModelError, VersionMismatchError,
)
from .evalkit import EvalConfig, GroundTruthRecord, add_metric, f1_sweep, pose_error, synth_scene
from .features import FeaturePyramid, build_feature_pyramid
from .geometry import PoseLattice, PoseRange, build_pose_lattice, lattice_node_to_pose, subdivide_icosahedron
from .matcher import Detection, detect, nms, rearrange, score_block, score_naive
from .meshes import load_mesh, toy_object
from .modelfile import load_model, read_model, save_model, write_model
from .pipeline import PoseResult, estimate_poses
from .pose import Pose6D
from .refine import refine_icp, refine_pnp
from .render import CameraIntrinsics, TriangleMesh, render_depth
from .templates import BalancedPoseTree, Template, TemplatePair, TrainingConfig, build_bpt

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "BalancedPoseTree", "CameraIntrinsics", "DegenerateGeometryError", "Detection",
    "EmptyLatticeError", "EmptyTemplateError", "EvalConfig", "FeaturePyramid", "GroundTruthRecord",
    "ICPDivergedError", "InsufficientDataError", "InvalidArgumentError", "ModelFormatError", "PcofError",
    "Pose6D", "PoseLattice", "PoseRange", "PoseResult", "RenderOutOfFrameError", "Template", "TemplatePair",
    "TrainingConfig", "TriangleMesh", "TruncatedModelError", "VersionMismatchError", "add_metric", "build_bpt",
    "build_feature_pyramid", "build_pose_lattice", "detect", "estimate_poses", "f1_sweep", "lattice_node_to_pose",
    "load_mesh", "load_model", "nms", "pose_error", "read_model", "rearrange", "refine_icp", "refine_pnp",
    "render_depth", "save_model", "score_block", "score_naive", "subdivide_icosahedron", "synth_scene",
    "toy_object", "write_model",
]
