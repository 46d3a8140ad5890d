"""Robust rigid registration of 3D point clouds by IRLS on SE(3)."""

from .cloud import PointCloud
from .correspondence import (
    IcpConfig,
    SpatialIndex,
    initialize_from_pairwise,
    motion_average,
    multiview_icp,
    nn_correspondences,
    robust_icp_pair,
    spanning_tree_init,
)
from .errors import (
    DegenerateGeometry,
    DisconnectedGraph,
    EmptyAfterPrune,
    IndexOutOfRange,
    ParseError,
    RegistrationError,
    UnsupportedFormat,
)
from .liegroup import RigidMotion, exp_se3, exp_so3, log_se3, log_so3
from .multiview import Edge, ViewGraph, estimate_multiview
from .pairwise import (
    CorrespondenceSet,
    Parametrization,
    RegistrationResult,
    SolverConfig,
    estimate_pairwise,
    estimate_pairwise_extrinsic,
    umeyama_closed_form,
)
from .robust_loss import AnnealSchedule, Loss, LossKind

__version__ = "0.1.0"
