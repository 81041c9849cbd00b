"""Image-domain dual-energy CT material decomposition with learned mixed
unions of unitary sparsifying transforms."""
from .core_types import (AttenuationPair, DecompositionParams, ImageGrid, MassAttenuationMatrix,
                         MaterialImagePair, MultraModel, NoiseWeights, ObjectiveTrace,
                         PatchConfig, SparseCodeSet, TransformUnion, UnionKind, Unit,
                         UnitaryTransform)
from .decompose import (DecompositionSystem, EpParams, StParams, decompose_cultra,
                        decompose_ep, decompose_multra, decompose_st, direct_inversion,
                        image_update, objective_p0, pixel_cluster_map, sparse_code_and_cluster)
from .patch_ops import aggregate_patches, extract_patches, hard_threshold, sparsify_cost
from .sim_metrics import generate_phantom, nps, rmse, simulate_attenuation
from .transform_learning import (LearningParams, cluster_and_code, learn_multra_model,
                                 learn_union, procrustes_update)

__version__ = "0.1.0"

__all__ = [
    "AttenuationPair",
    "DecompositionParams",
    "ImageGrid",
    "MassAttenuationMatrix",
    "MaterialImagePair",
    "MultraModel",
    "NoiseWeights",
    "ObjectiveTrace",
    "PatchConfig",
    "SparseCodeSet",
    "TransformUnion",
    "UnionKind",
    "Unit",
    "UnitaryTransform",
    "DecompositionSystem",
    "EpParams",
    "StParams",
    "decompose_cultra",
    "decompose_ep",
    "decompose_multra",
    "decompose_st",
    "direct_inversion",
    "image_update",
    "objective_p0",
    "pixel_cluster_map",
    "sparse_code_and_cluster",
    "aggregate_patches",
    "extract_patches",
    "hard_threshold",
    "sparsify_cost",
    "generate_phantom",
    "nps",
    "rmse",
    "simulate_attenuation",
    "LearningParams",
    "cluster_and_code",
    "learn_multra_model",
    "learn_union",
    "procrustes_update",
]
