"""Multilinear (tensor) factor analysis with whole/part block structure.

Flat M-mode SVD and HOOI, the M-mode Block SVD over a segment hierarchy,
its incremental bottom-up variant, and multilinear projection for inferring
causal-factor labels from new observations.
"""

from .block import (
    BlockFactorModel,
    BlockSolverConfig,
    block_mmode_svd,
    factorize_independent_parts,
    factorize_overlapping_shared_rank,
    reconstruct_block,
    solve_core,
    update_mode_matrix,
)
from .factor import FactorModel, RankSpec, hooi_refine, mmode_svd, rank1_cp, reconstruct
from .hierarchy import (
    HierarchySpec,
    InvalidBankError,
    Node,
    SegmentFilter,
    assemble_hierarchical,
    expand_overlaps,
    pyramid_filters,
    segment,
    subdivision,
    validate_bank,
)
from .incremental import (
    ChildFactorization,
    CostModel,
    append_child,
    apply_general_filters,
    incremental_block_svd,
    leaf_factorize,
    merge_children,
    merge_children_mode,
    parent_core,
    predict_cost,
    whole_reconstruction,
)
from .io import load_model, save_model
from .projection import (
    FactorRepresentation,
    Label,
    NoDirectionError,
    Projector,
    infer_labels,
    label_rows,
    multilinear_project,
    project_block,
)
from .synth import ExperimentReport, SynthConfig, bench_cost, label_grid, run_experiment, synth_generate
from .tensor import (
    khatri_rao_block,
    kronecker,
    matrixize,
    mode_product,
    pinv,
    read_dten,
    tensorize,
    thin_svd,
    vec,
    write_dten,
)

__version__ = "0.1.0"
