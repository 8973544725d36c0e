"""Desk-scale lab for low-frequency eigen noise shaping."""

__version__ = "0.1.0"

from .numerics import (  # noqa: F401
    ConvergenceError,
    DivergenceError,
    EigenDecomposition,
    NumericalError,
    RngState,
    ShapeError,
    sample_standard_gaussian,
    symmetric_eigen,
)
from .codec import (  # noqa: F401
    CoeffSplit,
    PatchBasis,
    PatchGeometry,
    extract_basis,
    gaussian_preservation_check,
    load_basis,
    proj,
    recon,
    save_basis,
)
from .net import (  # noqa: F401
    LensConfig,
    LensParams,
    forward,
    init_lens_params,
    invert_fixed_point,
    load_checkpoint,
    modulate,
    save_checkpoint,
    spectral_norm,
)
from .world import (  # noqa: F401
    RewardField,
    ToyGenerator,
    ToyWorld,
    epsilon_estimate,
    make_generic_world,
    make_isotropic_world,
    make_lowfreq_world,
)
from .train import TrainConfig  # noqa: F401  (loop functions live in lenslab.train)
