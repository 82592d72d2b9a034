"""Neural-network solvers for NPA feasibility problems in the CHSH Bell scenario."""

from .bell import Behavior, Relabeling, canonicalize, chsh_value, isotropic, pr_box
from .linalg import eig_min, grad_min_eig
from .moments import LEVELS, MomentLayout, assemble_dual, assemble_primal, build_layout
from .neural import ModelFile, TrainConfig, predict, train
from .oracle import OracleResult, Verdict, max_min_eig, verdict

__version__ = "0.1.0"
