"""
Preferential-sampling-aware coalescent inference of effective population
size trajectories from fixed genealogies.
"""
__version__ = "0.1.0"

from .genealogy import Genealogy, Grid, build_grid, grid_stats, parse_newick, read_newick
from .model import ModelSpec, Posterior, log_posterior
from .priors import FieldPrior
from .summary import EvalGrid, PosteriorSummary

__all__ = [
    "__version__",
    "Genealogy",
    "Grid",
    "build_grid",
    "grid_stats",
    "parse_newick",
    "read_newick",
    "ModelSpec",
    "Posterior",
    "log_posterior",
    "FieldPrior",
    "EvalGrid",
    "PosteriorSummary",
]
