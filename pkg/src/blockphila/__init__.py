"""Block-coordinate inexact forward-backward solver for plug-and-play
image restoration with gradient-step denoisers."""

from .tensor import (
    ImageTensor, BlockPartition, PaddedBlock, PartitionError,
    make_partition, extract_block, scatter_block, extract_padded,
)
from .operators import BlurKernel, Spectrum, ForwardModel, gaussian_kernel, diagonalize
from .denoisers import GsDenoiser, LinearConvDenoiser, TinyConvNet, Regularizer
from .prox import (
    ProxSubproblem, ProxCertificate, ProxSolveError,
    prox_ls_deblur, prox_ls_sr, h_value, solve_block_prox,
)
from .solver import (
    SolverConfig, SolverState, VARIANTS,
    fista_beta, bb_steplength, run,
)
from .diagnostics import Trace, TraceRow, psnr, min_grad_rate_check, rate_fit, certificate_report
from .problems import ProblemSpec, Objective, default_params, degrade, initial_point
from .imgio import read_image, write_image

__version__ = "0.1.0"
