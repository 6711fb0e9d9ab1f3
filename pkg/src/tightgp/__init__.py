"""Sparse Gaussian processes with a scaled conditional posterior.

Collapsed and uncollapsed variational bounds, orthogonally decoupled
inducing sets, a Bayesian GPLVM, predictive distributions and the training
and command-line plumbing around them.
"""
from .bounds import BoundValue, CollapsedKind, collapsed_bound, exact_lml, optimal_m, optimal_qu
from .kernels import Hyperparams, InputError, Kernel, KernelFamily, NotPositiveDefinite, kernel_eval
from .predict import CapabilityError, VarianceMode, predict
from .variational import ConditionalScaling, SvgpState, VariationalGaussian, elbo, minibatch_elbo

__version__ = "0.1.0"

__all__ = [
    "BoundValue", "CollapsedKind", "collapsed_bound", "exact_lml", "optimal_m", "optimal_qu",
    "Hyperparams", "InputError", "Kernel", "KernelFamily", "NotPositiveDefinite", "kernel_eval",
    "CapabilityError", "VarianceMode", "predict",
    "ConditionalScaling", "SvgpState", "VariationalGaussian", "elbo", "minibatch_elbo",
]
