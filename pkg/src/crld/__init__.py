"""Consistency-regularised logit distillation on a small numpy autodiff core."""

__version__ = "0.1.0"

from crld.tensor import Tensor, Tape, TapeError, backward, no_grad  # noqa: E402

__all__ = ["Tensor", "Tape", "TapeError", "backward", "no_grad", "__version__"]
