from .gradcheck import GradCheckItem, NonFiniteError, grad_check, relative_error
from .ops import (
    NormState,
    ShapeError,
    add,
    batch_norm,
    concat_channels,
    conv3d,
    elementwise,
    mean,
    mul,
    reduce,
    relu,
    softmax_channels,
    sum,
    transposed_conv3d,
)
from .tensor import AutodiffError, Node, Record, Tensor, active_record, backward, record_op

__all__ = [
    "AutodiffError",
    "GradCheckItem",
    "Node",
    "NonFiniteError",
    "NormState",
    "Record",
    "ShapeError",
    "Tensor",
    "active_record",
    "add",
    "backward",
    "batch_norm",
    "concat_channels",
    "conv3d",
    "elementwise",
    "grad_check",
    "mean",
    "mul",
    "record_op",
    "reduce",
    "relative_error",
    "relu",
    "softmax_channels",
    "sum",
    "transposed_conv3d",
]
