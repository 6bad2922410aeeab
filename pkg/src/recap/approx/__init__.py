from .network import (
    Network,
    OutputLoss,
    NumericFailure,
    init_network,
    forward,
    forward_trace,
    backprop,
    batch_loss_and_gradients,
    loss_and_gradients,
    param_count,
)
from .optim import AdamState, init_adam, adam_step
from .checkpoint import (
    CheckpointCorruptError,
    CheckpointFormatError,
    load_checkpoint,
    read_blocks,
    save_checkpoint,
    write_blocks,
)

__all__ = [
    "Network",
    "OutputLoss",
    "NumericFailure",
    "init_network",
    "forward",
    "forward_trace",
    "backprop",
    "batch_loss_and_gradients",
    "loss_and_gradients",
    "param_count",
    "AdamState",
    "init_adam",
    "adam_step",
    "CheckpointFormatError",
    "CheckpointCorruptError",
    "save_checkpoint",
    "load_checkpoint",
    "write_blocks",
    "read_blocks",
]
