"""Numpy learning stack: layers with exact gradients, losses, optimizers."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (
    GruParams,
    LstmParams,
    ShapeError,
    dense_backward,
    dense_forward,
    dropout,
    dropout_backward,
    embedding_backward,
    embedding_forward,
    gru_backward,
    gru_forward,
    lstm_backward,
    lstm_forward,
    lstm_scan,
    lstm_scan_backward,
    segment_sum,
    relu_backward,
    relu_forward,
    sigmoid,
)
from .losses import mse_loss, rmse_loss
from .optim import Adam, SgdDecay, make_optimizer
