"""Sparse TopK autoencoder compression of dense embeddings with exact sparse retrieval."""

from .config import TrainConfig, load_config, parse_config
from .core import (
    DimensionMismatch,
    SparseMatrixCSR,
    SparseVector,
    sparse_dense_matvec,
    sparse_dot,
    top_k_select,
)
from .eval import BenchProtocol, BenchResult, compare_fidelity, recon_mse, run_bench
from .index import (
    DenseIndex,
    SparseIndex,
    build_dense_index,
    build_sparse_index,
    knn,
    knn_batch,
    knn_dense,
    knn_dense_batch,
    one_nn_accuracy,
)
from .io import FormatError, load_dense, load_labels, load_sparse, save_dense, save_labels, save_sparse
from .model import SaeModel, decode, encode, encode_batch, forward, init_model, load_model, save_model
from .objective import aux_loss, batch_loss_and_grads, ncl_loss, recon_loss
from .trainer import DeadLatentTracker, TrainReport, checkpoint, dead_fraction, resume, train

__version__ = "0.1.0"
