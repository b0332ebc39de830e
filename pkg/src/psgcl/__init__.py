"""Contrastive pretraining of per-modality sleep-recording encoders and its evaluation suite."""

__version__ = "0.1.0"

from .modalities import DEFAULT_SPECS, MODALITY_NAMES, ModalitySpec  # noqa: E402
from .losses import leave_one_out_loss, pairwise_loss  # noqa: E402
from .encoder import Encoder, EncoderConfig, build_encoder, load_checkpoint, save_checkpoint  # noqa: E402
from .embeddings import EmbeddingSet  # noqa: E402
from .pretrain import TrainConfig, extract_embeddings, lr_at_epoch, pretrain  # noqa: E402
from .probe import MetricsReport, auprc, auroc, evaluate_task, few_shot_curve, fit_probe  # noqa: E402
from .retrieval import cross_modal_matrix, median_rank, recall_at_k  # noqa: E402

__all__ = [
    "DEFAULT_SPECS", "MODALITY_NAMES", "ModalitySpec", "pairwise_loss", "leave_one_out_loss",
    "Encoder", "EncoderConfig", "build_encoder", "save_checkpoint", "load_checkpoint",
    "EmbeddingSet", "TrainConfig", "pretrain", "extract_embeddings", "lr_at_epoch",
    "MetricsReport", "auroc", "auprc", "fit_probe", "evaluate_task", "few_shot_curve",
    "cross_modal_matrix", "recall_at_k", "median_rank",
]
