"""Gram-matrix texture transfer by pixel optimization."""

from geostyle.texture.losses import (
    LossTerms,
    TransferObjective,
    content_loss,
    texture_loss,
    total_loss,
)
from geostyle.texture.transfer import (
    LOSS_LOG_HEADER,
    BankJobResult,
    LevelResult,
    LossLog,
    LossRecord,
    TransferResult,
    bank_entry_path,
    multiscale_transfer,
    optimize_level,
    prepare_style_bank,
)

__all__ = [
    # Losses
    "LossTerms",
    "TransferObjective",
    "content_loss",
    "texture_loss",
    "total_loss",
    # Optimization
    "LOSS_LOG_HEADER",
    "LevelResult",
    "LossLog",
    "LossRecord",
    "TransferResult",
    "multiscale_transfer",
    "optimize_level",
    # Style bank
    "BankJobResult",
    "bank_entry_path",
    "prepare_style_bank",
]
