"""Unsupervised pretraining of a query-based detector with localized
soft contrastive targets, at desk scale on numpy."""

from .boxes import BoxN, BoxSet, giou_loss, iou, l1_coord_loss, pairwise_iou
from .config import RunConfig
from .detector import Detector, DetectorConfig, DetectorParams, ema_update, init_pair
from .errors import ConfigError, ContractError, DegenerateError, FormatError, OracleError, ProsecoError
from .matching import MatchAssignment, box_cost, hungarian, proposal_cost
from .objectives import global_loss, infonce_loss, locnce_loss, locsce_loss, sce_loss
from .proposals import SSParams, selective_search
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "BoxN", "BoxSet", "ConfigError", "ContractError", "DegenerateError", "Detector", "DetectorConfig",
    "DetectorParams", "FormatError", "MatchAssignment", "OracleError", "ProsecoError", "RunConfig",
    "SSParams", "Tensor", "box_cost", "ema_update", "giou_loss", "global_loss", "grad_check", "hungarian",
    "infonce_loss", "init_pair", "iou", "l1_coord_loss", "locnce_loss", "locsce_loss", "no_grad",
    "pairwise_iou", "proposal_cost", "sce_loss", "selective_search",
]
