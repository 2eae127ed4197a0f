"""camforge: a small CNN engine with a GradCAM explainer, model edits
that plant chosen explanations, and a harness that measures them."""

from .data import (LabeledDataset, apply_stickers, dataset_from_manifest,
                   dataset_manifest, gen_shapes, with_stickers)
from .errors import (CamforgeError, GraphError, ModelFormatError, ShapeError,
                     SurgeryError, TrainingError)
from .evaluate import (EvalReport, EvalRow, accuracy, heatmap_distance,
                       run_table1, run_table2, score_drift)
from .gradcam import (GradCamResult, compute_alphas, compute_heatmap, explain,
                      normalize_heatmap)
from .model import (FeatureBranch, Model, ModelMeta, ScoreBranch,
                    build_minivgg, grad_scores_wrt_A)
from .modelfile import load_model, save_model
from .surgery import (SMILEY_8X8, AttackConfig, StickerPattern, attack_t1,
                      attack_t2, attack_t3, attack_t4, default_sticker,
                      run_attack)
from .training import train_sgd

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "CamforgeError", "EvalReport", "EvalRow", "FeatureBranch",
    "GradCamResult", "GraphError", "LabeledDataset", "Model", "ModelFormatError",
    "ModelMeta", "ScoreBranch", "ShapeError", "SMILEY_8X8", "StickerPattern",
    "SurgeryError", "TrainingError", "accuracy", "apply_stickers", "attack_t1",
    "attack_t2", "attack_t3", "attack_t4", "build_minivgg", "compute_alphas",
    "compute_heatmap", "dataset_from_manifest", "dataset_manifest",
    "default_sticker", "explain", "gen_shapes", "grad_scores_wrt_A",
    "heatmap_distance", "load_model", "normalize_heatmap", "run_attack",
    "run_table1", "run_table2", "save_model", "score_drift", "train_sgd",
    "with_stickers",
]
