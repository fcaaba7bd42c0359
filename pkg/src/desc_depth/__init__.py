"""Domain-adaptive monocular depth with semantic consistency and instance-height pseudo-labels."""
from .data import (CameraIntrinsics, DataError, DepthMap, Domain, DomainDataset, DomainSample,
                   InstanceAnnotation, SemanticMap, augment_photometric, load_dataset)
from .evaluation import EvalSettings, Metrics, MetricsReport, colorize_depth, compute_metrics, median_scale
from .height_prior import (HeightPredictor, ScaleParameter, gt_height, height_loss_source,
                           instance_depth_from_gt, instance_loss_target, pseudo_depth)
from .losses import LossBreakdown, LossWeights, total_loss
from .semantic_inputs import SemanticEdgeInput, canny_edges, encode_semantic_channels
from .synthetic import SyntheticConfig, generate_synthetic_datasets
from .trainer import AblationFlags, TrainConfig, Trainer, adapt, pretrain

__version__ = "0.1.0"
