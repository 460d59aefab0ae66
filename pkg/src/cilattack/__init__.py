"""Universal targeted perturbations that survive class-incremental updates."""

from .augment import AugmentParams, augment
from .backbones import (Backbone, BackboneConfig, ImageEmbedding,
                        SurrogateFeatures, TextEmbedding, cache_load,
                        cache_store, encode_image, encode_text,
                        surrogate_features)
from .cil import (ModelSeries, TaskSchedule, TrainerConfig, clean_accuracy,
                  split_tasks, train_sequence)
from .data import ImageSet, LabelSpace, TrainTestPair, load_image_folder
from .filtering import (FilterConfig, ReferenceEmbedding, build_filter_mask,
                        filter_score, filter_scores, reference_embedding)
from .metrics import AttackReport, asr, emit_report, sasr
from .models import SmallConvNet
from .perturb import (OptimizerConfig, Perturbation, apply_perturbation,
                      clamp_budget, craft, init_perturbation,
                      load_perturbation, save_perturbation)
from .semantics import (DirectionBundle, LossBreakdown, SimilarityPair,
                        direction_adversarial, direction_nontarget,
                        direction_target, loss_clip, loss_surrogate,
                        similarity_pair, total_loss)

__version__ = "0.1.0"
