"""Weakly supervised 3D vessel segmentation from partial annotations.

A light model learns local features from patches around the annotated
voxels, a global model self-trains on progressively updated pseudo labels
behind a confidence gate, and a prototype head sharpens thin structures at
test time.  Synthetic tube phantoms, centerline-aware metrics, and a CLI
round out the package.
"""

from .volgrid import (ConfigError, FormatError, PvaLabel, ValidationError,
                      Volume, binarize, read_volume, write_volume)
from .phantom import (CenterlineTree, GenerationError, PhantomSpec,
                      generate_phantom, read_tree, synthesize_pva, write_tree)
from .nnkit import (FeatureMap, ModelSpec, NumericalError, ParamStore,
                    SegModel, adam_step, grad_check, load_checkpoint,
                    loss_seg, save_checkpoint)
from .lpu import (EtaRecord, PseudoLabelState, confidence, init_pseudo,
                  read_eta_csv, try_update, write_eta_csv)
from .fpa import (FUSION_POLICIES, Prototype, fine_tune, fpa_loss,
                  fuse_at_test, init_prototype, similarity_map)
from .metrics import (MetricConfig, MetricReport, dice, evaluate,
                      of_per_branch, ov, rdice, skeletonize, write_report)
from .pipeline import (ExperimentConfig, Subject, TrainRecord,
                       build_phantom_dataset, load_dataset, load_experiment,
                       predict, run_ablation, run_experiment, run_gsr,
                       sample_labeled_patches, sliding_window_infer,
                       train_sl)

__version__ = "0.1.0"
