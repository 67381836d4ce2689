"""depthpose: 3D human pose estimation from depth maps via a learned
dictionary of prototype poses, with training, multiview fusion,
evaluation metrics, and a statistical hyperparameter-selection harness.
"""

from .container import (BadMagicError, ChecksumError, ContainerError,
                        TruncatedError, VersionError, read_dataset, write_dataset)
from .core import (Camera, Dataset, DepthFrame, Normalizer, Pose, Sample,
                   Skeleton, denormalize, devectorize, fit_normalizer,
                   normalize, skeleton_preset, vectorize)
from .ddp import (FusionWeights, TrainConfig, TrainedModel, camera_to_world,
                  ddp_loss, fuse_multiview, infer, infer_batch, load_model,
                  reconstruct_pose, residual_loss, save_model, smooth_l1,
                  smooth_l1_grad, train)
from .evalstats import (EvalReport, SelectionResult, UTestResult,
                        evaluate_poses, joint_errors, mann_whitney_u,
                        map_at_threshold, map_curve_and_auc,
                        select_hyperparameter)
from .net import NetworkSpec, NetworkState, init_network, param_count, preset
from .preproc import (PreprocConfig, morph_close, preprocess_frame,
                      resize_and_scale, resize_bilinear, segment_foreground)
from .prototypes import PrototypeSet, build_prototypes, kmeans, merge_prototypes
from .synth import (BodyShape, PoseSamplerConfig, SplitDatasets,
                    default_body_shape, generate_dataset, render_depth,
                    ring_cameras, sample_pose)

__version__ = "0.1.0"
