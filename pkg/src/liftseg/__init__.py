"""liftseg: multi-view 2D part detections lifted onto 3D point clouds.

Per-view detections vote onto super points, a small set network learns a
weight per detection against a relaxed 3D mIoU objective, and the package
evaluates semantic and instance part segmentations end to end.
"""

__version__ = "0.1.0"

from .geom import (  # noqa: F401
    Camera,
    PointCloud,
    Scene,
    SuperPointPartition,
    VisibilityMap,
    compute_visibility,
    fixed_viewpoints,
    normalize_cloud,
)
from .detect import (  # noqa: F401
    Detection,
    DetectionSet,
    MaskRLE,
    MembershipTensor,
    compute_membership,
    load_detections,
    save_detections,
)
from .vote import (  # noqa: F401
    Labeling,
    ScoreMatrix,
    assign_labels,
    normalize_scores,
    score_unweighted,
    score_weighted,
)
from .loss import (  # noqa: F401
    GroundTruth,
    cross_entropy_loss,
    lift_scores,
    miou,
    mriou_grad,
    mriou_loss,
)
from .weightnet import (  # noqa: F401
    EncodedBatch,
    WeightNetParams,
    assemble_inputs,
    context_normalize,
    init_params,
    positional_encoding,
)
# NB: the train() entry point stays behind its module (liftseg.train.train)
# so the submodule name is not shadowed.
from .train import (  # noqa: F401
    PipelineObject,
    TrainConfig,
    TrainReport,
    evaluate_confidence_baseline,
)
from .instance import (  # noqa: F401
    APResult,
    InstanceSegmentation,
    map50,
    merge_instances,
    superpoint_adjacency,
)
from .synth import NoiseSpec, PartSpec, SynthBundle, SynthSpec, generate  # noqa: F401
