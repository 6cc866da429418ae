"""Face deblurring toolkit.

Blur synthesis and the blur formation model, PSNR/SSIM/Huber metrics, a
residual convolutional network with hand-rolled backprop, SGD training on
synthesized blurry/sharp pairs, a video frame-mining pipeline with pluggable
components, and the evaluation protocols tying it all together.
"""

from .errors import ContractViolation
from .geometry import BoundingBox, SparseShape, iou
from .imaging import (
    BlurConfig,
    ConvMode,
    Psi,
    bilinear_resize,
    blur,
    convolve,
    load_kernel,
    make_gaussian_kernel,
    make_motion_kernel,
    read_image,
    save_kernel,
    write_image,
)
from .metrics import MetricsReport, compare, huber_grad, huber_loss, psnr, ssim, to_luma
from .network import (
    ARCH_PRESETS,
    Mode,
    NetArchitecture,
    ParamStore,
    backward,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import (
    TrainConfig,
    TrainingPair,
    generate_patterns,
    learning_rate,
    make_pair,
    parse_train_config,
    plan_batches,
    train,
)
from .components import (
    BlockMatchingFlow,
    MeanShapeLocalizer,
    NccTracker,
    TemplateDetector,
    canonical_mean_shape,
    mean_flow_magnitude,
)
from .classifier import (
    AcceptAllClassifier,
    DescriptorParams,
    FittingClassifier,
    shape_descriptor,
    train_fitting_classifier,
)
from .mining import (
    ComponentSet,
    FrameRecord,
    MiningConfig,
    MiningResult,
    motion_gate,
    preprocess_face,
    read_manifest,
    run_pipeline,
    summary_text,
    write_ledger,
    write_manifest,
)
from .eval_harness import (
    EvalRecord,
    EvalSummary,
    MethodScore,
    SelfEvalConfig,
    SimBlurConfig,
    SimulatedPair,
    comparison_grid,
    deblur_image,
    format_score_table,
    score_external,
    self_evaluation,
    simulate_motion_blur,
    synthetic_blur,
    write_eval_csv,
)

__version__ = "0.1.0"
