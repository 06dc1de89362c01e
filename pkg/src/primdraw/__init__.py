"""primdraw: text-to-sketch synthesis over geometric primitives.

A canvas of lines, circles, and semi-circles is initialized from a
saliency map and evolved by gradient descent against an image-text
embedding model, with primitive-level dropout, opacity gating, and full
per-primitive provenance tracking.
"""

from .attention import (
    AttentionMap,
    AttentionProvider,
    FileAttentionProvider,
    LandmarkSet,
    UniformAttentionProvider,
    aggregate,
    load_map_from_file,
    sample_landmarks,
)
from .canvas import Canvas, InitConfig, init_canvas, select_patches
from .errors import DomainError, InputError, NumericsError, PrimdrawError, ProviderError
from .geometry import (
    AffineFit,
    Patch,
    Point2,
    Primitive,
    PrimitiveKind,
    fit_affine,
    make_circle,
    make_line,
    make_semicircle,
    patch_of,
    svg_path,
)
from .metrics import MetricsReport, clip_t, cs, evaluate, psnr
from .optimizer import (
    DropoutMask,
    OptimConfig,
    PrimState,
    TrajectoryLog,
    adam_update,
    build_states,
    gate_opacity,
    pld_mask,
    run,
    schedule_lr,
    step,
)
from .render import (
    Raster,
    RasterizerBackend,
    ScanlineRasterizer,
    SoftRasterizer,
    export_layers,
    export_svg,
    grad_check,
    rasterize,
)
from .scoring import (
    AugmentConfig,
    Embedding,
    EmbeddingBackend,
    FakeEmbeddingBackend,
    LossWeights,
    PromptScorer,
    RasterTargetScorer,
    augment,
    cosine_sim,
    semantic_loss,
    total_loss,
    visual_loss,
)

__version__ = "0.1.0"
