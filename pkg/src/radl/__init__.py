"""Relation-aware multi-instance attention in a miniature diffusion pipeline."""

from .attention import (
    AttnProjection,
    FeatureGrid,
    RadlAttnParams,
    attribute_enhancement,
    fuse_residual,
    instance_attention,
    masked_text_attention,
    relation_attention,
    scaled_dot_attention,
)
from .fusion import FusionBranch, fuse
from .layout import (
    BBox,
    InstanceSpec,
    LayoutSpec,
    MaskGrid,
    Relation,
    parse_layout,
    rasterize_mask,
    serialize_layout,
    total_mask,
)
from .pipeline import (
    DenoiserParams,
    NoiseSchedule,
    denoise_forward,
    forward_diffuse,
    gradcheck,
    init_denoiser,
    sample,
    train,
)
from .scenes import SceneConfig, SyntheticScene, make_scene
from .text import (
    EmbedderConfig,
    EmbeddingSeq,
    PositionMLPParams,
    build_instance_embedding,
    embed_tokens,
    extract_verbs,
    position_embed,
    tokenize,
)

__all__ = [name for name in dir() if not name.startswith("_")]
