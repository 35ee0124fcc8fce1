//! Task declarations and per-task pipelines.

mod model;
mod pipelines;
mod spec;

pub use model::{Model, ModelConfig};
pub(crate) use pipelines::score;
pub use pipelines::{
    embed_caption, embed_image, embed_interleave, forward_generic, forward_grounded,
    forward_interactive, forward_interleave_grounding, ground_masks, rank_desc,
    run_generic_segmentation, run_grounded, run_image_text_retrieval, run_interactive,
    run_interleave_grounding, run_interleave_retrieval, segment_masks, stack_masks, unify_match,
    TextImageRankings,
};
pub use spec::{
    builtin_task, builtin_tasks, names, parse_tasks, Edge, Projection, PromptStream, QueryRows,
    QueryStream, StreamKind, TaskSpec,
};
