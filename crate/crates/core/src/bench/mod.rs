//! Benchmark machinery: caption grammar, scene generation, the annotation
//! engine, visual-entity replacement, dataset files and metrics.

mod caption;
mod dataset;
mod engine;
mod index;
mod metrics;
mod record;
mod scenegen;

pub use caption::{
    parse_caption, parse_query, serialize_caption, CaptionEntity, CaptionPart, InterleavedCaption,
};
pub use dataset::{
    decode_rle, encode_rle, read_dataset, read_scenes, record_from_line, record_to_line,
    write_dataset, write_scenes, Rle,
};
pub use engine::{
    annotate, compose_prompt, segment_info, validate_caption, AnnotationClient, HttpClient,
    HttpClientConfig, MockClient, SegmentInfo,
};
pub use index::{build_similarity_index, match_segment, replace_entities, SimilarityIndex};
pub use metrics::{iou, metric_ciou, metric_ir_at_k, metric_miou, metric_pq, Partition};
pub use record::{BenchEntity, BenchRecord, VisualRef};
pub use scenegen::{
    ann_id_for, generate_scene, generate_scene_with_id, phrase_for, pseudo_description,
    template_caption,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Encoders, Scene};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub p_replace: f64,
    /// Concurrent annotation requests.
    pub parallelism: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 64,
            height: 8,
            width: 8,
            min_segments: 3,
            max_segments: 5,
            p_replace: 0.5,
            parallelism: 4,
        }
    }
}

/// Scenes, their template captions and their annotated records.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub captions: Vec<String>,
    pub records: Vec<BenchRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images: usize,
    pub captions: usize,
    pub entities: usize,
}

impl Corpus {
    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            images: self.scenes.len(),
            captions: self.records.len(),
            entities: self.records.iter().map(|r| r.entities.len()).sum(),
        }
    }

    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }
}

fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_add(0x632b_e59b_d9b4_e019)
}

fn tag_error(scene_id: u64, e: Error) -> Error {
    match e {
        Error::Client { attempts, message } => Error::Client {
            attempts,
            message: format!("scene {scene_id}: {message}"),
        },
        Error::Validation(r) => Error::Validation(
            r.into_iter()
                .map(|m| format!("scene {scene_id}: {m}"))
                .collect(),
        ),
        other => other,
    }
}

/// Generates scenes, annotates each through `client`, then replaces
/// entities with cross-scene visual references at rate `p_replace`.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    client: &dyn AnnotationClient,
    enc: &Encoders,
    params: &ParamStore,
) -> Result<Corpus> {
    if cfg.min_segments == 0 || cfg.min_segments > cfg.max_segments {
        return Err(Error::invalid("segment range must satisfy 1 <= min <= max"));
    }
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut captions = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, i));
        let n = rng.gen_range(cfg.min_segments..=cfg.max_segments);
        let (s, c) = generate_scene_with_id(i as u64, rng.gen(), cfg.height, cfg.width, n)?;
        scenes.push(s);
        captions.push(c);
    }

    let workers = cfg.parallelism.max(1);
    let mut annotated: Vec<Option<Result<BenchRecord>>> = (0..scenes.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = scenes.len().div_ceil(workers).max(1);
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .zip(captions.chunks(chunk))
            .map(|(sc, cp)| {
                s.spawn(move || {
                    sc.iter()
                        .zip(cp)
                        .map(|(scene, gt)| {
                            annotate(scene, gt, &pseudo_description(scene), client)
                                .and_then(|c| BenchRecord::from_caption(scene, c))
                                .map_err(|e| tag_error(scene.scene_id, e))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut at = 0;
        for h in handles {
            for r in h.join().expect("annotation worker panicked") {
                annotated[at] = Some(r);
                at += 1;
            }
        }
    });
    let base: Vec<BenchRecord> = annotated
        .into_iter()
        .map(|r| r.expect("every scene annotated"))
        .collect::<Result<_>>()?;

    let index = build_similarity_index(&scenes, enc, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let records = base
        .iter()
        .map(|r| replace_entities(r, &index, cfg.p_replace, &mut rng))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        scenes,
        captions,
        records,
    })
}

/// File names inside a dataset directory.
pub mod files {
    pub const RECORDS: &str = "records.jsonl";
    pub const SCENES: &str = "scenes.jsonl";
    pub const CAPTIONS: &str = "captions.json";
    pub const INDEX: &str = "similarity_index.json";
    pub const STATS: &str = "stats.json";
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    scene_id: u64,
    caption: String,
}

/// Writes records, scenes, template captions, the similarity index and the
/// corpus statistics into `dir`, creating it if needed.
pub fn write_corpus(dir: &std::path::Path, corpus: &Corpus, index: &SimilarityIndex) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_dataset(&dir.join(files::RECORDS), &corpus.records)?;
    write_scenes(&dir.join(files::SCENES), &corpus.scenes)?;
    let caps: Vec<CaptionLine> = corpus
        .scenes
        .iter()
        .zip(&corpus.captions)
        .map(|(s, c)| CaptionLine {
            scene_id: s.scene_id,
            caption: c.clone(),
        })
        .collect();
    std::fs::write(
        dir.join(files::CAPTIONS),
        serde_json::to_string_pretty(&caps)? + "\n",
    )?;
    std::fs::write(dir.join(files::INDEX), serde_json::to_string(index)? + "\n")?;
    std::fs::write(
        dir.join(files::STATS),
        serde_json::to_string_pretty(&corpus.stats())? + "\n",
    )?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &std::path::Path) -> Result<Corpus> {
    let scenes = read_scenes(&dir.join(files::SCENES))?;
    let records = read_dataset(&dir.join(files::RECORDS))?;
    let caps: Vec<CaptionLine> =
        serde_json::from_str(&std::fs::read_to_string(dir.join(files::CAPTIONS))?)?;
    let captions = scenes
        .iter()
        .map(|s| {
            caps.iter()
                .find(|c| c.scene_id == s.scene_id)
                .map(|c| c.caption.clone())
                .ok_or_else(|| Error::invalid(format!("no caption for scene {}", s.scene_id)))
        })
        .collect::<Result<_>>()?;
    for r in &records {
        if !scenes.iter().any(|s| s.scene_id == r.scene_id) {
            return Err(Error::invalid(format!(
                "record refers to missing scene {}",
                r.scene_id
            )));
        }
        r.to_entry().check_refs(scenes.as_slice())?;
    }
    Ok(Corpus {
        scenes,
        captions,
        records,
    })
}
