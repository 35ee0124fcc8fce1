//! Data engine: prompt composition, annotation clients and reply
//! validation.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::caption::{parse_caption, CaptionPart, InterleavedCaption};
use crate::encoders::Scene;
use crate::error::{Error, Result};

/// Produces one caption for one prompt.
pub trait AnnotationClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Segment details handed to the annotator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub index: u64,
    pub bbox: [usize; 4],
    pub category: String,
    pub description: String,
}

pub fn segment_info(scene: &Scene) -> Vec<SegmentInfo> {
    scene
        .segments
        .iter()
        .map(|s| SegmentInfo {
            index: s.ann_id,
            bbox: s.bbox,
            category: crate::encoders::category_names()[s.category].to_string(),
            description: s.phrase.clone(),
        })
        .collect()
}

const SI_OPEN: &str = "segment_info: <";
const SI_CLOSE: &str = ">, and segment_proposal: <";

/// The data-engine prompt with its five slots filled: ground-truth caption,
/// pseudo description, boxes, segment info and segment proposal.
pub fn compose_prompt(gt_caption: &str, pseudo_description: &str, scene: &Scene) -> Result<String> {
    let boxes: Vec<[usize; 4]> = scene.segments.iter().map(|s| s.bbox).collect();
    let info = serde_json::to_string(&segment_info(scene))?;
    let proposal: Vec<u64> = scene.segments.iter().map(|s| s.ann_id).collect();
    Ok(format!(
        "Generate image captions with grounded entities and attributes with the following information:\n\
         ground truth image captions: <{gt_caption}>,\n\
         pseudo image description: <{pseudo_description}>,\n\
         ground truth bounding boxes ([x0,y0,w,h]: (x0,y0) is the top-left corner; (w,h) is box size): <{}>;\n\
         {SI_OPEN}{info}{SI_CLOSE}{}>.\n\
         An example output format would be: \"[index]<A woman> sitting next to [index]<a handsome man>, \
         with their hands holding together under [index]<the blue sky>.\", where [index] and <xxx> are \
         associated with the ground truth bounding boxes.\n\
         Generated caption constraints: every [index] must be one of the segment indices above and each \
         index may appear at most once.",
        serde_json::to_string(&boxes)?,
        serde_json::to_string(&proposal)?,
    ))
}

/// Offline annotator: reads the segment info back out of the prompt and
/// writes every segment's phrase into a fixed template, in order.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockClient;

impl AnnotationClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let bad = |m: &str| Error::Client {
            attempts: 1,
            message: m.to_string(),
        };
        let start = prompt
            .find(SI_OPEN)
            .ok_or_else(|| bad("prompt has no segment_info"))?
            + SI_OPEN.len();
        let len = prompt[start..]
            .find(SI_CLOSE)
            .ok_or_else(|| bad("segment_info is not terminated"))?;
        let info: Vec<SegmentInfo> =
            serde_json::from_str(&prompt[start..start + len]).map_err(|e| bad(&e.to_string()))?;
        let tokens: Vec<String> = info
            .iter()
            .map(|s| format!("[{}]<{}>", s.index, s.description))
            .collect();
        Ok(super::scenegen::template_caption(&tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpClientConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-4".into(),
            token_env: "FIND_API_TOKEN".into(),
            timeout_secs: 60,
            retries: 2,
        }
    }
}

/// Chat-completion client speaking JSON over HTTP.
pub struct HttpClient {
    cfg: HttpClientConfig,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(cfg: HttpClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Client {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { cfg, http })
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<String, String> {
        let mut req = self.http.post(&self.cfg.url).json(&json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        }));
        if let Ok(token) = std::env::var(&self.cfg.token_env) {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let body: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl AnnotationClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let attempts = self.cfg.retries as usize + 1;
        let mut last = String::new();
        for i in 0..attempts {
            match self.attempt(prompt) {
                Ok(s) => return Ok(s),
                Err(e) => {
                    log::warn!("annotation request attempt {} failed: {e}", i + 1);
                    last = e;
                }
            }
        }
        Err(Error::Client {
            attempts,
            message: last,
        })
    }
}

/// Reasons a reply does not fit `scene`; empty when valid.
pub fn validate_caption(c: &InterleavedCaption, scene: &Scene) -> Vec<String> {
    let mut reasons = Vec::new();
    let mut seen = BTreeSet::new();
    for p in c.parts() {
        if let CaptionPart::Entity { ann_id, .. } = p {
            if scene.segment_by_ann(*ann_id).is_none() {
                reasons.push(format!("unknown segment index {ann_id}"));
            }
            if !seen.insert(*ann_id) {
                reasons.push(format!("segment index {ann_id} used more than once"));
            }
        }
    }
    if seen.is_empty() {
        reasons.push("caption has no grounded entity".to_string());
    }
    reasons
}

/// Sends the composed prompt to `client` and returns the parsed, validated
/// caption.
pub fn annotate(
    scene: &Scene,
    gt_caption: &str,
    pseudo_description: &str,
    client: &dyn AnnotationClient,
) -> Result<InterleavedCaption> {
    if scene.segments.is_empty() {
        return Err(Error::invalid(format!(
            "scene {} has no segments",
            scene.scene_id
        )));
    }
    let prompt = compose_prompt(gt_caption, pseudo_description, scene)?;
    let reply = client.complete(&prompt)?;
    let caption =
        parse_caption(reply.trim()).map_err(|e| Error::Validation(vec![e.to_string()]))?;
    let reasons = validate_caption(&caption, scene);
    if !reasons.is_empty() {
        return Err(Error::Validation(reasons));
    }
    Ok(caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scenegen::{generate_scene, pseudo_description};

    struct Fixed(&'static str);

    impl AnnotationClient for Fixed {
        fn complete(&self, _: &str) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn mock_mentions_every_segment_in_order() {
        let (scene, gt) = generate_scene(5, 6, 6, 3).unwrap();
        let c = annotate(&scene, &gt, &pseudo_description(&scene), &MockClient).unwrap();
        let ids: Vec<u64> = c.entities().iter().map(|e| e.ann_id).collect();
        assert_eq!(ids, vec![501, 502, 503]);
        assert_eq!(c.plain_text(), gt);
    }

    #[test]
    fn unknown_index_is_a_validation_error() {
        let (scene, gt) = generate_scene(5, 6, 6, 3).unwrap();
        let err = annotate(&scene, &gt, "", &Fixed("[999]<a ghost> waves")).unwrap_err();
        assert!(matches!(err, Error::Validation(r) if r[0].contains("999")));
    }
}
