//! Builds the classifier's input text from OCR, figurative reasoning,
//! and retrieved exemplars.
//!
//! Layout: an instruction line naming the candidate categories, then one
//! `Example-N:` block per exemplar (most similar first), then the query
//! block. Markers delimit each field; the assistant cue ends the text.
//! When the assembled text exceeds the token budget, whole exemplars drop
//! from the end of the list first, then the query reasoning shrinks, then
//! the query OCR. The instruction line, markers, and cue never shrink.

use serde::{Deserialize, Serialize};

use super::{AblationConfig, AssembleError, ClassifierError};
use crate::corpus::{CorpusManifest, LabelSchema, MemeInstance, Split};
use crate::fusion::{EmbeddingProvider, FusionIndex, IndexMode, RetrievalResult};
use crate::reasoner::{ReasoningCache, ReasoningRecord};
use crate::text::{token_count, tokenize};

const OCR_MARKER: &str = "<|ocr_text|>";
const FCS_MARKER: &str = "<|commonsense figurative explanation|>";
const ASSISTANT_CUE: &str =
    "<|Assistant|> The mental health disorder of the person for this post is:";

/// A retrieved training example, rendered into the prompt as one
/// `Example-N:` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub meme_id: String,
    pub ocr_text: String,
    pub reasoning: String,
    /// Gold labels in schema order.
    pub labels: Vec<String>,
}

/// The fully assembled text for one meme, plus the exemplars that
/// survived the token budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInput {
    pub meme_id: String,
    pub assembled_text: String,
    pub exemplars: Vec<Exemplar>,
    pub config: AblationConfig,
}

/// The per-mode retrieval indices a run has built.
#[derive(Debug, Default)]
pub struct IndexSet {
    pub ocr: Option<FusionIndex>,
    pub fcs: Option<FusionIndex>,
    pub concat: Option<FusionIndex>,
}

impl IndexSet {
    pub fn get(&self, mode: IndexMode) -> Option<&FusionIndex> {
        match mode {
            IndexMode::Ocr => self.ocr.as_ref(),
            IndexMode::Fcs => self.fcs.as_ref(),
            IndexMode::Concat => self.concat.as_ref(),
        }
    }

    pub fn insert(&mut self, index: FusionIndex) {
        match index.mode {
            IndexMode::Ocr => self.ocr = Some(index),
            IndexMode::Fcs => self.fcs = Some(index),
            IndexMode::Concat => self.concat = Some(index),
        }
    }
}

fn instruction_line(schema: &LabelSchema) -> String {
    let mut names: Vec<&str> = schema.labels.iter().map(String::as_str).collect();
    names.sort_unstable();
    let list = names
        .iter()
        .map(|n| format!("'{n}'"))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "You specialize in analyzing mental health behaviors through social media posts. \
         Your task is to classify the mental health issue depicted in a person's post \
         from the following categories: [{list}]."
    )
}

fn marker_line(marker: &str, body: &str) -> String {
    if body.is_empty() {
        marker.to_string()
    } else {
        format!("{marker} {body}")
    }
}

fn render(
    instruction: &str,
    exemplars: &[Exemplar],
    query_ocr: Option<&str>,
    query_reasoning: Option<&str>,
    config: AblationConfig,
) -> String {
    let mut blocks = vec![instruction.to_string()];
    for (i, ex) in exemplars.iter().enumerate() {
        let mut lines = vec![format!("Example-{}:", i + 1)];
        if config.use_ocr {
            lines.push(marker_line(OCR_MARKER, &format!("\"{}\"", ex.ocr_text)));
        }
        if config.use_fcs {
            lines.push(marker_line(FCS_MARKER, &ex.reasoning));
        }
        lines.push(format!("{ASSISTANT_CUE} {}", ex.labels.join(", ")));
        blocks.push(lines.join("\n"));
    }
    let mut lines = Vec::new();
    if !exemplars.is_empty() {
        lines.push("Your turn:".to_string());
    }
    if let Some(ocr) = query_ocr {
        lines.push(marker_line(OCR_MARKER, &format!("\"{ocr}\"")));
    }
    if let Some(reasoning) = query_reasoning {
        lines.push(marker_line(FCS_MARKER, reasoning));
    }
    lines.push(ASSISTANT_CUE.to_string());
    blocks.push(lines.join("\n"));
    blocks.join("\n\n")
}

/// Assembles the classifier input for one instance.
///
/// `reasoning` must be a successful record exactly when the config uses
/// FCS; `exemplars` must be supplied exactly when the config has a RAG
/// flag (an empty list is a valid retrieval outcome). The assembled text
/// is trimmed to `max_seq_len` tokens by the drop order in the module
/// docs.
pub fn assemble_input(
    instance: &MemeInstance,
    reasoning: Option<&ReasoningRecord>,
    exemplars: Option<Vec<Exemplar>>,
    config: AblationConfig,
    schema: &LabelSchema,
    max_seq_len: usize,
) -> Result<ClassifierInput, ClassifierError> {
    config.validate()?;
    let reasoning_text = match (config.use_fcs, reasoning) {
        (true, Some(rec)) if rec.is_success() => Some(rec.reasoning_text().to_string()),
        (true, _) => {
            return Err(AssembleError::MissingReasoning {
                meme_id: instance.id.clone(),
            }
            .into())
        }
        (false, None) => None,
        (false, Some(_)) => {
            return Err(AssembleError::UnexpectedReasoning {
                meme_id: instance.id.clone(),
            }
            .into())
        }
    };
    let mut live = match (config.needs_retrieval(), exemplars) {
        (true, Some(ex)) => ex,
        (true, None) => {
            return Err(AssembleError::MissingRetrieval {
                meme_id: instance.id.clone(),
            }
            .into())
        }
        (false, None) => Vec::new(),
        (false, Some(_)) => {
            return Err(AssembleError::UnexpectedRetrieval {
                meme_id: instance.id.clone(),
            }
            .into())
        }
    };
    for ex in &live {
        if ex.labels.is_empty() {
            return Err(AssembleError::SchemaMismatch(format!(
                "exemplar {} has no labels",
                ex.meme_id
            ))
            .into());
        }
        for label in &ex.labels {
            if schema.label_index(label).is_none() {
                return Err(AssembleError::SchemaMismatch(format!(
                    "exemplar {} carries unknown label {label:?}",
                    ex.meme_id
                ))
                .into());
            }
        }
    }

    let instruction = instruction_line(schema);
    let mut query_ocr = config.use_ocr.then(|| instance.ocr_text.clone());
    let mut query_reasoning = reasoning_text;
    loop {
        let text = render(
            &instruction,
            &live,
            query_ocr.as_deref(),
            query_reasoning.as_deref(),
            config,
        );
        let used = token_count(&text);
        if used <= max_seq_len {
            return Ok(ClassifierInput {
                meme_id: instance.id.clone(),
                assembled_text: text,
                exemplars: live,
                config,
            });
        }
        let over = used - max_seq_len;
        if !live.is_empty() {
            live.pop();
            continue;
        }
        if shrink(&mut query_reasoning, over) {
            continue;
        }
        if shrink(&mut query_ocr, over) {
            continue;
        }
        // Only fixed parts remain; the budget cannot be met.
        return Ok(ClassifierInput {
            meme_id: instance.id.clone(),
            assembled_text: text,
            exemplars: live,
            config,
        });
    }
}

/// Removes `over` tokens from the end of the text, keeping the first
/// tokens joined by single spaces. Returns false when there is nothing
/// left to remove.
fn shrink(field: &mut Option<String>, over: usize) -> bool {
    let Some(text) = field.as_mut() else {
        return false;
    };
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return false;
    }
    let keep = tokens.len().saturating_sub(over);
    *text = tokens[..keep].join(" ");
    true
}

/// Resolves retrieval hits into exemplars: labels from the train split of
/// the manifest, reasoning from the cache when the config renders it.
pub fn exemplars_from_retrieval(
    retrieval: &RetrievalResult,
    manifest: &CorpusManifest,
    cache: Option<&ReasoningCache>,
    need_reasoning: bool,
) -> Result<Vec<Exemplar>, ClassifierError> {
    let mut out = Vec::with_capacity(retrieval.hits.len());
    for hit in &retrieval.hits {
        let instance = manifest
            .find(&hit.meme_id)
            .filter(|inst| inst.split == Split::Train)
            .ok_or_else(|| AssembleError::UnknownExemplar {
                id: hit.meme_id.clone(),
            })?;
        let reasoning = if need_reasoning {
            cache
                .and_then(|c| c.success_for_meme(&instance.id))
                .map(|r| r.reasoning_text().to_string())
                .ok_or_else(|| AssembleError::MissingReasoning {
                    meme_id: instance.id.clone(),
                })?
        } else {
            String::new()
        };
        out.push(Exemplar {
            meme_id: instance.id.clone(),
            ocr_text: instance.ocr_text.clone(),
            reasoning,
            labels: instance.labels.clone(),
        });
    }
    Ok(out)
}

/// Assembles inputs for every instance of a split, running retrieval per
/// instance when the config calls for it. A query never retrieves itself.
pub fn assemble_split_inputs(
    manifest: &CorpusManifest,
    split: Split,
    cache: Option<&ReasoningCache>,
    indices: &IndexSet,
    provider: Option<&dyn EmbeddingProvider>,
    config: AblationConfig,
    schema: &LabelSchema,
    k: usize,
    max_seq_len: usize,
) -> Result<Vec<ClassifierInput>, ClassifierError> {
    config.validate()?;
    let mut out = Vec::new();
    for instance in manifest.split_instances(split) {
        let reasoning = if config.use_fcs {
            let record = cache
                .and_then(|c| c.success_for_meme(&instance.id))
                .ok_or_else(|| AssembleError::MissingReasoning {
                    meme_id: instance.id.clone(),
                })?;
            Some(record)
        } else {
            None
        };
        let exemplars = match config.retrieval_mode() {
            Some(mode) => {
                let index = indices.get(mode).ok_or_else(|| ClassifierError::MissingIndex {
                    mode,
                    config: config.name(),
                })?;
                let provider = provider
                    .ok_or_else(|| ClassifierError::MissingProvider(config.name()))?;
                let ocr_arg = mode.needs_ocr().then_some(instance.ocr_text.as_str());
                let fcs_arg = if mode.needs_reasoning() {
                    Some(
                        reasoning
                            .expect("FCS retrieval implies FCS input")
                            .reasoning_text(),
                    )
                } else {
                    None
                };
                let result = index.query(provider, ocr_arg, fcs_arg, k, Some(&instance.id))?;
                Some(exemplars_from_retrieval(
                    &result,
                    manifest,
                    cache,
                    config.use_fcs,
                )?)
            }
            None => None,
        };
        out.push(assemble_input(
            instance,
            reasoning,
            exemplars,
            config,
            schema,
            max_seq_len,
        )?);
    }
    Ok(out)
}
