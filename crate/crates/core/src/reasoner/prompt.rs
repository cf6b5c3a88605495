//! Reasoning prompt construction and fingerprinting.

use crate::corpus::MemeInstance;
use crate::text::fingerprint;

use super::{ReasonerError, TemplateId};

/// What gets sent to the backend: prompt text plus an optional image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPayload {
    pub text: String,
    pub image_ref: Option<String>,
}

const ANXIETY_HEADER: &str = "Analyze the following anxiety meme image to extract common sense reasoning in the form of triples.. These relationships should capture the following elements:";
const DEPRESSION_HEADER: &str = "Analyze the following depression meme image to extract common sense reasoning in the form of triples. These relationships should capture the following elements:";

const ATTRIBUTE_ITEMS: &str = "\
1. Cause-Effect: Identify concrete causes or results of the situation depicted in the meme.
2. Figurative Understanding: Capture underlying metaphors, analogies, or symbolic meanings that convey the meme's deeper message, including any ironic or humorous undertones.
3. Mental State: Capture specific mental or emotional states depicted in the meme.";

fn header(template: TemplateId) -> &'static str {
    match template {
        TemplateId::AnxietyV1 => ANXIETY_HEADER,
        TemplateId::DepressionV1 => DEPRESSION_HEADER,
    }
}

/// Renders the reasoning prompt for one meme. OCR text is included when
/// present; the image travels alongside as an attachment reference. With
/// neither available there is nothing to analyze.
pub fn build_reasoning_prompt(
    instance: &MemeInstance,
    template: TemplateId,
) -> Result<PromptPayload, ReasonerError> {
    let has_ocr = !instance.ocr_text.trim().is_empty();
    if !has_ocr && instance.image_ref.is_none() {
        return Err(ReasonerError::EmptyInput {
            meme_id: instance.id.clone(),
        });
    }
    let mut text = format!("{}\n{}", header(template), ATTRIBUTE_ITEMS);
    if has_ocr {
        text.push_str("\n\nOCR text: \"");
        text.push_str(&instance.ocr_text);
        text.push('"');
    }
    Ok(PromptPayload {
        text,
        image_ref: instance.image_ref.clone(),
    })
}

/// Stable cache key for one (template, meme) pairing. Covers the template
/// version, meme identity, OCR text, and whether an image was attached, so
/// any change that would alter the backend's input changes the key.
pub fn prompt_fingerprint(instance: &MemeInstance, template: TemplateId) -> String {
    let image_part = match &instance.image_ref {
        Some(r) => format!("image:{r}"),
        None => "text-only".to_string(),
    };
    fingerprint(&[
        template.as_str(),
        &instance.id,
        &instance.ocr_text,
        &image_part,
    ])
}
