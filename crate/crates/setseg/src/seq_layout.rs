//! Multimodal sequence assembly and attention-mask construction.
//!
//! A layout records, per position, which segment the position belongs to:
//! the visual prefix, instruction text, the short target phrase, the trigger
//! token, the spliced-in query bank, and (in teacher-forced training
//! sequences only) the closing mask-end token. The hybrid mask keeps every
//! non-query row causal while query rows see the full multimodal context and
//! each other.

use crate::{Error, Result};

/// Segment tag for one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentLabel {
    Vision,
    Text,
    Phrase,
    Trigger,
    Query,
    MaskEnd,
}

impl SegmentLabel {
    /// Labels whose rows attend causally.
    pub fn is_causal(self) -> bool {
        !matches!(self, SegmentLabel::Query)
    }

    /// Labels query rows may attend to.
    pub fn query_visible(self) -> bool {
        !matches!(self, SegmentLabel::MaskEnd)
    }
}

/// An assembled multimodal sequence: one label per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    labels: Vec<SegmentLabel>,
    query_count: usize,
    trigger_index: Option<usize>,
}

impl SequenceLayout {
    /// Validate an explicit label sequence.
    ///
    /// Structural rules: at most one trigger; query positions form one
    /// contiguous block immediately after the trigger; nothing but a final
    /// mask-end may follow the query block; at most one mask-end, and only
    /// in the last position.
    pub fn from_labels(labels: Vec<SegmentLabel>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Layout("empty layout".into()));
        }
        let triggers: Vec<usize> = positions(&labels, SegmentLabel::Trigger);
        if triggers.len() > 1 {
            return Err(Error::Layout("more than one trigger position".into()));
        }
        let queries: Vec<usize> = positions(&labels, SegmentLabel::Query);
        let trigger_index = triggers.first().copied();
        if !queries.is_empty() {
            let Some(t) = trigger_index else {
                return Err(Error::Layout("query block without a trigger".into()));
            };
            let first = queries[0];
            let last = *queries.last().unwrap();
            if first != t + 1 || last - first + 1 != queries.len() {
                return Err(Error::Layout(
                    "queries must form one contiguous block immediately after the trigger".into(),
                ));
            }
            for (offset, &q) in queries.iter().enumerate() {
                if q != first + offset {
                    return Err(Error::Layout("query block is not contiguous".into()));
                }
            }
            // Only a final mask-end may follow the queries.
            for (i, &l) in labels.iter().enumerate().skip(last + 1) {
                if l != SegmentLabel::MaskEnd || i != labels.len() - 1 {
                    return Err(Error::Layout(
                        "only a final mask-end may follow the query block".into(),
                    ));
                }
            }
        }
        let mask_ends = positions(&labels, SegmentLabel::MaskEnd);
        if mask_ends.len() > 1 {
            return Err(Error::Layout("more than one mask-end position".into()));
        }
        if let Some(&m) = mask_ends.first() {
            if m != labels.len() - 1 {
                return Err(Error::Layout("mask-end must be the final position".into()));
            }
        }
        Ok(SequenceLayout { query_count: queries.len(), labels, trigger_index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[SegmentLabel] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> SegmentLabel {
        self.labels[i]
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn trigger_index(&self) -> Option<usize> {
        self.trigger_index
    }

    /// Positions of the query block, in slot order.
    pub fn query_positions(&self) -> std::ops::Range<usize> {
        match self.trigger_index {
            Some(t) if self.query_count > 0 => (t + 1)..(t + 1 + self.query_count),
            _ => 0..0,
        }
    }

    pub fn has_mask_end(&self) -> bool {
        self.labels.last() == Some(&SegmentLabel::MaskEnd)
    }
}

/// Assemble the standard ordering `[vision; text; phrase; trigger; q_1..q_K
/// (; mask_end)]`.
///
/// `mask_end` is appended only for teacher-forced training sequences;
/// inference stops generation at the trigger and decodes from the queries.
pub fn assemble(
    vision_len: usize,
    text_tokens: &[u32],
    phrase_tokens: &[u32],
    query_count: usize,
    mask_end: bool,
) -> Result<SequenceLayout> {
    if vision_len == 0 {
        return Err(Error::Layout("vision prefix must be nonempty".into()));
    }
    if text_tokens.is_empty() {
        return Err(Error::Layout("instruction text must be nonempty".into()));
    }
    if query_count == 0 {
        return Err(Error::Layout("query bank must hold at least one slot".into()));
    }
    let mut labels = Vec::with_capacity(vision_len + text_tokens.len() + phrase_tokens.len() + query_count + 2);
    labels.extend(std::iter::repeat(SegmentLabel::Vision).take(vision_len));
    labels.extend(std::iter::repeat(SegmentLabel::Text).take(text_tokens.len()));
    labels.extend(std::iter::repeat(SegmentLabel::Phrase).take(phrase_tokens.len()));
    let trigger_index = labels.len();
    labels.push(SegmentLabel::Trigger);
    labels.extend(std::iter::repeat(SegmentLabel::Query).take(query_count));
    if mask_end {
        labels.push(SegmentLabel::MaskEnd);
    }
    Ok(SequenceLayout { labels, query_count, trigger_index: Some(trigger_index) })
}

/// Binary attention permissions: `allow(i, j)` means row `i` may attend to
/// column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size + j]
    }

    /// Render as one `0`/`1` row per line, for golden-file comparison.
    pub fn render_grid(&self) -> String {
        let mut out = String::with_capacity(self.size * (self.size + 1));
        for i in 0..self.size {
            for j in 0..self.size {
                out.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Convert to the compute kernel's mask representation.
    pub fn to_attn_mask(&self) -> crate::net_core::AttnMask {
        crate::net_core::AttnMask {
            rows: self.size,
            cols: self.size,
            allow: self.allow.clone(),
        }
    }
}

/// Causal rows everywhere except the query block, which attends to the full
/// vision/text/phrase/trigger context and to every query slot (itself
/// included), but never to the mask-end.
pub fn build_hybrid_mask(layout: &SequenceLayout) -> AttentionMask {
    let n = layout.len();
    let mut allow = vec![false; n * n];
    for i in 0..n {
        match layout.label(i) {
            SegmentLabel::Query => {
                for j in 0..n {
                    allow[i * n + j] = layout.label(j).query_visible();
                }
            }
            _ => {
                for j in 0..=i {
                    allow[i * n + j] = true;
                }
            }
        }
    }
    AttentionMask { size: n, allow }
}

/// Plain causal mask over every row, regardless of label (the
/// hybrid-attention ablation baseline).
pub fn build_causal_mask(layout: &SequenceLayout) -> AttentionMask {
    let n = layout.len();
    let mut allow = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            allow[i * n + j] = true;
        }
    }
    AttentionMask { size: n, allow }
}

fn positions(labels: &[SegmentLabel], needle: SegmentLabel) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == needle).then_some(i))
        .collect()
}
