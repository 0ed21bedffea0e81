//! The toy instruction-segmentation network.
//!
//! A decoder-only transformer reads `[vision; instruction; phrase;
//! <mask_start>; q_1..q_K (; <mask_end>)]` under the hybrid attention mask.
//! Query hidden states are projected into the mask decoder's space, where a
//! phrase-conditioned fusion block and two detector blocks refine them into
//! per-slot mask logits and presence scores.

use serde::{Deserialize, Serialize};

use crate::losses::TextTarget;
use crate::mask::Mask;
use crate::net_core::{ParamGroup, ParamId, ParamStore, Tape, Tensor, ValueId};
use crate::rng::Rng;
use crate::scenegen::vocab::{self, vocab_size};
use crate::scenegen::SceneSample;
use crate::seq_layout::{assemble, build_causal_mask, build_hybrid_mask, SequenceLayout};
use crate::{Error, Result};

/// Attention scheme of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Hybrid,
    /// Plain causal rows everywhere (the hybrid-attention ablation).
    Causal,
}

/// How the query block is embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// K independent learnable slot vectors.
    #[default]
    Bank,
    /// One shared learnable token repeated K times and attended causally:
    /// the autoregressive segmentation-token baseline.
    SharedToken,
}

/// Model hyperparameters; serialized alongside every checkpoint.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub grid: usize,
    pub d_dec: usize,
    pub tau: f64,
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub query_mode: QueryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 4,
            heads: 4,
            k: 10,
            grid: 8,
            d_dec: 64,
            tau: 0.5,
            attention: AttentionKind::Hybrid,
            query_mode: QueryMode::Bank,
        }
    }
}

/// Longest phrase the greedy decoder may emit.
pub const MAX_PHRASE_LEN: usize = 16;

/// Headroom for instruction tokens in the position table.
const MAX_TEXT_LEN: usize = 8;

impl ModelConfig {
    pub fn max_seq_len(&self) -> usize {
        self.grid * self.grid + MAX_TEXT_LEN + MAX_PHRASE_LEN + 2 + self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("query count must be at least 1".into()));
        }
        if self.grid == 0 || self.d_dec == 0 || self.layers == 0 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct AttnParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone)]
struct MlpParams {
    w_up: ParamId,
    b_up: ParamId,
    w_down: ParamId,
    b_down: ParamId,
}

#[derive(Clone)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: AttnParams,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp: MlpParams,
}

#[derive(Clone)]
struct ProjParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone)]
struct DetectorBlock {
    ln_self_g: ParamId,
    ln_self_b: ParamId,
    self_attn: AttnParams,
    ln_cross_g: ParamId,
    ln_cross_b: ParamId,
    cross_attn: AttnParams,
    ln_mlp_g: ParamId,
    ln_mlp_b: ParamId,
    mlp: MlpParams,
}

#[derive(Clone)]
struct ModelParams {
    vision_embed: ParamId,
    token_embed: ParamId,
    pos_embed: ParamId,
    query_bank: ParamId,
    layers: Vec<LayerParams>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
    vocab_w: ParamId,
    vocab_b: ParamId,
    query_proj: ProjParams,
    phrase_proj: ProjParams,
    pixel_attr: ParamId,
    pixel_pos: ParamId,
    fusion_ln_g: ParamId,
    fusion_ln_b: ParamId,
    fusion_attn: AttnParams,
    fusion_ln2_g: ParamId,
    fusion_ln2_b: ParamId,
    fusion_mlp: MlpParams,
    detector: Vec<DetectorBlock>,
    mask_w: ParamId,
    mask_b: ParamId,
    score_w: ParamId,
    score_b: ParamId,
}

/// Model = hyperparameters + parameter store.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    params: ModelParams,
}

/// Contextualized hidden states of one forward pass.
pub struct HiddenStates {
    pub values: Tensor,
    pub layout: SequenceLayout,
}

/// Raw and projected query embeddings plus the projected phrase feature.
pub struct QueryEmbeddings {
    pub raw: Tensor,
    pub projected: Tensor,
    pub phrase: Tensor,
}

/// The model's output set: K probability grids and presence scores.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub grid: usize,
    pub prob_masks: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    /// Slots whose presence score clears the selection threshold.
    pub selected: Vec<usize>,
}

impl PredictionSet {
    /// Binary masks (0.5 threshold) of the selected slots, in slot order.
    pub fn selected_masks(&self) -> Vec<Mask> {
        self.selected
            .iter()
            .map(|&k| Mask::from_probs(self.grid, &self.prob_masks[k]))
            .collect()
    }

    pub fn selected_scores(&self) -> Vec<f64> {
        self.selected.iter().map(|&k| self.scores[k]).collect()
    }
}

/// Node handles of one forward pass recorded on an external tape.
pub struct ForwardHandles {
    pub hidden: ValueId,
    pub layout: SequenceLayout,
    pub text_logits: ValueId,
    pub text_target: TextTarget,
    pub mask_logits: ValueId,
    pub presence_logits: ValueId,
}

/// Tape-level handles of one teacher-forced forward pass.
pub struct TrainForward {
    pub tape: Tape,
    pub hidden: ValueId,
    pub layout: SequenceLayout,
    pub text_logits: ValueId,
    pub text_target: TextTarget,
    pub mask_logits: ValueId,
    pub presence_logits: ValueId,
}

impl TrainForward {
    /// Mask probabilities per slot (sigmoid of the logits).
    pub fn mask_probs(&self) -> Vec<Vec<f64>> {
        let logits = self.tape.value(self.mask_logits);
        (0..logits.rows())
            .map(|k| logits.row(k).iter().map(|&x| crate::net_core::sigmoid_scalar(x)).collect())
            .collect()
    }

    pub fn presence_scores(&self) -> Vec<f64> {
        self.tape
            .value(self.presence_logits)
            .data()
            .iter()
            .map(|&x| crate::net_core::sigmoid_scalar(x))
            .collect()
    }
}

impl Model {
    /// Initialize with seeded gaussian weights, fixed draw order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::substream(seed, 0x6d6f64656c);
        let mut store = ParamStore::new();
        let d = config.d;
        let dd = config.d_dec;
        let vocab = vocab_size();
        let attrs = crate::scenegen::scene::attr_vocab();
        let cells = config.grid * config.grid;

        let emb = |rng: &mut Rng, store: &mut ParamStore, name: &str, rows: usize, cols: usize, group| {
            store.add_in_group(name, gaussian(rng, rows, cols, 0.1), group)
        };
        let linear = |rng: &mut Rng, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let w = store.add_in_group(&format!("{name}.w"), gaussian(rng, fan_in, fan_out, std), group);
            let b = store.add_in_group(&format!("{name}.b"), Tensor::zeros(1, fan_out), group);
            (w, b)
        };
        let layer_norm = |store: &mut ParamStore, name: &str, dim: usize, group| {
            let g = store.add_in_group(&format!("{name}.g"), Tensor::from_rows(1, dim, vec![1.0; dim]), group);
            let b = store.add_in_group(&format!("{name}.b"), Tensor::zeros(1, dim), group);
            (g, b)
        };
        let attn = |rng: &mut Rng, store: &mut ParamStore, name: &str, dim: usize, group| {
            let (wq, bq) = linear(rng, store, &format!("{name}.q"), dim, dim, group);
            let (wk, bk) = linear(rng, store, &format!("{name}.k"), dim, dim, group);
            let (wv, bv) = linear(rng, store, &format!("{name}.v"), dim, dim, group);
            let (wo, bo) = linear(rng, store, &format!("{name}.o"), dim, dim, group);
            AttnParams { wq, bq, wk, bk, wv, bv, wo, bo }
        };
        let mlp = |rng: &mut Rng, store: &mut ParamStore, name: &str, dim: usize, group| {
            let (w_up, b_up) = linear(rng, store, &format!("{name}.up"), dim, dim * 4, group);
            let (w_down, b_down) = linear(rng, store, &format!("{name}.down"), dim * 4, dim, group);
            MlpParams { w_up, b_up, w_down, b_down }
        };

        use ParamGroup::{Backbone, Decoder, PixelEmbed};
        let vision_embed = emb(&mut rng, &mut store, "backbone.vision_embed", attrs, d, Backbone);
        let token_embed = emb(&mut rng, &mut store, "backbone.token_embed", vocab, d, Backbone);
        let pos_embed = emb(&mut rng, &mut store, "backbone.pos_embed", config.max_seq_len(), d, Backbone);
        let bank_rows = match config.query_mode {
            QueryMode::Bank => config.k,
            QueryMode::SharedToken => 1,
        };
        let query_bank = emb(&mut rng, &mut store, "backbone.query_bank", bank_rows, d, Backbone);

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("backbone.layer{l}");
            let (ln1_g, ln1_b) = layer_norm(&mut store, &format!("{p}.ln1"), d, Backbone);
            let a = attn(&mut rng, &mut store, &format!("{p}.attn"), d, Backbone);
            let (ln2_g, ln2_b) = layer_norm(&mut store, &format!("{p}.ln2"), d, Backbone);
            let m = mlp(&mut rng, &mut store, &format!("{p}.mlp"), d, Backbone);
            layers.push(LayerParams { ln1_g, ln1_b, attn: a, ln2_g, ln2_b, mlp: m });
        }
        let (final_ln_g, final_ln_b) = layer_norm(&mut store, "backbone.final_ln", d, Backbone);
        let (vocab_w, vocab_b) = linear(&mut rng, &mut store, "backbone.vocab_head", d, vocab, Backbone);

        let proj = |rng: &mut Rng, store: &mut ParamStore, name: &str| {
            let (w1, b1) = linear(rng, store, &format!("{name}.fc1"), d, dd, Decoder);
            let (w2, b2) = linear(rng, store, &format!("{name}.fc2"), dd, dd, Decoder);
            ProjParams { w1, b1, w2, b2 }
        };
        let query_proj = proj(&mut rng, &mut store, "decoder.query_proj");
        let phrase_proj = proj(&mut rng, &mut store, "decoder.phrase_proj");

        let pixel_attr = emb(&mut rng, &mut store, "decoder.pixel_attr", attrs, dd, PixelEmbed);
        let pixel_pos = emb(&mut rng, &mut store, "decoder.pixel_pos", cells, dd, PixelEmbed);

        let (fusion_ln_g, fusion_ln_b) = layer_norm(&mut store, "decoder.fusion.ln1", dd, Decoder);
        let fusion_attn = attn(&mut rng, &mut store, "decoder.fusion.cross", dd, Decoder);
        let (fusion_ln2_g, fusion_ln2_b) = layer_norm(&mut store, "decoder.fusion.ln2", dd, Decoder);
        let fusion_mlp = mlp(&mut rng, &mut store, "decoder.fusion.mlp", dd, Decoder);

        let mut detector = Vec::with_capacity(2);
        for b in 0..2 {
            let p = format!("decoder.detector{b}");
            let (ln_self_g, ln_self_b) = layer_norm(&mut store, &format!("{p}.ln_self"), dd, Decoder);
            let self_attn = attn(&mut rng, &mut store, &format!("{p}.self"), dd, Decoder);
            let (ln_cross_g, ln_cross_b) = layer_norm(&mut store, &format!("{p}.ln_cross"), dd, Decoder);
            let cross_attn = attn(&mut rng, &mut store, &format!("{p}.cross"), dd, Decoder);
            let (ln_mlp_g, ln_mlp_b) = layer_norm(&mut store, &format!("{p}.ln_mlp"), dd, Decoder);
            let m = mlp(&mut rng, &mut store, &format!("{p}.mlp"), dd, Decoder);
            detector.push(DetectorBlock {
                ln_self_g,
                ln_self_b,
                self_attn,
                ln_cross_g,
                ln_cross_b,
                cross_attn,
                ln_mlp_g,
                ln_mlp_b,
                mlp: m,
            });
        }
        let (mask_w, mask_b) = linear(&mut rng, &mut store, "decoder.mask_proj", dd, dd, Decoder);
        let (score_w, score_b) = linear(&mut rng, &mut store, "decoder.score_head", dd, 1, Decoder);

        Ok(Model {
            config,
            store,
            params: ModelParams {
                vision_embed,
                token_embed,
                pos_embed,
                query_bank,
                layers,
                final_ln_g,
                final_ln_b,
                vocab_w,
                vocab_b,
                query_proj,
                phrase_proj,
                pixel_attr,
                pixel_pos,
                fusion_ln_g,
                fusion_ln_b,
                fusion_attn,
                fusion_ln2_g,
                fusion_ln2_b,
                fusion_mlp,
                detector,
                mask_w,
                mask_b,
                score_w,
                score_b,
            },
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= vocab_size() {
                return Err(Error::TokenOutOfRange { id: t, vocab: vocab_size() });
            }
        }
        Ok(())
    }

    fn check_grid(&self, sample: &SceneSample) -> Result<()> {
        let cells = self.config.grid * self.config.grid;
        if sample.grid_side != self.config.grid || sample.grid.len() != cells {
            return Err(Error::Shape(format!(
                "sample grid {}x{} does not match model grid {}",
                sample.grid_side, sample.grid_side, self.config.grid
            )));
        }
        let attrs = crate::scenegen::scene::attr_vocab();
        if sample.grid.iter().any(|&a| a as usize >= attrs) {
            return Err(Error::Dataset("cell attribute id out of range".into()));
        }
        Ok(())
    }

    /// Embed one assembled layout: vision lookups, token lookups, the query
    /// bank, plus position rows.
    fn embed_sequence(
        &self,
        tape: &mut Tape,
        attrs: &[u8],
        instruction: &[u32],
        phrase: &[u32],
        layout: &SequenceLayout,
    ) -> Result<ValueId> {
        if layout.len() > self.config.max_seq_len() {
            return Err(Error::Layout(format!(
                "sequence of {} exceeds the position table ({})",
                layout.len(),
                self.config.max_seq_len()
            )));
        }
        let p = &self.params;
        let vision_tab = tape.param(&self.store, p.vision_embed);
        let token_tab = tape.param(&self.store, p.token_embed);
        let vision = tape.gather_rows(vision_tab, attrs.iter().map(|&a| a as usize).collect());
        let mut parts = vec![vision];
        let mut text_ids: Vec<usize> = instruction.iter().map(|&t| t as usize).collect();
        text_ids.extend(phrase.iter().map(|&t| t as usize));
        if layout.trigger_index().is_some() {
            text_ids.push(vocab::TRIGGER as usize);
        }
        parts.push(tape.gather_rows(token_tab, text_ids));
        if layout.query_count() > 0 {
            let bank = tape.param(&self.store, p.query_bank);
            let q = match self.config.query_mode {
                QueryMode::Bank => bank,
                QueryMode::SharedToken => tape.gather_rows(bank, vec![0; layout.query_count()]),
            };
            parts.push(q);
        }
        if layout.has_mask_end() {
            parts.push(tape.gather_rows(token_tab, vec![vocab::MASK_END as usize]));
        }
        let rows = tape.concat_rows(&parts);
        let pos_tab = tape.param(&self.store, p.pos_embed);
        let pos = tape.gather_rows(pos_tab, (0..layout.len()).collect());
        Ok(tape.add(rows, pos))
    }

    fn attn_block(
        &self,
        tape: &mut Tape,
        x: ValueId,
        params: &AttnParams,
        kv: Option<ValueId>,
        mask: Option<std::sync::Arc<crate::net_core::AttnMask>>,
        heads: usize,
    ) -> Result<ValueId> {
        let p = params;
        let (wq, bq) = (tape.param(&self.store, p.wq), tape.param(&self.store, p.bq));
        let (wk, bk) = (tape.param(&self.store, p.wk), tape.param(&self.store, p.bk));
        let (wv, bv) = (tape.param(&self.store, p.wv), tape.param(&self.store, p.bv));
        let (wo, bo) = (tape.param(&self.store, p.wo), tape.param(&self.store, p.bo));
        let kv_src = kv.unwrap_or(x);
        let q0 = tape.matmul(x, wq);
        let q = tape.add_bias(q0, bq);
        let k0 = tape.matmul(kv_src, wk);
        let k = tape.add_bias(k0, bk);
        let v0 = tape.matmul(kv_src, wv);
        let v = tape.add_bias(v0, bv);
        let attn = tape.masked_attention(q, k, v, heads, mask)?;
        let o = tape.matmul(attn, wo);
        Ok(tape.add_bias(o, bo))
    }

    fn mlp_block(&self, tape: &mut Tape, x: ValueId, params: &MlpParams) -> ValueId {
        let w_up = tape.param(&self.store, params.w_up);
        let b_up = tape.param(&self.store, params.b_up);
        let w_down = tape.param(&self.store, params.w_down);
        let b_down = tape.param(&self.store, params.b_down);
        let up0 = tape.matmul(x, w_up);
        let up = tape.add_bias(up0, b_up);
        let act = tape.gelu(up);
        let down0 = tape.matmul(act, w_down);
        tape.add_bias(down0, b_down)
    }

    fn ln(&self, tape: &mut Tape, x: ValueId, g: ParamId, b: ParamId) -> ValueId {
        let gamma = tape.param(&self.store, g);
        let beta = tape.param(&self.store, b);
        tape.layer_norm(x, gamma, beta)
    }

    /// Run the transformer stack and final norm under the layout's mask.
    fn run_backbone(&self, tape: &mut Tape, x0: ValueId, layout: &SequenceLayout) -> Result<ValueId> {
        let mask = match self.effective_attention() {
            AttentionKind::Hybrid => build_hybrid_mask(layout),
            AttentionKind::Causal => build_causal_mask(layout),
        };
        let mask = std::sync::Arc::new(mask.to_attn_mask());
        let mut x = x0;
        for layer in &self.params.layers {
            let xn = self.ln(tape, x, layer.ln1_g, layer.ln1_b);
            let attn = self.attn_block(tape, xn, &layer.attn, None, Some(mask.clone()), self.config.heads)?;
            x = tape.add(x, attn);
            let xn = self.ln(tape, x, layer.ln2_g, layer.ln2_b);
            let m = self.mlp_block(tape, xn, &layer.mlp);
            x = tape.add(x, m);
        }
        Ok(self.ln(tape, x, self.params.final_ln_g, self.params.final_ln_b))
    }

    /// Shared-token queries are autoregressive; they force causal attention.
    fn effective_attention(&self) -> AttentionKind {
        match self.config.query_mode {
            QueryMode::SharedToken => AttentionKind::Causal,
            QueryMode::Bank => self.config.attention,
        }
    }

    /// Project the query rows and phrase pool into decoder space, run the
    /// fusion and detector blocks, and emit mask/presence logits.
    fn decode(
        &self,
        tape: &mut Tape,
        hidden: ValueId,
        layout: &SequenceLayout,
        attrs: &[u8],
    ) -> Result<(ValueId, ValueId, ValueId)> {
        let p = &self.params;
        let qpos = layout.query_positions();
        let z = tape.slice_rows(hidden, qpos.start, qpos.len());
        let z_proj = self.project(tape, z, &p.query_proj);

        // Pooled phrase feature; zero vector when no phrase tokens exist.
        let phrase_positions: Vec<usize> = layout
            .labels()
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == crate::seq_layout::SegmentLabel::Phrase).then_some(i))
            .collect();
        let pooled = if phrase_positions.is_empty() {
            tape.leaf(Tensor::zeros(1, self.config.d))
        } else {
            let start = phrase_positions[0];
            let ph = tape.slice_rows(hidden, start, phrase_positions.len());
            tape.mean_rows(ph)
        };
        let t_p = self.project(tape, pooled, &p.phrase_proj);

        // Pixel features: attribute + position lookups, then one
        // phrase-conditioning cross-attention block.
        let attr_tab = tape.param(&self.store, p.pixel_attr);
        let pos_tab = tape.param(&self.store, p.pixel_pos);
        let attr_rows = tape.gather_rows(attr_tab, attrs.iter().map(|&a| a as usize).collect());
        let pos_rows = tape.gather_rows(pos_tab, (0..attrs.len()).collect());
        let mut pixels = tape.add(attr_rows, pos_rows);
        {
            let xn = self.ln(tape, pixels, p.fusion_ln_g, p.fusion_ln_b);
            let attn = self.attn_block(tape, xn, &p.fusion_attn, Some(t_p), None, self.config.heads)?;
            pixels = tape.add(pixels, attn);
            let xn = self.ln(tape, pixels, p.fusion_ln2_g, p.fusion_ln2_b);
            let m = self.mlp_block(tape, xn, &p.fusion_mlp);
            pixels = tape.add(pixels, m);
        }

        // Detector: query self-attention + query-to-image cross-attention.
        let mut y = z_proj;
        for block in &p.detector {
            let yn = self.ln(tape, y, block.ln_self_g, block.ln_self_b);
            let sa = self.attn_block(tape, yn, &block.self_attn, None, None, self.config.heads)?;
            y = tape.add(y, sa);
            let yn = self.ln(tape, y, block.ln_cross_g, block.ln_cross_b);
            let ca = self.attn_block(tape, yn, &block.cross_attn, Some(pixels), None, self.config.heads)?;
            y = tape.add(y, ca);
            let yn = self.ln(tape, y, block.ln_mlp_g, block.ln_mlp_b);
            let m = self.mlp_block(tape, yn, &block.mlp);
            y = tape.add(y, m);
        }

        let mask_w = tape.param(&self.store, p.mask_w);
        let mask_b = tape.param(&self.store, p.mask_b);
        let w0 = tape.matmul(y, mask_w);
        let w = tape.add_bias(w0, mask_b);
        let mask_logits = tape.matmul_nt(w, pixels);

        let score_w = tape.param(&self.store, p.score_w);
        let score_b = tape.param(&self.store, p.score_b);
        let s0 = tape.matmul(y, score_w);
        let presence_logits = tape.add_bias(s0, score_b);
        Ok((mask_logits, presence_logits, z_proj))
    }

    fn project(&self, tape: &mut Tape, x: ValueId, proj: &ProjParams) -> ValueId {
        let w1 = tape.param(&self.store, proj.w1);
        let b1 = tape.param(&self.store, proj.b1);
        let w2 = tape.param(&self.store, proj.w2);
        let b2 = tape.param(&self.store, proj.b2);
        let h0 = tape.matmul(x, w1);
        let h = tape.add_bias(h0, b1);
        let a = tape.gelu(h);
        let o = tape.matmul(a, w2);
        tape.add_bias(o, b2)
    }

    /// Teacher-forced training forward over the full layout (with mask-end).
    pub fn forward_train(&self, sample: &SceneSample) -> Result<TrainForward> {
        self.forward_with_phrase(sample, &sample.phrase, true)
    }

    /// Record a forward pass on a caller-provided tape (the gradient
    /// checker drives this directly).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        sample: &SceneSample,
        phrase: &[u32],
        mask_end: bool,
    ) -> Result<ForwardHandles> {
        self.check_grid(sample)?;
        self.check_tokens(&sample.instruction)?;
        self.check_tokens(phrase)?;
        let layout = assemble(
            sample.grid.len(),
            &sample.instruction,
            phrase,
            self.config.k,
            mask_end,
        )?;
        let x0 = self.embed_sequence(tape, &sample.grid, &sample.instruction, phrase, &layout)?;
        let hidden = self.run_backbone(tape, x0, &layout)?;

        // Text logits: rows for every position that predicts a next token.
        let vision_len = sample.grid.len();
        let predictor_rows = layout.len() - vision_len;
        let pred_slice = tape.slice_rows(hidden, vision_len - 1, predictor_rows);
        let vocab_w = tape.param(&self.store, self.params.vocab_w);
        let vocab_b = tape.param(&self.store, self.params.vocab_b);
        let tl0 = tape.matmul(pred_slice, vocab_w);
        let text_logits = tape.add_bias(tl0, vocab_b);
        let text_target = self.text_target(&layout, &sample.instruction, phrase)?;

        let (mask_logits, presence_logits, _) = self.decode(tape, hidden, &layout, &sample.grid)?;
        Ok(ForwardHandles { hidden, layout, text_logits, text_target, mask_logits, presence_logits })
    }

    /// Forward with an explicit phrase (teacher-forced or generated).
    pub fn forward_with_phrase(
        &self,
        sample: &SceneSample,
        phrase: &[u32],
        mask_end: bool,
    ) -> Result<TrainForward> {
        let mut tape = Tape::new();
        let h = self.forward_on_tape(&mut tape, sample, phrase, mask_end)?;
        Ok(TrainForward {
            tape,
            hidden: h.hidden,
            layout: h.layout,
            text_logits: h.text_logits,
            text_target: h.text_target,
            mask_logits: h.mask_logits,
            presence_logits: h.presence_logits,
        })
    }

    /// The same network shape over a different parameter store (parameter
    /// ids are positional, so the store must share the creation order).
    pub fn clone_with_store(&self, store: ParamStore) -> Model {
        assert_eq!(store.len(), self.store.len(), "store layout mismatch");
        Model { config: self.config, store, params: self.params.clone() }
    }

    /// Next-token targets for the predictor rows of `forward_with_phrase`.
    ///
    /// Supervision is 1 on instruction/phrase/trigger targets and 0 exactly
    /// at query positions and the mask-end.
    fn text_target(
        &self,
        layout: &SequenceLayout,
        instruction: &[u32],
        phrase: &[u32],
    ) -> Result<TextTarget> {
        use crate::seq_layout::SegmentLabel::*;
        let vision_len = layout
            .labels()
            .iter()
            .take_while(|&&l| l == Vision)
            .count();
        let mut targets = Vec::new();
        let mut supervised = Vec::new();
        for pos in vision_len..layout.len() {
            let (tok, sup) = match layout.label(pos) {
                Vision => unreachable!("vision positions precede text"),
                Text => (instruction[pos - vision_len], 1.0),
                Phrase => (phrase[pos - vision_len - instruction.len()], 1.0),
                Trigger => (vocab::TRIGGER, 1.0),
                Query => (vocab::DUMMY, 0.0),
                MaskEnd => (vocab::MASK_END, 0.0),
            };
            targets.push(tok as usize);
            supervised.push(sup);
        }
        TextTarget::new(targets, supervised)
    }

    /// Greedy phrase generation: decode from the end of the instruction
    /// until the trigger is emitted or the length cap is reached.
    pub fn generate_phrase(&self, sample: &SceneSample) -> Result<Vec<u32>> {
        self.check_grid(sample)?;
        self.check_tokens(&sample.instruction)?;
        let mut phrase: Vec<u32> = Vec::new();
        for _ in 0..MAX_PHRASE_LEN {
            let next = self.next_token(sample, &phrase)?;
            if next == vocab::TRIGGER {
                break;
            }
            phrase.push(next);
        }
        Ok(phrase)
    }

    fn next_token(&self, sample: &SceneSample, phrase: &[u32]) -> Result<u32> {
        use crate::seq_layout::SegmentLabel::*;
        let mut labels = vec![Vision; sample.grid.len()];
        labels.extend(std::iter::repeat(Text).take(sample.instruction.len()));
        labels.extend(std::iter::repeat(Phrase).take(phrase.len()));
        let layout = SequenceLayout::from_labels(labels)?;
        let mut tape = Tape::new();
        let x0 = self.embed_sequence(&mut tape, &sample.grid, &sample.instruction, phrase, &layout)?;
        let hidden = self.run_backbone(&mut tape, x0, &layout)?;
        let last = tape.slice_rows(hidden, layout.len() - 1, 1);
        let vocab_w = tape.param(&self.store, self.params.vocab_w);
        let vocab_b = tape.param(&self.store, self.params.vocab_b);
        let l0 = tape.matmul(last, vocab_w);
        let logits = tape.add_bias(l0, vocab_b);
        let row = tape.value(logits).row(0).to_vec();
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        Ok(best as u32)
    }

    /// Full inference: generate the phrase, then decode the query bank into
    /// a prediction set (no mask-end at inference).
    pub fn forward(&self, sample: &SceneSample, tau: f64) -> Result<(HiddenStates, PredictionSet, Tensor)> {
        let phrase = self.generate_phrase(sample)?;
        self.forward_with_given_phrase(sample, &phrase, tau)
    }

    /// Inference with a fixed phrase (used by the dummy-phrase ablation).
    pub fn forward_with_given_phrase(
        &self,
        sample: &SceneSample,
        phrase: &[u32],
        tau: f64,
    ) -> Result<(HiddenStates, PredictionSet, Tensor)> {
        let fwd = self.forward_with_phrase(sample, phrase, false)?;
        let hidden = HiddenStates {
            values: fwd.tape.value(fwd.hidden).clone(),
            layout: fwd.layout.clone(),
        };
        let prob_masks = fwd.mask_probs();
        let scores = fwd.presence_scores();
        let selected = (0..scores.len()).filter(|&k| scores[k] >= tau).collect();
        let prediction = PredictionSet { grid: self.config.grid, prob_masks, scores, selected };
        let text_logits = fwd.tape.value(fwd.text_logits).clone();
        Ok((hidden, prediction, text_logits))
    }

    /// Rows of `hidden` at the query positions, in slot order, plus the
    /// projected embeddings.
    pub fn extract_queries(&self, h: &HiddenStates) -> Result<QueryEmbeddings> {
        let qpos = h.layout.query_positions();
        if qpos.is_empty() {
            return Err(Error::Layout("layout has no query positions".into()));
        }
        let mut raw = Tensor::zeros(qpos.len(), self.config.d);
        for (slot, pos) in qpos.clone().enumerate() {
            raw.row_mut(slot).copy_from_slice(h.values.row(pos));
        }
        let mut tape = Tape::new();
        let raw_id = tape.leaf(raw.clone());
        let proj = self.project(&mut tape, raw_id, &self.params.query_proj);
        let projected = tape.value(proj).clone();
        let phrase_positions: Vec<usize> = h
            .layout
            .labels()
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == crate::seq_layout::SegmentLabel::Phrase).then_some(i))
            .collect();
        let pooled = if phrase_positions.is_empty() {
            tape.leaf(Tensor::zeros(1, self.config.d))
        } else {
            let mut m = Tensor::zeros(1, self.config.d);
            for &p in &phrase_positions {
                for (j, v) in h.values.row(p).iter().enumerate() {
                    m.data_mut()[j] += v / phrase_positions.len() as f64;
                }
            }
            tape.leaf(m)
        };
        let tp = self.project(&mut tape, pooled, &self.params.phrase_proj);
        Ok(QueryEmbeddings { raw, projected, phrase: tape.value(tp).clone() })
    }

    /// Contextualized hidden states for a layout (used by invariance tests).
    pub fn hidden_for(&self, sample: &SceneSample, phrase: &[u32], with_queries: bool, mask_end: bool) -> Result<HiddenStates> {
        use crate::seq_layout::SegmentLabel::*;
        self.check_grid(sample)?;
        let layout = if with_queries {
            assemble(sample.grid.len(), &sample.instruction, phrase, self.config.k, mask_end)?
        } else {
            let mut labels = vec![Vision; sample.grid.len()];
            labels.extend(std::iter::repeat(Text).take(sample.instruction.len()));
            labels.extend(std::iter::repeat(Phrase).take(phrase.len()));
            SequenceLayout::from_labels(labels)?
        };
        let mut tape = Tape::new();
        let x0 = self.embed_sequence(&mut tape, &sample.grid, &sample.instruction, phrase, &layout)?;
        let hidden = self.run_backbone(&mut tape, x0, &layout)?;
        Ok(HiddenStates { values: tape.value(hidden).clone(), layout })
    }

    /// Ids of the pixel-feature embedder parameters (frozen in stage 2).
    pub fn pixel_embed_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.group(id) == ParamGroup::PixelEmbed)
            .collect()
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.next_gaussian() * std).collect())
}

/// Save a model (parameters + config sidecar) into a directory.
pub fn save_model(dir: &std::path::Path, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::net_core::checkpoint::save_params(&dir.join("model.bin"), &model.store)?;
    let config = serde_json::to_string_pretty(&model.config)?;
    std::fs::write(dir.join("config.json"), config + "\n")?;
    Ok(())
}

/// Load a model from a directory written by [`save_model`].
pub fn load_model(dir: &std::path::Path) -> Result<Model> {
    let config_text = std::fs::read_to_string(dir.join("config.json"))
        .map_err(|e| Error::Checkpoint(format!("missing config.json in {}: {e}", dir.display())))?;
    let config: ModelConfig = serde_json::from_str(&config_text)?;
    let mut model = Model::new(config, 0)?;
    crate::net_core::checkpoint::load_params(&dir.join("model.bin"), &mut model.store)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_split, GenSettings, ModifierSet, SplitSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig { d: 16, layers: 2, heads: 2, k: 4, grid: 4, d_dec: 16, ..ModelConfig::default() }
    }

    fn tiny_sample(seed: u64, grid: usize) -> SceneSample {
        let settings = GenSettings {
            grid,
            min_objects: 1,
            max_objects: 2,
            counts: crate::scenegen::SplitCounts { stage1: 1, stage2: 1, val: 1, test: 1 },
            ..GenSettings::default()
        };
        let (samples, _) = generate_split(
            seed,
            0,
            1,
            &settings,
            SplitSpec { modifiers: ModifierSet::AllOnly, include_no_target: false },
        )
        .unwrap();
        samples.into_iter().next().unwrap()
    }

    #[test]
    fn forward_shapes_match_config() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let sample = tiny_sample(5, 4);
        let fwd = model.forward_train(&sample).unwrap();
        let masks = fwd.tape.value(fwd.mask_logits);
        assert_eq!(masks.shape(), &[4, 16]);
        let presence = fwd.tape.value(fwd.presence_logits);
        assert_eq!(presence.shape(), &[4, 1]);
        // Text logits cover every next-token predictor position.
        let logits = fwd.tape.value(fwd.text_logits);
        assert_eq!(logits.rows(), fwd.layout.len() - sample.grid.len());
        assert_eq!(logits.cols(), vocab_size());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let sample = tiny_sample(6, 4);
        let (_, a, _) = model.forward(&sample, 0.5).unwrap();
        let (_, b, _) = model.forward(&sample, 0.5).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.prob_masks, b.prob_masks);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let mut sample = tiny_sample(7, 4);
        sample.instruction[0] = 9999;
        assert!(model.forward_train(&sample).is_err());
    }

    #[test]
    fn extract_queries_reads_rows_after_trigger() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let sample = tiny_sample(8, 4);
        let h = model
            .hidden_for(&sample, &sample.phrase, true, false)
            .unwrap();
        let q = model.extract_queries(&h).unwrap();
        let tr = h.layout.trigger_index().unwrap();
        for slot in 0..4 {
            assert_eq!(q.raw.row(slot), h.values.row(tr + 1 + slot));
        }
    }

    #[test]
    fn text_rows_unchanged_by_query_block() {
        // The mechanism that preserves language modeling: causal rows never
        // see the queries, so their hidden states are bit-identical with and
        // without the appended block.
        for seed in 0..5 {
            let model = Model::new(tiny_config(), 100 + seed).unwrap();
            let sample = tiny_sample(200 + seed, 4);
            let with = model.hidden_for(&sample, &sample.phrase, true, true).unwrap();
            let without = model.hidden_for(&sample, &sample.phrase, false, false).unwrap();
            let prefix = without.layout.len();
            for row in 0..prefix {
                assert_eq!(
                    with.values.row(row),
                    without.values.row(row),
                    "row {row} differs (seed {seed})"
                );
            }
        }
    }

    #[test]
    fn query_permutation_equivariance() {
        // Swap two query-bank vectors; with equalized positional rows the
        // extracted embeddings swap identically.
        let config = tiny_config();
        let mut model = Model::new(config, 11).unwrap();
        let sample = tiny_sample(12, 4);
        // Equalize the positional encodings of slots 0 and 1 by copying.
        let layout = assemble(16, &sample.instruction, &sample.phrase, config.k, false).unwrap();
        let qpos = layout.query_positions();
        let pos_id = model.store.lookup("backbone.pos_embed").unwrap();
        let row0 = model.store.value(pos_id).row(qpos.start).to_vec();
        model
            .store
            .value_mut(pos_id)
            .row_mut(qpos.start + 1)
            .copy_from_slice(&row0);

        let h_base = model.hidden_for(&sample, &sample.phrase, true, false).unwrap();
        let q_base = model.extract_queries(&h_base).unwrap();

        let bank_id = model.store.lookup("backbone.query_bank").unwrap();
        let r0 = model.store.value(bank_id).row(0).to_vec();
        let r1 = model.store.value(bank_id).row(1).to_vec();
        model.store.value_mut(bank_id).row_mut(0).copy_from_slice(&r1);
        model.store.value_mut(bank_id).row_mut(1).copy_from_slice(&r0);

        let h_perm = model.hidden_for(&sample, &sample.phrase, true, false).unwrap();
        let q_perm = model.extract_queries(&h_perm).unwrap();
        // Attention sums visit the swapped slots in opposite order, so the
        // match is exact up to summation rounding.
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
        };
        assert!(close(q_base.raw.row(0), q_perm.raw.row(1)));
        assert!(close(q_base.raw.row(1), q_perm.raw.row(0)));
        for slot in 2..config.k {
            assert!(close(q_base.raw.row(slot), q_perm.raw.row(slot)));
        }
    }

    #[test]
    fn dummy_phrase_mode_still_yields_k_masks() {
        let model = Model::new(tiny_config(), 13).unwrap();
        let sample = tiny_sample(14, 4);
        let (_, pred, _) = model
            .forward_with_given_phrase(&sample, &[vocab::DUMMY], 0.5)
            .unwrap();
        assert_eq!(pred.prob_masks.len(), 4);
        assert_eq!(pred.scores.len(), 4);
    }

    #[test]
    fn max_length_phrase_still_decodes() {
        let model = Model::new(tiny_config(), 15).unwrap();
        let sample = tiny_sample(16, 4);
        let long_phrase = vec![vocab::DUMMY; MAX_PHRASE_LEN];
        let (_, pred, _) = model.forward_with_given_phrase(&sample, &long_phrase, 0.5).unwrap();
        assert_eq!(pred.prob_masks.len(), 4);
    }

    #[test]
    fn save_load_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config(), 17).unwrap();
        let sample = tiny_sample(18, 4);
        let (_, before, _) = model.forward(&sample, 0.5).unwrap();
        save_model(dir.path(), &model).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        let (_, after, _) = loaded.forward(&sample, 0.5).unwrap();
        assert_eq!(before.scores, after.scores);
        assert_eq!(before.prob_masks, after.prob_masks);
    }

    #[test]
    fn shared_token_variant_runs_causal() {
        let config = ModelConfig { query_mode: QueryMode::SharedToken, ..tiny_config() };
        let model = Model::new(config, 19).unwrap();
        let sample = tiny_sample(20, 4);
        let fwd = model.forward_train(&sample).unwrap();
        assert_eq!(fwd.tape.value(fwd.mask_logits).rows(), 4);
        assert_eq!(model.effective_attention(), AttentionKind::Causal);
    }
}
