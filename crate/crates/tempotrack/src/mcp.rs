//! Modality-complementary prompter: distills the thermal stream into
//! low-rank per-layer prompts and injects them into the fused stream.

use tempotrack_tensor::{Graph, ParamRef, ParamStore, Rng, Scalar, Tensor, ValueId};

use crate::backbone::TokenSeq;
use crate::error::{ModelError, Result};

/// Bottleneck width of the prompt generator.
pub const PROMPT_CHANNELS: usize = 8;

pub struct McpLayer<F: Scalar> {
    pub down_prompt_w: ParamRef<F>, // [8, C]
    pub down_prompt_b: ParamRef<F>,
    pub down_stream_w: ParamRef<F>, // [8, C]
    pub down_stream_b: ParamRef<F>,
    pub up_w: ParamRef<F>, // [C, 8]
    pub up_b: ParamRef<F>,
}

/// One prompter per branch: a stack of per-layer bottleneck generators that
/// share weights across the template and search segments.
pub struct Mcp<F: Scalar> {
    pub layers: Vec<McpLayer<F>>,
    template_grid: usize,
    search_grid: usize,
}

impl<F: Scalar> Mcp<F> {
    pub fn new(
        token_dim: usize,
        depth: usize,
        template_tokens: usize,
        search_tokens: usize,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        let template_grid = square_side(template_tokens)?;
        let search_grid = square_side(search_tokens)?;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let p = format!("{prefix}.l{l}");
            let k = PROMPT_CHANNELS;
            layers.push(McpLayer {
                down_prompt_w: store.register(
                    format!("{p}.down_p.w"),
                    rng.xavier_uniform(&[k, token_dim], token_dim, k),
                    true,
                ),
                down_prompt_b: store.register(format!("{p}.down_p.b"), Tensor::zeros(&[k]), true),
                down_stream_w: store.register(
                    format!("{p}.down_s.w"),
                    rng.xavier_uniform(&[k, token_dim], token_dim, k),
                    true,
                ),
                down_stream_b: store.register(format!("{p}.down_s.b"), Tensor::zeros(&[k]), true),
                // adapter-style zero start: the first prompts are exactly
                // zero, so tuning departs smoothly from the frozen baseline
                // instead of perturbing every token from step one
                up_w: store.register(format!("{p}.up.w"), Tensor::zeros(&[token_dim, k]), true),
                up_b: store.register(format!("{p}.up.b"), Tensor::zeros(&[token_dim]), true),
            });
        }
        Ok(Mcp {
            layers,
            template_grid,
            search_grid,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Generate the next prompt state from the previous prompt and the fused
    /// stream, both segments processed independently with shared weights.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        prompt: TokenSeq,
        stream: TokenSeq,
        layer: usize,
    ) -> Result<TokenSeq> {
        if prompt.len != stream.len || prompt.boundary != stream.boundary {
            return Err(ModelError::Dim(format!(
                "prompt ({}, boundary {}) desynchronized from stream ({}, boundary {})",
                prompt.len, prompt.boundary, stream.len, stream.boundary
            )));
        }
        let w = &self.layers[layer];
        let tpl = self.segment_prompt(g, w, prompt, stream, 0, prompt.boundary, self.template_grid)?;
        let srch = self.segment_prompt(
            g,
            w,
            prompt,
            stream,
            prompt.boundary,
            prompt.len - prompt.boundary,
            self.search_grid,
        )?;
        let id = g.concat(&[tpl, srch], 0)?;
        Ok(TokenSeq::new(id, prompt.len, prompt.boundary))
    }

    #[allow(clippy::too_many_arguments)]
    fn segment_prompt(
        &self,
        g: &mut Graph<F>,
        w: &McpLayer<F>,
        prompt: TokenSeq,
        stream: TokenSeq,
        start: usize,
        len: usize,
        grid: usize,
    ) -> Result<ValueId> {
        let p_tokens = g.slice(prompt.id, 0, start, len)?;
        let s_tokens = g.slice(stream.id, 0, start, len)?;
        let p_map = tokens_to_map(g, p_tokens, grid)?;
        let s_map = tokens_to_map(g, s_tokens, grid)?;

        let p_feat = g.conv1x1(p_map, &w.down_prompt_w, &w.down_prompt_b)?;
        let s_feat = g.conv1x1(s_map, &w.down_stream_w, &w.down_stream_b)?;
        let s_focused = fovea(g, s_feat)?;
        let mixed = g.add(p_feat, s_focused)?;
        let up = g.conv1x1(mixed, &w.up_w, &w.up_b)?;
        map_to_tokens(g, up)
    }
}

/// Spatial fovea: re-weight each channel by its spatial softmax, scaled by
/// the pixel count so constant maps pass through unchanged.
pub fn fovea<F: Scalar>(g: &mut Graph<F>, map: ValueId) -> Result<ValueId> {
    let shape = g.shape(map).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(map, vec![c, h * w])?;
    let weights = g.softmax_lastdim(flat)?;
    let scaled = g.scale(weights, F::from_f64((h * w) as f64))?;
    let weighted = g.mul(flat, scaled)?;
    Ok(g.reshape(weighted, vec![c, h, w])?)
}

/// Add the prompt to the fused stream (the injection step).
pub fn inject<F: Scalar>(g: &mut Graph<F>, stream: TokenSeq, prompt: TokenSeq) -> Result<TokenSeq> {
    if g.shape(stream.id) != g.shape(prompt.id) {
        return Err(ModelError::Dim(format!(
            "inject shape mismatch: {:?} vs {:?}",
            g.shape(stream.id),
            g.shape(prompt.id)
        )));
    }
    let id = g.add(stream.id, prompt.id)?;
    Ok(TokenSeq::new(id, stream.len, stream.boundary))
}

/// `[n, C]` raster tokens -> `[C, grid, grid]` feature map.
fn tokens_to_map<F: Scalar>(g: &mut Graph<F>, tokens: ValueId, grid: usize) -> Result<ValueId> {
    let shape = g.shape(tokens).to_vec();
    let c = shape[1];
    let t = g.transpose_last2(tokens)?; // [C, n]
    Ok(g.reshape(t, vec![c, grid, grid])?)
}

fn map_to_tokens<F: Scalar>(g: &mut Graph<F>, map: ValueId) -> Result<ValueId> {
    let shape = g.shape(map).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(map, vec![c, h * w])?;
    Ok(g.transpose_last2(flat)?)
}

fn square_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(ModelError::Config(format!(
            "segment of {tokens} tokens is not a square grid"
        )));
    }
    Ok(side)
}
