//! Patch embedding, shared position embeddings and the transformer encoder
//! stack operating on concatenated template+search token sequences.

use tempotrack_tensor::{Graph, ParamRef, ParamStore, Rng, Scalar, Tensor, ValueId};

use crate::error::{ModelError, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Token dimension C.
    pub token_dim: usize,
    /// Encoder depth L.
    pub depth: usize,
    pub num_heads: usize,
    /// FFN expansion ratio.
    pub ffn_ratio: usize,
    pub template_side: usize,
    pub search_side: usize,
}

impl BackboneConfig {
    /// Full-size profile: ViT-B geometry, 128 px templates, 256 px search.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            patch_size: 16,
            token_dim: 768,
            depth: 12,
            num_heads: 12,
            ffn_ratio: 4,
            template_side: 128,
            search_side: 256,
        }
    }

    /// Small profile that keeps every invariant checkable on a laptop.
    pub fn desk_scale() -> Self {
        BackboneConfig {
            patch_size: 8,
            token_dim: 64,
            depth: 6,
            num_heads: 4,
            ffn_ratio: 4,
            template_side: 32,
            search_side: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.template_side.is_multiple_of(self.patch_size) || !self.search_side.is_multiple_of(self.patch_size) {
            return Err(ModelError::Config(format!(
                "template/search sides ({}, {}) must be divisible by patch size {}",
                self.template_side, self.search_side, self.patch_size
            )));
        }
        if !self.token_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "token dim {} must be divisible by head count {}",
                self.token_dim, self.num_heads
            )));
        }
        if self.depth == 0 {
            return Err(ModelError::Config("depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch_size
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid() * self.template_grid()
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn total_tokens(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }

    /// Score-map side: the search grid.
    pub fn score_side(&self) -> usize {
        self.search_grid()
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }
}

/// A token sequence on the graph plus its template/search split point.
/// Tokens `[0, boundary)` are template, `[boundary, len)` are search.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub id: ValueId,
    pub len: usize,
    pub boundary: usize,
}

impl TokenSeq {
    pub fn new(id: ValueId, len: usize, boundary: usize) -> Self {
        debug_assert!(boundary <= len);
        TokenSeq { id, len, boundary }
    }

    pub fn search_len(&self) -> usize {
        self.len - self.boundary
    }
}

pub struct PatchEmbed<F: Scalar> {
    pub proj: ParamRef<F>, // [3 * P^2, C]
    pub bias: ParamRef<F>, // [C]
    patch_size: usize,
}

pub struct PosEmbed<F: Scalar> {
    pub template_pe: ParamRef<F>, // [N_z, C]
    pub search_pe: ParamRef<F>,   // [N_x, C]
}

pub struct EncoderLayer<F: Scalar> {
    pub wq: ParamRef<F>,
    pub wk: ParamRef<F>,
    pub wv: ParamRef<F>,
    pub wo: ParamRef<F>,
    pub ln1_gamma: ParamRef<F>,
    pub ln1_beta: ParamRef<F>,
    pub ln2_gamma: ParamRef<F>,
    pub ln2_beta: ParamRef<F>,
    pub ffn_w1: ParamRef<F>,
    pub ffn_b1: ParamRef<F>,
    pub ffn_w2: ParamRef<F>,
    pub ffn_b2: ParamRef<F>,
    num_heads: usize,
}

pub struct Backbone<F: Scalar> {
    pub cfg: BackboneConfig,
    pub patch: PatchEmbed<F>,
    pub pos: PosEmbed<F>,
    pub layers: Vec<EncoderLayer<F>>,
}

const LN_EPS: f64 = 1e-6;

impl<F: Scalar> Backbone<F> {
    /// Construct with fresh weights registered under `prefix` in the store.
    pub fn new(
        cfg: &BackboneConfig,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut Rng,
        trainable: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.token_dim;
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let init = |rng: &mut Rng, shape: &[usize]| rng.normal_tensor::<F>(shape, 0.02);

        let patch = PatchEmbed {
            proj: store.register(format!("{prefix}.patch.w"), init(rng, &[patch_dim, c]), trainable),
            bias: store.register(format!("{prefix}.patch.b"), Tensor::zeros(&[c]), trainable),
            patch_size: cfg.patch_size,
        };
        let pos = PosEmbed {
            template_pe: store.register(
                format!("{prefix}.pos.template"),
                init(rng, &[cfg.template_tokens(), c]),
                trainable,
            ),
            search_pe: store.register(
                format!("{prefix}.pos.search"),
                init(rng, &[cfg.search_tokens(), c]),
                trainable,
            ),
        };
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            layers.push(encoder_layer(cfg, store, &format!("{prefix}.l{l}"), rng, trainable));
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            patch,
            pos,
            layers,
        })
    }

    /// Tokenize an image and add the segment-appropriate position embedding.
    /// The same embedding parameters serve the RGB and TIR streams of a pair,
    /// and both template kinds (initial, online) share `template_pe`.
    pub fn embed(
        &self,
        g: &mut Graph<F>,
        image: &Tensor<F>,
        segment: Segment,
    ) -> Result<ValueId> {
        let rows = image_to_patch_rows(image, self.patch.patch_size)?;
        let expected = match segment {
            Segment::Template => self.cfg.template_tokens(),
            Segment::Search => self.cfg.search_tokens(),
        };
        if rows.shape()[0] != expected {
            return Err(ModelError::Config(format!(
                "{:?} image yields {} tokens, config expects {}",
                segment,
                rows.shape()[0],
                expected
            )));
        }
        let rows_id = g.constant(rows);
        let proj = g.param(&self.patch.proj);
        let tokens = g.matmul(rows_id, proj)?;
        let bias = g.param(&self.patch.bias);
        let tokens = g.add_bias(tokens, bias)?;
        let pe = match segment {
            Segment::Template => g.param(&self.pos.template_pe),
            Segment::Search => g.param(&self.pos.search_pe),
        };
        Ok(g.add(tokens, pe)?)
    }

    /// Concatenate template and search tokens into one sequence.
    pub fn join(&self, g: &mut Graph<F>, template: ValueId, search: ValueId) -> Result<TokenSeq> {
        let n_z = self.cfg.template_tokens();
        let n_x = self.cfg.search_tokens();
        let id = g.concat(&[template, search], 0)?;
        Ok(TokenSeq::new(id, n_z + n_x, n_z))
    }

    pub fn layer(&self, index: usize) -> &EncoderLayer<F> {
        &self.layers[index]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Template,
    Search,
}

fn encoder_layer<F: Scalar>(
    cfg: &BackboneConfig,
    store: &mut ParamStore<F>,
    prefix: &str,
    rng: &mut Rng,
    trainable: bool,
) -> EncoderLayer<F> {
    let c = cfg.token_dim;
    let hidden = c * cfg.ffn_ratio;
    let init = |rng: &mut Rng, shape: &[usize]| rng.normal_tensor::<F>(shape, 0.02);
    EncoderLayer {
        wq: store.register(format!("{prefix}.wq"), init(rng, &[c, c]), trainable),
        wk: store.register(format!("{prefix}.wk"), init(rng, &[c, c]), trainable),
        wv: store.register(format!("{prefix}.wv"), init(rng, &[c, c]), trainable),
        wo: store.register(format!("{prefix}.wo"), init(rng, &[c, c]), trainable),
        ln1_gamma: store.register(format!("{prefix}.ln1.g"), Tensor::full(&[c], F::ONE), trainable),
        ln1_beta: store.register(format!("{prefix}.ln1.b"), Tensor::zeros(&[c]), trainable),
        ln2_gamma: store.register(format!("{prefix}.ln2.g"), Tensor::full(&[c], F::ONE), trainable),
        ln2_beta: store.register(format!("{prefix}.ln2.b"), Tensor::zeros(&[c]), trainable),
        ffn_w1: store.register(format!("{prefix}.ffn.w1"), init(rng, &[c, hidden]), trainable),
        ffn_b1: store.register(format!("{prefix}.ffn.b1"), Tensor::zeros(&[hidden]), trainable),
        ffn_w2: store.register(format!("{prefix}.ffn.w2"), init(rng, &[hidden, c]), trainable),
        ffn_b2: store.register(format!("{prefix}.ffn.b2"), Tensor::zeros(&[c]), trainable),
        num_heads: cfg.num_heads,
    }
}

/// Multi-head self-attention over `[N, C]` tokens. Scaling is per head
/// (1/sqrt(C/h)); the single-head case coincides with 1/sqrt(C).
pub fn msa<F: Scalar>(g: &mut Graph<F>, x: ValueId, w: &EncoderLayer<F>) -> Result<ValueId> {
    attention(g, x, &w.wq, &w.wk, &w.wv, Some(&w.wo), w.num_heads)
}

/// Shared attention core used by the encoder layers and the template
/// interaction block.
pub fn attention<F: Scalar>(
    g: &mut Graph<F>,
    x: ValueId,
    wq: &ParamRef<F>,
    wk: &ParamRef<F>,
    wv: &ParamRef<F>,
    wo: Option<&ParamRef<F>>,
    num_heads: usize,
) -> Result<ValueId> {
    let shape = g.shape(x).to_vec();
    let (n, c) = (shape[0], shape[1]);
    let d = c / num_heads;

    let wq = g.param(wq);
    let wk = g.param(wk);
    let wv = g.param(wv);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;

    // [N, C] -> [h, N, d]
    let to_heads = |g: &mut Graph<F>, t: ValueId| -> Result<ValueId> {
        let t = g.reshape(t, vec![n, num_heads, d])?;
        Ok(g.permute(t, &[1, 0, 2])?)
    };
    let q = to_heads(g, q)?;
    let k = to_heads(g, k)?;
    let v = to_heads(g, v)?;

    let kt = g.transpose_last2(k)?; // [h, d, N]
    let scores = g.matmul(q, kt)?; // [h, N, N]
    let scores = g.scale(scores, F::from_f64(1.0 / (d as f64).sqrt()))?;
    let probs = g.softmax_lastdim(scores)?;
    let ctx = g.matmul(probs, v)?; // [h, N, d]

    let merged = g.permute(ctx, &[1, 0, 2])?; // [N, h, d]
    let merged = g.reshape(merged, vec![n, c])?;
    match wo {
        Some(wo) => {
            let wo = g.param(wo);
            Ok(g.matmul(merged, wo)?)
        }
        None => Ok(merged),
    }
}

/// One pre-norm encoder layer: x + MSA(LN(x)), then + FFN(LN(.)).
pub fn encoder_forward<F: Scalar>(g: &mut Graph<F>, x: ValueId, w: &EncoderLayer<F>) -> Result<ValueId> {
    let normed = g.layer_norm(x, &w.ln1_gamma, &w.ln1_beta, LN_EPS)?;
    let attn = msa(g, normed, w)?;
    let x = g.add(x, attn)?;

    let normed = g.layer_norm(x, &w.ln2_gamma, &w.ln2_beta, LN_EPS)?;
    let ff = ffn(g, normed, w)?;
    Ok(g.add(x, ff)?)
}

pub fn ffn<F: Scalar>(g: &mut Graph<F>, x: ValueId, w: &EncoderLayer<F>) -> Result<ValueId> {
    let w1 = g.param(&w.ffn_w1);
    let b1 = g.param(&w.ffn_b1);
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h)?;
    let w2 = g.param(&w.ffn_w2);
    let b2 = g.param(&w.ffn_b2);
    let out = g.matmul(h, w2)?;
    Ok(g.add_bias(out, b2)?)
}

/// Rearrange `[3, H, W]` into `[N, 3*P*P]` patch rows, raster order.
pub fn image_to_patch_rows<F: Scalar>(image: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(ModelError::Config(format!("expected [3, H, W] image, got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Dim(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let row_len = 3 * patch * patch;
    let mut out = vec![F::ZERO; n * row_len];
    let data = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            let base = token * row_len;
            let mut o = base;
            for ch in 0..3 {
                for py in 0..patch {
                    let row = (gy * patch + py) * w + gx * patch;
                    let src = ch * h * w + row;
                    out[o..o + patch].copy_from_slice(&data[src..src + patch]);
                    o += patch;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, row_len], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> BackboneConfig {
        BackboneConfig::desk_scale()
    }

    #[test]
    fn paper_scale_token_counts() {
        let cfg = BackboneConfig::paper_scale();
        assert_eq!(cfg.token_dim, 768);
        assert_eq!(cfg.depth, 12);
        assert_eq!(cfg.num_heads, 12);
        assert_eq!(cfg.search_tokens(), 256); // 256^2 / 16^2
        assert_eq!(cfg.template_tokens(), 64); // 128^2 / 16^2
        assert_eq!(cfg.score_side(), 16);
    }

    #[test]
    fn config_validation() {
        let mut cfg = desk();
        cfg.template_side = 33;
        assert!(cfg.validate().is_err());
        let mut cfg = desk();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let cfg = desk();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        let bb = Backbone::new(&cfg, &mut store, "backbone", &mut rng, true).unwrap();
        // zero out the positional embedding so only the projection matters
        bb.pos.template_pe.set_value(Tensor::zeros(&[cfg.template_tokens(), cfg.token_dim]));
        let mut g = Graph::no_grad();
        let img = Tensor::zeros(&[3, cfg.template_side, cfg.template_side]);
        let tokens = bb.embed(&mut g, &img, Segment::Template).unwrap();
        assert!(g.value(tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_rows_raster_order() {
        // 2x2 patches over a 4x4 single-intensity-per-patch image
        let mut data = vec![0.0f64; 3 * 4 * 4];
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let patch_id = (y / 2) * 2 + x / 2;
                    data[ch * 16 + y * 4 + x] = patch_id as f64;
                }
            }
        }
        let img = Tensor::new(vec![3, 4, 4], data).unwrap();
        let rows = image_to_patch_rows(&img, 2).unwrap();
        assert_eq!(rows.shape(), &[4, 12]);
        for token in 0..4 {
            assert!(rows.data()[token * 12..(token + 1) * 12]
                .iter()
                .all(|&v| v == token as f64));
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(2);
        let cfg = BackboneConfig {
            patch_size: 8,
            token_dim: 8,
            depth: 1,
            num_heads: 2,
            ffn_ratio: 2,
            template_side: 8,
            search_side: 16,
        };
        let bb = Backbone::new(&cfg, &mut store, "bb", &mut rng, true).unwrap();
        let mut g = Graph::no_grad();
        let x = g.constant(rng.normal_tensor(&[1, 8], 1.0));
        let out = msa(&mut g, x, bb.layer(0)).unwrap();
        // with one token, softmax weight is exactly 1: out = x Wv Wo
        let wv = g.constant(bb.layers[0].wv.value());
        let wo = g.constant(bb.layers[0].wo.value());
        let xv = g.matmul(x, wv).unwrap();
        let expect = g.matmul(xv, wo).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_identical_rows() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let cfg = desk();
        let bb = Backbone::new(&cfg, &mut store, "bb", &mut rng, true).unwrap();
        let mut g = Graph::no_grad();
        let row: Vec<f64> = (0..cfg.token_dim).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = g.constant(Tensor::new(vec![2, cfg.token_dim], data).unwrap());
        let out = msa(&mut g, x, bb.layer(0)).unwrap();
        let o = g.value(out);
        for i in 0..cfg.token_dim {
            assert!((o.data()[i] - o.data()[cfg.token_dim + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_paths_reduce_to_residual_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        let cfg = desk();
        let bb = Backbone::new(&cfg, &mut store, "bb", &mut rng, true).unwrap();
        let layer = &bb.layers[0];
        let c = cfg.token_dim;
        layer.wv.set_value(Tensor::zeros(&[c, c]));
        layer.wo.set_value(Tensor::zeros(&[c, c]));
        layer.ffn_w2.set_value(Tensor::zeros(&[c * cfg.ffn_ratio, c]));
        layer.ffn_b2.set_value(Tensor::zeros(&[c]));
        let mut g = Graph::no_grad();
        let x = g.constant(rng.normal_tensor(&[5, c], 1.0));
        let out = encoder_forward(&mut g, x, layer).unwrap();
        assert_eq!(g.value(out).data(), g.value(x).data());
    }

    #[test]
    fn encoder_stack_is_deterministic() {
        let cfg = desk();
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = Rng::new(11);
            let bb = Backbone::new(&cfg, &mut store, "bb", &mut rng, true).unwrap();
            let mut g = Graph::no_grad();
            let mut x = g.constant(rng.normal_tensor(&[cfg.total_tokens(), cfg.token_dim], 1.0));
            for l in 0..cfg.depth {
                x = encoder_forward(&mut g, x, bb.layer(l)).unwrap();
            }
            g.value(x).data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_count_preserved_through_stack() {
        let cfg = desk();
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(12);
        let bb = Backbone::new(&cfg, &mut store, "bb", &mut rng, true).unwrap();
        let mut g = Graph::no_grad();
        let tpl = g.constant(rng.normal_tensor(&[cfg.template_tokens(), cfg.token_dim], 1.0));
        let srch = g.constant(rng.normal_tensor(&[cfg.search_tokens(), cfg.token_dim], 1.0));
        let seq = bb.join(&mut g, tpl, srch).unwrap();
        assert_eq!(seq.boundary, cfg.template_tokens());
        let mut x = seq.id;
        for l in 0..cfg.depth {
            x = encoder_forward(&mut g, x, bb.layer(l)).unwrap();
            assert_eq!(g.shape(x), &[cfg.total_tokens(), cfg.token_dim]);
        }
    }
}
