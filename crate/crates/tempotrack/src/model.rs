//! End-to-end model assembly: two template-referenced branches over a shared
//! frozen backbone, per-branch modality prompters, template interaction at
//! configured layers, channel fusion and the center head.

use tempotrack_tensor::{Graph, ParamStore, Rng, Scalar, Tensor, ValueId};

use crate::backbone::{encoder_forward, Backbone, BackboneConfig, Segment, TokenSeq};
use crate::boxes::BBox;
use crate::error::{ModelError, Result};
use crate::heads::{CenterHead, Fusion, HeadMaps};
use crate::mcp::{inject, Mcp};
use crate::sti::{Sti, StiConfig};

/// Which architectural pieces are present. Table-style ablation variants are
/// all expressible through this struct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantConfig {
    /// Thermal prompts injected into the fused stream.
    pub use_mcp: bool,
    /// Second (online-template) branch plus fusion.
    pub dual_branch: bool,
    /// Encoder layers (1-indexed) running template interaction. Only
    /// meaningful with `dual_branch`.
    pub sti_layers: Vec<usize>,
}

impl VariantConfig {
    /// Single-branch RGB tracker: backbone + head only.
    pub fn rgb_baseline() -> Self {
        VariantConfig {
            use_mcp: false,
            dual_branch: false,
            sti_layers: Vec::new(),
        }
    }

    /// Single branch with thermal prompts.
    pub fn prompt_baseline() -> Self {
        VariantConfig {
            use_mcp: true,
            dual_branch: false,
            sti_layers: Vec::new(),
        }
    }

    /// Dual branch with prompts, no template interaction.
    pub fn dual_no_sti() -> Self {
        VariantConfig {
            use_mcp: true,
            dual_branch: true,
            sti_layers: Vec::new(),
        }
    }

    /// The full architecture.
    pub fn full(sti_layers: Vec<usize>) -> Self {
        VariantConfig {
            use_mcp: true,
            dual_branch: true,
            sti_layers,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !self.dual_branch && !self.sti_layers.is_empty() {
            return Err(ModelError::Config(
                "template interaction requires the dual-branch variant".into(),
            ));
        }
        StiConfig::new(self.sti_layers.clone(), 1).validate(depth)
    }

    /// Default insertion layers at full depth 12: {4, 7, 10}, mapped
    /// proportionally for other depths.
    pub fn default_sti_layers(depth: usize) -> Vec<usize> {
        [4usize, 7, 10]
            .iter()
            .map(|&l| (l * depth).div_ceil(12).clamp(1, depth))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(Vec::new(), |mut acc, l| {
                if acc.last() != Some(&l) {
                    acc.push(l);
                }
                acc
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: VariantConfig,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, variant: VariantConfig) -> Result<Self> {
        backbone.validate()?;
        variant.validate(backbone.depth)?;
        Ok(ModelConfig { backbone, variant })
    }
}

/// Aligned RGB + thermal crop pair, both `[3, side, side]` in [0, 1].
#[derive(Clone, Debug)]
pub struct FramePair<F: Scalar> {
    pub rgb: Tensor<F>,
    pub tir: Tensor<F>,
}

impl<F: Scalar> FramePair<F> {
    pub fn new(rgb: Tensor<F>, tir: Tensor<F>) -> Self {
        FramePair { rgb, tir }
    }

    /// RGB-only input for single-modality variants: the thermal slot is a
    /// copy and is never read unless prompts are enabled.
    pub fn rgb_only(rgb: Tensor<F>) -> Self {
        FramePair {
            tir: rgb.clone(),
            rgb,
        }
    }
}

struct BranchState {
    stream: TokenSeq,
    prompt: Option<TokenSeq>,
}

pub struct TrackModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    backbone: Backbone<F>,
    head: CenterHead<F>,
    mcp_init: Option<Mcp<F>>,
    mcp_online: Option<Mcp<F>>,
    sti: Sti<F>,
    fusion: Option<Fusion<F>>,
}

impl<F: Scalar> TrackModel<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let bb_cfg = &cfg.backbone;
        let backbone = Backbone::new(bb_cfg, &mut store, "backbone", &mut rng, true)?;
        let head = CenterHead::new(bb_cfg.token_dim, &mut store, "head", &mut rng, true)?;

        let mcp_for = |store: &mut ParamStore<F>, rng: &mut Rng, name: &str| {
            Mcp::new(
                bb_cfg.token_dim,
                bb_cfg.depth,
                bb_cfg.template_tokens(),
                bb_cfg.search_tokens(),
                store,
                name,
                rng,
            )
        };
        let mcp_init = if cfg.variant.use_mcp {
            Some(mcp_for(&mut store, &mut rng, "mcp.init")?)
        } else {
            None
        };
        let mcp_online = if cfg.variant.use_mcp && cfg.variant.dual_branch {
            Some(mcp_for(&mut store, &mut rng, "mcp.online")?)
        } else {
            None
        };
        let sti = Sti::new(
            StiConfig::new(cfg.variant.sti_layers.clone(), bb_cfg.num_heads),
            bb_cfg.token_dim,
            bb_cfg.depth,
            &mut store,
            "sti",
            &mut rng,
        )?;
        let fusion = if cfg.variant.dual_branch {
            Some(Fusion::new(bb_cfg.token_dim, &mut store, "fusion", &mut rng))
        } else {
            None
        };

        Ok(TrackModel {
            cfg,
            params: store,
            backbone,
            head,
            mcp_init,
            mcp_online,
            sti,
            fusion,
        })
    }

    pub fn backbone(&self) -> &Backbone<F> {
        &self.backbone
    }

    /// True for parameters belonging to the pretrained base (backbone + head).
    pub fn is_base_param(name: &str) -> bool {
        name.starts_with("backbone.") || name.starts_with("head.")
    }

    /// Freeze the pretrained base; prompt-learning parameters stay trainable.
    pub fn freeze_base(&self) {
        for (name, p) in self.params.iter() {
            if Self::is_base_param(name) {
                p.set_trainable(false);
            }
        }
    }

    fn embed_branch(
        &self,
        g: &mut Graph<F>,
        template: &FramePair<F>,
        search: &FramePair<F>,
    ) -> Result<BranchState> {
        let tpl_rgb = self.backbone.embed(g, &template.rgb, Segment::Template)?;
        let srch_rgb = self.backbone.embed(g, &search.rgb, Segment::Search)?;
        let stream = self.backbone.join(g, tpl_rgb, srch_rgb)?;
        let prompt = if self.cfg.variant.use_mcp {
            let tpl_tir = self.backbone.embed(g, &template.tir, Segment::Template)?;
            let srch_tir = self.backbone.embed(g, &search.tir, Segment::Search)?;
            Some(self.backbone.join(g, tpl_tir, srch_tir)?)
        } else {
            None
        };
        Ok(BranchState { stream, prompt })
    }

    fn advance_branch(&self, g: &mut Graph<F>, branch: &mut BranchState, layer: usize, mcp: Option<&Mcp<F>>) -> Result<()> {
        if let (Some(mcp), Some(prompt)) = (mcp, branch.prompt) {
            let new_prompt = mcp.forward(g, prompt, branch.stream, layer)?;
            branch.stream = inject(g, branch.stream, new_prompt)?;
            branch.prompt = Some(new_prompt);
        }
        branch.stream = TokenSeq::new(
            encoder_forward(g, branch.stream.id, self.backbone.layer(layer))?,
            branch.stream.len,
            branch.stream.boundary,
        );
        Ok(())
    }

    /// Single-branch forward: template + search, head on the search tokens.
    pub fn single_forward(
        &self,
        g: &mut Graph<F>,
        template: &FramePair<F>,
        search: &FramePair<F>,
        training: bool,
    ) -> Result<HeadMaps> {
        let mut branch = self.embed_branch(g, template, search)?;
        for layer in 0..self.cfg.backbone.depth {
            self.advance_branch(g, &mut branch, layer, self.mcp_init.as_ref())?;
        }
        let search_tokens = self.search_tokens(g, &branch)?;
        let features = self.tokens_to_feature_map(g, search_tokens)?;
        self.head.forward(g, features, training)
    }

    /// Dual-branch forward, layer-synchronized so template interaction can
    /// exchange features before the layer it is configured on.
    pub fn dual_forward(
        &self,
        g: &mut Graph<F>,
        init_template: &FramePair<F>,
        online_template: &FramePair<F>,
        search: &FramePair<F>,
        training: bool,
    ) -> Result<HeadMaps> {
        if !self.cfg.variant.dual_branch {
            return Err(ModelError::Config(
                "dual_forward on a single-branch variant".into(),
            ));
        }
        let mut init = self.embed_branch(g, init_template, search)?;
        let mut online = self.embed_branch(g, online_template, search)?;
        for layer in 0..self.cfg.backbone.depth {
            let (si, so) = self
                .sti
                .apply_at_layer(g, layer + 1, init.stream, online.stream)?;
            init.stream = si;
            online.stream = so;
            self.advance_branch(g, &mut init, layer, self.mcp_init.as_ref())?;
            self.advance_branch(g, &mut online, layer, self.mcp_online.as_ref())?;
        }

        let search_i = self.search_tokens(g, &init)?;
        let search_o = self.search_tokens(g, &online)?;
        // fixed fusion order: initial branch first
        let cat = g.concat(&[search_i, search_o], 1)?;
        let fusion = self.fusion.as_ref().expect("dual variant has fusion");
        let fused = fusion.forward(g, cat, training)?;
        let features = self.tokens_to_feature_map(g, fused)?;
        self.head.forward(g, features, training)
    }

    /// Forward dispatch: single-branch variants ignore the online template.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        init_template: &FramePair<F>,
        online_template: &FramePair<F>,
        search: &FramePair<F>,
        training: bool,
    ) -> Result<HeadMaps> {
        if self.cfg.variant.dual_branch {
            self.dual_forward(g, init_template, online_template, search, training)
        } else {
            self.single_forward(g, init_template, search, training)
        }
    }

    /// One branch through the full stack (no interaction); exposed so the
    /// ablation equivalences can compare token streams directly.
    pub fn branch_tokens(
        &self,
        g: &mut Graph<F>,
        template: &FramePair<F>,
        search: &FramePair<F>,
    ) -> Result<TokenSeq> {
        let mut branch = self.embed_branch(g, template, search)?;
        for layer in 0..self.cfg.backbone.depth {
            self.advance_branch(g, &mut branch, layer, self.mcp_init.as_ref())?;
        }
        Ok(branch.stream)
    }

    fn search_tokens(&self, g: &mut Graph<F>, branch: &BranchState) -> Result<ValueId> {
        let seq = branch.stream;
        Ok(g.slice(seq.id, 0, seq.boundary, seq.len - seq.boundary)?)
    }

    /// `[N_x, C]` raster tokens -> `[C, S, S]` feature map for the head.
    fn tokens_to_feature_map(&self, g: &mut Graph<F>, tokens: ValueId) -> Result<ValueId> {
        let s = self.cfg.backbone.score_side();
        let c = self.cfg.backbone.token_dim;
        let t = g.transpose_last2(tokens)?;
        Ok(g.reshape(t, vec![c, s, s])?)
    }
}

/// Decode the maps into a normalized box plus its confidence.
///
/// (i, j) is the score argmax (first occurrence on ties);
/// cx = (j + offset_x) / S, cy = (i + offset_y) / S, (w, h) read at (i, j).
pub fn decode_box<F: Scalar>(
    score: &Tensor<F>,
    offset: &Tensor<F>,
    size: &Tensor<F>,
) -> (BBox, f64) {
    let s = score.shape()[1];
    let cells = s * s;
    let mut best = 0usize;
    let mut best_v = score.data()[0];
    for (i, &v) in score.data()[..cells].iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let (i, j) = (best / s, best % s);
    let off_x = offset.data()[i * s + j].to_f64();
    let off_y = offset.data()[cells + i * s + j].to_f64();
    let w = size.data()[i * s + j].to_f64();
    let h = size.data()[cells + i * s + j].to_f64();
    let cx = (j as f64 + off_x) / s as f64;
    let cy = (i as f64 + off_y) / s as f64;
    (BBox::new(cx, cy, w, h), best_v.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            patch_size: 8,
            token_dim: 16,
            depth: 2,
            num_heads: 2,
            ffn_ratio: 2,
            template_side: 16,
            search_side: 32,
        }
    }

    fn random_pair(rng: &mut Rng, side: usize) -> FramePair<f64> {
        FramePair::new(
            rng.normal_tensor(&[3, side, side], 0.3),
            rng.normal_tensor(&[3, side, side], 0.3),
        )
    }

    #[test]
    fn dual_forward_shapes_and_finiteness() {
        let cfg = ModelConfig::new(tiny_backbone(), VariantConfig::full(vec![1])).unwrap();
        let model = TrackModel::<f64>::new(cfg, 7).unwrap();
        let mut rng = Rng::new(8);
        let tpl = random_pair(&mut rng, 16);
        let online = random_pair(&mut rng, 16);
        let search = random_pair(&mut rng, 32);
        let mut g = Graph::no_grad();
        let maps = model
            .dual_forward(&mut g, &tpl, &online, &search, false)
            .unwrap();
        assert_eq!(g.shape(maps.score), &[1, 4, 4]);
        assert!(g.value(maps.score).all_finite());
        assert!(g.value(maps.offset).all_finite());
        assert!(g.value(maps.size).all_finite());
    }

    #[test]
    fn equal_templates_give_equal_branch_features() {
        // same inputs and same per-branch weights -> identical search tokens
        let cfg = ModelConfig::new(tiny_backbone(), VariantConfig::dual_no_sti()).unwrap();
        let model = TrackModel::<f64>::new(cfg, 9).unwrap();
        // force the online prompter to mirror the initial one
        let (a, b) = (model.mcp_init.as_ref().unwrap(), model.mcp_online.as_ref().unwrap());
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            lb.down_prompt_w.set_value(la.down_prompt_w.value());
            lb.down_prompt_b.set_value(la.down_prompt_b.value());
            lb.down_stream_w.set_value(la.down_stream_w.value());
            lb.down_stream_b.set_value(la.down_stream_b.value());
            lb.up_w.set_value(la.up_w.value());
            lb.up_b.set_value(la.up_b.value());
        }
        let mut rng = Rng::new(10);
        let tpl = random_pair(&mut rng, 16);
        let search = random_pair(&mut rng, 32);
        let mut g = Graph::no_grad();
        let mut init = model.embed_branch(&mut g, &tpl, &search).unwrap();
        let mut online = model.embed_branch(&mut g, &tpl, &search).unwrap();
        for layer in 0..2 {
            model
                .advance_branch(&mut g, &mut init, layer, model.mcp_init.as_ref())
                .unwrap();
            model
                .advance_branch(&mut g, &mut online, layer, model.mcp_online.as_ref())
                .unwrap();
        }
        assert_eq!(
            g.value(init.stream.id).data(),
            g.value(online.stream.id).data()
        );
    }

    #[test]
    fn parameter_count_bookkeeping() {
        let bb = tiny_backbone();
        let count = |variant: VariantConfig| {
            TrackModel::<f64>::new(ModelConfig::new(bb.clone(), variant).unwrap(), 1)
                .unwrap()
                .params
                .total_elements()
        };
        let baseline = count(VariantConfig::prompt_baseline());
        let dual = count(VariantConfig::dual_no_sti());
        let full = count(VariantConfig::full(vec![1, 2]));

        let mcp_params = {
            let mut store = ParamStore::<f64>::new();
            let mut rng = Rng::new(1);
            Mcp::new(16, 2, 4, 16, &mut store, "m", &mut rng).unwrap();
            store.total_elements()
        };
        let fusion_params = {
            let mut store = ParamStore::<f64>::new();
            let mut rng = Rng::new(1);
            Fusion::new(16, &mut store, "f", &mut rng);
            store.total_elements()
        };
        let sti_params = {
            let mut store = ParamStore::<f64>::new();
            let mut rng = Rng::new(1);
            Sti::new(StiConfig::new(vec![1, 2], 2), 16, 2, &mut store, "s", &mut rng).unwrap();
            store.total_elements()
        };
        assert_eq!(dual - baseline, mcp_params + fusion_params);
        assert_eq!(full - dual, sti_params);
    }

    #[test]
    fn decode_box_one_hot() {
        let s = 4;
        let mut score = vec![0.0f64; s * s];
        score[2 * s + 1] = 1.0; // i=2, j=1
        let score = Tensor::new(vec![1, s, s], score).unwrap();
        let offset = Tensor::zeros(&[2, s, s]);
        let size = Tensor::full(&[2, s, s], 0.25);
        let (bb, conf) = decode_box(&score, &offset, &size);
        assert_eq!(conf, 1.0);
        assert!((bb.cx - 1.0 / 4.0).abs() < 1e-12);
        assert!((bb.cy - 2.0 / 4.0).abs() < 1e-12);
        assert_eq!(bb.w, 0.25);
        assert_eq!(bb.h, 0.25);
    }

    #[test]
    fn decode_invariant_under_monotone_score_transforms() {
        let mut rng = Rng::new(11);
        let s = 8;
        let score = rng.normal_tensor::<f64>(&[1, s, s], 1.0).map(|v| 1.0 / (1.0 + (-v).exp()));
        let offset = rng.normal_tensor::<f64>(&[2, s, s], 1.0).map(|v| v.abs().fract());
        let size = rng.normal_tensor::<f64>(&[2, s, s], 1.0).map(|v| v.abs().fract().max(0.01));
        let (bb, _) = decode_box(&score, &offset, &size);
        // monotone transforms: affine shift, cube, exp
        for f in [|v: f64| v + 0.3, |v: f64| v * v * v, |v: f64| v.exp()] {
            let (bb2, _) = decode_box(&score.map(f), &offset, &size);
            assert_eq!(bb, bb2);
        }
    }

    #[test]
    fn decode_matches_exhaustive_scan() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let s = 6;
            let score = rng.normal_tensor::<f64>(&[1, s, s], 1.0);
            let offset = rng.normal_tensor::<f64>(&[2, s, s], 1.0);
            let size = rng.normal_tensor::<f64>(&[2, s, s], 1.0);
            let (bb, conf) = decode_box(&score, &offset, &size);
            // brute force over all cells
            let mut best = (0usize, 0usize);
            let mut best_v = f64::NEG_INFINITY;
            for i in 0..s {
                for j in 0..s {
                    let v = score.data()[i * s + j];
                    if v > best_v {
                        best_v = v;
                        best = (i, j);
                    }
                }
            }
            let (i, j) = best;
            assert_eq!(conf, best_v);
            assert_eq!(bb.cx, (j as f64 + offset.data()[i * s + j]) / s as f64);
            assert_eq!(bb.cy, (i as f64 + offset.data()[s * s + i * s + j]) / s as f64);
        }
    }

    #[test]
    fn default_sti_layers_scale_with_depth() {
        assert_eq!(VariantConfig::default_sti_layers(12), vec![4, 7, 10]);
        assert_eq!(VariantConfig::default_sti_layers(6), vec![2, 4, 5]);
    }

    #[test]
    fn single_branch_variant_rejects_dual_forward() {
        let cfg = ModelConfig::new(tiny_backbone(), VariantConfig::rgb_baseline()).unwrap();
        let model = TrackModel::<f64>::new(cfg, 13).unwrap();
        let mut rng = Rng::new(14);
        let tpl = random_pair(&mut rng, 16);
        let search = random_pair(&mut rng, 32);
        let mut g = Graph::no_grad();
        assert!(model
            .dual_forward(&mut g, &tpl, &tpl, &search, false)
            .is_err());
    }
}
