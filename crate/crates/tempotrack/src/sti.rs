//! Template interaction block: joint self-attention over the concatenated
//! initial and online template features, inserted at configured encoder
//! layers ahead of the prompter.

use tempotrack_tensor::{Graph, ParamRef, ParamStore, Rng, Scalar, Tensor, ValueId};

use crate::backbone::{attention, TokenSeq};
use crate::error::{ModelError, Result};

const LN_EPS: f64 = 1e-6;

/// Which encoder layers (1-indexed) exchange template features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StiConfig {
    pub insertion_layers: Vec<usize>,
    /// Attention heads inside the block; defaults to the backbone's count.
    pub num_heads: usize,
}

impl StiConfig {
    pub fn new(insertion_layers: Vec<usize>, num_heads: usize) -> Self {
        StiConfig {
            insertion_layers,
            num_heads,
        }
    }

    pub fn disabled(num_heads: usize) -> Self {
        StiConfig {
            insertion_layers: Vec::new(),
            num_heads,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        for &l in &self.insertion_layers {
            if l == 0 || l > depth {
                return Err(ModelError::Config(format!(
                    "interaction layer {l} out of range [1, {depth}]"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, layer_1idx: usize) -> bool {
        self.insertion_layers.contains(&layer_1idx)
    }
}

pub struct StiBlock<F: Scalar> {
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

/// One trainable block per insertion layer.
pub struct Sti<F: Scalar> {
    pub cfg: StiConfig,
    blocks: Vec<(usize, StiBlock<F>)>,
}

impl<F: Scalar> Sti<F> {
    pub fn new(
        cfg: StiConfig,
        token_dim: usize,
        depth: usize,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate(depth)?;
        let c = token_dim;
        let hidden = 4 * c;
        let mut blocks = Vec::new();
        for &layer in &cfg.insertion_layers {
            let p = format!("{prefix}.l{layer}");
            let xav = |rng: &mut Rng, shape: &[usize], fi: usize, fo: usize| {
                rng.xavier_uniform::<F>(shape, fi, fo)
            };
            blocks.push((
                layer,
                StiBlock {
                    wq: store.register(format!("{p}.wq"), xav(rng, &[c, c], c, c), true),
                    wk: store.register(format!("{p}.wk"), xav(rng, &[c, c], c, c), true),
                    wv: store.register(format!("{p}.wv"), xav(rng, &[c, c], c, c), true),
                    wo: store.register(format!("{p}.wo"), xav(rng, &[c, c], c, c), true),
                    ln1_gamma: store.register(format!("{p}.ln1.g"), Tensor::full(&[c], F::ONE), true),
                    ln1_beta: store.register(format!("{p}.ln1.b"), Tensor::zeros(&[c]), true),
                    ln2_gamma: store.register(format!("{p}.ln2.g"), Tensor::full(&[c], F::ONE), true),
                    ln2_beta: store.register(format!("{p}.ln2.b"), Tensor::zeros(&[c]), true),
                    ffn_w1: store.register(format!("{p}.ffn.w1"), xav(rng, &[c, hidden], c, hidden), true),
                    ffn_b1: store.register(format!("{p}.ffn.b1"), Tensor::zeros(&[hidden]), true),
                    ffn_w2: store.register(format!("{p}.ffn.w2"), xav(rng, &[hidden, c], hidden, c), true),
                    ffn_b2: store.register(format!("{p}.ffn.b2"), Tensor::zeros(&[c]), true),
                    num_heads: cfg.num_heads,
                },
            ));
        }
        Ok(Sti { cfg, blocks })
    }

    pub fn block_for_layer(&self, layer_1idx: usize) -> Option<&StiBlock<F>> {
        self.blocks
            .iter()
            .find(|(l, _)| *l == layer_1idx)
            .map(|(_, b)| b)
    }

    /// Run the exchange before encoder layer `layer_1idx` when configured;
    /// otherwise identity. Only the template segments change, the search
    /// segments and boundaries pass through untouched.
    pub fn apply_at_layer(
        &self,
        g: &mut Graph<F>,
        layer_1idx: usize,
        stream_i: TokenSeq,
        stream_o: TokenSeq,
    ) -> Result<(TokenSeq, TokenSeq)> {
        let Some(block) = self.block_for_layer(layer_1idx) else {
            return Ok((stream_i, stream_o));
        };
        if stream_i.boundary != stream_o.boundary || stream_i.len != stream_o.len {
            return Err(ModelError::Dim("branch streams desynchronized".into()));
        }
        let n_z = stream_i.boundary;
        let z_i = g.slice(stream_i.id, 0, 0, n_z)?;
        let z_o = g.slice(stream_o.id, 0, 0, n_z)?;
        let (z_i2, z_o2) = sti_forward(g, z_i, z_o, block)?;
        let search_i = g.slice(stream_i.id, 0, n_z, stream_i.len - n_z)?;
        let search_o = g.slice(stream_o.id, 0, n_z, stream_o.len - n_z)?;
        let new_i = g.concat(&[z_i2, search_i], 0)?;
        let new_o = g.concat(&[z_o2, search_o], 0)?;
        Ok((
            TokenSeq::new(new_i, stream_i.len, stream_i.boundary),
            TokenSeq::new(new_o, stream_o.len, stream_o.boundary),
        ))
    }
}

/// Joint self-attention over both template feature sets.
///
/// Z = [Z_i; Z_o]; F = attention(Z); F~ = LN(F + Z); Z' = LN(F~ + FFN(F~));
/// the two halves of Z' replace the branch template features.
pub fn sti_forward<F: Scalar>(
    g: &mut Graph<F>,
    z_i: ValueId,
    z_o: ValueId,
    w: &StiBlock<F>,
) -> Result<(ValueId, ValueId)> {
    let (si, so) = (g.shape(z_i).to_vec(), g.shape(z_o).to_vec());
    if si != so {
        return Err(ModelError::Dim(format!(
            "template features differ in shape: {si:?} vs {so:?}"
        )));
    }
    let n = si[0];
    let z = g.concat(&[z_i, z_o], 0)?;
    let f = attention(g, z, &w.wq, &w.wk, &w.wv, Some(&w.wo), w.num_heads)?;
    let residual = g.add(f, z)?;
    let f_tilde = g.layer_norm(residual, &w.ln1_gamma, &w.ln1_beta, LN_EPS)?;

    let w1 = g.param(&w.ffn_w1);
    let b1 = g.param(&w.ffn_b1);
    let h = g.matmul(f_tilde, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h)?;
    let w2 = g.param(&w.ffn_w2);
    let b2 = g.param(&w.ffn_b2);
    let ff = g.matmul(h, w2)?;
    let ff = g.add_bias(ff, b2)?;

    let out = g.add(f_tilde, ff)?;
    let out = g.layer_norm(out, &w.ln2_gamma, &w.ln2_beta, LN_EPS)?;

    let halves = g.split(out, 0, &[n, n])?;
    Ok((halves[0], halves[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64, c: usize, heads: usize) -> (Sti<f64>, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let sti = Sti::new(
            StiConfig::new(vec![1], heads),
            c,
            2,
            &mut store,
            "sti",
            &mut rng,
        )
        .unwrap();
        (sti, store)
    }

    #[test]
    fn identical_inputs_identical_halves() {
        let (sti, _s) = build(1, 8, 2);
        let mut rng = Rng::new(2);
        let mut g = Graph::no_grad();
        let zv = rng.normal_tensor::<f64>(&[4, 8], 1.0);
        let a = g.constant(zv.clone());
        let b = g.constant(zv);
        let (oa, ob) = sti_forward(&mut g, a, b, sti.block_for_layer(1).unwrap()).unwrap();
        assert_eq!(g.value(oa).data(), g.value(ob).data());
    }

    #[test]
    fn swapping_inputs_swaps_outputs() {
        let (sti, _s) = build(3, 8, 2);
        let mut rng = Rng::new(4);
        let mut g = Graph::no_grad();
        let a = g.constant(rng.normal_tensor::<f64>(&[4, 8], 1.0));
        let b = g.constant(rng.normal_tensor::<f64>(&[4, 8], 1.0));
        let block = sti.block_for_layer(1).unwrap();
        let (oa, ob) = sti_forward(&mut g, a, b, block).unwrap();
        let (sb, sa) = sti_forward(&mut g, b, a, block).unwrap();
        for i in 0..32 {
            assert!((g.value(oa).data()[i] - g.value(sa).data()[i]).abs() < 1e-12);
            assert!((g.value(ob).data()[i] - g.value(sb).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn information_flows_both_ways() {
        let (sti, _s) = build(5, 8, 2);
        let mut rng = Rng::new(6);
        let mut g = Graph::no_grad();
        let a = rng.normal_tensor::<f64>(&[4, 8], 1.0);
        let b = rng.normal_tensor::<f64>(&[4, 8], 1.0);
        let block = sti.block_for_layer(1).unwrap();

        let ai = g.constant(a.clone());
        let bi = g.constant(b.clone());
        let (oa, _) = sti_forward(&mut g, ai, bi, block).unwrap();

        // perturb one token of the second input: the first half must react
        let mut b2 = b.clone();
        b2.data_mut()[5] += 0.5;
        let ai2 = g.constant(a);
        let bi2 = g.constant(b2);
        let (oa2, _) = sti_forward(&mut g, ai2, bi2, block).unwrap();
        let delta: f64 = g
            .value(oa)
            .data()
            .iter()
            .zip(g.value(oa2).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(delta > 1e-6, "no cross-template flow, delta = {delta}");
    }

    #[test]
    fn zero_value_paths_degenerate_to_double_layernorm() {
        let (sti, _s) = build(7, 8, 2);
        let block = sti.block_for_layer(1).unwrap();
        block.wv.set_value(Tensor::zeros(&[8, 8]));
        block.wo.set_value(Tensor::zeros(&[8, 8]));
        block.ffn_w2.set_value(Tensor::zeros(&[32, 8]));
        let mut rng = Rng::new(8);
        let mut g = Graph::no_grad();
        let a = g.constant(rng.normal_tensor::<f64>(&[4, 8], 1.0));
        let b = g.constant(rng.normal_tensor::<f64>(&[4, 8], 1.0));
        let (oa, ob) = sti_forward(&mut g, a, b, block).unwrap();

        // expected: LN2(LN1(Z)) with unit affine
        let z = g.concat(&[a, b], 0).unwrap();
        let g1 = ParamRef::new(Tensor::full(&[8], 1.0), false);
        let b1 = ParamRef::new(Tensor::zeros(&[8]), false);
        let ln1 = g.layer_norm(z, &g1, &b1, LN_EPS).unwrap();
        let ln2 = g.layer_norm(ln1, &g1, &b1, LN_EPS).unwrap();
        let expect = g.value(ln2).data();
        for (i, (x, e)) in g
            .value(oa)
            .data()
            .iter()
            .chain(g.value(ob).data())
            .zip(expect)
            .enumerate()
        {
            assert!((x - e).abs() < 1e-12, "mismatch at {i}");
            assert!(x.is_finite());
        }
    }

    #[test]
    fn apply_skips_unconfigured_layers_and_keeps_boundaries() {
        let (sti, _s) = build(9, 8, 2);
        let mut rng = Rng::new(10);
        let mut g = Graph::no_grad();
        let si = g.constant(rng.normal_tensor::<f64>(&[10, 8], 1.0));
        let so = g.constant(rng.normal_tensor::<f64>(&[10, 8], 1.0));
        let a = TokenSeq::new(si, 10, 4);
        let b = TokenSeq::new(so, 10, 4);

        // layer 2 not configured: identity
        let (ua, ub) = sti.apply_at_layer(&mut g, 2, a, b).unwrap();
        assert_eq!(ua.id, a.id);
        assert_eq!(ub.id, b.id);

        // layer 1 configured: template halves change, search halves do not
        let (ua, ub) = sti.apply_at_layer(&mut g, 1, a, b).unwrap();
        assert_eq!(ua.boundary, 4);
        assert_eq!(ub.boundary, 4);
        let before = &g.value(a.id).data()[4 * 8..];
        let after = &g.value(ua.id).data()[4 * 8..];
        assert_eq!(before, after);
    }

    #[test]
    fn empty_insertion_set_is_always_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(11);
        let sti = Sti::new(StiConfig::disabled(2), 8, 4, &mut store, "sti", &mut rng).unwrap();
        assert_eq!(store.len(), 0);
        let mut g = Graph::no_grad();
        let si = g.constant(rng.normal_tensor::<f64>(&[6, 8], 1.0));
        let a = TokenSeq::new(si, 6, 2);
        for layer in 1..=4 {
            let (ua, _) = sti.apply_at_layer(&mut g, layer, a, a).unwrap();
            assert_eq!(ua.id, a.id);
        }
    }

    #[test]
    fn out_of_range_layer_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(12);
        assert!(Sti::<f64>::new(StiConfig::new(vec![7], 2), 8, 6, &mut store, "sti", &mut rng).is_err());
        let mut store = ParamStore::<f64>::new();
        assert!(Sti::<f64>::new(StiConfig::new(vec![0], 2), 8, 6, &mut store, "s2", &mut rng).is_err());
    }
}
