//! Center-head (score / offset / size maps) and the channel-halving fusion
//! layer that merges the two branch outputs.

use tempotrack_tensor::{BnStats, Graph, ParamRef, ParamStore, Rng, Scalar, Tensor, ValueId};

use crate::error::{ModelError, Result};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

pub struct ConvBnRelu<F: Scalar> {
    pub w: ParamRef<F>, // [C_out, C_in]
    pub b: ParamRef<F>,
    pub bn_gamma: ParamRef<F>,
    pub bn_beta: ParamRef<F>,
    pub bn_mean: ParamRef<F>,
    pub bn_var: ParamRef<F>,
}

impl<F: Scalar> ConvBnRelu<F> {
    fn new(
        c_in: usize,
        c_out: usize,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut Rng,
        trainable: bool,
    ) -> Self {
        ConvBnRelu {
            w: store.register(format!("{prefix}.w"), rng.normal_tensor(&[c_out, c_in], 0.05), trainable),
            b: store.register(format!("{prefix}.b"), Tensor::zeros(&[c_out]), trainable),
            bn_gamma: store.register(format!("{prefix}.bn.g"), Tensor::full(&[c_out], F::ONE), trainable),
            bn_beta: store.register(format!("{prefix}.bn.b"), Tensor::zeros(&[c_out]), trainable),
            // running statistics are buffers, never gradient-trained
            bn_mean: store.register(format!("{prefix}.bn.rm"), Tensor::zeros(&[c_out]), false),
            bn_var: store.register(format!("{prefix}.bn.rv"), Tensor::full(&[c_out], F::ONE), false),
        }
    }

    /// `[C_in, H, W] -> [C_out, H, W]`.
    ///
    /// Normalization always uses the current input's statistics so that
    /// training and inference see the same math (there is no cross-sample
    /// batch in this engine, and running-stat inference diverges from what
    /// the layers co-adapted to). Running estimates are still maintained
    /// while the layer itself is being trained.
    fn forward(&self, g: &mut Graph<F>, x: ValueId, training: bool) -> Result<ValueId> {
        let y = g.conv1x1(x, &self.w, &self.b)?;
        let update = training && self.w.trainable();
        let y = g.batch_norm(
            y,
            0,
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_mean,
            &self.bn_var,
            BN_MOMENTUM,
            BN_EPS,
            BnStats::Batch {
                update_running: update,
            },
        )?;
        Ok(g.relu(y)?)
    }
}

/// One head branch: Conv-BN-ReLU stack narrowing C -> C/2 -> C/4 -> C/8,
/// then a plain conv to the output channels and a sigmoid.
pub struct HeadStack<F: Scalar> {
    layers: Vec<ConvBnRelu<F>>,
    final_w: ParamRef<F>,
    final_b: ParamRef<F>,
}

impl<F: Scalar> HeadStack<F> {
    fn new(
        c: usize,
        out: usize,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut Rng,
        trainable: bool,
    ) -> Self {
        let widths = [c, c / 2, c / 4, c / 8];
        let layers = (0..3)
            .map(|i| {
                ConvBnRelu::new(
                    widths[i],
                    widths[i + 1],
                    store,
                    &format!("{prefix}.{i}"),
                    rng,
                    trainable,
                )
            })
            .collect();
        HeadStack {
            layers,
            final_w: store.register(
                format!("{prefix}.out.w"),
                rng.normal_tensor(&[out, c / 8], 0.05),
                trainable,
            ),
            final_b: store.register(format!("{prefix}.out.b"), Tensor::zeros(&[out]), trainable),
        }
    }

    fn forward(&self, g: &mut Graph<F>, x: ValueId, training: bool) -> Result<ValueId> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, training)?;
        }
        let logits = g.conv1x1(h, &self.final_w, &self.final_b)?;
        Ok(g.sigmoid(logits)?)
    }
}

pub struct HeadMaps {
    pub score: ValueId,  // [1, S, S], in (0, 1)
    pub offset: ValueId, // [2, S, S], cell-local offsets in (0, 1)
    pub size: ValueId,   // [2, S, S], normalized box size in (0, 1)
}

pub struct CenterHead<F: Scalar> {
    score: HeadStack<F>,
    offset: HeadStack<F>,
    size: HeadStack<F>,
}

impl<F: Scalar> CenterHead<F> {
    pub fn new(
        token_dim: usize,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut Rng,
        trainable: bool,
    ) -> Result<Self> {
        if !token_dim.is_multiple_of(8) {
            return Err(ModelError::Config(format!(
                "head requires token dim divisible by 8, got {token_dim}"
            )));
        }
        Ok(CenterHead {
            score: HeadStack::new(token_dim, 1, store, &format!("{prefix}.score"), rng, trainable),
            offset: HeadStack::new(token_dim, 2, store, &format!("{prefix}.offset"), rng, trainable),
            size: HeadStack::new(token_dim, 2, store, &format!("{prefix}.size"), rng, trainable),
        })
    }

    /// `features: [C, S, S]` -> the three prediction maps.
    pub fn forward(&self, g: &mut Graph<F>, features: ValueId, training: bool) -> Result<HeadMaps> {
        Ok(HeadMaps {
            score: self.score.forward(g, features, training)?,
            offset: self.offset.forward(g, features, training)?,
            size: self.size.forward(g, features, training)?,
        })
    }
}

/// Conv-BN-ReLU layer halving `2C -> C` on branch-concatenated search tokens.
pub struct Fusion<F: Scalar> {
    pub w: ParamRef<F>, // [C, 2C]
    pub b: ParamRef<F>,
    pub bn_gamma: ParamRef<F>,
    pub bn_beta: ParamRef<F>,
    pub bn_mean: ParamRef<F>,
    pub bn_var: ParamRef<F>,
}

impl<F: Scalar> Fusion<F> {
    pub fn new(token_dim: usize, store: &mut ParamStore<F>, prefix: &str, rng: &mut Rng) -> Self {
        let c = token_dim;
        // start as the branch average plus a small random break of symmetry:
        // the frozen head then sees near-pretraining feature statistics from
        // the first step
        let mut w0 = rng.xavier_uniform::<F>(&[c, 2 * c], 2 * c, c).scale(F::from_f64(0.1));
        {
            let data = w0.data_mut();
            for row in 0..c {
                data[row * 2 * c + row] += F::from_f64(0.5);
                data[row * 2 * c + c + row] += F::from_f64(0.5);
            }
        }
        Fusion {
            w: store.register(format!("{prefix}.w"), w0, true),
            b: store.register(format!("{prefix}.b"), Tensor::zeros(&[c]), true),
            bn_gamma: store.register(format!("{prefix}.bn.g"), Tensor::full(&[c], F::ONE), true),
            bn_beta: store.register(format!("{prefix}.bn.b"), Tensor::zeros(&[c]), true),
            bn_mean: store.register(format!("{prefix}.bn.rm"), Tensor::zeros(&[c]), false),
            bn_var: store.register(format!("{prefix}.bn.rv"), Tensor::full(&[c], F::ONE), false),
        }
    }

    /// `tokens: [N, 2C] -> [N, C]`.
    pub fn forward(&self, g: &mut Graph<F>, tokens: ValueId, training: bool) -> Result<ValueId> {
        let w = g.param(&self.w);
        let wt = g.transpose_last2(w)?; // [2C, C]
        let y = g.matmul(tokens, wt)?;
        let b = g.param(&self.b);
        let y = g.add_bias(y, b)?;
        let update = training && self.w.trainable();
        let y = g.batch_norm(
            y,
            1,
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_mean,
            &self.bn_var,
            BN_MOMENTUM,
            BN_EPS,
            BnStats::Batch {
                update_running: update,
            },
        )?;
        Ok(g.relu(y)?)
    }
}
