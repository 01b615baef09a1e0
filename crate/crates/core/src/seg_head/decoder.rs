use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};

use super::prompt::{grid_encoding, PromptEmbeddings};
use crate::backbone::{from_pixel_rows, to_pixel_rows};
use crate::error::{Error, Result};
use crate::fusion::FusedPyramid;
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, gelu_backward, gelu_forward, Attention, AttentionCache,
    ConvTranspose2x2, Gradients, Init, LayerNorm, LayerNormCache, Linear, ModuleGroup, ParamId, ParamStore,
};
use crate::Scalar;

/// Per-pixel mask prediction before the sigmoid, at input image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits<T> {
    pub values: Array2<T>,
}

impl<T: Scalar> MaskLogits<T> {
    pub fn probabilities(&self) -> Array2<T> {
        self.values.mapv(crate::nn::sigmoid)
    }

    /// `σ(m) > threshold`, as `{0, 1}`.
    pub fn binarize(&self, threshold: f64) -> Array2<u8> {
        self.values
            .mapv(|m| u8::from(crate::nn::sigmoid(m).as_f64() > threshold))
    }
}

/// Token self-attention, token→pixel cross-attention, MLP, pixel→token
/// cross-attention; post-norm residuals throughout. Positional encodings are
/// re-added to queries and keys before every attention.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub norm3: LayerNorm,
    pub image_to_token: Attention,
    pub norm4: LayerNorm,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    self_attn: AttentionCache<T>,
    ln1: LayerNormCache<T>,
    t2i: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    mlp_x: Array2<T>,
    mlp_pre: Array2<T>,
    mlp_act: Array2<T>,
    ln3: LayerNormCache<T>,
    i2t: AttentionCache<T>,
    ln4: LayerNormCache<T>,
}

impl TwoWayBlock {
    fn new<T: Scalar>(init: &mut Init<'_, T>, path: &str, dim: usize, heads: usize) -> Self {
        let g = ModuleGroup::MaskDecoder;
        let mlp_dim = 2 * dim;
        Self {
            self_attn: Attention::new(init, g, &format!("{path}.self_attn"), dim, heads),
            norm1: LayerNorm::new(init, g, &format!("{path}.norm1"), dim),
            token_to_image: Attention::new(init, g, &format!("{path}.token_to_image"), dim, heads),
            norm2: LayerNorm::new(init, g, &format!("{path}.norm2"), dim),
            mlp_in: Linear::new(init, g, &format!("{path}.mlp_in"), dim, mlp_dim),
            mlp_out: Linear::new(init, g, &format!("{path}.mlp_out"), mlp_dim, dim),
            norm3: LayerNorm::new(init, g, &format!("{path}.norm3"), dim),
            image_to_token: Attention::new(init, g, &format!("{path}.image_to_token"), dim, heads),
            norm4: LayerNorm::new(init, g, &format!("{path}.norm4"), dim),
        }
    }

    fn num_params(&self) -> usize {
        let d = self.norm1.dim;
        3 * self.self_attn.num_params() + 4 * 2 * d + self.mlp_in.num_params() + self.mlp_out.num_params()
    }

    fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        queries: ArrayView2<'_, T>,
        keys: ArrayView2<'_, T>,
        query_pe: ArrayView2<'_, T>,
        key_pe: ArrayView2<'_, T>,
    ) -> (Array2<T>, Array2<T>, BlockCache<T>) {
        let q = &queries + &query_pe;
        let (a, self_attn) = self.self_attn.forward(p, q.view(), q.view(), queries);
        let (q1, ln1) = self.norm1.forward(p, (&queries + &a).view());

        let q = &q1 + &query_pe;
        let k = &keys + &key_pe;
        let (a, t2i) = self.token_to_image.forward(p, q.view(), k.view(), keys);
        let (q2, ln2) = self.norm2.forward(p, (&q1 + &a).view());

        let mlp_pre = self.mlp_in.forward(p, q2.view());
        let mlp_act = gelu_forward(mlp_pre.view());
        let m = self.mlp_out.forward(p, mlp_act.view());
        let (q3, ln3) = self.norm3.forward(p, (&q2 + &m).view());

        let q = &q3 + &query_pe;
        let (a, i2t) = self.image_to_token.forward(p, k.view(), q.view(), q3.view());
        let (k4, ln4) = self.norm4.forward(p, (&keys + &a).view());

        (
            q3,
            k4,
            BlockCache {
                self_attn,
                ln1,
                t2i,
                ln2,
                mlp_x: q2,
                mlp_pre,
                mlp_act,
                ln3,
                i2t,
                ln4,
            },
        )
    }

    /// Returns `(d queries, d keys, d query_pe)`.
    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        c: &BlockCache<T>,
        dq_out: ArrayView2<'_, T>,
        dk_out: ArrayView2<'_, T>,
        grads: &mut Gradients<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>) {
        let dr4 = self.norm4.backward(p, &c.ln4, dk_out, grads);
        let mut dkeys = dr4.clone();
        let (dk_from_i2t, dq_from_i2t, dv_from_i2t) = self.image_to_token.backward(p, &c.i2t, dr4.view(), grads);
        // k = keys + key_pe feeds both cross attentions; key_pe is fixed.
        let mut dk = dk_from_i2t;
        let mut dqpe = dq_from_i2t.clone();
        let dq3 = &dq_out + &dq_from_i2t + &dv_from_i2t;

        let dr3 = self.norm3.backward(p, &c.ln3, dq3.view(), grads);
        let dact = self.mlp_out.backward(p, c.mlp_act.view(), dr3.view(), grads);
        let dpre = gelu_backward(c.mlp_pre.view(), dact.view());
        let dq2 = &dr3 + &self.mlp_in.backward(p, c.mlp_x.view(), dpre.view(), grads);

        let dr2 = self.norm2.backward(p, &c.ln2, dq2.view(), grads);
        let (dq_t2i, dk_t2i, dv_t2i) = self.token_to_image.backward(p, &c.t2i, dr2.view(), grads);
        dk += &dk_t2i;
        dkeys += &dk;
        dkeys += &dv_t2i;
        dqpe += &dq_t2i;
        let dq1 = &dr2 + &dq_t2i;

        let dr1 = self.norm1.backward(p, &c.ln1, dq1.view(), grads);
        let (dqa, dka, dva) = self.self_attn.backward(p, &c.self_attn, dr1.view(), grads);
        let dq_sum = &dqa + &dka;
        dqpe += &dq_sum;
        let dqueries = &dr1 + &dva + &dq_sum;
        (dqueries, dkeys, dqpe)
    }
}

/// Mask decoder: two-way transformer over `[mask token; prompt tokens]` and
/// the coarsest fused stage, transposed-conv upsampling with additive skips
/// from the finer fused stages, and a hypernetwork head producing per-pixel
/// logits from the mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDecoder {
    pub mask_token: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    /// Coarse-to-fine; entry `i` lifts stage `S-1-i` onto stage `S-2-i`.
    pub upsample: Vec<ConvTranspose2x2>,
    pub hyper_in: Linear,
    pub hyper_out: Linear,
    pub dim: usize,
    pub stages: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    coarse_hw: (usize, usize),
    blocks: Vec<BlockCache<T>>,
    ups: Vec<(Array3<T>, Array3<T>)>,
    up_final: Array2<T>,
    low_hw: (usize, usize),
    mask_out: Array2<T>,
    hyper_pre: Array2<T>,
    hyper_act: Array2<T>,
    hyper: Array2<T>,
    n_tokens: usize,
}

impl MaskDecoder {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        dim: usize,
        stages: usize,
        blocks: usize,
        heads: usize,
        image_size: usize,
    ) -> Self {
        let g = ModuleGroup::MaskDecoder;
        let mask_token = init.uniform(g, "mask_token", &[1, dim], 0.5);
        let blocks = (0..blocks)
            .map(|b| TwoWayBlock::new(init, &format!("block{b}"), dim, heads))
            .collect();
        let upsample = (1..stages)
            .map(|i| ConvTranspose2x2::new(init, g, &format!("upsample{i}"), dim, dim))
            .collect();
        Self {
            mask_token,
            blocks,
            upsample,
            hyper_in: Linear::new(init, g, "hyper_in", dim, dim),
            hyper_out: Linear::new(init, g, "hyper_out", dim, dim),
            dim,
            stages,
            image_size,
        }
    }

    pub fn num_params(&self) -> usize {
        self.dim
            + self.blocks.iter().map(TwoWayBlock::num_params).sum::<usize>()
            + self.upsample.iter().map(ConvTranspose2x2::num_params).sum::<usize>()
            + self.hyper_in.num_params()
            + self.hyper_out.num_params()
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        z: &FusedPyramid<T>,
        prompts: &PromptEmbeddings<T>,
    ) -> Result<(MaskLogits<T>, DecoderCache<T>)> {
        if z.stages.len() != self.stages {
            return Err(Error::Shape(format!(
                "decoder expects {} stages, got {}",
                self.stages,
                z.stages.len()
            )));
        }
        let coarse = z.stages.last().expect("stages");
        let (d, hc, wc) = coarse.dim();
        if d != self.dim || prompts.sparse.ncols() != self.dim || prompts.dense.dim() != (d, hc, wc) {
            return Err(Error::Shape(format!(
                "decoder D={} but features {:?}, sparse {:?}, dense {:?}",
                self.dim,
                coarse.dim(),
                prompts.sparse.dim(),
                prompts.dense.dim()
            )));
        }
        let mut keys = to_pixel_rows(coarse.view());
        keys += &to_pixel_rows(prompts.dense.view());
        let key_pe = grid_encoding::<T>(hc, wc, d);
        let tokens = concatenate![Axis(0), p.view2(self.mask_token), prompts.sparse.view()];
        let mut queries = tokens.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (q, k, c) = b.forward(p, queries.view(), keys.view(), tokens.view(), key_pe.view());
            queries = q;
            keys = k;
            block_caches.push(c);
        }

        let mut up = from_pixel_rows(keys.view(), hc, wc);
        let mut ups = Vec::with_capacity(self.upsample.len());
        for (i, conv) in self.upsample.iter().enumerate() {
            let skip = &z.stages[self.stages - 2 - i];
            let mut pre = conv.forward(p, up.view());
            if pre.dim() != skip.dim() {
                return Err(Error::Shape(format!(
                    "upsampled {:?} does not match skip stage {:?}",
                    pre.dim(),
                    skip.dim()
                )));
            }
            pre += skip;
            let next = gelu_forward(pre.view());
            ups.push((up, pre));
            up = next;
        }
        let (_, h1, w1) = up.dim();
        let up_final = up.into_shape_with_order((d, h1 * w1)).expect("layout");

        let mask_out = queries.slice(s![0..1, ..]).to_owned();
        let hyper_pre = self.hyper_in.forward(p, mask_out.view());
        let hyper_act = gelu_forward(hyper_pre.view());
        let hyper = self.hyper_out.forward(p, hyper_act.view());
        let low = hyper.dot(&up_final).into_shape_with_order((h1, w1)).expect("layout");
        let values = bilinear_resize(low.view(), self.image_size, self.image_size);
        Ok((
            MaskLogits { values },
            DecoderCache {
                coarse_hw: (hc, wc),
                blocks: block_caches,
                ups,
                up_final,
                low_hw: (h1, w1),
                mask_out,
                hyper_pre,
                hyper_act,
                hyper,
                n_tokens: tokens.nrows(),
            },
        ))
    }

    /// Returns `(dL/dz per stage, dL/d sparse tokens, dL/d dense map)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        c: &DecoderCache<T>,
        dlogits: ArrayView2<'_, T>,
        grads: &mut Gradients<T>,
    ) -> (Vec<Array3<T>>, Array2<T>, Array3<T>) {
        let (h1, w1) = c.low_hw;
        let (hc, wc) = c.coarse_hw;
        let dlow = bilinear_resize_backward(dlogits, h1, w1)
            .into_shape_with_order((1, h1 * w1))
            .expect("layout");
        let dhyper = dlow.dot(&c.up_final.t());
        let dup_final = c.hyper.t().dot(&dlow);
        let dact = self.hyper_out.backward(p, c.hyper_act.view(), dhyper.view(), grads);
        let dpre = gelu_backward(c.hyper_pre.view(), dact.view());
        let dmask_out = self.hyper_in.backward(p, c.mask_out.view(), dpre.view(), grads);

        let mut dz: Vec<Option<Array3<T>>> = vec![None; self.stages];
        let mut dup = dup_final.into_shape_with_order((self.dim, h1, w1)).expect("layout");
        for (i, conv) in self.upsample.iter().enumerate().rev() {
            let (x, pre) = &c.ups[i];
            let dpre = gelu_backward(pre.view(), dup.view());
            dup = conv.backward(p, x.view(), dpre.view(), grads);
            dz[self.stages - 2 - i] = Some(dpre);
        }

        let mut dkeys = to_pixel_rows(dup.view());
        let mut dqueries = Array2::<T>::zeros((c.n_tokens, self.dim));
        dqueries.slice_mut(s![0..1, ..]).assign(&dmask_out);
        let mut dtokens_pe = Array2::<T>::zeros((c.n_tokens, self.dim));
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            let (dq, dk, dpe) = b.backward(p, bc, dqueries.view(), dkeys.view(), grads);
            dqueries = dq;
            dkeys = dk;
            dtokens_pe += &dpe;
        }
        let dtokens = dqueries + dtokens_pe;
        grads.accumulate(self.mask_token, &dtokens.slice(s![0..1, ..]));
        let dsparse = dtokens.slice(s![1.., ..]).to_owned();
        let dcoarse = from_pixel_rows(dkeys.view(), hc, wc);
        dz[self.stages - 1] = Some(dcoarse.clone());
        let dz = dz.into_iter().map(|g| g.expect("every stage receives a gradient")).collect();
        (dz, dsparse, dcoarse)
    }
}
