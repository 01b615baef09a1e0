//! The full network: audio encoder, image encoder, per-stage fusion, prompt
//! encoder and mask decoder sharing one named parameter store.

use ndarray::ArrayView2;

use crate::audio::Spectrogram;
use crate::backbone::{
    AudioEmbedding, AudioEncoder, AudioEncoderCache, ImageEncoder, ImageEncoderCache, ImageTensor,
};
use crate::config::ModelConfig;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, StageCache};
use crate::nn::{Gradients, Init, ParamStore};
use crate::seg_head::{
    bce_loss, bce_loss_grad, DecoderCache, MaskDecoder, MaskLogits, PromptEncoder, PromptSet, TokenSource,
};
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct AvSam<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub audio: AudioEncoder,
    pub image: ImageEncoder,
    pub fusion: FusionParams,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    audio: Option<AudioEncoderCache<T>>,
    image: ImageEncoderCache<T>,
    fusion: Vec<StageCache<T>>,
    sources: Vec<TokenSource>,
    decoder: DecoderCache<T>,
}

impl<T: Scalar> AvSam<T> {
    /// Fresh weights drawn from `config.backbone.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, config.backbone.seed);
        let b = &config.backbone;
        let audio = AudioEncoder::new(&mut init, b, config.audio.shape())?;
        let image = ImageEncoder::new(&mut init, b);
        let fusion = FusionParams::new(&mut init, b.stages, b.dim, &config.fusion);
        let prompt = PromptEncoder::new(&mut init, b.dim, b.image_size);
        let decoder = MaskDecoder::new(
            &mut init,
            b.dim,
            b.stages,
            config.decoder.blocks,
            config.decoder.heads,
            b.image_size,
        );
        Ok(Self {
            config: config.clone(),
            params,
            audio,
            image,
            fusion,
            prompt,
            decoder,
        })
    }

    /// Architecture from `config`, weights from `params`. Every parameter
    /// must be present with the expected shape, and nothing else.
    pub fn with_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, _, value) in model.params.iter() {
            let other = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if other.index() != id.index() || params.get(other).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?} at slot {}, found {:?} at slot {}",
                    value.shape(),
                    id.index(),
                    params.get(other).shape(),
                    other.index()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Runs the network. With `ablate_audio` the audio embedding is replaced
    /// by zeros and the audio encoder is skipped.
    pub fn forward(
        &self,
        image: &ImageTensor<T>,
        spec: &Spectrogram<T>,
        prompts: &PromptSet,
        ablate_audio: bool,
    ) -> Result<(MaskLogits<T>, ForwardCache<T>)> {
        let p = &self.params;
        let (embedding, audio_cache) = if ablate_audio {
            (AudioEmbedding::zeros(self.config.backbone.dim), None)
        } else {
            let (a, c) = self.audio.forward(p, spec)?;
            (a, Some(c))
        };
        let (pyramid, image_cache) = self.image.forward(p, image)?;
        let (fused, fusion_cache) = self.fusion.fuse_pyramid(p, &pyramid, &embedding)?;
        let (_, hc, wc) = fused.stages.last().expect("at least one stage").dim();
        let embeddings = self.prompt.encode(p, prompts, (hc, wc))?;
        let (logits, decoder_cache) = self.decoder.forward(p, &fused, &embeddings)?;
        Ok((
            logits,
            ForwardCache {
                audio: audio_cache,
                image: image_cache,
                fusion: fusion_cache,
                sources: embeddings.sources,
                decoder: decoder_cache,
            },
        ))
    }

    /// Gradients of every parameter given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: ArrayView2<'_, T>) -> Gradients<T> {
        let p = &self.params;
        let mut grads = Gradients::zeros_like(p);
        let (dz, dsparse, ddense) = self.decoder.backward(p, &cache.decoder, dlogits, &mut grads);
        self.prompt
            .backward(&cache.sources, dsparse.view(), ddense.view(), &mut grads);
        let (dv, da) = self.fusion.backward(p, &cache.fusion, &dz, &mut grads);
        self.image.backward(p, &cache.image, &dv, &mut grads);
        if let Some(ac) = &cache.audio {
            self.audio.backward(p, ac, da.view(), &mut grads);
        }
        grads
    }

    pub fn predict(
        &self,
        image: &ImageTensor<T>,
        spec: &Spectrogram<T>,
        prompts: &PromptSet,
        ablate_audio: bool,
    ) -> Result<MaskLogits<T>> {
        Ok(self.forward(image, spec, prompts, ablate_audio)?.0)
    }

    /// Mean BCE of one labelled sample and its parameter gradients.
    pub fn loss_and_grad(&self, sample: &Sample<T>) -> Result<(T, Gradients<T>)> {
        let mask = sample
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} has no ground-truth mask", sample.id)))?;
        let (logits, cache) = self.forward(&sample.image, &sample.spectrogram, &sample.prompts, false)?;
        let loss = bce_loss(&logits, mask)?;
        let dlogits = bce_loss_grad(&logits, mask)?;
        Ok((loss, self.backward(&cache, dlogits.view())))
    }

    pub fn loss(&self, sample: &Sample<T>) -> Result<T> {
        let mask = sample
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} has no ground-truth mask", sample.id)))?;
        let logits = self.predict(&sample.image, &sample.spectrogram, &sample.prompts, false)?;
        bce_loss(&logits, mask)
    }
}
