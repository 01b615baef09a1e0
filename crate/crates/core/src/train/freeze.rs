use std::fmt;

use crate::error::{Error, Result};
use crate::nn::ModuleGroup;

/// Which parameter groups the optimizer may update.
///
/// Audio encoder and fusion have no pretrained source, so they start (and in
/// the standard rows stay) trainable; only the three segmentation-model groups
/// are toggled by the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePlan {
    pub audio_encoder: bool,
    pub image_encoder: bool,
    pub fusion: bool,
    pub prompt_encoder: bool,
    pub mask_decoder: bool,
}

impl Default for FreezePlan {
    fn default() -> Self {
        Self::all_trainable()
    }
}

impl FreezePlan {
    pub fn all_trainable() -> Self {
        Self {
            audio_encoder: true,
            image_encoder: true,
            fusion: true,
            prompt_encoder: true,
            mask_decoder: true,
        }
    }

    pub fn all_frozen() -> Self {
        Self {
            audio_encoder: false,
            image_encoder: false,
            fusion: false,
            prompt_encoder: false,
            mask_decoder: false,
        }
    }

    /// Plan with audio encoder and fusion trainable and the three remaining
    /// groups set as given.
    pub fn row(mask_decoder: bool, prompt_encoder: bool, image_encoder: bool) -> Self {
        Self {
            mask_decoder,
            prompt_encoder,
            image_encoder,
            ..Self::all_trainable()
        }
    }

    /// The four ablation rows, labelled by what is fine-tuned.
    pub fn ablation_rows() -> [(&'static str, Self); 4] {
        [
            ("none", Self::row(false, false, false)),
            ("decoder", Self::row(true, false, false)),
            ("decoder+prompt", Self::row(true, true, false)),
            ("all", Self::row(true, true, true)),
        ]
    }

    /// Everything trainable except the comma-separated groups in `frozen`.
    pub fn from_frozen_list(frozen: &str) -> Result<Self> {
        let mut plan = Self::all_trainable();
        for name in frozen.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let g = ModuleGroup::from_name(name).ok_or_else(|| {
                let known: Vec<_> = ModuleGroup::ALL.iter().map(|g| g.name()).collect();
                Error::Config(format!("unknown module {name:?}; expected one of {}", known.join(", ")))
            })?;
            plan.set(g, false);
        }
        Ok(plan)
    }

    pub fn is_trainable(&self, g: ModuleGroup) -> bool {
        match g {
            ModuleGroup::AudioEncoder => self.audio_encoder,
            ModuleGroup::ImageEncoder => self.image_encoder,
            ModuleGroup::Fusion => self.fusion,
            ModuleGroup::PromptEncoder => self.prompt_encoder,
            ModuleGroup::MaskDecoder => self.mask_decoder,
        }
    }

    pub fn set(&mut self, g: ModuleGroup, trainable: bool) {
        let slot = match g {
            ModuleGroup::AudioEncoder => &mut self.audio_encoder,
            ModuleGroup::ImageEncoder => &mut self.image_encoder,
            ModuleGroup::Fusion => &mut self.fusion,
            ModuleGroup::PromptEncoder => &mut self.prompt_encoder,
            ModuleGroup::MaskDecoder => &mut self.mask_decoder,
        };
        *slot = trainable;
    }

    pub fn frozen(&self) -> Vec<ModuleGroup> {
        ModuleGroup::ALL.into_iter().filter(|&g| !self.is_trainable(g)).collect()
    }
}

impl fmt::Display for FreezePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let frozen = self.frozen();
        if frozen.is_empty() {
            return f.write_str("all trainable");
        }
        let names: Vec<_> = frozen.iter().map(|g| g.name()).collect();
        write!(f, "frozen: {}", names.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsing() {
        let p = FreezePlan::from_frozen_list("image_encoder, prompt_encoder").unwrap();
        assert!(!p.image_encoder && !p.prompt_encoder);
        assert!(p.mask_decoder && p.fusion && p.audio_encoder);
        assert_eq!(FreezePlan::from_frozen_list("").unwrap(), FreezePlan::all_trainable());
        assert!(matches!(FreezePlan::from_frozen_list("decoder"), Err(Error::Config(_))));
        assert_eq!(p.to_string(), "frozen: image_encoder,prompt_encoder");
    }

    #[test]
    fn ablation_rows_keep_audio_and_fusion_trainable() {
        let rows = FreezePlan::ablation_rows();
        for (_, p) in rows {
            assert!(p.audio_encoder && p.fusion);
        }
        let trainable: Vec<usize> = rows
            .iter()
            .map(|(_, p)| [p.mask_decoder, p.prompt_encoder, p.image_encoder].iter().filter(|&&b| b).count())
            .collect();
        assert_eq!(trainable, [0, 1, 2, 3]);
    }
}
