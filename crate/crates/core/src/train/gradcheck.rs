//! Central finite-difference check of every trainable scalar against the
//! analytic backward pass, on a tiny double-precision model.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::dataset::Sample;
use crate::error::Result;
use crate::model::AvSam;
use crate::nn::Gradients;
use crate::seg_head::{PointLabel, PromptBox, PromptPoint, PromptSet};
use crate::synth::{generate_sample, SynthConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Seed of the synthetic inputs.
    pub data_seed: u64,
    /// Test hook: doubles the analytic gradient of one tensor before
    /// comparison, so the check must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            // Below ~1e-5 the objective's roundoff (~1e-15) divided by 2h
            // dominates the smallest gradients.
            step: 3e-5,
            tolerance: 1e-4,
            data_seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn table(&self) -> String {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        let mut s = format!(
            "{:<width$} {:>6} {:>11} {:>13} {:>13}\n",
            "parameter", "numel", "max_rel", "analytic", "numeric"
        );
        for p in &self.params {
            let _ = writeln!(
                s,
                "{:<width$} {:>6} {:>11.3e} {:>13.6e} {:>13.6e}",
                p.name, p.numel, p.max_rel_err, p.analytic, p.numeric
            );
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{verdict}: max relative error {:.3e} over {} scalars (tolerance {:.0e})",
            self.max_rel_err, self.checked, self.tolerance
        );
        s
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps gradients that are
/// zero up to roundoff from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Two synthetic scenes sized for `cfg`: one with no prompt, one with two
/// points and a box, so every prompt embedding receives gradient.
pub fn gradcheck_samples(cfg: &ModelConfig, seed: u64) -> Result<Vec<Sample<f64>>> {
    let size = cfg.backbone.image_size;
    let max_half = (size as f64 / 2.0 / std::f64::consts::SQRT_2 - 0.5).min(14.0) * 0.5;
    let synth = SynthConfig {
        image_size: size,
        min_half: max_half * 0.75,
        max_half,
        seed,
        ..SynthConfig::default()
    };
    let mut out: Vec<Sample<f64>> = (0..2)
        .map(|i| generate_sample(&synth, i)?.to_sample(&cfg.audio))
        .collect::<Result<_>>()?;
    let s = size as f64;
    out[1].prompts = PromptSet {
        points: vec![
            PromptPoint { x: 0.3 * s, y: 0.6 * s, label: PointLabel::Foreground },
            PromptPoint { x: 0.8 * s, y: 0.2 * s, label: PointLabel::Background },
        ],
        boxes: vec![PromptBox { x0: 0.1 * s, y0: 0.15 * s, x1: 0.7 * s, y1: 0.9 * s }],
    };
    Ok(out)
}

/// Objective: sum over samples of the per-sample mean BCE.
pub fn gradcheck(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let samples = gradcheck_samples(cfg, opts.data_seed)?;
    let mut model = AvSam::<f64>::new(cfg)?;
    let mut analytic = Gradients::zeros_like(&model.params);
    for s in &samples {
        analytic.add_assign(&model.loss_and_grad(s)?.1);
    }
    let objective = |m: &AvSam<f64>| -> Result<f64> { samples.iter().map(|s| m.loss(s)).sum() };

    let ids: Vec<_> = model.params.ids().collect();
    if opts.corrupt {
        let first = ids[0];
        analytic.get_mut(first).mapv_inplace(|g| 2.0 * g);
    }
    let h = opts.step;
    let mut params = Vec::with_capacity(ids.len());
    let mut checked = 0;
    for id in ids {
        let n = model.params.get(id).len();
        let mut worst = ParamCheck {
            name: model.params.name(id).to_string(),
            numel: n,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..n {
            let orig = model.params.get(id).as_slice().expect("standard layout")[k];
            model.params.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig + h;
            let plus = objective(&model)?;
            model.params.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig - h;
            let minus = objective(&model)?;
            model.params.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).as_slice().expect("standard layout")[k];
            let e = relative_error(a, numeric);
            if e > worst.max_rel_err || k == 0 {
                worst.max_rel_err = e;
                worst.worst_index = k;
                worst.analytic = a;
                worst.numeric = numeric;
            }
            checked += 1;
        }
        params.push(worst);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        params,
        checked,
        max_rel_err,
        tolerance: opts.tolerance,
    })
}
