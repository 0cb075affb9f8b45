//! Planted-depth synthetic task.
//!
//! Every visual token has a key half and a value half. `C` fixed prototype
//! keys are written into random distinct rows of each example together with
//! a class code in the value half of the same row; the remaining rows carry
//! random distractor keys and codes. The text holds `depth + 1` symbol tokens
//! whose sum modulo `C` names the queried prototype, and the label is the
//! class stored with it. Row 0 is the mean of the other rows.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Example, TaskDataset};
use crate::error::{invalid, Result};
use crate::numerics::{seeded_rng, Rng, Tensor};

/// Token id of the classification token at position 0.
pub const CLS_TOKEN: usize = 1;
/// First symbol id; symbol `s` is token `SYMBOL_BASE + s`.
pub const SYMBOL_BASE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_visual: usize,
    pub visual_width: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub prototypes: usize,
    pub composition_depth: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_visual: 32,
            visual_width: 32,
            text_len: 8,
            vocab: 64,
            num_classes: 8,
            prototypes: 8,
            composition_depth: 1,
            noise_sigma: 0.1,
            train_size: 4096,
            val_size: 512,
            test_size: 512,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.prototypes;
        if self.num_classes == 0 || self.num_classes > c {
            return Err(invalid(format!("num_classes {} must be in 1..={c}", self.num_classes)));
        }
        if SYMBOL_BASE + c > self.vocab {
            return Err(invalid(format!(
                "{c} prototypes need {} token ids, vocab has {}",
                SYMBOL_BASE + c,
                self.vocab
            )));
        }
        if self.text_len < self.composition_depth + 2 {
            return Err(invalid(format!(
                "text length {} cannot hold a classification token and {} symbols",
                self.text_len,
                self.composition_depth + 1
            )));
        }
        if self.n_visual < c + 1 {
            return Err(invalid(format!("{} visual tokens cannot hold {c} prototypes plus a global row", self.n_visual)));
        }
        if self.visual_width < 2 || !self.visual_width.is_multiple_of(2) {
            return Err(invalid(format!("visual width {} must be even and at least 2", self.visual_width)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!("noise sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(invalid("every split needs at least one example"));
        }
        Ok(())
    }

    pub fn key_width(&self) -> usize {
        self.visual_width / 2
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.num_classes as f64
    }
}

fn unit_rows(rows: usize, width: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let row: Vec<f64> = (0..width).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::from_parts(vec![rows, width], data)
}

struct Codebook<'a> {
    spec: &'a SyntheticTaskSpec,
    prototypes: &'a Tensor,
    class_codes: &'a Tensor,
}

impl Codebook<'_> {
    fn example(&self, rng: &mut Rng) -> Example {
        let s = self.spec;
        let (c, n, dv, half) = (s.prototypes, s.n_visual, s.visual_width, s.key_width());

        let symbols: Vec<usize> = (0..=s.composition_depth).map(|_| rng.gen_range(0..c)).collect();
        let target = symbols.iter().sum::<usize>() % c;
        let fillers = SYMBOL_BASE + c..s.vocab;
        let mut tokens: Vec<usize> = (0..s.text_len)
            .map(|_| if fillers.is_empty() { 0 } else { rng.gen_range(fillers.clone()) })
            .collect();
        tokens[0] = CLS_TOKEN;
        let mut positions: Vec<usize> = (1..s.text_len).collect();
        positions.shuffle(rng);
        for (&p, &sym) in positions.iter().zip(&symbols) {
            tokens[p] = SYMBOL_BASE + sym;
        }

        let classes: Vec<usize> = (0..c).map(|_| rng.gen_range(0..s.num_classes)).collect();
        let mut slots: Vec<usize> = (1..n).collect();
        slots.shuffle(rng);
        let mut data = vec![0.0; n * dv];
        let distractors = unit_rows(n, half, rng);
        for r in 1..n {
            let row = &mut data[r * dv..(r + 1) * dv];
            row[..half].copy_from_slice(distractors.row(r));
            let code = rng.gen_range(0..s.num_classes);
            row[half..].copy_from_slice(self.class_codes.row(code));
        }
        for (p, &slot) in slots[..c].iter().enumerate() {
            let row = &mut data[slot * dv..(slot + 1) * dv];
            row[..half].copy_from_slice(self.prototypes.row(p));
            row[half..].copy_from_slice(self.class_codes.row(classes[p]));
        }
        if s.noise_sigma > 0.0 {
            for v in data[dv..].iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += s.noise_sigma * z;
            }
        }
        for r in 1..n {
            for j in 0..dv {
                data[j] += data[r * dv + j] / (n - 1) as f64;
            }
        }
        Example {
            tokens,
            features: Tensor::from_parts(vec![n, dv], data),
            label: classes[target],
        }
    }
}

/// Generates train, validation and test splits; a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let prototypes = unit_rows(spec.prototypes, spec.key_width(), &mut rng);
    let class_codes = unit_rows(spec.num_classes, spec.key_width(), &mut rng);
    let book = Codebook { spec, prototypes: &prototypes, class_codes: &class_codes };
    let mut split = |size: usize| (0..size).map(|_| book.example(&mut rng)).collect::<Vec<_>>();
    let train = split(spec.train_size);
    let val = split(spec.val_size);
    let test = split(spec.test_size);
    Ok(TaskDataset {
        num_classes: spec.num_classes,
        train,
        val,
        test,
        prototypes: Some(prototypes),
        class_codes: Some(class_codes),
    })
}
