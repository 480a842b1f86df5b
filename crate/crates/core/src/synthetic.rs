//! Synthetic twelve-lead frames whose unobserved leads are exact linear
//! images of the observed ones.
//!
//! Each observed lead is a shared source plus a scaled lead-specific
//! source, both sums of random-phase sinusoids with a whole number of
//! cycles per frame. The missing leads are `M · observed` plus optional
//! Gaussian noise. One missing lead (the evidence lead) has its row of `M`
//! orthogonal to the shared direction, so the shared source cancels there
//! and only lead-specific content survives. Abnormal frames add a small
//! bump to one observed lead; in the raw observed leads it is small next to
//! the shared source, while the evidence lead shows it amplified and
//! uncluttered. Different disease classes bump different observed leads,
//! and all of them reach the evidence lead with the same sign.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::preprocess::{ChannelConfig, FrameDataset, STANDARD_LEADS};
use crate::rng::SeededRng;
use crate::wfdb::DiagnosisLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClass {
    /// A class name from the diagnosis vocabulary.
    pub name: String,
    /// Position in `observed` of the lead carrying this class's bump.
    pub bump_lead: usize,
    /// Fraction of all frames in this class.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_frames: usize,
    pub t: usize,
    pub sampling_rate: f64,
    /// Observed leads, in order.
    pub observed: Vec<String>,
    /// Sinusoids per source (at most 5).
    pub components: usize,
    /// Amplitude of the lead-specific sources relative to the shared one.
    pub independent_scale: f64,
    /// Standard deviation of the Gaussian noise added to missing leads.
    pub noise: f64,
    /// `(12 − K̂) × K̂` mixing matrix, missing leads in standard order. When
    /// absent it is drawn from the seed, with the evidence-lead row set to
    /// `evidence_gain · (1, 1, −2, …)` normalised to zero sum.
    pub mixing: Option<Vec<Vec<f64>>>,
    pub evidence_lead: Option<String>,
    pub evidence_gain: f64,
    /// Give every drawn mixing row equal weights on the leads that carry
    /// class bumps, so each missing lead responds to all classes alike.
    pub tie_bumped_leads: bool,
    pub bump_amplitude: f64,
    /// Bump width in samples (Gaussian standard deviation).
    pub bump_width: f64,
    pub classes: Vec<SyntheticClass>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_frames: 256,
            t: 192,
            sampling_rate: 64.0,
            observed: vec!["II".into(), "III".into(), "aVF".into()],
            components: 3,
            independent_scale: 0.3,
            noise: 0.0,
            mixing: None,
            evidence_lead: Some("V2".into()),
            evidence_gain: 3.0,
            tie_bumped_leads: false,
            bump_amplitude: 0.4,
            bump_width: 3.0,
            classes: vec![SyntheticClass {
                name: "Myocardial Infarction: inferior".into(),
                bump_lead: 0,
                fraction: 0.5,
            }],
            seed: 7,
        }
    }
}

/// Per-frame source amplitudes, largest first.
const AMPLITUDES: [f64; 5] = [1.0, 0.6, 0.4, 0.3, 0.2];
/// Cycles per frame are drawn from `1..=MAX_CYCLES`.
const MAX_CYCLES: usize = 12;

impl SyntheticSpec {
    pub fn observed_config(&self) -> Result<ChannelConfig> {
        ChannelConfig::standard(&self.observed).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    /// Missing leads in standard order.
    pub fn missing_leads(&self) -> Result<Vec<&'static str>> {
        let obs = self.observed_config()?;
        Ok(STANDARD_LEADS.iter().copied().filter(|l| !obs.leads.iter().any(|o| o == l)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_frames == 0 || self.t == 0 {
            return bad("n_frames and t must be positive".into());
        }
        if self.components == 0 || self.components > AMPLITUDES.len() {
            return bad(format!("components must be 1..={}", AMPLITUDES.len()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise level must be finite and non-negative".into());
        }
        if !(self.sampling_rate > 0.0) {
            return bad("sampling rate must be positive".into());
        }
        for v in [self.independent_scale, self.evidence_gain, self.bump_amplitude, self.bump_width] {
            if !v.is_finite() {
                return bad("non-finite parameter".into());
            }
        }
        let k_hat = self.observed_config()?.len();
        let missing = self.missing_leads()?;
        if let Some(m) = &self.mixing {
            if m.len() != missing.len() || m.iter().any(|r| r.len() != k_hat) {
                return bad(format!("mixing must be {}x{k_hat}", missing.len()));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return bad("mixing matrix must be finite".into());
            }
        }
        if let Some(e) = &self.evidence_lead {
            if !missing.iter().any(|l| l.eq_ignore_ascii_case(e)) {
                return bad(format!("evidence lead {e} is not a missing lead"));
            }
            if k_hat < 2 {
                return bad("an evidence lead needs at least two observed leads".into());
            }
        }
        let mut total = 0.0;
        for c in &self.classes {
            if c.bump_lead >= k_hat {
                return bad(format!("class {} bumps observed lead {} of {k_hat}", c.name, c.bump_lead));
            }
            let label = DiagnosisLabel::from_class_name(&c.name);
            if label.is_unknown() || label.is_healthy {
                return bad(format!("{:?} is not a disease class", c.name));
            }
            if !(0.0..=1.0).contains(&c.fraction) {
                return bad("class fractions must lie in [0, 1]".into());
            }
            total += c.fraction;
        }
        if total > 1.0 + 1e-12 {
            return bad("class fractions sum above 1".into());
        }
        Ok(())
    }

    /// Analytic mean power of an observed lead over a bump-free frame.
    pub fn observed_variance(&self) -> f64 {
        let p: f64 = AMPLITUDES[..self.components].iter().map(|a| a * a / 2.0).sum();
        p * (1.0 + self.independent_scale * self.independent_scale)
    }

    /// The mixing matrix used for generation.
    pub fn resolved_mixing(&self) -> Result<Vec<Vec<f64>>> {
        if let Some(m) = &self.mixing {
            return Ok(m.clone());
        }
        let k_hat = self.observed.len();
        let missing = self.missing_leads()?;
        let mut rng = SeededRng::new(self.seed ^ 0x6d69_7869_6e67);
        let mut m: Vec<Vec<f64>> = missing
            .iter()
            .map(|_| (0..k_hat).map(|_| rng.normal() / (k_hat as f64).sqrt()).collect())
            .collect();
        if self.tie_bumped_leads {
            let mut tied: Vec<usize> = self.classes.iter().map(|c| c.bump_lead).collect();
            tied.sort_unstable();
            tied.dedup();
            for row in &mut m {
                let mean = tied.iter().map(|&j| row[j]).sum::<f64>() / tied.len().max(1) as f64;
                tied.iter().for_each(|&j| row[j] = mean);
            }
        }
        if let Some(e) = &self.evidence_lead {
            let row = missing.iter().position(|l| l.eq_ignore_ascii_case(e)).expect("validated");
            let mut v: Vec<f64> = (0..k_hat).map(|i| if i + 1 < k_hat { 1.0 } else { -((k_hat - 1) as f64) }).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x *= self.evidence_gain / norm);
            m[row] = v;
        }
        Ok(m)
    }
}

fn source(rng: &mut SeededRng, t: usize, components: usize) -> Vec<f64> {
    let mut cycles: Vec<usize> = (1..=MAX_CYCLES).collect();
    rng.shuffle(&mut cycles);
    let waves: Vec<(f64, f64, f64)> = (0..components)
        .map(|c| (AMPLITUDES[c], cycles[c] as f64, rng.uniform_range(0.0, 2.0 * PI)))
        .collect();
    (0..t)
        .map(|i| {
            let x = i as f64 / t as f64;
            waves.iter().map(|(a, f, ph)| a * (2.0 * PI * f * x + ph).sin()).sum()
        })
        .collect()
}

/// Generate frames in the standard twelve-lead column order.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<FrameDataset> {
    spec.validate()?;
    let obs = spec.observed_config()?;
    let missing = spec.missing_leads()?;
    let missing_cols: Vec<usize> = missing
        .iter()
        .map(|l| STANDARD_LEADS.iter().position(|s| s == l).expect("standard"))
        .collect();
    let mixing = spec.resolved_mixing()?;
    let k_hat = obs.len();
    let (n, t) = (spec.n_frames, spec.t);

    let mut labels = vec![DiagnosisLabel::healthy(); n];
    let mut bump_of = vec![None; n];
    let mut next = 0;
    for class in &spec.classes {
        let count = ((class.fraction * n as f64).round() as usize).min(n - next);
        for i in next..next + count {
            labels[i] = DiagnosisLabel::from_class_name(&class.name);
            bump_of[i] = Some(class.bump_lead);
        }
        next += count;
    }
    let mut rng = SeededRng::new(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let labels: Vec<DiagnosisLabel> = order.iter().map(|&i| labels[i].clone()).collect();
    let bump_of: Vec<Option<usize>> = order.iter().map(|&i| bump_of[i]).collect();

    let mut data = vec![0.0; n * t * 12];
    for f in 0..n {
        let shared = source(&mut rng, t, spec.components);
        let mut observed: Vec<Vec<f64>> = (0..k_hat)
            .map(|_| {
                let own = source(&mut rng, t, spec.components);
                shared.iter().zip(&own).map(|(s, o)| s + spec.independent_scale * o).collect()
            })
            .collect();
        if let Some(lead) = bump_of[f] {
            let centre = rng.uniform_range(0.2, 0.8) * t as f64;
            for (i, v) in observed[lead].iter_mut().enumerate() {
                let z = (i as f64 - centre) / spec.bump_width;
                *v += spec.bump_amplitude * (-0.5 * z * z).exp();
            }
        }
        let frame = &mut data[f * t * 12..(f + 1) * t * 12];
        for i in 0..t {
            let row = &mut frame[i * 12..(i + 1) * 12];
            for (j, &c) in obs.indices.iter().enumerate() {
                row[c] = observed[j][i];
            }
            for (r, &c) in missing_cols.iter().enumerate() {
                let mut v: f64 = (0..k_hat).map(|j| mixing[r][j] * observed[j][i]).sum();
                if spec.noise > 0.0 {
                    v += spec.noise * rng.normal();
                }
                row[c] = v;
            }
        }
    }
    let ds = FrameDataset {
        data,
        n,
        t,
        k: 12,
        labels,
        channel_names: STANDARD_LEADS.iter().map(|s| s.to_string()).collect(),
        sampling_rate: spec.sampling_rate,
        record_ids: (0..n).collect(),
        record_names: (0..n).map(|i| format!("synthetic{i:05}")).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_missing_leads_are_exact_linear_images() {
        let spec = SyntheticSpec { n_frames: 8, ..SyntheticSpec::default() };
        let ds = make_synthetic_dataset(&spec).unwrap();
        let m = spec.resolved_mixing().unwrap();
        let obs = spec.observed_config().unwrap();
        let missing = spec.missing_leads().unwrap();
        for row in ds.data.chunks(12) {
            for (r, lead) in missing.iter().enumerate() {
                let c = STANDARD_LEADS.iter().position(|s| s == lead).unwrap();
                let v: f64 = obs.indices.iter().enumerate().map(|(j, &o)| m[r][j] * row[o]).sum();
                assert_eq!(row[c], v);
            }
        }
    }

    #[test]
    fn balanced_counts_are_exact() {
        let spec = SyntheticSpec { n_frames: 512, ..SyntheticSpec::default() };
        let ds = make_synthetic_dataset(&spec).unwrap();
        let healthy = ds.labels.iter().filter(|l| l.is_healthy).count();
        assert_eq!(healthy, 256);
    }

    #[test]
    fn all_leads_observed_is_allowed() {
        let spec = SyntheticSpec {
            n_frames: 4,
            observed: STANDARD_LEADS.iter().map(|s| s.to_string()).collect(),
            evidence_lead: None,
            ..SyntheticSpec::default()
        };
        assert!(spec.missing_leads().unwrap().is_empty());
        assert_eq!(make_synthetic_dataset(&spec).unwrap().k, 12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let cases = [
            SyntheticSpec { noise: -1.0, ..SyntheticSpec::default() },
            SyntheticSpec { mixing: Some(vec![vec![f64::NAN; 3]; 9]), ..SyntheticSpec::default() },
            SyntheticSpec { mixing: Some(vec![vec![0.0; 2]; 9]), ..SyntheticSpec::default() },
            SyntheticSpec { components: 6, ..SyntheticSpec::default() },
            SyntheticSpec { evidence_lead: Some("II".into()), ..SyntheticSpec::default() },
        ];
        for spec in cases {
            assert!(matches!(make_synthetic_dataset(&spec), Err(Error::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn evidence_row_cancels_shared_direction() {
        let m = SyntheticSpec::default().resolved_mixing().unwrap();
        let missing = SyntheticSpec::default().missing_leads().unwrap();
        let row = &m[missing.iter().position(|l| *l == "V2").unwrap()];
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
        assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 3.0).abs() < 1e-12);
    }
}
