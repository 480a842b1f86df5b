//! Raw records to fixed-length, per-frame z-scored frames at 64 Hz.

use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::wfdb::{DiagnosisLabel, RawRecord};

/// The twelve standard leads, in dataset column order.
pub const STANDARD_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Canonical spelling of a standard lead name, matched case-insensitively.
pub fn canonical_lead(name: &str) -> Option<&'static str> {
    STANDARD_LEADS.iter().copied().find(|l| l.eq_ignore_ascii_case(name.trim()))
}

/// Ordered lead subset resolved against a dataset's columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    pub leads: Vec<String>,
    pub indices: Vec<usize>,
}

impl ChannelConfig {
    /// Resolve `leads` against `channel_names`.
    pub fn resolve<S: AsRef<str>>(leads: &[S], channel_names: &[String]) -> Result<Self> {
        if leads.is_empty() || leads.len() > 12 {
            return Err(Error::InvalidChannelConfig(format!("need 1 to 12 leads, got {}", leads.len())));
        }
        let mut canon = Vec::with_capacity(leads.len());
        for lead in leads {
            let lead = lead.as_ref();
            let c = canonical_lead(lead).ok_or_else(|| Error::UnknownLead(lead.to_string()))?;
            if canon.contains(&c) {
                return Err(Error::InvalidChannelConfig(format!("duplicate lead {c}")));
            }
            canon.push(c);
        }
        let indices = canon
            .iter()
            .map(|c| {
                channel_names
                    .iter()
                    .position(|n| n.eq_ignore_ascii_case(c))
                    .ok_or_else(|| Error::UnknownLead((*c).to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            leads: canon.into_iter().map(String::from).collect(),
            indices,
        })
    }

    /// Resolve against the standard 12-lead column order.
    pub fn standard<S: AsRef<str>>(leads: &[S]) -> Result<Self> {
        let names: Vec<String> = STANDARD_LEADS.iter().map(|s| s.to_string()).collect();
        Self::resolve(leads, &names)
    }

    /// Parse a comma-separated lead list such as `II,III,aVF`.
    pub fn parse_list(list: &str) -> Vec<String> {
        list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    }

    pub fn len(&self) -> usize {
        self.leads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leads.is_empty()
    }
}

/// `N × T × K` frames (row-major: frame, time, channel) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset {
    pub data: Vec<f64>,
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub labels: Vec<DiagnosisLabel>,
    pub channel_names: Vec<String>,
    pub sampling_rate: f64,
    /// Source record of each frame, indexing `record_names`.
    pub record_ids: Vec<usize>,
    pub record_names: Vec<String>,
}

impl FrameDataset {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.data.len() != self.n * self.t * self.k {
            return bad(format!("data length {} is not {}x{}x{}", self.data.len(), self.n, self.t, self.k));
        }
        if self.labels.len() != self.n || self.record_ids.len() != self.n {
            return bad("label or record list length differs from frame count".into());
        }
        if self.channel_names.len() != self.k {
            return bad("channel name count differs from K".into());
        }
        for (i, c) in self.channel_names.iter().enumerate() {
            if self.channel_names[..i].contains(c) {
                return bad(format!("duplicate channel {c}"));
            }
        }
        if self.record_ids.iter().any(|&r| r >= self.record_names.len()) {
            return bad("record id out of range".into());
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return bad("non-finite sample".into());
        }
        Ok(())
    }

    pub fn frame_size(&self) -> usize {
        self.t * self.k
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let s = self.frame_size();
        &self.data[i * s..(i + 1) * s]
    }

    /// Frames `indices` as a `[B, T, K]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.frame_size());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Tensor::new(vec![indices.len(), self.t, self.k], data).expect("batch shape")
    }

    /// Row subset, preserving order of `indices`.
    pub fn subset(&self, indices: &[usize]) -> FrameDataset {
        FrameDataset {
            data: self.batch(indices).into_data(),
            n: indices.len(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            record_ids: indices.iter().map(|&i| self.record_ids[i]).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> FrameDataset {
        FrameDataset {
            data: Vec::new(),
            n: 0,
            t: self.t,
            k: self.k,
            labels: Vec::new(),
            channel_names: self.channel_names.clone(),
            sampling_rate: self.sampling_rate,
            record_ids: Vec::new(),
            record_names: self.record_names.clone(),
        }
    }

    /// Binary targets: 0 healthy, 1 abnormal.
    pub fn binary_targets(&self) -> Vec<usize> {
        self.labels.iter().map(|l| usize::from(!l.is_healthy)).collect()
    }
}

/// Keep the configured leads, in config order.
pub fn select_channels(dataset: &FrameDataset, config: &ChannelConfig) -> Result<FrameDataset> {
    let resolved = ChannelConfig::resolve(&config.leads, &dataset.channel_names)?;
    let k_out = resolved.indices.len();
    let mut data = Vec::with_capacity(dataset.n * dataset.t * k_out);
    for row in dataset.data.chunks_exact(dataset.k) {
        data.extend(resolved.indices.iter().map(|&c| row[c]));
    }
    Ok(FrameDataset {
        data,
        n: dataset.n,
        k: k_out,
        labels: dataset.labels.clone(),
        channel_names: resolved.indices.iter().map(|&c| dataset.channel_names[c].clone()).collect(),
        record_ids: dataset.record_ids.clone(),
        ..dataset.empty_like()
    })
}

/// Select columns of a `[B, T, K]` tensor.
pub fn select_columns(x: &Tensor, indices: &[usize]) -> Tensor {
    let k = x.last_dim();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank") = indices.len();
    let data = x.data().chunks_exact(k).flat_map(|row| indices.iter().map(move |&c| row[c])).collect();
    Tensor::new(shape, data).expect("column selection")
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const STOPBAND_DB: f64 = 70.0;

/// Kaiser-windowed sinc low-pass for a polyphase resampler running at
/// `rate`, cutoff `cutoff` Hz, transition band `width` Hz. Odd length.
fn lowpass_taps(rate: f64, cutoff: f64, width: f64) -> Vec<f64> {
    let beta = 0.1102 * (STOPBAND_DB - 8.7);
    let n = ((STOPBAND_DB - 8.0) / (2.285 * 2.0 * PI * width / rate)).ceil() as usize;
    let half = n / 2 + 1;
    let len = 2 * half + 1;
    let fc = cutoff / rate;
    let i0_beta = bessel_i0(beta);
    (0..len)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * m).sin() / (PI * m) };
            let r = m / half as f64;
            sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta
        })
        .collect()
}

/// Rational resampling of a `T × K` signal from `from` Hz to `to` Hz.
///
/// Upsample by `L`, low-pass at `0.45 · to`, decimate by `M` (`to/from =
/// L/M` in lowest terms). Each polyphase branch is scaled to unit DC gain.
/// Output sample `j` sits at time `j / to`.
pub fn downsample(signal: &Tensor, from: f64, to: f64) -> Result<Tensor> {
    if signal.rank() != 2 {
        return Err(Error::shape("downsample", format!("expected T×K, got {:?}", signal.shape())));
    }
    let (t_raw, k) = (signal.shape()[0], signal.shape()[1]);
    if t_raw == 0 || k == 0 {
        return Err(Error::EmptySignal);
    }
    if !(from > to && to > 0.0) || from.fract() != 0.0 || to.fract() != 0.0 {
        return Err(Error::InvalidConfig(format!("cannot resample {from} Hz to {to} Hz")));
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize;
    let down = (from as u64 / g) as usize;
    let rate = from * up as f64;
    let mut taps = lowpass_taps(rate, 0.45 * to, 2.0 * (0.5 - 0.45) * to);
    for phase in 0..up {
        let s: f64 = taps.iter().skip(phase).step_by(up).sum();
        taps.iter_mut().skip(phase).step_by(up).for_each(|h| *h /= s);
    }
    let delay = taps.len() / 2;

    let t_out = t_raw * up / down;
    let x = signal.data();
    let mut out = vec![0.0; t_out * k];
    for j in 0..t_out {
        // position on the upsampled grid, shifted by the filter delay
        let n = j * down + delay;
        let first_tap = n % up;
        let row = &mut out[j * k..(j + 1) * k];
        for tap in (first_tap..taps.len().min(n + 1)).step_by(up) {
            let idx = n - tap;
            let src = idx / up;
            if src >= t_raw {
                continue;
            }
            let h = taps[tap];
            for (o, v) in row.iter_mut().zip(&x[src * k..(src + 1) * k]) {
                *o += h * v;
            }
        }
    }
    Tensor::new(vec![t_out, k], out)
}

/// Contiguous windows of `frame_len` rows starting every `stride` rows.
pub fn frame(signal: &Tensor, frame_len: usize, stride: usize) -> Vec<Tensor> {
    let (t, k) = (signal.shape()[0], signal.shape()[1]);
    if frame_len == 0 || stride == 0 || t < frame_len {
        return Vec::new();
    }
    (0..=(t - frame_len) / stride)
        .map(|i| {
            let s = i * stride * k;
            Tensor::new(vec![frame_len, k], signal.data()[s..s + frame_len * k].to_vec()).expect("frame shape")
        })
        .collect()
}

const MIN_STD: f64 = 1e-8;

/// Per-channel z-score with population standard deviation; near-constant
/// channels become zero.
pub fn normalize(frame: &Tensor) -> Tensor {
    let (t, k) = (frame.shape()[0], frame.shape()[1]);
    let x = frame.data();
    let mut out = vec![0.0; t * k];
    for c in 0..k {
        let mean = (0..t).map(|i| x[i * k + c]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x[i * k + c] - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std < MIN_STD {
            continue;
        }
        for i in 0..t {
            out[i * k + c] = (x[i * k + c] - mean) / std;
        }
    }
    Tensor::new(vec![t, k], out).expect("normalize shape")
}

/// Subtract a centred moving median of odd width `window` from each channel.
pub fn remove_baseline(signal: &Tensor, window: usize) -> Tensor {
    let (t, k) = (signal.shape()[0], signal.shape()[1]);
    let half = window / 2;
    let x = signal.data();
    let mut out = x.to_vec();
    let mut buf = Vec::with_capacity(window);
    for c in 0..k {
        for i in 0..t {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(t);
            buf.clear();
            buf.extend((lo..hi).map(|j| x[j * k + c]));
            buf.sort_by(f64::total_cmp);
            out[i * k + c] -= buf[buf.len() / 2];
        }
    }
    Tensor::new(vec![t, k], out).expect("baseline shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub target_rate: f64,
    pub frame_len: usize,
    pub stride: usize,
    pub remove_baseline: bool,
    /// Moving-median width in seconds.
    pub baseline_window: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate: 64.0,
            frame_len: 192,
            stride: 192,
            remove_baseline: false,
            baseline_window: 0.6,
        }
    }
}

/// A record that did not make it into the dataset, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub record: String,
    pub reason: String,
}

/// Reorder a record's columns to the standard 12 leads, dropping any
/// others (the Frank leads).
fn standard_columns(record: &RawRecord) -> std::result::Result<Tensor, String> {
    let names = record.header.lead_names();
    let mut cols = Vec::with_capacity(12);
    for lead in STANDARD_LEADS {
        let c = names
            .iter()
            .position(|n| canonical_lead(n) == Some(lead))
            .ok_or_else(|| format!("missing lead {lead}"))?;
        cols.push(c);
    }
    let k_raw = record.signal.shape()[1];
    let t = record.signal.shape()[0];
    let data = record
        .signal
        .data()
        .chunks_exact(k_raw)
        .flat_map(|row| cols.iter().map(move |&c| row[c]))
        .collect();
    Tensor::new(vec![t, 12], data).map_err(|e| e.to_string())
}

/// Downsample, optionally de-trend, frame and normalise every labelled
/// record. Records with unknown labels or missing leads are skipped.
pub fn build_dataset(records: &[RawRecord], cfg: &PreprocessConfig) -> Result<(FrameDataset, Vec<Skipped>)> {
    let mut ds = FrameDataset {
        data: Vec::new(),
        n: 0,
        t: cfg.frame_len,
        k: 12,
        labels: Vec::new(),
        channel_names: STANDARD_LEADS.iter().map(|s| s.to_string()).collect(),
        sampling_rate: cfg.target_rate,
        record_ids: Vec::new(),
        record_names: Vec::new(),
    };
    let mut skipped = Vec::new();
    for record in records {
        let name = record.header.record_name.clone();
        let label = match &record.label {
            Some(l) if !l.is_unknown() => l.clone(),
            _ => {
                skipped.push(Skipped { record: name, reason: "diagnosis outside the class vocabulary".into() });
                continue;
            }
        };
        let signal = match standard_columns(record) {
            Ok(s) => s,
            Err(reason) => {
                skipped.push(Skipped { record: name, reason });
                continue;
            }
        };
        let mut signal = downsample(&signal, record.header.sampling_rate, cfg.target_rate)?;
        if cfg.remove_baseline {
            let w = ((cfg.baseline_window * cfg.target_rate).round() as usize) | 1;
            signal = remove_baseline(&signal, w);
        }
        let frames = frame(&signal, cfg.frame_len, cfg.stride);
        if frames.is_empty() {
            skipped.push(Skipped { record: name, reason: "shorter than one frame".into() });
            continue;
        }
        let id = ds.record_names.len();
        ds.record_names.push(name);
        for f in frames {
            ds.data.extend_from_slice(normalize(&f).data());
            ds.labels.push(label.clone());
            ds.record_ids.push(id);
            ds.n += 1;
        }
    }
    ds.validate()?;
    Ok((ds, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(signal: &Tensor, c: usize) -> Vec<f64> {
        let k = signal.shape()[1];
        signal.data().iter().skip(c).step_by(k).copied().collect()
    }

    fn sine(freq: f64, rate: f64, seconds: f64) -> Tensor {
        let n = (rate * seconds) as usize;
        let data = (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect();
        Tensor::new(vec![n, 1], data).unwrap()
    }

    #[test]
    fn constant_passes_unchanged() {
        let x = Tensor::ones(&[10_000, 2]);
        let y = downsample(&x, 1000.0, 64.0).unwrap();
        assert_eq!(y.shape(), &[640, 2]);
        for v in &column(&y, 1)[60..580] {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn passband_sinusoid_keeps_amplitude_and_phase() {
        let y = downsample(&sine(5.0, 1000.0, 10.0), 1000.0, 64.0).unwrap();
        assert_eq!(y.shape()[0], 640);
        let out = column(&y, 0);
        for (j, v) in out.iter().enumerate().take(560).skip(80) {
            let expect = (2.0 * PI * 5.0 * j as f64 / 64.0).sin();
            assert!((v - expect).abs() < 0.02, "sample {j}: {v} vs {expect}");
        }
    }

    #[test]
    fn stopband_sinusoid_is_attenuated() {
        let y = downsample(&sine(450.0, 1000.0, 10.0), 1000.0, 64.0).unwrap();
        let out = &column(&y, 0)[80..560];
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
        assert!(rms <= 0.01, "rms {rms}");
    }

    #[test]
    fn length_is_floor_of_ratio() {
        for t in [1usize, 15, 16, 17, 1000, 1001] {
            let y = downsample(&Tensor::zeros(&[t, 1]), 1000.0, 64.0).unwrap();
            assert_eq!(y.shape()[0], t * 64 / 1000);
        }
        assert!(matches!(downsample(&Tensor::zeros(&[0, 1]), 1000.0, 64.0), Err(Error::EmptySignal)));
    }

    #[test]
    fn framing_counts() {
        let s = |t| Tensor::zeros(&[t, 2]);
        assert_eq!(frame(&s(384), 192, 192).len(), 2);
        assert_eq!(frame(&s(191), 192, 192).len(), 0);
        assert_eq!(frame(&s(384), 192, 96).len(), 3);
    }

    #[test]
    fn normalisation_cases() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 5.0, 2.0, 5.0]).unwrap();
        let y = normalize(&x);
        assert_eq!(y.data(), &[-1.0, 0.0, 1.0, 0.0]);
        let z = normalize(&y);
        assert!(z.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn channel_resolution() {
        let c = ChannelConfig::standard(&["II", "iii", "AVF"]).unwrap();
        assert_eq!(c.leads, vec!["II", "III", "aVF"]);
        assert_eq!(c.indices, vec![1, 2, 5]);
        assert!(matches!(ChannelConfig::standard(&["V9"]), Err(Error::UnknownLead(_))));
        assert!(ChannelConfig::standard(&["II", "II"]).is_err());
        assert!(ChannelConfig::standard::<&str>(&[]).is_err());
    }

    #[test]
    fn moving_median_removes_offset() {
        let x = Tensor::full(&[50, 1], 3.0);
        assert!(remove_baseline(&x, 9).data().iter().all(|v| *v == 0.0));
    }
}
