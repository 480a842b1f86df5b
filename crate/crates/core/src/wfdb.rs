//! PTB-style WFDB records: text header plus a format-16 signal file.
//!
//! Header grammar (one record line, one line per signal, `#` comments):
//!
//! ```text
//! s0010_re 15 1000 38400
//! s0010_re.dat 16 2000(0)/mV 16 0 -489 -8337 0 i
//! # Reason for admission: Myocardial infarction
//! ```
//!
//! Signal descriptor fields are `file format [gain[(baseline)][/units]
//! [adc_res [adc_zero [init_value [checksum [block_size [description]]]]]]]`.
//! When the baseline is not given in parentheses it equals `adc_zero`.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-signal descriptor from a header.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    pub format_code: u32,
    /// ADC units per physical unit (mV).
    pub gain: f64,
    /// ADC value corresponding to 0 mV.
    pub baseline: i32,
    pub units: String,
    pub adc_res: u32,
    pub adc_zero: i32,
    pub init_value: i32,
    pub checksum: i32,
    pub block_size: u32,
    pub lead_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub record_name: String,
    pub n_signals: usize,
    pub sampling_rate: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
    /// Comment lines without the leading `#`, verbatim and in order.
    pub comments: Vec<String>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn leading_number(token: &str) -> &str {
    let end = token
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
        .unwrap_or(token.len());
    &token[..end]
}

fn parse_num<T: std::str::FromStr>(token: &str, what: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| malformed(format!("non-numeric {what}: {token:?}")))
}

pub fn parse_header(text: &str) -> Result<RecordHeader> {
    let mut comments = Vec::new();
    let mut lines = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(comment) = trimmed.strip_prefix('#') {
            comments.push(comment.to_string());
        } else if !trimmed.trim().is_empty() {
            lines.push(trimmed.trim_end());
        }
    }
    let (record_line, signal_lines) = lines.split_first().ok_or_else(|| malformed("no record line"))?;

    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(malformed(format!("record line needs name, signal count, rate and length; got {record_line:?}")));
    }
    let record_name = fields[0].to_string();
    if record_name.contains('/') {
        return Err(malformed("multi-segment records are not supported"));
    }
    let n_signals: usize = parse_num(fields[1], "signal count")?;
    let sampling_rate: f64 = parse_num(leading_number(fields[2]), "sampling rate")?;
    let n_samples: usize = parse_num(fields[3], "sample count")?;
    if n_signals == 0 {
        return Err(malformed("record declares no signals"));
    }
    if !(sampling_rate > 0.0 && sampling_rate.is_finite()) {
        return Err(malformed(format!("sampling rate must be positive, got {sampling_rate}")));
    }
    if signal_lines.len() != n_signals {
        return Err(malformed(format!(
            "{n_signals} signals declared but {} descriptor lines found",
            signal_lines.len()
        )));
    }

    let signals = signal_lines
        .iter()
        .map(|line| parse_signal_line(line))
        .collect::<Result<Vec<_>>>()?;
    for (i, s) in signals.iter().enumerate() {
        if signals[..i].iter().any(|o| o.lead_name == s.lead_name) {
            return Err(malformed(format!("duplicate lead name {:?}", s.lead_name)));
        }
    }
    Ok(RecordHeader {
        record_name,
        n_signals,
        sampling_rate,
        n_samples,
        signals,
        comments,
    })
}

fn parse_signal_line(line: &str) -> Result<SignalSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(malformed(format!("signal line needs file name and format: {line:?}")));
    }
    let fmt_token = fields[1];
    let fmt_digits: String = fmt_token.chars().take_while(char::is_ascii_digit).collect();
    let format_code: u32 = parse_num(&fmt_digits, "format")?;
    if format_code != 16 || fmt_token[fmt_digits.len()..].starts_with('x') {
        return Err(Error::UnsupportedFormat(format_code));
    }

    let mut gain: f64 = 200.0;
    let mut baseline = None;
    let mut units = "mV".to_string();
    if let Some(tok) = fields.get(2) {
        let (value_part, unit_part) = match tok.split_once('/') {
            Some((v, u)) => (v, Some(u)),
            None => (*tok, None),
        };
        let (gain_part, base_part) = match value_part.split_once('(') {
            Some((g, b)) => (g, Some(b.strip_suffix(')').ok_or_else(|| malformed(format!("bad gain field {tok:?}")))?)),
            None => (value_part, None),
        };
        gain = parse_num::<f64>(gain_part, "gain")?;
        if !gain.is_finite() {
            return Err(malformed(format!("non-finite gain {tok:?}")));
        }
        baseline = base_part.map(|b| parse_num(b, "baseline")).transpose()?;
        if let Some(u) = unit_part {
            units = u.to_string();
        }
    }
    let int_field = |i: usize, what: &str, default: i64| -> Result<i64> {
        fields.get(i).map_or(Ok(default), |t| parse_num(t, what))
    };
    let adc_res = int_field(3, "adc resolution", 0)? as u32;
    let adc_zero = int_field(4, "adc zero", 0)? as i32;
    let init_value = int_field(5, "initial value", 0)? as i32;
    let checksum = int_field(6, "checksum", 0)? as i32;
    let block_size = int_field(7, "block size", 0)? as u32;
    let lead_name = if fields.len() > 8 { fields[8..].join(" ") } else { String::new() };
    Ok(SignalSpec {
        file_name: fields[0].to_string(),
        format_code,
        gain,
        baseline: baseline.unwrap_or(adc_zero),
        units,
        adc_res,
        adc_zero,
        init_value,
        checksum,
        block_size,
        lead_name,
    })
}

impl RecordHeader {
    /// Serialise with every optional field written explicitly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.record_name, self.n_signals, self.sampling_rate, self.n_samples
        );
        for s in &self.signals {
            let _ = write!(
                out,
                "{} {} {}({})/{} {} {} {} {} {}",
                s.file_name, s.format_code, s.gain, s.baseline, s.units, s.adc_res, s.adc_zero, s.init_value, s.checksum, s.block_size
            );
            if !s.lead_name.is_empty() {
                let _ = write!(out, " {}", s.lead_name);
            }
            out.push('\n');
        }
        for c in &self.comments {
            let _ = writeln!(out, "#{c}");
        }
        out
    }

    pub fn lead_names(&self) -> Vec<String> {
        self.signals.iter().map(|s| s.lead_name.clone()).collect()
    }
}

/// Decode the interleaved little-endian 16-bit samples of a format-16
/// payload into raw ADC integers, `n_samples × n_signals` row-major.
pub fn decode_adc(header: &RecordHeader, payload: &[u8]) -> Result<Vec<i16>> {
    if let Some(s) = header.signals.iter().find(|s| s.format_code != 16) {
        return Err(Error::UnsupportedFormat(s.format_code));
    }
    let expected = 2 * header.n_samples * header.n_signals;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok(payload[..expected]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect())
}

/// Raw multi-channel signal with its header and (once extracted) label.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub header: RecordHeader,
    /// `n_samples × n_signals`, physical units (mV).
    pub signal: Tensor,
    pub label: Option<DiagnosisLabel>,
}

pub fn read_signals(header: &RecordHeader, payload: &[u8]) -> Result<RawRecord> {
    if let Some(i) = header.signals.iter().position(|s| s.gain == 0.0) {
        return Err(Error::ZeroGain(i));
    }
    let adc = decode_adc(header, payload)?;
    let k = header.n_signals;
    let data = adc
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = &header.signals[i % k];
            (f64::from(v) - f64::from(s.baseline)) / s.gain
        })
        .collect();
    Ok(RawRecord {
        header: header.clone(),
        signal: Tensor::new(vec![header.n_samples, k], data)?,
        label: None,
    })
}

/// Read `<stem>.hea` and the signal file it names, and attach the label.
pub fn load_record(header_path: &Path) -> Result<RawRecord> {
    let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = parse_header(&text)?;
    let file = &header.signals[0].file_name;
    if header.signals.iter().any(|s| &s.file_name != file) {
        return Err(malformed("signals spread over several files are not supported"));
    }
    let dat_path = header_path.with_file_name(file);
    let payload = std::fs::read(&dat_path).map_err(|e| Error::io(&dat_path, e))?;
    let mut record = read_signals(&header, &payload)?;
    record.label = Some(extract_label(&header));
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiseaseFamily {
    MyocardialInfarction,
    BundleBranchBlock,
    Cardiomyopathy,
    Dysrhythmia,
    Valvular,
    Healthy,
}

/// The closed class vocabulary, in table order, with the frame counts of
/// the full 18,040-frame corpus.
///
/// Two rows print as "infero-lateral" in the source table. Their header
/// texts differ ("infero-lateral" and the truncated "infero-latera"), so
/// each row keeps its verbatim header spelling as its class name.
pub const CLASS_TABLE: [(&str, DiseaseFamily, usize); 19] = [
    ("Myocardial Infarction: inferior", DiseaseFamily::MyocardialInfarction, 3222),
    ("Myocardial Infarction: antero-septal", DiseaseFamily::MyocardialInfarction, 2855),
    ("Myocardial Infarction: infero-lateral", DiseaseFamily::MyocardialInfarction, 1933),
    ("Myocardial Infarction: anterior", DiseaseFamily::MyocardialInfarction, 1685),
    ("Myocardial Infarction: antero-lateral", DiseaseFamily::MyocardialInfarction, 1603),
    ("Myocardial Infarction: no", DiseaseFamily::MyocardialInfarction, 628),
    ("Myocardial Infarction: infero-postero-lateral", DiseaseFamily::MyocardialInfarction, 573),
    ("Myocardial Infarction: postero-lateral", DiseaseFamily::MyocardialInfarction, 185),
    ("Myocardial Infarction: posterior", DiseaseFamily::MyocardialInfarction, 148),
    ("Myocardial Infarction: infero-poster-lateral", DiseaseFamily::MyocardialInfarction, 111),
    ("Myocardial Infarction: lateral", DiseaseFamily::MyocardialInfarction, 111),
    ("Myocardial Infarction: infero-latera", DiseaseFamily::MyocardialInfarction, 86),
    ("Myocardial Infarction: antero-septo-lateral", DiseaseFamily::MyocardialInfarction, 74),
    ("Myocardial Infarction: infero-posterior", DiseaseFamily::MyocardialInfarction, 12),
    ("Bundle Branch Block", DiseaseFamily::BundleBranchBlock, 623),
    ("Cardiomyopathy", DiseaseFamily::Cardiomyopathy, 603),
    ("Dysrhythmia", DiseaseFamily::Dysrhythmia, 411),
    ("Valvular Heart Disease", DiseaseFamily::Valvular, 122),
    ("Healthy Control", DiseaseFamily::Healthy, 3055),
];

pub const HEALTHY: &str = "Healthy Control";
pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiagnosisLabel {
    pub class_name: String,
    pub is_healthy: bool,
    /// `None` for unknown diagnoses, which are excluded from datasets.
    pub disease_family: Option<DiseaseFamily>,
}

impl DiagnosisLabel {
    /// Label for a class in [`CLASS_TABLE`]; any other name yields the
    /// unknown label.
    pub fn from_class_name(name: &str) -> Self {
        match CLASS_TABLE.iter().find(|(n, _, _)| *n == name) {
            Some((n, family, _)) => Self {
                class_name: (*n).to_string(),
                is_healthy: *family == DiseaseFamily::Healthy,
                disease_family: Some(*family),
            },
            None => Self::unknown(),
        }
    }

    pub fn unknown() -> Self {
        Self {
            class_name: UNKNOWN.to_string(),
            is_healthy: false,
            disease_family: None,
        }
    }

    pub fn healthy() -> Self {
        Self::from_class_name(HEALTHY)
    }

    pub fn is_unknown(&self) -> bool {
        self.disease_family.is_none()
    }

    /// Position in [`CLASS_TABLE`].
    pub fn table_index(&self) -> Option<usize> {
        CLASS_TABLE.iter().position(|(n, _, _)| *n == self.class_name)
    }
}

fn comment_value<'a>(comments: &'a [String], key: &str) -> Option<&'a str> {
    comments.iter().find_map(|c| {
        let (k, v) = c.split_once(':')?;
        k.trim().eq_ignore_ascii_case(key).then_some(v.trim())
    })
}

/// Map a header's diagnosis comments onto the class vocabulary.
pub fn extract_label(header: &RecordHeader) -> DiagnosisLabel {
    let Some(reason) = comment_value(&header.comments, "Reason for admission") else {
        return DiagnosisLabel::unknown();
    };
    let reason = reason.to_ascii_lowercase();
    let name = match reason.as_str() {
        "healthy control" => HEALTHY.to_string(),
        "myocardial infarction" => {
            let Some(loc) = comment_value(&header.comments, "Acute infarction (localization)") else {
                return DiagnosisLabel::unknown();
            };
            format!("Myocardial Infarction: {}", loc.to_ascii_lowercase())
        }
        "bundle branch block" => "Bundle Branch Block".to_string(),
        "cardiomyopathy" => "Cardiomyopathy".to_string(),
        "dysrhythmia" => "Dysrhythmia".to_string(),
        "valvular heart disease" => "Valvular Heart Disease".to_string(),
        _ => return DiagnosisLabel::unknown(),
    };
    DiagnosisLabel::from_class_name(&name)
}
