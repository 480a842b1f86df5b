use std::path::PathBuf;

use limbchan_core::wfdb::{load_record, parse_header};
use limbchan_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/wfdb").join(name)
}

#[test]
fn record_loads_with_label_and_physical_units() {
    let r = load_record(&fixture("s0001_re.hea")).unwrap();
    assert_eq!(r.header.record_name, "s0001_re");
    assert_eq!(r.header.lead_names(), ["ii", "iii", "avf"]);
    assert_eq!(r.signal.shape(), &[5, 3]);
    assert_eq!(r.signal.data()[0], -12.0 / 2000.0);
    assert_eq!(r.signal.data()[1], (7.0 + 5.0) / 1000.0);
    assert_eq!(r.signal.data()[3], 32767.0 / 2000.0);
    assert_eq!(r.signal.data()[4], (-32768.0 + 5.0) / 1000.0);
    let label = r.label.unwrap();
    assert_eq!(label.class_name, "Myocardial Infarction: inferior");
    assert!(!label.is_healthy);
}

#[test]
fn header_file_round_trips() {
    let text = std::fs::read_to_string(fixture("s0001_re.hea")).unwrap();
    let h = parse_header(&text).unwrap();
    let written = h.to_text();
    assert_eq!(parse_header(&written).unwrap(), h);
    assert_eq!(parse_header(&written).unwrap().to_text(), written);
    assert!(written.contains("500(0)/mV"), "implicit baseline is written out");
    assert_eq!(h.comments.len(), 4);
}

#[test]
fn corrupt_fixtures_fail_with_their_own_errors() {
    assert!(matches!(
        load_record(&fixture("truncated.hea")),
        Err(Error::TruncatedPayload { expected: 30, found: 25 })
    ));
    assert!(matches!(load_record(&fixture("format212.hea")), Err(Error::UnsupportedFormat(212))));
    assert!(matches!(load_record(&fixture("zerogain.hea")), Err(Error::ZeroGain(2))));
    assert!(matches!(load_record(&fixture("nodata.hea")), Err(Error::Io { .. })));
    assert!(matches!(load_record(&fixture("absent.hea")), Err(Error::Io { .. })));
}
