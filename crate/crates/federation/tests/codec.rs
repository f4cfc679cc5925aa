use std::collections::BTreeSet;

use dims_core::{NodeId, Timestamp};
use dims_federation::stanza::{check_line, Verdict};
use dims_federation::{decode, encode, CodecError, Stanza, StanzaKind};
use proptest::prelude::*;
use serde_json::{Map, Value};

const GOLDEN: &str = include_str!("fixtures/stanzas.ndjson");
const MALFORMED: &str = include_str!("fixtures/malformed.ndjson");

#[test]
fn golden_lines_are_canonical() {
    let mut kinds = BTreeSet::new();
    for (i, line) in GOLDEN.lines().enumerate() {
        match check_line(line.as_bytes()) {
            Verdict::Canonical(s) => {
                kinds.insert(s.kind().unwrap_or_else(|| panic!("line {}: unknown type", i + 1)));
                assert_eq!(encode(&s), format!("{line}\n").into_bytes());
                assert_eq!(decode(&encode(&s)).unwrap(), s);
            }
            other => panic!("line {}: {other:?}", i + 1),
        }
    }
    assert!(GOLDEN.lines().count() >= 14);
    let all: BTreeSet<_> = StanzaKind::ALL.into_iter().collect();
    assert_eq!(kinds, all, "every stanza type has a fixture");
}

#[test]
fn malformed_lines_are_rejected() {
    let lines: Vec<&str> = MALFORMED.lines().collect();
    assert!(lines.len() >= 10);
    for (i, line) in lines.iter().enumerate() {
        match decode(line.as_bytes()) {
            Err(CodecError::Malformed(_)) => {}
            other => panic!("line {}: expected malformed, got {other:?}", i + 1),
        }
    }
    assert!(matches!(decode(b""), Err(CodecError::Malformed(_))));
}

#[test]
fn version_two_is_unsupported() {
    let line = GOLDEN.lines().next().unwrap().replacen("\"v\":1", "\"v\":2", 1);
    assert_eq!(
        decode(line.as_bytes()),
        Err(CodecError::UnsupportedVersion("2".into()))
    );
}

#[test]
fn reordered_fields_decode_but_are_not_canonical() {
    let line = r#"{"type":"ping","v":1,"id":"1","from":"a@x","to":"b@x","ts":"2025-01-01T00:00:00.000Z","payload":{}}"#;
    assert!(matches!(check_line(line.as_bytes()), Verdict::NonCanonical { .. }));
}

fn node_id() -> impl Strategy<Value = NodeId> {
    ("[a-z0-9._-]{1,8}", "[a-z0-9.-]{1,8}").prop_map(|(n, d)| NodeId::parse(&format!("{n}@{d}")).unwrap())
}

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        ".{0,12}".prop_map(Value::String),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map("[a-z_]{1,6}", inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn stanza() -> impl Strategy<Value = Stanza> {
    (
        prop::sample::select(StanzaKind::ALL.to_vec()),
        "[a-z0-9-]{1,12}",
        node_id(),
        node_id(),
        0i64..4_102_444_800_000,
        prop::collection::btree_map("[a-z_]{1,8}", json_value(), 0..5),
    )
        .prop_map(|(kind, id, from, to, ms, payload)| {
            let payload: Map<String, Value> = payload.into_iter().collect();
            Stanza::new(kind, id, from, to, Timestamp::from_millis(ms), payload)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip(s in stanza()) {
        let line = encode(&s);
        prop_assert_eq!(line.last(), Some(&b'\n'));
        prop_assert_eq!(line.iter().filter(|b| **b == b'\n').count(), 1);
        let back = decode(&line).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(encode(&back), line);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }
}
