use proptest::prelude::*;

use super::dynamic::{self, DynMessage, DynValue, EncodeError};
use super::*;

crate::message! {
    pub struct Record {
        1 => pub k: String [required],
        2 => pub v: Vec<u8>,
        3 => pub ut: u64,
        4 => pub sr: u32,
    }
}

crate::message! {
    pub struct GetMessage {
        1 => pub k: String,
        2 => pub gst: u64,
    }
}

crate::message! {
    pub struct Mixed {
        1 => pub signed: i64,
        2 => pub flag: bool,
        3 => pub ratio: f64,
        4 => pub vv: Vec<u64>,
        5 => pub names: Vec<String>,
        6 => pub rec: Option<Record>,
        7 => pub recs: Vec<Record>,
        8 => pub small: Vec<u32>,
    }
}

crate::message! {
    pub struct Empty {}
}

crate::oneof! {
    pub enum ClientMessage {
        1 => Get(GetMessage),
        2 => Put(Record),
        3 => Ping(Empty),
    }
}

fn ascending_keys(bytes: &[u8]) -> Vec<u32> {
    let mut dec = Decoder::new(bytes);
    let mut tags = Vec::new();
    while !dec.is_empty() {
        let (tag, wire) = dec.read_key().unwrap();
        dec.skip(wire).unwrap();
        tags.push(tag);
    }
    tags
}

#[test]
fn record_round_trip_and_layout() {
    let rec = Record { k: "a".into(), v: vec![0x01], ut: 3, sr: 4 };
    let bytes = rec.encode();
    // key(1,LD) len 'a' | key(2,LD) len 0x01 | key(3,varint) 3 | key(4,varint) 4
    assert_eq!(bytes, vec![0x0a, 0x01, b'a', 0x12, 0x01, 0x01, 0x18, 0x03, 0x20, 0x04]);
    assert_eq!(Record::decode(&bytes).unwrap(), rec);
}

#[test]
fn default_fields_are_omitted() {
    let msg = GetMessage { k: "key".into(), gst: 0 };
    assert_eq!(ascending_keys(&msg.encode()), vec![1]);
    assert!(Mixed::default().encode().is_empty());
    assert_eq!(Mixed::decode(&[]).unwrap(), Mixed::default());
}

#[test]
fn oneof_round_trip_and_errors() {
    for msg in [
        ClientMessage::Get(GetMessage { k: "x".into(), gst: 9 }),
        ClientMessage::Put(Record { k: "y".into(), v: vec![1, 2], ut: 7, sr: 1 }),
        ClientMessage::Ping(Empty {}),
    ] {
        assert_eq!(ClientMessage::decode(&msg.encode()).unwrap(), msg);
    }
    assert_eq!(ClientMessage::decode(&[]), Err(DecodeError::MissingOneof { message: "ClientMessage" }));

    let mut twice = ClientMessage::Ping(Empty {}).encode();
    twice.extend(ClientMessage::Get(GetMessage::default()).encode());
    assert!(matches!(
        ClientMessage::decode(&twice),
        Err(DecodeError::DuplicateOneofMember { tag: 1, .. })
    ));
}

#[test]
fn unknown_tags_are_skipped() {
    let mut bytes = GetMessage { k: "k".into(), gst: 5 }.encode();
    // tag 9 varint, tag 10 length-delimited, tag 11 fixed64
    bytes.extend([0x48, 0x96, 0x01, 0x52, 0x02, 0xaa, 0xbb, 0x59, 1, 2, 3, 4, 5, 6, 7, 8]);
    assert_eq!(GetMessage::decode(&bytes).unwrap(), GetMessage { k: "k".into(), gst: 5 });
    let dynamic = dynamic::decode(GetMessage::schema(), &bytes).unwrap();
    assert_eq!(dynamic, GetMessage { k: "k".into(), gst: 5 }.to_dyn());
}

#[test]
fn truncated_and_mistyped_input() {
    let bytes = Record { k: "abc".into(), v: vec![1, 2, 3], ut: 300, sr: 1 }.encode();
    // field boundaries are valid prefixes; cuts inside a field are not
    let boundaries = [0usize, 5, 10, 13, 15];
    for cut in (1..bytes.len()).filter(|c| !boundaries.contains(c)) {
        assert!(Record::decode(&bytes[..cut]).is_err(), "prefix {cut} decoded");
    }
    assert_eq!(bytes.len(), 15);
    // tag 3 carried as length-delimited
    assert!(matches!(
        Record::decode(&[0x1a, 0x00]),
        Err(DecodeError::WireTypeMismatch { tag: 3, .. })
    ));
    assert!(matches!(Record::decode(&[0x0a, 0x01, 0xff]), Err(DecodeError::InvalidUtf8 { tag: 1 })));
    assert!(matches!(Record::decode(&[0x1f]), Err(DecodeError::InvalidWireType(7))));
    assert!(matches!(Record::decode(&[0x20, 0x80, 0x80, 0x80, 0x80, 0x10]), Err(DecodeError::IntegerOverflow { tag: 4 })));
}

#[test]
fn schemas_validate_and_describe() {
    for schema in [Record::schema(), Mixed::schema(), ClientMessage::schema(), Empty::schema()] {
        schema.validate_deep().unwrap();
    }
    let text = Record::schema().describe();
    assert!(text.contains("required string k = 1;"), "{text}");
    assert!(ClientMessage::schema().describe().contains("oneof message_type"));
    assert!(Mixed::schema().field(4).unwrap().is_packed());

    static BAD: MessageSchema = MessageSchema {
        name: "Bad",
        fields: &[
            FieldDescriptor { tag: 2, name: "a", kind: FieldKind::U64, label: Label::Singular, required: false },
            FieldDescriptor { tag: 1, name: "b", kind: FieldKind::U64, label: Label::Singular, required: false },
        ],
        oneofs: &[],
    };
    assert_eq!(BAD.validate(), Err(SchemaError::Unordered { message: "Bad", tag: 1 }));
}

#[test]
fn dynamic_encode_enforces_schema_rules() {
    let schema = ClientMessage::schema();
    let get = DynValue::Message(GetMessage { k: "a".into(), gst: 1 }.to_dyn());
    let ping = DynValue::Message(DynMessage::default());
    let both = DynMessage::default().with(1, get.clone()).with(3, ping);
    assert_eq!(
        dynamic::encode(schema, &both),
        Err(EncodeError::OneofConflict { message: "ClientMessage", group: "message_type" })
    );
    assert!(matches!(dynamic::encode(schema, &DynMessage::default()), Err(EncodeError::MissingOneof { .. })));

    let keyless = DynMessage::default().with(3, DynValue::U64(4));
    assert_eq!(
        dynamic::encode(Record::schema(), &keyless),
        Err(EncodeError::MissingRequired { message: "Record", field: "k" })
    );
    let wrong = DynMessage::default().with(1, DynValue::U64(4));
    assert!(matches!(dynamic::encode(Record::schema(), &wrong), Err(EncodeError::TypeMismatch { .. })));
    let unknown = DynMessage::default().with(1, DynValue::Str("k".into())).with(12, DynValue::U64(1));
    assert!(matches!(dynamic::encode(Record::schema(), &unknown), Err(EncodeError::UnknownField { tag: 12, .. })));

    let one = DynMessage::default().with(1, get);
    let bytes = dynamic::encode(schema, &one).unwrap();
    assert_eq!(ClientMessage::decode(&bytes).unwrap(), ClientMessage::Get(GetMessage { k: "a".into(), gst: 1 }));
}

#[test]
fn frames_split_cleanly() {
    let mut buf = Vec::new();
    write_frame(b"abc", &mut buf);
    write_frame(b"", &mut buf);
    assert_eq!(&buf[..4], &[0, 0, 0, 3]);
    assert_eq!(read_frames(&buf).unwrap(), vec![&b"abc"[..], &b""[..]]);
    assert_eq!(read_frames(&buf[..5]), Err(DecodeError::Truncated));
}

fn arb_record() -> impl Strategy<Value = Record> {
    ("[a-z]{1,8}", proptest::collection::vec(any::<u8>(), 0..16), any::<u64>(), any::<u32>())
        .prop_map(|(k, v, ut, sr)| Record { k, v, ut, sr })
}

fn arb_mixed() -> impl Strategy<Value = Mixed> {
    (
        any::<i64>(),
        any::<bool>(),
        any::<f64>().prop_filter("canonical NaN only", |f| !f.is_nan()),
        proptest::collection::vec(any::<u64>(), 0..6),
        proptest::collection::vec("[a-z]{0,4}", 0..3),
        proptest::option::of(arb_record()),
        proptest::collection::vec(arb_record(), 0..3),
        proptest::collection::vec(any::<u32>(), 0..4),
    )
        .prop_map(|(signed, flag, ratio, vv, names, rec, recs, small)| Mixed {
            signed,
            flag,
            ratio,
            vv,
            names,
            rec,
            recs,
            small,
        })
}

proptest! {
    #[test]
    fn typed_and_dynamic_paths_agree(msg in arb_mixed()) {
        let typed = msg.encode();
        let via_schema = dynamic::encode(Mixed::schema(), &msg.to_dyn()).unwrap();
        prop_assert_eq!(&typed, &via_schema);
        prop_assert_eq!(Mixed::decode(&typed).unwrap(), msg.clone());
        prop_assert_eq!(dynamic::decode(Mixed::schema(), &typed).unwrap(), msg.to_dyn());
        let tags = ascending_keys(&typed);
        prop_assert!(tags.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn equal_values_encode_equally(a in arb_record()) {
        let b = a.clone();
        prop_assert_eq!(a.encode(), b.encode());
        prop_assert_eq!(Record::decode(&a.encode()).unwrap().encode(), a.encode());
    }

    #[test]
    fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = Record::decode(&bytes);
        let _ = Mixed::decode(&bytes);
        let _ = ClientMessage::decode(&bytes);
        let _ = dynamic::decode(Mixed::schema(), &bytes);
        if let Ok(m) = Mixed::decode(&bytes) {
            // whatever decoded re-encodes canonically
            prop_assert_eq!(Mixed::decode(&m.encode()).unwrap(), m);
        }
    }
}
