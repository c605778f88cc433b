//! Schema-driven encoding over untyped values.
//!
//! This path validates oneof exclusivity and required fields, which typed
//! values enforce through their Rust types.

use std::collections::BTreeMap;

use super::schema::{FieldDescriptor, FieldKind, Label, MessageSchema};
use super::wire::{encode_key, encode_len_delimited, encode_varint, zigzag_decode, zigzag_encode, Decoder, WireType};
use super::DecodeError;

#[derive(Debug, Clone, PartialEq)]
pub enum DynValue {
    U64(u64),
    U32(u32),
    I64(i64),
    Bool(bool),
    F64(f64),
    Str(String),
    Bytes(Vec<u8>),
    Message(DynMessage),
    List(Vec<DynValue>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynMessage {
    pub fields: BTreeMap<u32, DynValue>,
}

impl DynMessage {
    pub fn with(mut self, tag: u32, value: DynValue) -> Self {
        self.fields.insert(tag, value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("{message}: no field with tag {tag}")]
    UnknownField { message: &'static str, tag: u32 },
    #[error("{message}.{field}: value does not match declared type")]
    TypeMismatch { message: &'static str, field: &'static str },
    #[error("{message}: more than one member of oneof {group} set")]
    OneofConflict { message: &'static str, group: &'static str },
    #[error("{message}: no member of oneof {group} set")]
    MissingOneof { message: &'static str, group: &'static str },
    #[error("{message}.{field}: required field missing")]
    MissingRequired { message: &'static str, field: &'static str },
}

fn is_default_scalar(value: &DynValue) -> bool {
    match value {
        DynValue::U64(v) => *v == 0,
        DynValue::U32(v) => *v == 0,
        DynValue::I64(v) => *v == 0,
        DynValue::Bool(v) => !*v,
        DynValue::F64(v) => v.to_bits() == 0,
        DynValue::Str(s) => s.is_empty(),
        DynValue::Bytes(b) => b.is_empty(),
        DynValue::List(items) => items.is_empty(),
        DynValue::Message(_) => false,
    }
}

/// Encodes `msg` according to `schema`.
pub fn encode(schema: &'static MessageSchema, msg: &DynMessage) -> Result<Vec<u8>, EncodeError> {
    let mut buf = Vec::new();
    encode_into(schema, msg, &mut buf)?;
    Ok(buf)
}

fn encode_into(schema: &'static MessageSchema, msg: &DynMessage, buf: &mut Vec<u8>) -> Result<(), EncodeError> {
    for &tag in msg.fields.keys() {
        if schema.field(tag).is_none() {
            return Err(EncodeError::UnknownField { message: schema.name, tag });
        }
    }
    for group in schema.oneofs {
        let set = group.tags.iter().filter(|t| msg.fields.contains_key(t)).count();
        if set > 1 {
            return Err(EncodeError::OneofConflict { message: schema.name, group: group.name });
        }
        if set == 0 {
            return Err(EncodeError::MissingOneof { message: schema.name, group: group.name });
        }
    }
    for field in schema.fields.iter().filter(|f| f.required) {
        match msg.fields.get(&field.tag) {
            Some(v) if !is_default_scalar(v) => {}
            _ => return Err(EncodeError::MissingRequired { message: schema.name, field: field.name }),
        }
    }
    for (&tag, value) in &msg.fields {
        let field = schema.field(tag).expect("checked above");
        let in_oneof = schema.oneof_for(tag).is_some();
        if !in_oneof && is_default_scalar(value) {
            continue;
        }
        encode_field(schema, field, value, buf)?;
    }
    Ok(())
}

fn encode_field(
    schema: &'static MessageSchema,
    field: &FieldDescriptor,
    value: &DynValue,
    buf: &mut Vec<u8>,
) -> Result<(), EncodeError> {
    let mismatch = || EncodeError::TypeMismatch { message: schema.name, field: field.name };
    match field.label {
        Label::Singular => {
            encode_key(field.tag, field.kind.wire_type(), buf);
            encode_scalar(field.kind, value, buf).ok_or_else(mismatch)?;
        }
        Label::Repeated => {
            let DynValue::List(items) = value else { return Err(mismatch()) };
            if field.is_packed() {
                let mut body = Vec::new();
                for item in items {
                    encode_scalar(field.kind, item, &mut body).ok_or_else(mismatch)?;
                }
                encode_key(field.tag, WireType::LengthDelimited, buf);
                encode_len_delimited(&body, buf);
            } else {
                for item in items {
                    encode_key(field.tag, field.kind.wire_type(), buf);
                    encode_scalar(field.kind, item, buf).ok_or_else(mismatch)?;
                }
            }
        }
    }
    Ok(())
}

/// Writes the value without its key. `None` on a kind/value mismatch.
fn encode_scalar(kind: FieldKind, value: &DynValue, buf: &mut Vec<u8>) -> Option<()> {
    match (kind, value) {
        (FieldKind::U64, DynValue::U64(v)) => encode_varint(*v, buf),
        (FieldKind::U32, DynValue::U32(v)) => encode_varint(*v as u64, buf),
        (FieldKind::I64, DynValue::I64(v)) => encode_varint(zigzag_encode(*v), buf),
        (FieldKind::Bool, DynValue::Bool(v)) => encode_varint(*v as u64, buf),
        (FieldKind::F64, DynValue::F64(v)) => buf.extend_from_slice(&v.to_bits().to_le_bytes()),
        (FieldKind::String, DynValue::Str(s)) => encode_len_delimited(s.as_bytes(), buf),
        (FieldKind::Bytes, DynValue::Bytes(b)) => encode_len_delimited(b, buf),
        (FieldKind::Message(nested), DynValue::Message(m)) => {
            let mut inner = Vec::new();
            encode_into(nested(), m, &mut inner).ok()?;
            encode_len_delimited(&inner, buf);
        }
        _ => return None,
    }
    Some(())
}

/// Decodes `bytes` according to `schema`, skipping unknown tags.
pub fn decode(schema: &'static MessageSchema, bytes: &[u8]) -> Result<DynMessage, DecodeError> {
    let mut msg = DynMessage::default();
    let mut dec = Decoder::new(bytes);
    while !dec.is_empty() {
        let (tag, wire) = dec.read_key()?;
        let Some(field) = schema.field(tag) else {
            dec.skip(wire)?;
            continue;
        };
        let expected = field.wire_type();
        if wire != expected {
            return Err(DecodeError::WireTypeMismatch { tag, expected, found: wire });
        }
        if let Some(group) = schema.oneof_for(tag) {
            if group.tags.iter().any(|t| msg.fields.contains_key(t)) {
                return Err(DecodeError::DuplicateOneofMember { message: schema.name, tag });
            }
        }
        match field.label {
            Label::Singular => {
                let value = decode_scalar(field.kind, tag, &mut dec)?;
                msg.fields.insert(tag, value);
            }
            Label::Repeated => {
                let entry = msg.fields.entry(tag).or_insert_with(|| DynValue::List(Vec::new()));
                let DynValue::List(items) = entry else { unreachable!("repeated fields hold lists") };
                if field.is_packed() {
                    let mut inner = Decoder::new(dec.read_len_delimited()?);
                    while !inner.is_empty() {
                        items.push(decode_scalar(field.kind, tag, &mut inner)?);
                    }
                } else {
                    items.push(decode_scalar(field.kind, tag, &mut dec)?);
                }
            }
        }
    }
    for group in schema.oneofs {
        if !group.tags.iter().any(|t| msg.fields.contains_key(t)) {
            return Err(DecodeError::MissingOneof { message: schema.name });
        }
    }
    // Canonical form drops empty packed lists and default scalars.
    msg.fields.retain(|tag, v| schema.oneof_for(*tag).is_some() || !is_default_scalar(v));
    Ok(msg)
}

fn decode_scalar(kind: FieldKind, tag: u32, dec: &mut Decoder<'_>) -> Result<DynValue, DecodeError> {
    Ok(match kind {
        FieldKind::U64 => DynValue::U64(dec.read_varint()?),
        FieldKind::U32 => {
            let v = dec.read_varint()?;
            DynValue::U32(u32::try_from(v).map_err(|_| DecodeError::IntegerOverflow { tag })?)
        }
        FieldKind::I64 => DynValue::I64(zigzag_decode(dec.read_varint()?)),
        FieldKind::Bool => match dec.read_varint()? {
            0 => DynValue::Bool(false),
            1 => DynValue::Bool(true),
            _ => return Err(DecodeError::InvalidBool { tag }),
        },
        FieldKind::F64 => DynValue::F64(f64::from_bits(dec.read_fixed64()?)),
        FieldKind::String => {
            let bytes = dec.read_len_delimited()?;
            DynValue::Str(std::str::from_utf8(bytes).map_err(|_| DecodeError::InvalidUtf8 { tag })?.to_owned())
        }
        FieldKind::Bytes => DynValue::Bytes(dec.read_len_delimited()?.to_vec()),
        FieldKind::Message(nested) => DynValue::Message(decode(nested(), dec.read_len_delimited()?)?),
    })
}
