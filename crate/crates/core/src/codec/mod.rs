//! Deterministic binary encoding for records and protocol messages.
//!
//! Messages are declared in Rust with [`message!`](crate::message) and
//! [`oneof!`](crate::oneof). Each declaration produces a typed struct or enum,
//! a static [`MessageSchema`], and a [`Message`] implementation. Fields are
//! written in ascending tag order and default-valued scalars are omitted, so
//! equal values always encode to equal bytes.
//!
//! The [`dynamic`] module interprets the same schemas without generated code;
//! the two paths are required to agree byte for byte.

pub mod dynamic;
mod macros;
mod schema;
pub mod wire;

pub use dynamic::{DynMessage, DynValue, EncodeError};
pub use schema::{FieldDescriptor, FieldKind, Label, MessageSchema, OneofGroup, SchemaError};
pub use wire::{Decoder, WireType};

use wire::{encode_key, encode_len_delimited, encode_varint, zigzag_decode, zigzag_encode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("buffer truncated")]
    Truncated,
    #[error("malformed varint")]
    MalformedVarint,
    #[error("invalid wire type {0}")]
    InvalidWireType(u8),
    #[error("invalid field tag {0}")]
    InvalidTag(u64),
    #[error("field {tag}: expected wire type {expected:?}, found {found:?}")]
    WireTypeMismatch { tag: u32, expected: WireType, found: WireType },
    #[error("field {tag}: invalid utf-8")]
    InvalidUtf8 { tag: u32 },
    #[error("field {tag}: integer out of range")]
    IntegerOverflow { tag: u32 },
    #[error("field {tag}: boolean must be 0 or 1")]
    InvalidBool { tag: u32 },
    #[error("{message}: oneof member {tag} follows another member")]
    DuplicateOneofMember { message: &'static str, tag: u32 },
    #[error("{message}: no oneof member present")]
    MissingOneof { message: &'static str },
}

/// A value with a static schema and a canonical encoding.
pub trait Message: Sized {
    fn schema() -> &'static MessageSchema;

    fn encode_to(&self, buf: &mut Vec<u8>);

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError>;

    /// Converts into the schema-driven representation.
    fn to_dyn(&self) -> DynMessage;

    /// Member name for oneof types; `None` for plain messages.
    fn variant_name(&self) -> Option<&'static str> {
        None
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.encode_to(&mut buf);
        buf
    }
}

/// Per-type field encoding used by the declaration macros.
pub trait FieldCodec {
    const KIND: FieldKind;
    const LABEL: Label;

    /// Appends key and value, or nothing when the value is the default.
    fn encode_field(&self, tag: u32, buf: &mut Vec<u8>);

    fn merge_field(&mut self, tag: u32, wire: WireType, dec: &mut Decoder<'_>)
        -> Result<(), DecodeError>;

    /// `None` when the field would be omitted on the wire.
    fn to_dyn(&self) -> Option<DynValue>;
}

#[doc(hidden)]
pub fn expect_wire(tag: u32, found: WireType, expected: WireType) -> Result<(), DecodeError> {
    if found == expected {
        Ok(())
    } else {
        Err(DecodeError::WireTypeMismatch { tag, expected, found })
    }
}

#[doc(hidden)]
pub fn encode_nested<M: Message>(tag: u32, msg: &M, buf: &mut Vec<u8>) {
    let inner = msg.encode();
    encode_key(tag, WireType::LengthDelimited, buf);
    encode_len_delimited(&inner, buf);
}

fn narrow_u32(tag: u32, v: u64) -> Result<u32, DecodeError> {
    u32::try_from(v).map_err(|_| DecodeError::IntegerOverflow { tag })
}

macro_rules! varint_field {
    ($ty:ty, $kind:ident, $to:expr, $from:expr, $dynv:ident) => {
        impl FieldCodec for $ty {
            const KIND: FieldKind = FieldKind::$kind;
            const LABEL: Label = Label::Singular;

            fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
                if *self != <$ty>::default() {
                    encode_key(tag, WireType::Varint, buf);
                    #[allow(clippy::redundant_closure_call)]
                    encode_varint(($to)(*self), buf);
                }
            }

            fn merge_field(
                &mut self,
                tag: u32,
                wire: WireType,
                dec: &mut Decoder<'_>,
            ) -> Result<(), DecodeError> {
                expect_wire(tag, wire, WireType::Varint)?;
                let raw = dec.read_varint()?;
                #[allow(clippy::redundant_closure_call)]
                {
                    *self = ($from)(tag, raw)?;
                }
                Ok(())
            }

            fn to_dyn(&self) -> Option<DynValue> {
                (*self != <$ty>::default()).then(|| DynValue::$dynv(*self))
            }
        }
    };
}

varint_field!(u64, U64, |v: u64| v, |_tag, raw: u64| Ok::<u64, DecodeError>(raw), U64);
varint_field!(u32, U32, |v: u32| v as u64, narrow_u32, U32);
varint_field!(i64, I64, zigzag_encode, |_tag, raw: u64| Ok::<i64, DecodeError>(zigzag_decode(raw)), I64);
varint_field!(
    bool,
    Bool,
    |v: bool| v as u64,
    |tag, raw: u64| match raw {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(DecodeError::InvalidBool { tag }),
    },
    Bool
);

impl FieldCodec for f64 {
    const KIND: FieldKind = FieldKind::F64;
    const LABEL: Label = Label::Singular;

    fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
        if self.to_bits() != 0 {
            encode_key(tag, WireType::Fixed64, buf);
            buf.extend_from_slice(&self.to_bits().to_le_bytes());
        }
    }

    fn merge_field(&mut self, tag: u32, wire: WireType, dec: &mut Decoder<'_>) -> Result<(), DecodeError> {
        expect_wire(tag, wire, WireType::Fixed64)?;
        *self = f64::from_bits(dec.read_fixed64()?);
        Ok(())
    }

    fn to_dyn(&self) -> Option<DynValue> {
        (self.to_bits() != 0).then_some(DynValue::F64(*self))
    }
}

impl FieldCodec for String {
    const KIND: FieldKind = FieldKind::String;
    const LABEL: Label = Label::Singular;

    fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
        if !self.is_empty() {
            encode_key(tag, WireType::LengthDelimited, buf);
            encode_len_delimited(self.as_bytes(), buf);
        }
    }

    fn merge_field(&mut self, tag: u32, wire: WireType, dec: &mut Decoder<'_>) -> Result<(), DecodeError> {
        expect_wire(tag, wire, WireType::LengthDelimited)?;
        let bytes = dec.read_len_delimited()?;
        *self = std::str::from_utf8(bytes).map_err(|_| DecodeError::InvalidUtf8 { tag })?.to_owned();
        Ok(())
    }

    fn to_dyn(&self) -> Option<DynValue> {
        (!self.is_empty()).then(|| DynValue::Str(self.clone()))
    }
}

impl FieldCodec for Vec<u8> {
    const KIND: FieldKind = FieldKind::Bytes;
    const LABEL: Label = Label::Singular;

    fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
        if !self.is_empty() {
            encode_key(tag, WireType::LengthDelimited, buf);
            encode_len_delimited(self, buf);
        }
    }

    fn merge_field(&mut self, tag: u32, wire: WireType, dec: &mut Decoder<'_>) -> Result<(), DecodeError> {
        expect_wire(tag, wire, WireType::LengthDelimited)?;
        *self = dec.read_len_delimited()?.to_vec();
        Ok(())
    }

    fn to_dyn(&self) -> Option<DynValue> {
        (!self.is_empty()).then(|| DynValue::Bytes(self.clone()))
    }
}

macro_rules! packed_field {
    ($elem:ty, $kind:ident, $dynv:ident, $narrow:expr) => {
        impl FieldCodec for Vec<$elem> {
            const KIND: FieldKind = FieldKind::$kind;
            const LABEL: Label = Label::Repeated;

            fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
                if self.is_empty() {
                    return;
                }
                let mut body = Vec::with_capacity(self.len() * 2);
                for v in self {
                    encode_varint(*v as u64, &mut body);
                }
                encode_key(tag, WireType::LengthDelimited, buf);
                encode_len_delimited(&body, buf);
            }

            fn merge_field(
                &mut self,
                tag: u32,
                wire: WireType,
                dec: &mut Decoder<'_>,
            ) -> Result<(), DecodeError> {
                expect_wire(tag, wire, WireType::LengthDelimited)?;
                let mut inner = Decoder::new(dec.read_len_delimited()?);
                while !inner.is_empty() {
                    #[allow(clippy::redundant_closure_call)]
                    self.push(($narrow)(tag, inner.read_varint()?)?);
                }
                Ok(())
            }

            fn to_dyn(&self) -> Option<DynValue> {
                (!self.is_empty()).then(|| DynValue::List(self.iter().map(|v| DynValue::$dynv(*v)).collect()))
            }
        }
    };
}

packed_field!(u64, U64, U64, |_tag, v: u64| Ok::<u64, DecodeError>(v));
packed_field!(u32, U32, U32, narrow_u32);

impl FieldCodec for Vec<String> {
    const KIND: FieldKind = FieldKind::String;
    const LABEL: Label = Label::Repeated;

    fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
        for s in self {
            encode_key(tag, WireType::LengthDelimited, buf);
            encode_len_delimited(s.as_bytes(), buf);
        }
    }

    fn merge_field(&mut self, tag: u32, wire: WireType, dec: &mut Decoder<'_>) -> Result<(), DecodeError> {
        let mut s = String::new();
        s.merge_field(tag, wire, dec)?;
        self.push(s);
        Ok(())
    }

    fn to_dyn(&self) -> Option<DynValue> {
        (!self.is_empty()).then(|| DynValue::List(self.iter().cloned().map(DynValue::Str).collect()))
    }
}

impl<M: Message> FieldCodec for Option<M> {
    const KIND: FieldKind = FieldKind::Message(M::schema);
    const LABEL: Label = Label::Singular;

    fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
        if let Some(msg) = self {
            encode_nested(tag, msg, buf);
        }
    }

    fn merge_field(&mut self, tag: u32, wire: WireType, dec: &mut Decoder<'_>) -> Result<(), DecodeError> {
        expect_wire(tag, wire, WireType::LengthDelimited)?;
        *self = Some(M::decode(dec.read_len_delimited()?)?);
        Ok(())
    }

    fn to_dyn(&self) -> Option<DynValue> {
        self.as_ref().map(|m| DynValue::Message(m.to_dyn()))
    }
}

impl<M: Message> FieldCodec for Vec<M> {
    const KIND: FieldKind = FieldKind::Message(M::schema);
    const LABEL: Label = Label::Repeated;

    fn encode_field(&self, tag: u32, buf: &mut Vec<u8>) {
        for msg in self {
            encode_nested(tag, msg, buf);
        }
    }

    fn merge_field(&mut self, tag: u32, wire: WireType, dec: &mut Decoder<'_>) -> Result<(), DecodeError> {
        expect_wire(tag, wire, WireType::LengthDelimited)?;
        self.push(M::decode(dec.read_len_delimited()?)?);
        Ok(())
    }

    fn to_dyn(&self) -> Option<DynValue> {
        (!self.is_empty()).then(|| DynValue::List(self.iter().map(|m| DynValue::Message(m.to_dyn())).collect()))
    }
}

/// Writes `payload` with a 4-byte big-endian length prefix.
pub fn write_frame(payload: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
}

/// Splits a buffer of length-prefixed frames. A trailing partial frame is an error.
pub fn read_frames(mut buf: &[u8]) -> Result<Vec<&[u8]>, DecodeError> {
    let mut frames = Vec::new();
    while !buf.is_empty() {
        if buf.len() < 4 {
            return Err(DecodeError::Truncated);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        let rest = &buf[4..];
        if rest.len() < len {
            return Err(DecodeError::Truncated);
        }
        frames.push(&rest[..len]);
        buf = &rest[len..];
    }
    Ok(frames)
}

#[cfg(test)]
mod tests;
