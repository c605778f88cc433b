/// Declares a message struct with tagged fields.
///
/// ```
/// protokv::message! {
///     /// A stored version.
///     pub struct Sample {
///         1 => pub key: String [required],
///         2 => pub value: Vec<u8>,
///         3 => pub ut: u64,
///     }
/// }
/// use protokv::codec::Message;
/// let s = Sample { key: "a".into(), value: vec![1], ut: 3 };
/// assert_eq!(Sample::decode(&s.encode()).unwrap(), s);
/// ```
///
/// Tags must be declared in ascending order; [`MessageSchema::validate`]
/// checks this.
///
/// [`MessageSchema::validate`]: crate::codec::MessageSchema::validate
#[macro_export]
macro_rules! message {
    (
        $(#[$meta:meta])*
        $vis:vis struct $name:ident {
            $(
                $(#[$fmeta:meta])*
                $tag:literal => $fvis:vis $field:ident : $ty:ty $([$req:ident])?
            ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq)]
        $vis struct $name {
            $( $(#[$fmeta])* $fvis $field: $ty, )*
        }

        impl $crate::codec::Message for $name {
            fn schema() -> &'static $crate::codec::MessageSchema {
                static SCHEMA: $crate::codec::MessageSchema = $crate::codec::MessageSchema {
                    name: stringify!($name),
                    fields: &[
                        $(
                            $crate::codec::FieldDescriptor {
                                tag: $tag,
                                name: stringify!($field),
                                kind: <$ty as $crate::codec::FieldCodec>::KIND,
                                label: <$ty as $crate::codec::FieldCodec>::LABEL,
                                required: $crate::__codec_required!($($req)?),
                            },
                        )*
                    ],
                    oneofs: &[],
                };
                &SCHEMA
            }

            #[allow(unused_variables)]
            fn encode_to(&self, buf: &mut Vec<u8>) {
                $( $crate::codec::FieldCodec::encode_field(&self.$field, $tag, buf); )*
            }

            #[allow(unused_mut)]
            fn decode(bytes: &[u8]) -> Result<Self, $crate::codec::DecodeError> {
                let mut msg = Self::default();
                let mut dec = $crate::codec::Decoder::new(bytes);
                while !dec.is_empty() {
                    let (tag, wire) = dec.read_key()?;
                    match tag {
                        $( $tag => $crate::codec::FieldCodec::merge_field(&mut msg.$field, $tag, wire, &mut dec)?, )*
                        _ => dec.skip(wire)?,
                    }
                }
                Ok(msg)
            }

            #[allow(unused_mut)]
            fn to_dyn(&self) -> $crate::codec::DynMessage {
                let mut out = $crate::codec::DynMessage::default();
                $(
                    if let Some(v) = $crate::codec::FieldCodec::to_dyn(&self.$field) {
                        out.fields.insert($tag, v);
                    }
                )*
                out
            }
        }
    };
}

/// Declares an enum whose variants form a single oneof group; exactly one
/// member is encoded.
#[macro_export]
macro_rules! oneof {
    (
        $(#[$meta:meta])*
        $vis:vis enum $name:ident {
            $(
                $(#[$vmeta:meta])*
                $tag:literal => $variant:ident ( $ty:ty )
            ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis enum $name {
            $( $(#[$vmeta])* $variant($ty), )*
        }

        impl $crate::codec::Message for $name {
            fn schema() -> &'static $crate::codec::MessageSchema {
                static SCHEMA: $crate::codec::MessageSchema = $crate::codec::MessageSchema {
                    name: stringify!($name),
                    fields: &[
                        $(
                            $crate::codec::FieldDescriptor {
                                tag: $tag,
                                name: stringify!($variant),
                                kind: $crate::codec::FieldKind::Message(<$ty as $crate::codec::Message>::schema),
                                label: $crate::codec::Label::Singular,
                                required: false,
                            },
                        )*
                    ],
                    oneofs: &[$crate::codec::OneofGroup { name: "message_type", tags: &[$($tag),*] }],
                };
                &SCHEMA
            }

            fn encode_to(&self, buf: &mut Vec<u8>) {
                match self {
                    $( $name::$variant(inner) => $crate::codec::encode_nested($tag, inner, buf), )*
                }
            }

            fn variant_name(&self) -> Option<&'static str> {
                match self {
                    $( $name::$variant(_) => Some(stringify!($variant)), )*
                }
            }

            fn decode(bytes: &[u8]) -> Result<Self, $crate::codec::DecodeError> {
                let mut found: Option<Self> = None;
                let mut dec = $crate::codec::Decoder::new(bytes);
                while !dec.is_empty() {
                    let (tag, wire) = dec.read_key()?;
                    match tag {
                        $(
                            $tag => {
                                if found.is_some() {
                                    return Err($crate::codec::DecodeError::DuplicateOneofMember {
                                        message: stringify!($name),
                                        tag,
                                    });
                                }
                                $crate::codec::expect_wire($tag, wire, $crate::codec::WireType::LengthDelimited)?;
                                let inner = <$ty as $crate::codec::Message>::decode(dec.read_len_delimited()?)?;
                                found = Some($name::$variant(inner));
                            }
                        )*
                        _ => dec.skip(wire)?,
                    }
                }
                found.ok_or($crate::codec::DecodeError::MissingOneof { message: stringify!($name) })
            }

            fn to_dyn(&self) -> $crate::codec::DynMessage {
                let mut out = $crate::codec::DynMessage::default();
                match self {
                    $(
                        $name::$variant(inner) => {
                            out.fields.insert($tag, $crate::codec::DynValue::Message(
                                $crate::codec::Message::to_dyn(inner),
                            ));
                        }
                    )*
                }
                out
            }
        }
    };
}

#[doc(hidden)]
#[macro_export]
macro_rules! __codec_required {
    () => {
        false
    };
    (required) => {
        true
    };
}
