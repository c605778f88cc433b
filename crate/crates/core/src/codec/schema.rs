use std::fmt;

use super::wire::WireType;

/// Scalar or nested kind carried by a field.
#[derive(Clone, Copy)]
pub enum FieldKind {
    U64,
    U32,
    /// Zigzag varint.
    I64,
    Bool,
    F64,
    String,
    Bytes,
    Message(fn() -> &'static MessageSchema),
}

impl FieldKind {
    pub fn wire_type(self) -> WireType {
        match self {
            FieldKind::U64 | FieldKind::U32 | FieldKind::I64 | FieldKind::Bool => WireType::Varint,
            FieldKind::F64 => WireType::Fixed64,
            FieldKind::String | FieldKind::Bytes | FieldKind::Message(_) => {
                WireType::LengthDelimited
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::U64 => "uint64",
            FieldKind::U32 => "uint32",
            FieldKind::I64 => "sint64",
            FieldKind::Bool => "bool",
            FieldKind::F64 => "double",
            FieldKind::String => "string",
            FieldKind::Bytes => "bytes",
            FieldKind::Message(schema) => schema().name,
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, FieldKind::U64 | FieldKind::U32 | FieldKind::I64 | FieldKind::Bool)
    }
}

impl fmt::Debug for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialEq for FieldKind {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (FieldKind::Message(a), FieldKind::Message(b)) => a().name == b().name,
            _ => std::mem::discriminant(self) == std::mem::discriminant(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Singular,
    /// Integer lists travel packed in one length-delimited field; other
    /// repeated kinds emit one key per element.
    Repeated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldDescriptor {
    pub tag: u32,
    pub name: &'static str,
    pub kind: FieldKind,
    pub label: Label,
    pub required: bool,
}

impl FieldDescriptor {
    /// Wire type as it appears on the wire, accounting for packing.
    pub fn wire_type(&self) -> WireType {
        match self.label {
            Label::Repeated if self.kind.is_integer() => WireType::LengthDelimited,
            _ => self.kind.wire_type(),
        }
    }

    pub fn is_packed(&self) -> bool {
        self.label == Label::Repeated && self.kind.is_integer()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneofGroup {
    pub name: &'static str,
    pub tags: &'static [u32],
}

#[derive(Debug)]
pub struct MessageSchema {
    pub name: &'static str,
    pub fields: &'static [FieldDescriptor],
    pub oneofs: &'static [OneofGroup],
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("{message}: tag {tag} is not a positive integer")]
    ZeroTag { message: &'static str, tag: u32 },
    #[error("{message}: tag {tag} used more than once")]
    DuplicateTag { message: &'static str, tag: u32 },
    #[error("{message}: fields must be declared in ascending tag order (tag {tag})")]
    Unordered { message: &'static str, tag: u32 },
    #[error("{message}: oneof {group} names unknown tag {tag}")]
    UnknownOneofTag { message: &'static str, group: &'static str, tag: u32 },
}

impl MessageSchema {
    pub fn field(&self, tag: u32) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.tag == tag)
    }

    pub fn field_by_name(&self, name: &str) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn oneof_for(&self, tag: u32) -> Option<&OneofGroup> {
        self.oneofs.iter().find(|g| g.tags.contains(&tag))
    }

    /// Checks the declaration rules: positive unique tags, ascending order,
    /// oneof groups referencing declared fields.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut last = 0u32;
        for field in self.fields {
            if field.tag == 0 {
                return Err(SchemaError::ZeroTag { message: self.name, tag: 0 });
            }
            if self.fields.iter().filter(|f| f.tag == field.tag).count() > 1 {
                return Err(SchemaError::DuplicateTag { message: self.name, tag: field.tag });
            }
            if field.tag < last {
                return Err(SchemaError::Unordered { message: self.name, tag: field.tag });
            }
            last = field.tag;
        }
        for group in self.oneofs {
            for &tag in group.tags {
                if self.field(tag).is_none() {
                    return Err(SchemaError::UnknownOneofTag {
                        message: self.name,
                        group: group.name,
                        tag,
                    });
                }
            }
        }
        Ok(())
    }

    /// Validates this schema and every schema reachable through nested fields.
    pub fn validate_deep(&self) -> Result<(), SchemaError> {
        let mut seen = Vec::new();
        self.validate_rec(&mut seen)
    }

    fn validate_rec(&self, seen: &mut Vec<&'static str>) -> Result<(), SchemaError> {
        if seen.contains(&self.name) {
            return Ok(());
        }
        seen.push(self.name);
        self.validate()?;
        for field in self.fields {
            if let FieldKind::Message(nested) = field.kind {
                nested().validate_rec(seen)?;
            }
        }
        Ok(())
    }

    /// Renders a `.proto`-like description, used for schema documentation.
    pub fn describe(&self) -> String {
        let mut out = format!("message {} {{\n", self.name);
        let in_group: Vec<u32> = self.oneofs.iter().flat_map(|g| g.tags.iter().copied()).collect();
        for field in self.fields.iter().filter(|f| !in_group.contains(&f.tag)) {
            out.push_str(&format!("  {}\n", render_field(field)));
        }
        for group in self.oneofs {
            out.push_str(&format!("  oneof {} {{\n", group.name));
            for &tag in group.tags {
                if let Some(field) = self.field(tag) {
                    out.push_str(&format!("    {}\n", render_field(field)));
                }
            }
            out.push_str("  }\n");
        }
        out.push('}');
        out
    }
}

fn render_field(field: &FieldDescriptor) -> String {
    let label = match field.label {
        Label::Repeated => "repeated ",
        Label::Singular if field.required => "required ",
        Label::Singular => "",
    };
    format!("{label}{} {} = {};", field.kind.name(), field.name, field.tag)
}
