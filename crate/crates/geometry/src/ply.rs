//! Minimal PLY reader/writer (ASCII and binary little-endian).
//!
//! Values of every scalar type are held as `f64`, which represents all PLY
//! integer and float types exactly.

use std::io::Write;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{GeometryError, Location, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => LittleEndian::read_i16(b) as f64,
            ScalarType::U16 => LittleEndian::read_u16(b) as f64,
            ScalarType::I32 => LittleEndian::read_i32(b) as f64,
            ScalarType::U32 => LittleEndian::read_u32(b) as f64,
            ScalarType::F32 => LittleEndian::read_f32(b) as f64,
            ScalarType::F64 => LittleEndian::read_f64(b),
        }
    }

    fn encode<W: Write>(self, w: &mut W, v: f64) -> std::io::Result<()> {
        match self {
            ScalarType::I8 => w.write_i8(v as i8),
            ScalarType::U8 => w.write_u8(v as u8),
            ScalarType::I16 => w.write_i16::<LittleEndian>(v as i16),
            ScalarType::U16 => w.write_u16::<LittleEndian>(v as u16),
            ScalarType::I32 => w.write_i32::<LittleEndian>(v as i32),
            ScalarType::U32 => w.write_u32::<LittleEndian>(v as u32),
            ScalarType::F32 => w.write_f32::<LittleEndian>(v as f32),
            ScalarType::F64 => w.write_f64::<LittleEndian>(v),
        }
    }

    fn format(self, v: f64) -> String {
        match self {
            ScalarType::F32 => format!("{}", v as f32),
            ScalarType::F64 => format!("{v}"),
            _ => format!("{}", v as i64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyDef {
    pub name: String,
    pub kind: PropertyKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Scalar(Vec<f64>),
    List(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub count: usize,
    pub properties: Vec<PropertyDef>,
    pub columns: Vec<Column>,
}

impl Element {
    pub fn new(name: &str, count: usize) -> Self {
        Element {
            name: name.to_string(),
            count,
            properties: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn with_scalar(mut self, name: &str, ty: ScalarType, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.count);
        self.properties.push(PropertyDef {
            name: name.to_string(),
            kind: PropertyKind::Scalar(ty),
        });
        self.columns.push(Column::Scalar(values));
        self
    }

    pub fn with_list(mut self, name: &str, count: ScalarType, item: ScalarType, values: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(values.len(), self.count);
        self.properties.push(PropertyDef {
            name: name.to_string(),
            kind: PropertyKind::List { count, item },
        });
        self.columns.push(Column::List(values));
        self
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<&[f64]> {
        match &self.columns[self.position(name)?] {
            Column::Scalar(v) => Some(v),
            Column::List(_) => None,
        }
    }

    pub fn list(&self, name: &str) -> Option<&[Vec<f64>]> {
        match &self.columns[self.position(name)?] {
            Column::List(v) => Some(v),
            Column::Scalar(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyDocument {
    pub encoding: PlyEncoding,
    pub comments: Vec<String>,
    pub elements: Vec<Element>,
}

impl PlyDocument {
    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }
}

struct Header {
    encoding: PlyEncoding,
    comments: Vec<String>,
    elements: Vec<Element>,
    body_offset: usize,
    header_lines: usize,
}

fn parse_header(bytes: &[u8], src: &str) -> Result<Header> {
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut encoding = None;
    let mut comments = Vec::new();
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(GeometryError::parse(src, Location::Line(line_no + 1), "unterminated header"));
        };
        line_no += 1;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| GeometryError::parse(src, Location::Line(line_no), "header is not valid text"))?
            .trim_end_matches('\r')
            .trim();
        offset += nl + 1;
        let err = |msg: String| GeometryError::parse(src, Location::Line(line_no), msg);
        let mut tok = line.split_whitespace();
        let Some(keyword) = tok.next() else { continue };
        if line_no == 1 {
            if keyword != "ply" {
                return Err(err("missing 'ply' magic".into()));
            }
            continue;
        }
        match keyword {
            "format" => {
                encoding = Some(match tok.next() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    Some(other) => {
                        return Err(GeometryError::Unsupported(format!("{src}: PLY encoding '{other}'")))
                    }
                    None => return Err(err("format line without encoding".into())),
                });
            }
            "comment" | "obj_info" => {
                comments.push(line[keyword.len()..].trim().to_string());
            }
            "element" => {
                let name = tok.next().ok_or_else(|| err("element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| err("element count is not a non-negative integer".into()))?;
                elements.push(Element::new(name, count));
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element".into()))?;
                let ty = tok.next().ok_or_else(|| err("property without type".into()))?;
                let unsupported =
                    |t: &str| GeometryError::Unsupported(format!("{src}: PLY property type '{t}' (line {line_no})"));
                let kind = if ty == "list" {
                    let ct = tok.next().ok_or_else(|| err("list without count type".into()))?;
                    let it = tok.next().ok_or_else(|| err("list without item type".into()))?;
                    let count = ScalarType::parse(ct).ok_or_else(|| unsupported(ct))?;
                    let item = ScalarType::parse(it).ok_or_else(|| unsupported(it))?;
                    if !count.is_integer() {
                        return Err(err(format!("list count type '{ct}' is not an integer type")));
                    }
                    PropertyKind::List { count, item }
                } else {
                    PropertyKind::Scalar(ScalarType::parse(ty).ok_or_else(|| unsupported(ty))?)
                };
                let name = tok.next().ok_or_else(|| err("property without name".into()))?;
                element.properties.push(PropertyDef {
                    name: name.to_string(),
                    kind,
                });
            }
            "end_header" => break,
            other => return Err(err(format!("unknown header keyword '{other}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| GeometryError::parse(src, Location::Line(line_no), "missing format line"))?;
    Ok(Header {
        encoding,
        comments,
        elements,
        body_offset: offset,
        header_lines: line_no,
    })
}

fn empty_columns(el: &Element) -> Vec<Column> {
    el.properties
        .iter()
        .map(|p| match p.kind {
            PropertyKind::Scalar(_) => Column::Scalar(Vec::with_capacity(el.count)),
            PropertyKind::List { .. } => Column::List(Vec::with_capacity(el.count)),
        })
        .collect()
}

/// Parses a PLY file held in memory. `src` names the input in error messages.
pub fn read_ply(bytes: &[u8], src: &str) -> Result<PlyDocument> {
    let header = parse_header(bytes, src)?;
    let body = &bytes[header.body_offset..];
    let mut elements = header.elements;
    match header.encoding {
        PlyEncoding::Ascii => read_ascii_body(body, src, header.header_lines, &mut elements)?,
        PlyEncoding::BinaryLittleEndian => {
            read_binary_body(body, src, header.body_offset as u64, &mut elements)?
        }
    }
    Ok(PlyDocument {
        encoding: header.encoding,
        comments: header.comments,
        elements,
    })
}

fn read_ascii_body(body: &[u8], src: &str, header_lines: usize, elements: &mut [Element]) -> Result<()> {
    let text = std::str::from_utf8(body)
        .map_err(|_| GeometryError::parse(src, Location::Line(header_lines + 1), "ASCII body is not valid text"))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (header_lines + 1 + i, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    for el in elements.iter_mut() {
        let mut columns = empty_columns(el);
        for row in 0..el.count {
            let Some((line_no, line)) = lines.next() else {
                return Err(GeometryError::parse(
                    src,
                    Location::Line(header_lines + 1),
                    format!("file ends before {} row {row}", el.name),
                ));
            };
            let err = |msg: String| GeometryError::parse(src, Location::Line(line_no), msg);
            let mut tok = line.split_whitespace();
            let mut next = |what: &str| -> Result<f64> {
                tok.next()
                    .ok_or_else(|| err(format!("missing value for {what}")))?
                    .parse::<f64>()
                    .map_err(|_| err(format!("malformed number for {what}")))
            };
            for (prop, col) in el.properties.iter().zip(columns.iter_mut()) {
                match (prop.kind, col) {
                    (PropertyKind::Scalar(_), Column::Scalar(v)) => v.push(next(&prop.name)?),
                    (PropertyKind::List { .. }, Column::List(v)) => {
                        let n = next(&prop.name)?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(err(format!("invalid list length {n} for {}", prop.name)));
                        }
                        let items = (0..n as usize).map(|_| next(&prop.name)).collect::<Result<Vec<_>>>()?;
                        v.push(items);
                    }
                    _ => unreachable!(),
                }
            }
        }
        el.columns = columns;
    }
    Ok(())
}

fn read_binary_body(body: &[u8], src: &str, base: u64, elements: &mut [Element]) -> Result<()> {
    let mut pos = 0usize;
    let mut take = |ty: ScalarType, what: &str| -> Result<f64> {
        let n = ty.size();
        if pos + n > body.len() {
            return Err(GeometryError::parse(
                src,
                Location::Byte(base + pos as u64),
                format!("unexpected end of data reading {what}"),
            ));
        }
        let v = ty.decode(&body[pos..pos + n]);
        pos += n;
        Ok(v)
    };
    for el in elements.iter_mut() {
        let mut columns = empty_columns(el);
        for _ in 0..el.count {
            for (prop, col) in el.properties.iter().zip(columns.iter_mut()) {
                match (prop.kind, col) {
                    (PropertyKind::Scalar(ty), Column::Scalar(v)) => v.push(take(ty, &prop.name)?),
                    (PropertyKind::List { count, item }, Column::List(v)) => {
                        let n = take(count, &prop.name)?;
                        if n < 0.0 {
                            return Err(GeometryError::parse(
                                src,
                                Location::Byte(base),
                                format!("negative list length for {}", prop.name),
                            ));
                        }
                        let items = (0..n as usize).map(|_| take(item, &prop.name)).collect::<Result<Vec<_>>>()?;
                        v.push(items);
                    }
                    _ => unreachable!(),
                }
            }
        }
        el.columns = columns;
    }
    Ok(())
}

pub fn write_ply<W: Write>(doc: &PlyDocument, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    match doc.encoding {
        PlyEncoding::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyEncoding::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    for c in &doc.comments {
        writeln!(w, "comment {c}")?;
    }
    for el in &doc.elements {
        writeln!(w, "element {} {}", el.name, el.count)?;
        for p in &el.properties {
            match p.kind {
                PropertyKind::Scalar(t) => writeln!(w, "property {} {}", t.name(), p.name)?,
                PropertyKind::List { count, item } => {
                    writeln!(w, "property list {} {} {}", count.name(), item.name(), p.name)?
                }
            }
        }
    }
    writeln!(w, "end_header")?;
    for el in &doc.elements {
        for row in 0..el.count {
            let mut fields: Vec<String> = Vec::new();
            for (p, col) in el.properties.iter().zip(&el.columns) {
                match (p.kind, col) {
                    (PropertyKind::Scalar(t), Column::Scalar(v)) => match doc.encoding {
                        PlyEncoding::Ascii => fields.push(t.format(v[row])),
                        PlyEncoding::BinaryLittleEndian => t.encode(w, v[row])?,
                    },
                    (PropertyKind::List { count, item }, Column::List(v)) => match doc.encoding {
                        PlyEncoding::Ascii => {
                            fields.push(v[row].len().to_string());
                            fields.extend(v[row].iter().map(|&x| item.format(x)));
                        }
                        PlyEncoding::BinaryLittleEndian => {
                            count.encode(w, v[row].len() as f64)?;
                            for &x in &v[row] {
                                item.encode(w, x)?;
                            }
                        }
                    },
                    _ => {
                        return Err(std::io::Error::new(
                            std::io::ErrorKind::InvalidInput,
                            "property kind does not match column",
                        ))
                    }
                }
            }
            if doc.encoding == PlyEncoding::Ascii {
                writeln!(w, "{}", fields.join(" "))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRI: &str = "ply\nformat ascii 1.0\ncomment tiny\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";

    #[test]
    fn ascii_parse() {
        let doc = read_ply(TRI.as_bytes(), "tri").unwrap();
        let v = doc.element("vertex").unwrap();
        assert_eq!(v.scalar("x").unwrap(), &[0.0, 1.0, 0.0]);
        let f = doc.element("face").unwrap();
        assert_eq!(f.list("vertex_indices").unwrap(), &[vec![0.0, 1.0, 2.0]]);
        assert_eq!(doc.comments, vec!["tiny".to_string()]);
    }

    #[test]
    fn binary_rewrite_is_identical() {
        let mut doc = read_ply(TRI.as_bytes(), "tri").unwrap();
        doc.encoding = PlyEncoding::BinaryLittleEndian;
        let mut buf = Vec::new();
        write_ply(&doc, &mut buf).unwrap();
        let back = read_ply(&buf, "bin").unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn big_endian_unsupported() {
        let text = TRI.replace("ascii", "binary_big_endian");
        assert!(matches!(read_ply(text.as_bytes(), "be"), Err(GeometryError::Unsupported(_))));
    }

    #[test]
    fn unknown_property_type_unsupported() {
        let text = TRI.replace("property float z", "property int64 z");
        let err = read_ply(text.as_bytes(), "t").unwrap_err();
        assert!(matches!(err, GeometryError::Unsupported(ref m) if m.contains("int64")));
    }

    #[test]
    fn malformed_value_reports_line() {
        let text = TRI.replace("1 0 0\n", "1 zero 0\n");
        match read_ply(text.as_bytes(), "t").unwrap_err() {
            GeometryError::Parse { location, .. } => assert_eq!(location, Location::Line(12)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let mut doc = read_ply(TRI.as_bytes(), "tri").unwrap();
        doc.encoding = PlyEncoding::BinaryLittleEndian;
        let mut buf = Vec::new();
        write_ply(&doc, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_ply(&buf, "bin"),
            Err(GeometryError::Parse { location: Location::Byte(_), .. })
        ));
    }
}
